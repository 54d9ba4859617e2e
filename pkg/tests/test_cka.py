import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import tiny
from oracles import cka_formula, cka_hsic
from revcol.cka import DegenerateFeatures, cka_by_column, compute_cka, write_cka_csv
from revcol.data import synth_dataset


def feats(seed, n=20, d=6):
    return np.random.default_rng(seed).standard_normal((n, d))


class TestInvariances:
    def test_self_similarity_is_one(self):
        x = feats(0)
        assert abs(compute_cka(x, x) - 1.0) <= 1e-12

    @given(st.integers(0, 10**6))
    @settings(max_examples=40, deadline=None)
    def test_orthogonal_invariance(self, seed):
        x, y = feats(seed), feats(seed + 1, d=4)
        q, _ = np.linalg.qr(np.random.default_rng(seed + 2).standard_normal((6, 6)))
        assert abs(compute_cka(x @ q, y) - compute_cka(x, y)) <= 1e-12

    @given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
    @settings(max_examples=40, deadline=None)
    def test_isotropic_scaling_invariance(self, seed, s):
        x, y = feats(seed), feats(seed + 1)
        assert abs(compute_cka(s * x, y) - compute_cka(x, y)) <= 1e-12

    def test_translation_invariance(self):
        x, y = feats(3), feats(4)
        assert abs(compute_cka(x + 5.0, y - 2.0) - compute_cka(x, y)) <= 1e-12

    def test_range_and_symmetry(self):
        x, y = feats(5), feats(6, d=3)
        v = compute_cka(x, y)
        assert 0.0 <= v <= 1.0
        assert abs(v - compute_cka(y, x)) <= 1e-14


class TestOracles:
    def test_two_sample_hand_case(self):
        # centred x = (-1, 1), y = (-1.5, 1.5): (Y^T X)^2 = 9, X^T X = 2, Y^T Y = 4.5, so 9 / 9
        assert compute_cka(np.array([[1.0], [3.0]]), np.array([[2.0], [5.0]])) == 1.0

    def test_hand_three_samples(self):
        # centred x = (-1, 0, 1), y = (0, -1, 1): Y^T X = 1, X^T X = Y^T Y = 2
        assert compute_cka(np.array([[0.0], [1.0], [2.0]]), np.array([[1.0], [0.0], [2.0]])) == 0.25

    @pytest.mark.parametrize("n,dx,dy", [(30, 4, 3), (8, 50, 20), (10, 10, 1)])
    def test_matches_hsic_form(self, n, dx, dy):
        r = np.random.default_rng(n + dx)
        x, y = r.standard_normal((n, dx)), r.standard_normal((n, dy))
        assert abs(compute_cka(x, y) - cka_hsic(x, y)) <= 1e-12
        assert abs(compute_cka(x, y) - cka_formula(x, y)) <= 1e-12

    def test_flattens_maps(self):
        r = np.random.default_rng(0)
        x, y = r.standard_normal((6, 2, 3, 3)), r.standard_normal((6, 4))
        assert compute_cka(x, y) == compute_cka(x.reshape(6, -1), y)


class TestErrors:
    def test_constant_features(self):
        with pytest.raises(DegenerateFeatures):
            compute_cka(np.ones((5, 3)), feats(0, n=5))

    def test_sample_mismatch(self):
        with pytest.raises(ValueError):
            compute_cka(feats(0, n=4), feats(0, n=5))
        with pytest.raises(ValueError):
            compute_cka(feats(0, n=1), feats(0, n=1))


class TestByColumn:
    def test_grid_and_csv(self, tmp_path):
        ds = synth_dataset("striped_textures", 4, 24, 32, seed=0)
        res = cka_by_column(tiny(), ds, samples=20, batch_size=8)
        assert res.image.shape == res.label.shape == (4, 4) and res.samples == 20
        assert np.all((res.image >= 0) & (res.image <= 1 + 1e-12))
        text = write_cka_csv(res, tmp_path / "c.csv")
        lines = text.splitlines()
        assert lines[0] == "column,level,cka_image,cka_label"
        assert len(lines) == 17 and lines[1].startswith("1,1,")
        assert (tmp_path / "c.csv").read_text() == text
