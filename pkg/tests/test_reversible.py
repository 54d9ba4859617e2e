import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revcol import ops
from revcol.model import ConvNeXtBlock
from revcol.optim import AdamW
from revcol.reversible import (
    ColumnState, GammaScale, ReconstructionError, forward_columns, invert_sequence, reconstruct_column,
    reversible_backward, reversible_forward_step, reversible_inverse_step, revnet_step, run_sequence,
    simplified_column_step,
)
from revcol.tensor import METER, Grads, Parameter, Rng, ShapeError, Tape, Tensor, no_tape


class DenseBank:
    """``F = gelu(low W + high V + b)`` per (column, level); every level is (B, C)."""

    def __init__(self, columns, order=4, channels=5, seed=0, zero=False, gamma_range=(0.5, 1.5)):
        r = np.random.default_rng(seed)
        self.order = order
        self.zero = zero
        self.params = {}
        self.gammas = {}
        for c in range(1, columns + 1):
            for l in range(1, order + 1):
                self.params[c, l] = [Parameter(r.standard_normal((channels, channels)) * 0.4),
                                     Parameter(r.standard_normal((channels, channels)) * 0.4),
                                     Parameter(r.standard_normal(channels) * 0.1)]
                if c > 1:
                    g = GammaScale(channels)
                    g.param.assign(r.uniform(*gamma_range, channels) * r.choice([-1, 1], channels))
                    self.gammas[c, l] = g

    def f(self, column, level, low, high):
        if self.zero:
            return ops.scale(low, 0.0)
        w, v, b = self.params[column, level]
        y = ops.linear(low, w, b)
        if high is not None:
            y = y + ops.linear(high, v)
        return ops.gelu(y)

    def gamma(self, column, level):
        return self.gammas.get((column, level))

    def parameters(self):
        ps = [p for v in self.params.values() for p in v]
        return ps + [g.param for g in self.gammas.values()]


class ConvBank:
    """ConvNeXt-block F on (B, C, H, W) levels; ``high`` is added before the block."""

    order = 4

    def __init__(self, columns, channels=4, seed=0):
        rng = Rng(seed)
        r = np.random.default_rng(seed)
        self.blocks = {}
        self.gammas = {}
        for c in range(1, columns + 1):
            for l in range(1, 5):
                blk = ConvNeXtBlock(channels, 3, rng)
                blk.layer_scale.assign(r.uniform(0.5, 1.0, channels))
                self.blocks[c, l] = blk
                if c > 1:
                    g = GammaScale(channels)
                    g.param.assign(r.uniform(0.5, 1.5, channels))
                    self.gammas[c, l] = g

    def f(self, column, level, low, high):
        x = low if high is None else low + high
        return self.blocks[column, level](x)

    def gamma(self, column, level):
        return self.gammas.get((column, level))


def randcol(rng, shape=(3, 5), m=4):
    return ColumnState([Tensor(rng.standard_normal(shape)) for _ in range(m)])


def unit_gamma(channels=1, value=1.0):
    g = GammaScale(channels)
    g.param.assign(np.full(channels, value))
    return g


class TestGammaScale:
    def test_init_ones(self):
        np.testing.assert_array_equal(GammaScale(3).values, np.ones(3))

    def test_clamp_keeps_sign(self):
        g = GammaScale(4)
        g.param.assign(np.array([1e-5, -1e-5, 0.0, -2.0]))
        g.clamp()
        np.testing.assert_array_equal(g.values, [1e-3, -1e-3, 1e-3, -2.0])

    def test_check_below_floor(self):
        g = GammaScale(2)
        g.param.assign(np.array([1.0, 1e-4]))
        with pytest.raises(ReconstructionError):
            g.check()

    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=6),
           st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_floor_survives_updates(self, start, grads):
        n = min(len(start), len(grads))
        g = GammaScale(n)
        g.param.assign(np.array(start[:n]))
        g.clamp()
        opt = AdamW([g.param], weight_decay=0.0)
        gr = Grads()
        gr.accumulate(g.param, np.array(grads[:n]))
        for _ in range(5):
            opt.step(gr, 10.0)
            g.clamp()
            assert np.all(np.abs(g.values) >= 1e-3)


class TestRevnetStep:
    def test_zero_f_unit_gamma(self, rng):
        x1, x2 = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
        zero = lambda x: ops.scale(x, 0.0)
        fwd = revnet_step(x1, x2, zero, unit_gamma(4))
        np.testing.assert_array_equal(fwd.data, x2.data)
        np.testing.assert_array_equal(revnet_step(x1, fwd, zero, unit_gamma(4), "inverse").data, x2.data)

    def test_scalar_hand_example(self):
        # F(x_{t-1}) = 3 and x_{t-2} = 2 with gamma 0.5: 3 + 0.5 * 2 = 4
        three = lambda x: ops.add(ops.scale(x, 0.0), Tensor(np.array([3.0])))
        x1, x2 = Tensor(np.array([7.0])), Tensor(np.array([2.0]))
        g = unit_gamma(1, 0.5)
        out = revnet_step(x1, x2, three, g)
        assert out.data[0] == 4.0
        assert revnet_step(x1, out, three, g, "inverse").data[0] == 2.0

    def test_conv_round_trip(self, rng):
        blk = ConvNeXtBlock(4, 3, Rng(3), layer_scale_init=0.7)
        g = GammaScale(4)
        g.param.assign(rng.uniform(0.5, 1.5, 4))
        x1, x2 = Tensor(rng.standard_normal((2, 4, 6, 6))), Tensor(rng.standard_normal((2, 4, 6, 6)))
        out = revnet_step(x1, x2, blk, g)
        back = revnet_step(x1, out, blk, g, "inverse")
        assert np.max(np.abs(back.data - x2.data)) <= 1e-11

    def test_equals_general_step_at_m2(self, rng):
        blk = ConvNeXtBlock(3, 3, Rng(1), layer_scale_init=0.5)
        g = GammaScale(3)
        g.param.assign(np.array([0.7, -1.2, 0.3]))
        x1, x2 = Tensor(rng.standard_normal((1, 3, 4, 4))), Tensor(rng.standard_normal((1, 3, 4, 4)))
        np.testing.assert_array_equal(revnet_step(x1, x2, blk, g).data,
                                      reversible_forward_step([x1], x2, blk, g).data)

    def test_errors(self, rng):
        ident = lambda x: x
        with pytest.raises(ShapeError):
            revnet_step(Tensor(np.zeros(3)), Tensor(np.zeros(4)), ident, unit_gamma())
        g = unit_gamma()
        g.param.assign(np.array([1e-6]))
        with pytest.raises(ReconstructionError):
            revnet_step(Tensor(np.zeros(1)), Tensor(np.zeros(1)), ident, g)
        with pytest.raises(ValueError):
            revnet_step(Tensor(np.zeros(1)), Tensor(np.zeros(1)), ident, unit_gamma(), "sideways")


def _full_reference(initial, weights, gammas):
    """Materialize every map with plain numpy: x_t = tanh(sum_k x_{t-k} W_{t,k}) + g_t x_{t-m}."""
    m = len(initial)
    xs = [a.copy() for a in initial]
    for w_t, g in zip(weights, gammas):
        t = len(xs)
        acc = np.zeros_like(xs[0])
        for k in range(1, m):
            acc = acc + xs[t - k] @ w_t[k - 1].T
        xs.append(np.tanh(acc) + g * xs[t - m])
    return xs


class TestGeneralRecursion:
    def test_sum_of_three_plus_one(self):
        ones = [Tensor(np.ones((2, 3))) for _ in range(3)]
        total = lambda a, b, c: a + b + c
        out = reversible_forward_step(ones, Tensor(np.ones((2, 3))), total, unit_gamma(3))
        np.testing.assert_array_equal(out.data, np.full((2, 3), 4.0))

    def test_missing_input(self):
        with pytest.raises(ValueError):
            reversible_forward_step([Tensor(np.ones(2)), None], Tensor(np.ones(2)), lambda a, b: a, unit_gamma(2))

    def test_inverse_identity_case(self, rng):
        x = Tensor(rng.standard_normal(5))
        back = reversible_inverse_step(x, [x], lambda a: ops.scale(a, 0.0), unit_gamma(5))
        np.testing.assert_array_equal(back.data, x.data)

    @pytest.mark.parametrize("m", [2, 3, 4, 6])
    def test_matches_full_materialization(self, rng, m):
        c = 4
        initial = [rng.standard_normal((2, c)) for _ in range(m)]
        steps = 2 * m
        weights = [[rng.standard_normal((c, c)) * 0.5 for _ in range(m - 1)] for _ in range(steps)]
        gvals = [rng.uniform(0.5, 1.5, c) for _ in range(steps)]

        def make_f(w_t):
            def f(*xs):
                acc = ops.linear(xs[0], Parameter(w_t[0]))
                for x, w in zip(xs[1:], w_t[1:]):
                    acc = acc + ops.linear(x, Parameter(w))
                return Tensor(np.tanh(acc.data))
            return f

        fns = [make_f(w) for w in weights]
        gammas = []
        for v in gvals:
            g = GammaScale(c)
            g.param.assign(v)
            gammas.append(g)
        got = run_sequence([Tensor(a) for a in initial], fns, gammas)
        ref = _full_reference(initial, weights, gvals)
        for a, b in zip(got, ref):
            np.testing.assert_allclose(a.data, b, rtol=1e-13, atol=1e-13)
        back = invert_sequence(got[-m:], fns, gammas)
        for a, b in zip(back, initial):
            assert np.max(np.abs(a.data - b)) <= 1e-10

    def test_round_trip_tolerance_f64(self, rng):
        blk = ConvNeXtBlock(4, 3, Rng(5), layer_scale_init=0.8)
        g = GammaScale(4)
        g.param.assign(rng.uniform(0.5, 1.5, 4))
        xs = [Tensor(rng.standard_normal((2, 4, 5, 5))) for _ in range(3)]
        f = lambda a, b: blk(a + b)
        out = reversible_forward_step(xs[:2], xs[2], f, g)
        back = reversible_inverse_step(out, xs[:2], f, g)
        assert np.max(np.abs(back.data - xs[2].data)) <= 1e-11

    def test_round_trip_f32(self, rng):
        from revcol.tensor import precision
        with precision("f32"):
            blk = ConvNeXtBlock(4, 3, Rng(5), layer_scale_init=0.8)
            g = GammaScale(4)
            g.param.assign(rng.uniform(0.5, 1.5, 4))
            xs = [Tensor(rng.standard_normal((2, 4, 5, 5)).astype(np.float32)) for _ in range(2)]
            out = reversible_forward_step([xs[0]], xs[1], blk, g)
            back = reversible_inverse_step(out, [xs[0]], blk, g)
            assert back.dtype == np.float32
            assert np.max(np.abs(back.data - xs[1].data)) <= 1e-4

    def test_gamma_at_floor(self, rng):
        blk = ConvNeXtBlock(4, 3, Rng(6), layer_scale_init=0.5)
        g = GammaScale(4)
        g.param.assign(np.full(4, 1e-3))
        x1, x2 = Tensor(rng.standard_normal((2, 4, 5, 5))), Tensor(rng.standard_normal((2, 4, 5, 5)))
        out = reversible_forward_step([x1], x2, blk, g)
        back = reversible_inverse_step(out, [x1], blk, g)
        rel = np.max(np.abs(back.data - x2.data)) / np.max(np.abs(x2.data))
        assert rel <= 1e-8


class TestColumnStep:
    def test_zero_bank_is_identity(self, rng):
        bank = DenseBank(2, zero=True, gamma_range=(1.0, 1.0))
        for g in bank.gammas.values():
            g.param.assign(np.ones(5))
        prev = randcol(rng)
        out = simplified_column_step(prev, Tensor(rng.standard_normal((3, 5))), bank, 2)
        for a, b in zip(out.levels, prev.levels):
            np.testing.assert_array_equal(a.data, b.data)

    def test_scalar_hand_trace(self):
        # F(low, high) = 2*low + high (high absent at the top level), gamma = 0.5
        class Lin:
            order = 4

            def f(self, column, level, low, high):
                y = ops.scale(low, 2.0)
                return y if high is None else y + high

            def gamma(self, column, level):
                return unit_gamma(1, 0.5)

        prev = ColumnState([Tensor(np.array([[v]])) for v in (1.0, 2.0, 3.0, 4.0)])
        entry = Tensor(np.array([[1.0]]))
        out = simplified_column_step(prev, entry, Lin(), 2)
        # l1: 2*1 + 2 + 0.5*1 = 4.5; l2: 2*4.5 + 3 + 1 = 13;
        # l3: 2*13 + 4 + 1.5 = 31.5; l4: 2*31.5 + 2 = 65
        assert [float(x.data[0, 0]) for x in out.levels] == [4.5, 13.0, 31.5, 65.0]
        back = reconstruct_column(out, entry, Lin(), 2)
        assert [float(x.data[0, 0]) for x in back.levels] == [1.0, 2.0, 3.0, 4.0]

    def test_equals_composed_forward_steps(self, rng):
        bank = DenseBank(2, seed=3)
        prev = randcol(rng)
        entry = Tensor(rng.standard_normal((3, 5)))
        out = simplified_column_step(prev, entry, bank, 2)
        low = entry
        for l in range(1, 5):
            high = [prev[l + 1]] if l < 4 else []
            f = (lambda h: (lambda a, *hs: bank.f(2, h, a, hs[0] if hs else None)))(l)
            x = reversible_forward_step([low, *high], prev[l], f, bank.gamma(2, l))
            np.testing.assert_array_equal(out[l].data, x.data)
            low = x

    def test_first_column_has_no_gamma(self, rng):
        bank = DenseBank(1)
        entry = Tensor(rng.standard_normal((3, 5)))
        out = simplified_column_step(None, entry, bank, 1)
        with no_tape():
            x = bank.f(1, 1, entry, None)
        np.testing.assert_array_equal(out[1].data, x.data)
        with pytest.raises(ValueError):
            reconstruct_column(out, entry, bank, 1)

    def test_level_count_error(self, rng):
        with pytest.raises(ShapeError):
            simplified_column_step(randcol(rng, m=3), Tensor(np.zeros((3, 5))), DenseBank(2), 2)


class TestReconstruction:
    @pytest.mark.parametrize("m", [2, 4])
    def test_round_trip_random_parameterizations(self, m):
        # 1000 random banks, each checked on a random state
        worst = 0.0
        for seed in range(1000):
            r = np.random.default_rng(seed)
            bank = DenseBank(2, order=m, channels=3, seed=seed)
            prev = ColumnState([Tensor(r.standard_normal((2, 3))) for _ in range(m)])
            entry = Tensor(r.standard_normal((2, 3)))
            with no_tape():
                nxt = simplified_column_step(prev, entry, bank, 2)
            back = reconstruct_column(nxt, entry, bank, 2)
            worst = max(worst, max(np.max(np.abs(a.data - b.data)) for a, b in zip(back.levels, prev.levels)))
        assert worst <= 1e-11

    def test_conv_round_trip(self, rng):
        bank = ConvBank(2)
        prev = randcol(rng, (2, 4, 6, 6))
        entry = Tensor(rng.standard_normal((2, 4, 6, 6)))
        with no_tape():
            nxt = simplified_column_step(prev, entry, bank, 2)
        back = reconstruct_column(nxt, entry, bank, 2)
        assert max(np.max(np.abs(a.data - b.data)) for a, b in zip(back.levels, prev.levels)) <= 1e-11

    def test_eight_column_chain(self, rng):
        bank = DenseBank(9, seed=4, gamma_range=(0.8, 1.2))
        entry = Tensor(rng.standard_normal((3, 5)))
        first = simplified_column_step(None, entry, bank, 1)
        states = [first]
        with no_tape():
            for c in range(2, 10):
                states.append(simplified_column_step(states[-1], entry, bank, c))
        cur = states[-1]
        for c in range(9, 1, -1):
            cur = reconstruct_column(cur, entry, bank, c)
        err = max(np.max(np.abs(a.data - b.data)) for a, b in zip(cur.levels, first.levels))
        assert err <= 1e-9

    def test_descending_order_required(self, rng):
        """Rebuilding level 1 first would need level 2 of the previous column, which is not known yet."""
        bank = DenseBank(2, seed=8)
        prev = randcol(rng)
        entry = Tensor(rng.standard_normal((3, 5)))
        with no_tape():
            nxt = simplified_column_step(prev, entry, bank, 2)
            # ascending attempt: substitute the next column's level 2 for the unknown high input
            wrong = bank.gamma(2, 1).unapply(nxt[1].data - bank.f(2, 1, entry, nxt[2]).data)
        assert np.max(np.abs(wrong - prev[1].data)) > 1e-3
        back = reconstruct_column(nxt, entry, bank, 2)
        assert np.max(np.abs(back[1].data - prev[1].data)) <= 1e-12

    def test_non_finite_detected(self, rng):
        bank = DenseBank(2)
        nxt = randcol(rng)
        nxt.levels[3] = Tensor(np.full((3, 5), np.inf))
        with pytest.raises(ReconstructionError):
            reconstruct_column(nxt, Tensor(np.zeros((3, 5))), bank, 2)

    def test_gamma_floor_violation(self, rng):
        bank = DenseBank(2)
        bank.gammas[2, 4].param.assign(np.full(5, 1e-5))
        with pytest.raises(ReconstructionError):
            reconstruct_column(randcol(rng), Tensor(np.zeros((3, 5))), bank, 2)


def _loss_seeds(rng, shape, m=4):
    return [rng.standard_normal(shape) for _ in range(m)]


def _store_all(bank, entry_arr, columns, seeds, taps=None):
    entry = Tensor(entry_arr, requires_grad=True)
    with Tape() as tape:
        states = []
        state = None
        for c in range(1, columns + 1):
            state = simplified_column_step(state, entry, bank, c)
            states.append(state)
        loss = None
        for lvl, s in zip(state.levels, seeds):
            term = ops.sum(ops.mul(lvl, Tensor(s)))
            loss = term if loss is None else loss + term
        for c, ts in (taps or {}).items():
            for lvl, s in zip(states[c - 1].levels, ts):
                if s is not None:
                    loss = loss + ops.sum(ops.mul(lvl, Tensor(s)))
    g = ops.backward(tape, loss)
    return g, g[entry], float(loss.data)


def _reversible(bank, entry_arr, columns, seeds, taps=None):
    entry = Tensor(entry_arr)
    with no_tape():
        last = forward_columns(entry, bank, columns)
    return reversible_backward(last, seeds, entry, bank, columns, taps)


class TestReversibleBackward:
    @pytest.mark.parametrize("columns", [1, 2, 4])
    def test_matches_store_all(self, rng, columns):
        bank = DenseBank(columns, seed=columns)
        entry = rng.standard_normal((3, 5))
        seeds = _loss_seeds(rng, (3, 5))
        g_ref, ge_ref, _ = _store_all(bank, entry, columns, seeds)
        g_rev, ge_rev = _reversible(bank, entry, columns, seeds)
        for p in bank.parameters():
            a, b = g_rev.get(p), g_ref.get(p)
            assert (a is None) == (b is None)
            if a is not None:
                assert np.max(np.abs(a - b)) <= 1e-9 * max(1.0, np.max(np.abs(b)))
        assert np.max(np.abs(ge_rev - ge_ref)) <= 1e-9 * max(1.0, np.max(np.abs(ge_ref)))

    def test_conv_bank_with_taps(self, rng):
        bank = ConvBank(4, seed=2)
        entry = rng.standard_normal((2, 4, 4, 4))
        seeds = [None, None, None, rng.standard_normal((2, 4, 4, 4))]
        taps = {1: [None, None, None, rng.standard_normal((2, 4, 4, 4))],
                3: [None, None, None, rng.standard_normal((2, 4, 4, 4))]}
        g_ref, ge_ref, _ = _store_all(bank, entry, 4, [s if s is not None else 0 * entry for s in seeds], taps)
        g_rev, ge_rev = _reversible(bank, entry, 4, seeds, taps)
        for blk in bank.blocks.values():
            for p in blk.parameters():
                ref = g_ref[p]
                assert np.max(np.abs(g_rev[p] - ref)) <= 1e-9 * max(1.0, np.max(np.abs(ref)))
        for g in bank.gammas.values():
            assert np.max(np.abs(g_rev[g.param] - g_ref[g.param])) <= 1e-9

    def test_finite_differences(self, rng):
        bank = DenseBank(3, channels=3, seed=11)
        entry = rng.standard_normal((2, 3))
        seeds = _loss_seeds(rng, (2, 3))
        g_rev, ge = _reversible(bank, entry, 3, seeds)

        def loss():
            with no_tape():
                last = forward_columns(Tensor(entry), bank, 3)
            return sum(float(np.sum(x.data * s)) for x, s in zip(last.levels, seeds))

        eps = 1e-6
        for p in [bank.params[1, 2][0], bank.params[3, 4][2], bank.gammas[2, 1].param]:
            flat = p.data.reshape(-1)
            for j in (0, flat.size - 1):
                old = flat[j]
                flat[j] = old + eps
                up = loss()
                flat[j] = old - eps
                dn = loss()
                flat[j] = old
                num = (up - dn) / (2 * eps)
                ana = g_rev[p].reshape(-1)[j]
                assert abs(num - ana) <= 1e-5 * max(1.0, abs(num))

    def test_gradient_shape_mismatch(self, rng):
        bank = DenseBank(2)
        with pytest.raises(ShapeError):
            _reversible(bank, rng.standard_normal((3, 5)), 2, _loss_seeds(rng, (3, 5), m=3))

    def test_retention_bounded_by_two_columns(self, rng):
        """Peak live activation buffers do not grow with the column count."""
        peaks = {}
        for columns in (2, 4, 8):
            bank = DenseBank(columns, seed=1)
            entry = rng.standard_normal((3, 5))
            seeds = _loss_seeds(rng, (3, 5))
            base = METER.live_count
            METER.reset_peak()
            _reversible(bank, entry, columns, seeds)
            peaks[columns] = METER.peak_count - base
            assert METER.live_count == base
        assert peaks[8] == peaks[4] == peaks[2]

    def test_store_all_retention_grows(self, rng):
        peaks = {}
        for columns in (2, 8):
            bank = DenseBank(columns, seed=1)
            METER.reset_peak()
            base = METER.live_count
            _store_all(bank, rng.standard_normal((3, 5)), columns, _loss_seeds(rng, (3, 5)))
            peaks[columns] = METER.peak_count - base
        assert peaks[8] > 3 * peaks[2]
