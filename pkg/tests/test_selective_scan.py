import numpy as np
import pytest
from hypothesis import given, strategies as st

from ssam import selective_scan as ss
from ssam import ssm_core
from ssam.errors import ParameterError, ShapeError
from ssam.numerics import Tensor, grad_check
from ssam.oracles import selective_scan_loops
from ssam.selective_scan import SelectiveScanInput

FIELDS = ("x", "delta", "B_t", "C_t", "A", "D_skip")


def make_input(rng, L=16, D=3, N=4, batch=(), dtype=np.float64):
    lead = tuple(batch)
    return SelectiveScanInput(
        x=rng.standard_normal(lead + (L, D)).astype(dtype),
        delta=rng.uniform(0.01, 0.5, lead + (L, D)).astype(dtype),
        B_t=rng.standard_normal(lead + (L, N)).astype(dtype),
        C_t=rng.standard_normal(lead + (L, N)).astype(dtype),
        A=(-rng.uniform(0.1, 2.0, (D, N))).astype(dtype),
        D_skip=rng.standard_normal(D).astype(dtype))


def replace(s, **kw):
    return SelectiveScanInput(**({k: getattr(s, k) for k in FIELDS} | kw))


class TestReference:
    def test_zero_input(self, rng):
        s = replace(make_input(rng), x=np.zeros((16, 3)))
        y, h = ss.selective_scan_ref(s)
        assert not y.any() and not h.any()

    def test_single_step(self, rng):
        s = replace(make_input(rng, L=1), D_skip=np.zeros(3))
        y, _ = ss.selective_scan_ref(s)
        expected = (s.C_t[0] * s.delta[0][:, None] * s.B_t[0]).sum(-1) * s.x[0]
        np.testing.assert_allclose(y[0], expected, rtol=1e-14)

    def test_matches_scalar_loops(self, rng):
        s = make_input(rng, L=9, D=2, N=3)
        h0 = rng.standard_normal((2, 3))
        y, h = ss.selective_scan_ref(s, h0)
        y_o, h_o = selective_scan_loops(s.x, s.delta, s.A, s.B_t, s.C_t, s.D_skip, h0)
        np.testing.assert_allclose(y, y_o, atol=1e-13)
        np.testing.assert_allclose(h, h_o, atol=1e-13)

    def test_time_constant_reduces_to_lti(self, rng):
        L, N = 50, 6
        A = -rng.uniform(0.1, 2.0, N)
        B, C = rng.standard_normal(N), rng.standard_normal(N)
        x = rng.standard_normal((L, 1))
        s = SelectiveScanInput(x, np.full((L, 1), 0.3), np.tile(B, (L, 1)), np.tile(C, (L, 1)),
                               A[None], np.zeros(1))
        y, _ = ss.selective_scan_ref(s)
        d = ssm_core.discretize_euler(ssm_core.SsmParams(A, B, C, 0.3))
        assert np.abs(y[:, 0] - ssm_core.ssm_recurrence(d, C, x[:, 0])).max() < 1e-10

    def test_batch_axes_are_independent(self, rng):
        s = make_input(rng, batch=(2, 3))
        y, h = ss.selective_scan_ref(s)
        for i in range(2):
            for j in range(3):
                one = SelectiveScanInput(s.x[i, j], s.delta[i, j], s.B_t[i, j], s.C_t[i, j], s.A, s.D_skip)
                yi, hi = ss.selective_scan_ref(one)
                np.testing.assert_array_equal(y[i, j], yi)
                np.testing.assert_array_equal(h[i, j], hi)


class TestValidation:
    def test_nonpositive_delta(self, rng):
        s = make_input(rng)
        with pytest.raises(ParameterError):
            replace(s, delta=np.zeros_like(s.delta))

    def test_non_finite(self, rng):
        s = make_input(rng)
        x = s.x.copy()
        x[0, 0] = np.nan
        with pytest.raises(ParameterError):
            replace(s, x=x)

    @pytest.mark.parametrize("field,shape", [("delta", (16, 2)), ("B_t", (16, 5)), ("A", (2, 4)),
                                             ("D_skip", (4,)), ("x", (0, 3))])
    def test_shapes(self, rng, field, shape):
        with pytest.raises(ShapeError):
            replace(make_input(rng), **{field: np.ones(shape)})

    def test_bad_h0(self, rng):
        with pytest.raises(ShapeError):
            ss.selective_scan_ref(make_input(rng), h0=np.zeros((3, 3)))

    def test_bad_chunk(self, rng):
        with pytest.raises(ParameterError):
            ss.selective_scan_chunked(make_input(rng), chunk_len=0)


class TestChunked:
    @pytest.mark.parametrize("chunk", [16, 17, 1000])
    def test_single_chunk_bit_identical(self, rng, chunk):
        s = make_input(rng)
        h0 = rng.standard_normal((3, 4))
        y_ref, h_ref = ss.selective_scan_ref(s, h0)
        y, h = ss.selective_scan_chunked(s, h0, chunk_len=chunk)
        assert y.tobytes() == y_ref.tobytes() and h.tobytes() == h_ref.tobytes()

    def test_singleton_chunks(self, rng):
        s = make_input(rng)
        y_ref, _ = ss.selective_scan_ref(s)
        y, _ = ss.selective_scan_chunked(s, chunk_len=1)
        assert np.abs(y - y_ref).max() < 1e-10

    def test_long_sequence(self, rng):
        s = make_input(rng, L=256, D=4, N=8)
        y_ref, h_ref = ss.selective_scan_ref(s)
        y, h = ss.selective_scan_chunked(s, chunk_len=32)
        assert np.abs(y - y_ref).max() < 1e-10
        assert np.abs(h - h_ref).max() < 1e-10

    def test_float32_tolerance(self, rng):
        s = make_input(rng, L=256, D=4, N=8, dtype=np.float32)
        y_ref, _ = ss.selective_scan_ref(s)
        y, _ = ss.selective_scan_chunked(s, chunk_len=32)
        assert y.dtype == np.float32
        assert np.abs(y - y_ref).max() < 1e-5

    @given(st.integers(1, 80), st.sampled_from([1, 7, 32, "L"]), st.integers(0, 2**32 - 1))
    def test_equivalence_property(self, L, chunk, seed):
        rng = np.random.default_rng(seed)
        s = make_input(rng, L=L, D=2, N=3, batch=(2,))
        h0 = rng.standard_normal((2, 2, 3))
        y_ref, h_ref = ss.selective_scan_ref(s, h0)
        y, h = ss.selective_scan_chunked(s, h0, chunk_len=L if chunk == "L" else chunk)
        assert np.abs(y - y_ref).max() < 1e-10
        assert np.abs(h - h_ref).max() < 1e-10

    def test_default_chunk_length(self):
        assert ss.default_chunk_len(256) == 16
        assert ss.default_chunk_len(1) == 1
        assert ss.default_chunk_len(251, step_size=10**6) == 251


class TestComposition:
    def test_monoid_law(self, rng):
        f, g, h = [(rng.standard_normal(3), rng.standard_normal(3)) for _ in range(3)]
        left = ss.compose(ss.compose(f, g), h)
        right = ss.compose(f, ss.compose(g, h))
        for a, b in zip(left, right):
            np.testing.assert_allclose(a, b, rtol=1e-13)

    def test_identity(self, rng):
        f = (rng.standard_normal(3), rng.standard_normal(3))
        e = (np.ones(3), np.zeros(3))
        for a, b in zip(ss.compose(f, e), f):
            np.testing.assert_array_equal(a, b)

    def test_apply_order(self):
        # inner first: h -> 2h + 1, then h -> 3h + 5
        a, b = ss.compose((3.0, 5.0), (2.0, 1.0))
        assert a * 10.0 + b == 3.0 * (2.0 * 10.0 + 1.0) + 5.0


class TestStateContinuity:
    @pytest.mark.parametrize("k", [1, 5, 15])
    def test_split_scan_is_exact(self, rng, k):
        s = make_input(rng)
        y, h = ss.selective_scan_ref(s)
        first = SelectiveScanInput(*(getattr(s, f)[:k] if f not in ("A", "D_skip") else getattr(s, f)
                                     for f in FIELDS))
        second = SelectiveScanInput(*(getattr(s, f)[k:] if f not in ("A", "D_skip") else getattr(s, f)
                                      for f in FIELDS))
        y1, h1 = ss.selective_scan_ref(first)
        y2, h2 = ss.selective_scan_ref(second, h1)
        assert np.concatenate([y1, y2]).tobytes() == y.tobytes()
        assert h2.tobytes() == h.tobytes()


class TestCausality:
    @pytest.mark.parametrize("field", ["x", "delta", "B_t", "C_t"])
    def test_future_changes_do_not_leak(self, rng, field):
        s = make_input(rng, L=20)
        y, _ = ss.selective_scan_chunked(s, chunk_len=6)
        t = 11
        arr = getattr(s, field).copy()
        arr[t + 1:] = np.abs(arr[t + 1:]) + 1.0
        y2, _ = ss.selective_scan_chunked(replace(s, **{field: arr}), chunk_len=6)
        np.testing.assert_array_equal(y[:t + 1], y2[:t + 1])
        assert not np.array_equal(y[t + 1:], y2[t + 1:])


class TestBackward:
    def test_zero_cotangent(self, rng):
        s = make_input(rng)
        g = ss.selective_scan_backward(s, None, np.zeros_like(s.x))
        assert all(not v.any() for v in g.values())

    def test_output_gradient_at_impulse_is_hidden_state(self, rng):
        s = make_input(rng, L=6)
        x = np.zeros_like(s.x)
        x[0] = 1.0
        s = replace(s, x=x)
        a = np.exp(s.delta[..., None] * s.A)
        h = np.zeros((3, 4))
        for t in range(6):
            h = a[t] * h + (s.delta[t] * s.x[t])[:, None] * s.B_t[t]
            dy = np.zeros_like(s.x)
            dy[t] = 1.0
            g = ss.selective_scan_backward(s, None, dy)
            np.testing.assert_allclose(g["C_t"][t], h.sum(axis=0), rtol=1e-13)
            assert not np.delete(g["C_t"], t, axis=0).any()

    @pytest.mark.parametrize("chunk", [None, 1, 3, 8])
    @pytest.mark.parametrize("field", FIELDS)
    def test_finite_differences(self, rng, field, chunk):
        s = make_input(rng, L=8, D=2, N=3)
        dy = rng.standard_normal(s.x.shape)

        def f(t):
            args = {k: Tensor(getattr(s, k)) for k in FIELDS}
            args[field] = t
            y = ss.selective_scan(args["x"], args["delta"], args["A"], args["B_t"], args["C_t"],
                                  args["D_skip"], chunk_len=chunk)
            return (y * dy).sum()

        assert grad_check(f, getattr(s, field)) < 1e-4

    def test_initial_and_final_state_gradients(self, rng):
        s = make_input(rng, L=7, D=2, N=3)
        h0 = rng.standard_normal((2, 3))
        dy, dh = rng.standard_normal(s.x.shape), rng.standard_normal((2, 3))

        def objective(h):
            y, hL = ss.selective_scan_ref(s, h)
            return float((y * dy).sum() + (hL * dh).sum())

        g = ss.selective_scan_backward(s, h0, dy, dh_last=dh)["h0"]
        eps = 1e-6
        num = np.zeros_like(h0)
        for i in np.ndindex(h0.shape):
            e = np.zeros_like(h0)
            e[i] = eps
            num[i] = (objective(h0 + e) - objective(h0 - e)) / (2 * eps)
        np.testing.assert_allclose(g, num, atol=1e-7)

    def test_batched_gradients(self, rng):
        s = make_input(rng, L=5, D=2, N=2, batch=(3,))
        dy = rng.standard_normal(s.x.shape)

        def f(t):
            y = ss.selective_scan(Tensor(s.x), Tensor(s.delta), t, Tensor(s.B_t), Tensor(s.C_t),
                                  Tensor(s.D_skip), chunk_len=2)
            return (y * dy).sum()

        assert grad_check(f, s.A) < 1e-4
