import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedunlearn.numerics import (
    EstimationUnavailable,
    LbfgsBuffers,
    as_param_vector,
    coordinate_sign,
    cosine_similarity,
    l2_norm,
    lbfgs_hvp,
    sigma_coefficient,
)


def naive_norm(v):
    # Independent oracle: explicit sum of squares.
    total = 0.0
    for x in v:
        total += float(x) * float(x)
    return math.sqrt(total)


class TestL2Norm:
    def test_zero_vector(self):
        assert l2_norm(np.zeros(3)) == 0.0

    def test_pythagorean(self):
        assert l2_norm(np.array([3.0, 4.0])) == pytest.approx(5.0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            v = rng.normal(size=32)
            assert l2_norm(v) == pytest.approx(naive_norm(v), abs=1e-12)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            l2_norm(np.array([1.0, np.nan]))

    def test_rejects_inf(self):
        with pytest.raises(ValueError):
            l2_norm(np.array([np.inf, 0.0]))


class TestCosineSimilarity:
    def test_self_similarity(self):
        v = np.array([1.0, 2.0, -3.0])
        assert cosine_similarity(v, v) == pytest.approx(1.0)

    def test_antipodal(self):
        v = np.array([1.0, 2.0, -3.0])
        assert cosine_similarity(v, -v) == pytest.approx(-1.0)

    def test_orthogonal(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_zero_vector_is_neutral(self):
        assert cosine_similarity(np.zeros(2), np.array([1.0, 1.0])) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity(np.zeros(2), np.zeros(3))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=8))
    def test_range(self, xs):
        a = np.array(xs)
        b = np.arange(len(xs), dtype=float) - 1.5
        assert -1.0 <= cosine_similarity(a, b) <= 1.0


class TestCoordinateSign:
    def test_definition(self):
        np.testing.assert_array_equal(
            coordinate_sign(np.array([2.0, -3.0, 0.0])), [1.0, -1.0, 0.0])

    def test_zero(self):
        np.testing.assert_array_equal(coordinate_sign(np.zeros(4)), np.zeros(4))

    def test_oddness(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            v = rng.normal(size=10)
            np.testing.assert_array_equal(coordinate_sign(-v), -coordinate_sign(v))


class TestBuffers:
    def test_eviction_keeps_newest(self):
        buf = LbfgsBuffers(s=2)
        for t in range(4):
            buf.append(t, np.full(3, float(t)), {0: np.full(3, 10.0 * t)})
        assert buf.round_tags == [2, 3]
        assert len(buf.delta_g[0]) == 2
        np.testing.assert_array_equal(buf.delta_w[0], np.full(3, 2.0))

    def test_alignment_enforced(self):
        buf = LbfgsBuffers(s=3)
        buf.append(0, np.zeros(2), {0: np.zeros(2), 1: np.zeros(2)})
        with pytest.raises(ValueError):
            buf.append(1, np.zeros(2), {0: np.zeros(2)})

    def test_round_tags_increase(self):
        buf = LbfgsBuffers(s=3)
        buf.append(5, np.zeros(2), {0: np.zeros(2)})
        with pytest.raises(ValueError):
            buf.append(5, np.zeros(2), {0: np.zeros(2)})


class TestSigma:
    def _buf(self, dw, dg, tag=0):
        buf = LbfgsBuffers(s=4)
        buf.append(tag, dw, {0: dg})
        return buf

    def test_identical_vectors(self):
        v = np.array([1.0, -2.0, 0.5])
        assert sigma_coefficient(self._buf(v, v), 0) == pytest.approx(1.0)

    def test_scaling(self):
        v = np.array([1.0, -2.0, 0.5])
        assert sigma_coefficient(self._buf(v, 3.0 * v), 0) == pytest.approx(3.0)

    def test_orthogonal_clamps_to_floor(self):
        dw = np.array([1.0, 0.0])
        dg = np.array([0.0, 5.0])
        assert sigma_coefficient(self._buf(dw, dg), 0) == 1e-6

    def test_uses_round_minus_two_pair(self):
        buf = LbfgsBuffers(s=4)
        v = np.ones(2)
        buf.append(3, v, {0: 2.0 * v})
        buf.append(4, v, {0: 7.0 * v})
        # At round 5 the round-3 pair applies.
        assert sigma_coefficient(buf, 0, round_tag=5) == pytest.approx(2.0)
        # Round 9 has no t-2 entry: falls back to the latest pair.
        assert sigma_coefficient(buf, 0, round_tag=9) == pytest.approx(7.0)


def eigen_pair_buffers(hess_diag, coords, scales):
    """Buffers whose pairs step along distinct eigendirections of diag(hess_diag)."""
    d = len(hess_diag)
    buf = LbfgsBuffers(s=len(coords))
    for t, (j, a) in enumerate(zip(coords, scales)):
        s_vec = np.zeros(d)
        s_vec[j] = a
        buf.append(t, s_vec, {0: hess_diag * s_vec})
    return buf


class TestLbfgsHvp:
    def test_zero_displacement(self):
        buf = eigen_pair_buffers(np.array([1.0, 4.0]), [0, 1], [1.0, 2.0])
        out = lbfgs_hvp(buf, 0, np.zeros(2), sigma=1.0)
        np.testing.assert_array_equal(out, np.zeros(2))

    def test_scalar_secant(self):
        # One pair, scalar model: the approximation reduces to b/a.
        a, b = 0.7, 2.1
        buf = LbfgsBuffers(s=1)
        buf.append(0, np.array([a]), {0: np.array([b])})
        sigma = sigma_coefficient(buf, 0)
        out = lbfgs_hvp(buf, 0, np.array([0.5]), sigma)
        assert out[0] == pytest.approx((b / a) * 0.5, rel=1e-9)

    def test_constant_hessian_oracle(self):
        # Pairs along eigendirections of a diagonal Hessian reproduce H @ v
        # exactly for queries within the span of the buffered steps.
        rng = np.random.default_rng(3)
        h = np.array([0.5, 1.4, 2.0, 0.9, 1.1])
        buf = eigen_pair_buffers(h, [2, 0], [0.8, -1.3])
        sigma = 1.0
        for _ in range(10):
            q = np.zeros(5)
            q[2] = rng.normal()
            q[0] = rng.normal()
            out = lbfgs_hvp(buf, 0, q, sigma)
            expect = h * q
            assert np.linalg.norm(out - expect) <= 1e-6 * np.linalg.norm(expect)

    def test_most_recent_secant_is_exact(self):
        # For arbitrary exact pairs y = H s, the latest secant holds exactly.
        rng = np.random.default_rng(4)
        h = np.linspace(0.5, 2.0, 8)
        buf = LbfgsBuffers(s=2)
        pairs = [rng.normal(size=8) for _ in range(2)]
        for t, s_vec in enumerate(pairs):
            buf.append(t, s_vec, {0: h * s_vec})
        sigma = sigma_coefficient(buf, 0)
        out = lbfgs_hvp(buf, 0, pairs[-1], sigma)
        expect = h * pairs[-1]
        assert np.linalg.norm(out - expect) <= 1e-8 * np.linalg.norm(expect)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        h = np.linspace(0.5, 2.0, 6)
        buf = LbfgsBuffers(s=2)
        for t in range(2):
            s_vec = rng.normal(size=6)
            buf.append(t, s_vec, {0: h * s_vec})
        sigma = sigma_coefficient(buf, 0)
        x = rng.normal(size=6)
        y = rng.normal(size=6)
        a, b = 0.3, -1.7
        lhs = lbfgs_hvp(buf, 0, a * x + b * y, sigma)
        rhs = a * lbfgs_hvp(buf, 0, x, sigma) + b * lbfgs_hvp(buf, 0, y, sigma)
        assert np.linalg.norm(lhs - rhs) <= 1e-8 * max(np.linalg.norm(rhs), 1e-30)

    def test_singular_system_signals_unavailable(self):
        # All-zero pairs (trajectory replaying history exactly) give a zero
        # middle matrix; a nonzero query must signal rather than divide.
        buf = LbfgsBuffers(s=2)
        z = np.zeros(2)
        buf.append(0, z, {0: z})
        buf.append(1, z, {0: z})
        with pytest.raises(EstimationUnavailable):
            lbfgs_hvp(buf, 0, np.array([1.0, 1.0]), sigma=3.0)

    def test_empty_buffer_rejected(self):
        with pytest.raises(ValueError):
            lbfgs_hvp(LbfgsBuffers(s=2), 0, np.ones(2), 1.0)


class TestAsParamVector:
    def test_fixes_dtype(self):
        v = as_param_vector([1, 2, 3])
        assert v.dtype == np.float64

    def test_rejects_matrix(self):
        with pytest.raises(ValueError):
            as_param_vector(np.zeros((2, 2)))

    @settings(max_examples=30)
    @given(st.integers(1, 16))
    def test_dim_check(self, n):
        with pytest.raises(ValueError):
            as_param_vector(np.zeros(n), dim=n + 1)
