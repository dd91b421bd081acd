import numpy as np
import pytest

from fedunlearn.aggregation import AggregatorKind, aggregate
from fedunlearn.attacks import (
    AttackContext,
    AttackSpec,
    adaptive_attack,
    backdoor_update,
    bad_unlearn,
    lie_attack,
    trim_attack,
)
from fedunlearn.numerics import coordinate_sign, l2_norm
from fedunlearn.unlearn import dir_filter_and_rescale, dist_filter


def ctx_with(benign, n_mal=2, arr="median", knowledge="full", learned=None):
    return AttackContext(benign_updates=[np.asarray(b, float) for b in benign],
                         malicious_ids=list(range(100, 100 + n_mal)),
                         arr=AggregatorKind(arr), knowledge=knowledge,
                         learned_model=None if learned is None else np.asarray(learned, float))


class TestAttackSpec:
    def test_phase_compatibility(self):
        with pytest.raises(ValueError):
            AttackSpec("bad_unlearn", "fl")
        with pytest.raises(ValueError):
            AttackSpec("adaptive", "fl")
        AttackSpec("trim", "fu")  # trim is valid in both phases

    def test_knowledge_validated(self):
        with pytest.raises(ValueError):
            AttackSpec("trim", "fl", knowledge="omniscient")


class TestTrimAttack:
    def test_positive_coordinate_interval(self):
        # Visible {1, 3}: mean sign +, wmin = 1 > 0, so values in [0.5, 1].
        ctx = ctx_with([[1.0], [3.0]], n_mal=5)
        outs = trim_attack(ctx, np.random.default_rng(0))
        for u in outs:
            assert 0.5 <= u[0] <= 1.0

    def test_all_values_below_min_when_sign_positive(self):
        rng = np.random.default_rng(1)
        benign = [rng.uniform(0.5, 2.0, size=6) for _ in range(5)]
        ctx = ctx_with(benign, n_mal=3)
        wmin = np.min(benign, axis=0)
        for u in trim_attack(ctx, np.random.default_rng(2)):
            assert np.all(u <= wmin + 1e-12)

    def test_antisymmetry(self):
        rng = np.random.default_rng(3)
        benign = [rng.normal(size=4) for _ in range(6)]
        flipped = [-b for b in benign]
        out = trim_attack(ctx_with(benign, 1), np.random.default_rng(7))[0]
        out_flipped = trim_attack(ctx_with(flipped, 1), np.random.default_rng(7))[0]
        np.testing.assert_allclose(out_flipped, -out, atol=1e-12)

    def test_requires_visibility(self):
        with pytest.raises(ValueError):
            trim_attack(ctx_with([], 1), np.random.default_rng(0))


class TestLieAttack:
    def test_identical_updates_zero_variance(self):
        u = np.array([1.0, -2.0])
        outs = lie_attack(ctx_with([u, u, u], 2))
        for o in outs:
            np.testing.assert_allclose(o, u)

    def test_z_zero_is_mean(self):
        benign = [np.array([0.0, 2.0]), np.array([2.0, 0.0])]
        out = lie_attack(ctx_with(benign, 1), z=0.0)[0]
        np.testing.assert_allclose(out, [1.0, 1.0])

    def test_hand_computation(self):
        # {0, 2}: mean 1, population std 1, z = 1.5 -> -0.5.
        out = lie_attack(ctx_with([[0.0], [2.0]], 1), z=1.5)[0]
        np.testing.assert_allclose(out, [-0.5])

    def test_single_visible_update(self):
        out = lie_attack(ctx_with([[4.0, 4.0]], 1))[0]
        np.testing.assert_allclose(out, [4.0, 4.0])


class TestBackdoorUpdate:
    def test_scale_zero_noop(self):
        h, p = np.array([1.0, 2.0]), np.array([5.0, -3.0])
        np.testing.assert_array_equal(backdoor_update(h, p, 0.0), h)

    def test_scale_one_is_poisoned(self):
        h, p = np.array([1.0, 2.0]), np.array([5.0, -3.0])
        np.testing.assert_array_equal(backdoor_update(h, p, 1.0), p)

    def test_affine_in_scale(self):
        h, p = np.array([1.0, 2.0]), np.array([5.0, -3.0])
        for s in (0.5, 2.0, -1.0):
            np.testing.assert_allclose(backdoor_update(h, p, s), h + s * (p - h))


class TestBadUnlearn:
    def test_zero_grid_returns_anchor(self):
        learned = np.array([2.0, -1.0, 0.5])
        ctx = ctx_with([[0.1, 0.1, 0.1]], 3, learned=learned)
        outs = bad_unlearn(ctx, eps_grid=(0.0,))
        for o in outs:
            np.testing.assert_array_equal(o, learned)

    def test_grid_minimizer_matches_brute_force(self):
        # 1-D fedavg instance evaluated exhaustively over the same candidates.
        learned = np.array([4.0])
        benign = [np.array([1.0]), np.array([2.0])]
        grid = tuple(np.linspace(0.0, 6.0, 13))
        ctx = ctx_with(benign, 2, arr="fedavg", learned=learned)
        out = bad_unlearn(ctx, eps_grid=grid, refine=False)[0]

        psi = -coordinate_sign(learned)
        best_eps, best_val = None, None
        for eps in grid:
            crafted = learned + eps * psi
            votes = benign + [crafted, crafted]
            val = l2_norm(learned - aggregate(AggregatorKind("fedavg"), votes))
            if best_val is None or val < best_val - 1e-15:
                best_eps, best_val = eps, val
        np.testing.assert_allclose(out, learned + best_eps * psi)

    def test_argmin_contract(self):
        rng = np.random.default_rng(4)
        learned = rng.normal(size=5)
        benign = [rng.normal(size=5) for _ in range(4)]
        grid = tuple(np.logspace(-2, 1, 10))
        ctx = ctx_with(benign, 2, arr="median", learned=learned)
        out = bad_unlearn(ctx, eps_grid=grid, refine=False)[0]
        psi = -coordinate_sign(learned)

        def objective(eps):
            votes = benign + [learned + eps * psi] * 2
            return l2_norm(learned - aggregate(AggregatorKind("median"), votes))

        chosen = l2_norm(out - learned) / np.sqrt((psi != 0).sum())
        for eps in grid:
            assert objective(chosen) <= objective(eps) + 1e-12

    def test_knowledge_monotonicity(self):
        # Full knowledge's optimum under full visibility is no worse than the
        # partial-knowledge choice evaluated under full visibility.
        rng = np.random.default_rng(5)
        for trial in range(10):
            learned = rng.normal(size=4)
            benign_all = [rng.normal(size=4) for _ in range(6)]
            own = benign_all[:2]
            grid = tuple(np.logspace(-3, 1, 15))
            psi = -coordinate_sign(learned)
            arr = AggregatorKind("median")

            full_out = bad_unlearn(
                ctx_with(benign_all, 2, arr="median", learned=learned), grid)[0]
            part_out = bad_unlearn(
                AttackContext(own, [0, 1], arr, "partial", learned), grid)[0]

            def full_objective(crafted):
                return l2_norm(learned - aggregate(arr, benign_all + [crafted] * 2))

            assert full_objective(full_out) <= full_objective(part_out) + 1e-12

    def test_black_box_uses_median_surrogate(self):
        # Identical contexts except arr; black_box output must match the
        # median-rule output regardless of the declared true rule.
        rng = np.random.default_rng(6)
        learned = rng.normal(size=3)
        own = [rng.normal(size=3) for _ in range(2)]
        grid = tuple(np.logspace(-2, 0, 8))
        bb = bad_unlearn(AttackContext(own, [0], AggregatorKind("trimmed_mean", 1),
                                       "black_box", learned), grid)[0]
        med = bad_unlearn(AttackContext(own, [0], AggregatorKind("median"),
                                        "partial", learned), grid)[0]
        np.testing.assert_array_equal(bb, med)

    def test_requires_learned_model(self):
        with pytest.raises(ValueError):
            bad_unlearn(ctx_with([[1.0]], 1), (0.1,))

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            bad_unlearn(ctx_with([[1.0]], 1, learned=[1.0]), ())


class TestAdaptiveAttack:
    def _window(self, rng, base, n=4, jitter=0.1):
        return [base + jitter * rng.normal(size=len(base)) for _ in range(n)]

    def test_feasible_target_unchanged_dist(self):
        rng = np.random.default_rng(7)
        base = np.array([1.0, 1.0, 1.0])
        window = self._window(rng, base, jitter=5.0)  # huge diameter
        learned = np.array([0.9, 1.1, 1.0])
        ctx = ctx_with([base], 1, arr="median", learned=learned)
        out = adaptive_attack(ctx, {100: window}, "dist")[0]
        target = bad_unlearn(ctx, refine=True)[0]
        if dist_filter(target, window):
            np.testing.assert_array_equal(out, target)

    def test_degenerate_window_returns_stored(self):
        base = np.array([2.0, -1.0])
        window = [base.copy() for _ in range(3)]
        ctx = ctx_with([base], 1, arr="median", learned=np.array([40.0, 40.0]))
        out = adaptive_attack(ctx, {100: window}, "dist")[0]
        np.testing.assert_array_equal(out, base)

    def test_dist_output_passes_defender_filter(self):
        rng = np.random.default_rng(8)
        for trial in range(10):
            base = rng.normal(size=5)
            window = self._window(rng, base, jitter=0.5)
            learned = rng.normal(size=5) * 3.0
            ctx = ctx_with([base], 1, arr="median", learned=learned)
            out = adaptive_attack(ctx, {100: window}, "dist")[0]
            assert dist_filter(out, window)

    def test_dir_output_passes_defender_filter(self):
        rng = np.random.default_rng(9)
        passed = 0
        for trial in range(10):
            base = rng.normal(size=5)
            window = self._window(rng, base, jitter=0.8)
            learned = rng.normal(size=5) * 3.0
            ctx = ctx_with([base], 1, arr="median", learned=learned)
            out = adaptive_attack(ctx, {100: window}, "dir")[0]
            degenerate = np.array_equal(out, window[-1])
            if not degenerate:
                ok, _ = dir_filter_and_rescale(out, window)
                assert ok
                passed += 1
        assert passed > 0  # the projection finds feasible points in practice

    def test_unknown_variant(self):
        ctx = ctx_with([[1.0]], 1, learned=[1.0])
        with pytest.raises(ValueError):
            adaptive_attack(ctx, {100: [np.ones(1)]}, "both")


def test_attack_determinism():
    rng_updates = np.random.default_rng(10)
    benign = [rng_updates.normal(size=4) for _ in range(5)]
    learned = rng_updates.normal(size=4)
    ctx = ctx_with(benign, 2, arr="median", learned=learned)
    a = bad_unlearn(ctx)
    b = bad_unlearn(ctx)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
    t1 = trim_attack(ctx, np.random.default_rng(42))
    t2 = trim_attack(ctx, np.random.default_rng(42))
    for x, y in zip(t1, t2):
        assert x.tobytes() == y.tobytes()
