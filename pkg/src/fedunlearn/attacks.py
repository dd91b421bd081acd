"""Malicious update generators for the training and unlearning phases.

Training-phase attacks (trim, lie, backdoor scaling) craft updates from the
visible benign set.  Unlearning-phase attacks anchor on the final learned
model: ``bad_unlearn`` perturbs it along the negative coordinate-sign
direction with a grid-searched scale, and ``adaptive_attack`` additionally
projects the result into the feasible region of the defender's estimate
filter.

Visibility follows the knowledge setting: ``full`` sees every benign update,
``partial`` and ``black_box`` see only the malicious clients' own
honestly-computed updates, and ``black_box`` evaluates its objective through
a coordinate-median surrogate instead of the true aggregation rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregatorKind, aggregate, coordinate_median
from .numerics import ParamVector, coordinate_sign, l2_norm

FL_ATTACKS = ("none", "trim", "backdoor", "lie")
FU_ATTACKS = ("none", "trim", "backdoor", "lie", "bad_unlearn", "adaptive")
KNOWLEDGE = ("full", "partial", "black_box")

TRIM_B = 2.0
LIE_Z = 1.5

#: 25-point logarithmic scale grid for the perturbation search.
DEFAULT_EPS_GRID = tuple(np.logspace(-3.0, 1.0, 25))


@dataclass(frozen=True)
class AttackSpec:
    """Which attack runs in which phase, and with what knowledge."""

    kind: str
    phase: str  # "fl" or "fu"
    knowledge: str = "full"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.phase not in ("fl", "fu"):
            raise ValueError("phase must be 'fl' or 'fu'")
        allowed = FL_ATTACKS if self.phase == "fl" else FU_ATTACKS
        if self.kind not in allowed:
            raise ValueError(f"attack {self.kind!r} not valid in phase {self.phase!r}")
        if self.knowledge not in KNOWLEDGE:
            raise ValueError(f"unknown knowledge setting {self.knowledge!r}")


@dataclass
class AttackContext:
    """What the attacker can see when crafting this round's updates.

    ``benign_updates`` is the visible set for the configured knowledge level;
    under partial knowledge and black-box it holds the malicious clients' own
    honest updates.  ``arr`` is the true aggregation rule, replaced by the
    median surrogate under black-box.  ``learned_model`` is the final model
    from the poisoned training phase (unlearning-phase attacks only).
    """

    benign_updates: list[ParamVector]
    malicious_ids: list[int]
    arr: AggregatorKind
    knowledge: str = "full"
    learned_model: ParamVector | None = None

    def effective_arr(self) -> AggregatorKind:
        if self.knowledge == "black_box":
            return AggregatorKind("median")
        return self.arr


def trim_attack(ctx: AttackContext, rng: np.random.Generator,
                b: float = TRIM_B) -> list[ParamVector]:
    """Directed-deviation crafting against coordinate-wise rules.

    Per coordinate, push opposite to the sign of the visible mean, sampling
    uniformly from an interval just beyond the visible extreme on that side.
    """
    if not ctx.benign_updates:
        raise ValueError("trim attack needs at least one visible update")
    mat = np.stack(ctx.benign_updates)
    mean_sign = np.sign(mat.mean(axis=0))
    wmax = mat.max(axis=0)
    wmin = mat.min(axis=0)

    # Far interval ends; the draw is anchored at the visible extreme so a
    # sign flip of the inputs mirrors the output exactly.
    far_pos = np.where(wmin > 0, wmin / b, b * wmin)   # s > 0: at or below wmin
    far_neg = np.where(wmax > 0, b * wmax, wmax / b)   # s < 0: at or above wmax

    out = []
    for _ in ctx.malicious_ids:
        u = rng.random(mat.shape[1])
        pos = wmin - u * (wmin - far_pos)
        neg = wmax + u * (far_neg - wmax)
        crafted = np.where(mean_sign > 0, pos, np.where(mean_sign < 0, neg, wmin))
        out.append(crafted)
    return out


def lie_attack(ctx: AttackContext, z: float = LIE_Z) -> list[ParamVector]:
    """Small-but-consistent shift: mean minus z standard deviations."""
    if not ctx.benign_updates:
        raise ValueError("lie attack needs at least one visible update")
    mat = np.stack(ctx.benign_updates)
    mu = mat.mean(axis=0)
    sigma = mat.std(axis=0) if mat.shape[0] > 1 else np.zeros(mat.shape[1])
    crafted = mu - z * sigma
    return [crafted.copy() for _ in ctx.malicious_ids]


def backdoor_update(honest_update: ParamVector, poisoned_update: ParamVector,
                    scale: float = 1.0) -> ParamVector:
    """Blend toward the trigger-trained update: honest + scale * (poisoned - honest)."""
    return honest_update + scale * (poisoned_update - honest_update)


def _objective(anchor: ParamVector, arr: AggregatorKind, benign: list[ParamVector],
               crafted: ParamVector, n_malicious: int) -> float:
    votes = list(benign) + [crafted] * n_malicious
    agg = aggregate(arr, votes)
    return l2_norm(anchor - agg)


def bad_unlearn(ctx: AttackContext,
                eps_grid: tuple[float, ...] = DEFAULT_EPS_GRID,
                anchor: ParamVector | None = None,
                refine: bool = True) -> list[ParamVector]:
    """Craft updates that keep the aggregate near the learned model.

    Every malicious client sends ``anchor + eps* x psi`` with psi the negative
    coordinate-sign of the anchor (the learned model unless overridden) and
    eps* the grid point minimizing ||anchor - ARR(visible u malicious)||.
    One linear refinement pass runs between the neighbours of the grid
    winner; ties resolve toward the smaller eps.
    """
    if len(eps_grid) == 0:
        raise ValueError("eps_grid must be non-empty")
    if anchor is None:
        if ctx.learned_model is None:
            raise ValueError("bad_unlearn requires the learned model")
        anchor = ctx.learned_model
    if not ctx.malicious_ids:
        raise ValueError("bad_unlearn needs at least one malicious client")

    psi = -coordinate_sign(anchor)
    arr = ctx.effective_arr()
    n_mal = len(ctx.malicious_ids)

    grid = sorted(float(e) for e in eps_grid)

    def value(eps: float) -> float:
        return _objective(anchor, arr, ctx.benign_updates, anchor + eps * psi, n_mal)

    scores = [value(e) for e in grid]
    best = min(range(len(grid)), key=lambda i: (scores[i], grid[i]))
    best_eps, best_score = grid[best], scores[best]

    if refine and len(grid) > 1:
        lo = grid[max(best - 1, 0)]
        hi = grid[min(best + 1, len(grid) - 1)]
        for eps in np.linspace(lo, hi, 11):
            eps = float(eps)
            s = value(eps)
            if s < best_score - 1e-15 or (abs(s - best_score) <= 1e-15 and eps < best_eps):
                best_eps, best_score = eps, s

    crafted = anchor + best_eps * psi
    return [crafted.copy() for _ in ctx.malicious_ids]


def _dist_feasible(candidate: ParamVector, window: list[ParamVector]) -> bool:
    from .unlearn import dist_filter  # local import avoids a module cycle
    return dist_filter(candidate, window)


def _dir_feasible(candidate: ParamVector, window: list[ParamVector]) -> bool:
    from .unlearn import dir_filter_and_rescale
    ok, _ = dir_filter_and_rescale(candidate, window)
    return ok


def _median_norm(window: list[ParamVector]) -> float:
    return float(np.median([l2_norm(g) for g in window]))


def adaptive_attack(ctx: AttackContext, filter_state: dict[int, list[ParamVector]],
                    variant: str,
                    eps_grid: tuple[float, ...] = DEFAULT_EPS_GRID) -> list[ParamVector]:
    """Filter-aware attack: project the bad-unlearn target into the feasible set.

    ``filter_state`` maps each malicious client to its stored update window.
    dist: walk from the window centroid toward the target, stopping at the
    largest step that still satisfies the distance check.  dir: interpolate
    the target minimally toward the most recent stored update until the
    direction check holds, then apply the defender's median-norm rescale.
    A degenerate window (no feasible motion) yields the stored update itself.
    """
    if variant not in ("dist", "dir"):
        raise ValueError("variant must be 'dist' or 'dir'")
    target = bad_unlearn(ctx, eps_grid)[0]

    out = []
    for cid in ctx.malicious_ids:
        window = filter_state[cid]
        if variant == "dist":
            out.append(_project_dist(target, window))
        else:
            out.append(_project_dir(target, window))
    return out


def _project_dist(target: ParamVector, window: list[ParamVector]) -> ParamVector:
    centroid = np.mean(window, axis=0)
    if _dist_feasible(target, window):
        return target.copy()
    if not _dist_feasible(centroid, window):
        # Zero-radius ball around identical stored updates.
        return window[-1].copy()
    lo, hi = 0.0, 1.0  # lo stays feasible throughout
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _dist_feasible(centroid + mid * (target - centroid), window):
            lo = mid
        else:
            hi = mid
    return centroid + lo * (target - centroid)


def _project_dir(target: ParamVector, window: list[ParamVector]) -> ParamVector:
    med = _median_norm(window)

    def rescaled(v: ParamVector) -> ParamVector:
        n = l2_norm(v)
        return v if n == 0.0 else (v / n) * med

    if _dir_feasible(target, window):
        return rescaled(target)
    recent = window[-1]
    # Scan for the smallest interpolation toward the most recent stored
    # update that passes, then tighten with a short binary search.
    lambdas = np.linspace(0.0, 1.0, 65)
    feasible_at = None
    for lam in lambdas:
        if _dir_feasible((1 - lam) * target + lam * recent, window):
            feasible_at = float(lam)
            break
    if feasible_at is None:
        return window[-1].copy()
    lo = feasible_at - float(lambdas[1])  # last known-infeasible point
    hi = feasible_at
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _dir_feasible((1 - mid) * target + mid * recent, window):
            hi = mid
        else:
            lo = mid
    return rescaled((1 - hi) * target + hi * recent)
