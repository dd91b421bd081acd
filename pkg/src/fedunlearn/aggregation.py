"""Server-side aggregation rules over a set of client updates.

All rules are pure functions of the update list (plus weights for the
weighted mean) and are permutation-invariant up to the documented
index-based tie-breaks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParamVector

AGGREGATOR_KINDS = ("fedavg", "median", "trimmed_mean", "krum", "bulyan")


@dataclass(frozen=True)
class AggregatorKind:
    """Aggregation rule selector with its tolerance parameter.

    ``param`` is k for trimmed_mean and m for krum/bulyan; it is the server's
    configured byzantine tolerance, not ground truth about the attacker.
    """

    kind: str
    param: int = 0

    def __post_init__(self) -> None:
        if self.kind not in AGGREGATOR_KINDS:
            raise ValueError(f"unknown aggregator {self.kind!r}")
        if self.param < 0:
            raise ValueError("aggregator parameter must be nonnegative")


def _stack(updates: list[ParamVector]) -> np.ndarray:
    if not updates:
        raise ValueError("cannot aggregate an empty update set")
    mat = np.stack(updates)
    if mat.ndim != 2:
        raise ValueError("updates must be flat vectors of equal dimension")
    return mat


def fedavg(updates: list[ParamVector], weights: list[float]) -> ParamVector:
    """Weighted mean with weights summing to 1."""
    mat = _stack(updates)
    w = np.asarray([float(x) for x in weights], dtype=np.float64)
    if len(w) != len(updates):
        raise ValueError("one weight per update required")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
    return w @ mat


def coordinate_median(updates: list[ParamVector]) -> ParamVector:
    """Per-coordinate median; even counts average the two middle values."""
    return np.median(_stack(updates), axis=0)


def trimmed_mean(updates: list[ParamVector], k: int) -> ParamVector:
    """Per coordinate, drop the k largest and k smallest values, average the rest."""
    mat = _stack(updates)
    n = mat.shape[0]
    if n <= 2 * k:
        raise ValueError(f"trimmed_mean needs n > 2k (n={n}, k={k})")
    if k == 0:
        return mat.mean(axis=0)
    ordered = np.sort(mat, axis=0)
    return ordered[k:n - k].mean(axis=0)


def _krum_scores(mat: np.ndarray, m: int) -> np.ndarray:
    """Sum of squared distances to each update's n-m-2 nearest other updates."""
    n = mat.shape[0]
    diff = mat[:, None, :] - mat[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(sq, np.inf)
    k = n - m - 2
    if k <= 0:
        return np.zeros(n)
    part = np.sort(sq, axis=1)[:, :k]
    return part.sum(axis=1)


def krum(updates: list[ParamVector], m: int) -> ParamVector:
    """Return the single update closest to its n-m-2 nearest neighbours.

    Ties resolve to the lowest client index.  Requires n >= 2m + 3.
    """
    mat = _stack(updates)
    n = mat.shape[0]
    if n < 2 * m + 3:
        raise ValueError(f"krum needs n >= 2m + 3 (n={n}, m={m})")
    scores = _krum_scores(mat, m)
    return mat[int(np.argmin(scores))].copy()


def bulyan(updates: list[ParamVector], m: int) -> ParamVector:
    """Krum-based selection of n-2m candidates, then a trimmed coordinate mean.

    Selection repeatedly applies the krum score to the shrinking pool and
    removes the winner.  Per coordinate, the beta = theta - 2m values closest
    to the coordinate median are averaged (ties toward the lower pool index).
    Requires n >= 4m + 3.
    """
    mat = _stack(updates)
    n = mat.shape[0]
    if n < 4 * m + 3:
        raise ValueError(f"bulyan needs n >= 4m + 3 (n={n}, m={m})")
    theta = n - 2 * m
    pool = list(range(n))
    chosen: list[int] = []
    for _ in range(theta):
        scores = _krum_scores(mat[pool], m)
        best = int(np.argmin(scores))
        chosen.append(pool.pop(best))
    sel = mat[chosen]
    beta = theta - 2 * m
    med = np.median(sel, axis=0)
    order = np.argsort(np.abs(sel - med), axis=0, kind="stable")[:beta]
    return np.take_along_axis(sel, order, axis=0).mean(axis=0)


def aggregate(arr: AggregatorKind, updates: list[ParamVector],
              weights: list[float] | None = None) -> ParamVector:
    """Dispatch to the configured rule."""
    if arr.kind == "fedavg":
        if weights is None:
            weights = [1.0 / len(updates)] * len(updates)
        return fedavg(updates, weights)
    if arr.kind == "median":
        return coordinate_median(updates)
    if arr.kind == "trimmed_mean":
        return trimmed_mean(updates, arr.param)
    if arr.kind == "krum":
        return krum(updates, arr.param)
    return bulyan(updates, arr.param)
