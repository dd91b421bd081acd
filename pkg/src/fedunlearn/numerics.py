"""Flat-vector arithmetic and the limited-memory quasi-Newton Hessian-vector product.

Model parameters and client updates are plain 1-D float64 numpy arrays of a
fixed dimension d.  The Hessian-vector product uses the compact representation
of the BFGS matrix built from sliding windows of global-model differences and
per-client update differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ParamVector = np.ndarray

#: Reciprocal-condition-number floor for the 2s x 2s block solve.
RCOND_FLOOR = 1e-12

#: Smallest admissible curvature coefficient sigma.
SIGMA_MIN = 1e-6


class EstimationUnavailable(Exception):
    """The quasi-Newton block system is too ill-conditioned to solve.

    Callers fall back to requesting an exact update from the client.
    """


def as_param_vector(values, dim: int | None = None) -> ParamVector:
    """Validate and convert to a finite 1-D float64 vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"parameter vector must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter vector contains NaN or Inf")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {v.shape[0]}")
    return v


def _check_same_dim(a: ParamVector, b: ParamVector) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def l2_norm(v: ParamVector) -> float:
    """Euclidean norm of a finite vector."""
    v = as_param_vector(v)
    return float(np.linalg.norm(v))


def cosine_similarity(a: ParamVector, b: ParamVector) -> float:
    """Cosine of the angle between a and b; 0 if either vector is zero."""
    a = as_param_vector(a)
    b = as_param_vector(b)
    _check_same_dim(a, b)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def coordinate_sign(v: ParamVector) -> ParamVector:
    """Coordinate-wise sign with sign(0) = 0."""
    return np.sign(as_param_vector(v))


@dataclass
class LbfgsBuffers:
    """Sliding windows of global-model and per-client update differences.

    Holds at most ``s`` aligned entries; the oldest entry is evicted first.
    ``delta_w[k]`` is the global-model difference for round ``round_tags[k]``
    and ``delta_g[client][k]`` the matching update difference for one client.
    """

    s: int
    delta_w: list[ParamVector] = field(default_factory=list)
    delta_g: dict[int, list[ParamVector]] = field(default_factory=dict)
    round_tags: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.s < 1:
            raise ValueError("buffer size s must be positive")

    def __len__(self) -> int:
        return len(self.delta_w)

    def clients(self) -> list[int]:
        return sorted(self.delta_g)

    def append(self, round_tag: int, dw: ParamVector, dg_by_client: dict[int, ParamVector]) -> None:
        """Append one round's differences, evicting the oldest beyond s."""
        dw = as_param_vector(dw)
        if self.delta_g and set(dg_by_client) != set(self.delta_g):
            raise ValueError("client set changed between buffer appends")
        if self.round_tags and round_tag <= self.round_tags[-1]:
            raise ValueError("round tags must be strictly increasing")
        self.delta_w.append(dw)
        self.round_tags.append(round_tag)
        for cid, dg in dg_by_client.items():
            dg = as_param_vector(dg)
            _check_same_dim(dw, dg)
            self.delta_g.setdefault(cid, []).append(dg)
        if len(self.delta_w) > self.s:
            self.delta_w.pop(0)
            self.round_tags.pop(0)
            for lst in self.delta_g.values():
                lst.pop(0)

    def pair_for_round(self, client: int, round_tag: int) -> tuple[ParamVector, ParamVector] | None:
        """Return the (delta_w, delta_g) pair tagged with round_tag, if buffered."""
        try:
            k = self.round_tags.index(round_tag)
        except ValueError:
            return None
        return self.delta_w[k], self.delta_g[client][k]


def sigma_coefficient(buffers: LbfgsBuffers, client: int, round_tag: int | None = None,
                      sigma_min: float = SIGMA_MIN) -> float:
    """Initial-curvature coefficient sigma = (dg . dw) / (dw . dw).

    Uses the pair buffered for round ``round_tag - 2`` when present; otherwise
    falls back to the most recent buffered pair.  A zero denominator or a
    nonpositive quotient is clamped to ``sigma_min`` so the compact
    representation keeps a positive-definite base matrix.
    """
    if len(buffers) == 0:
        raise ValueError("sigma_coefficient requires a non-empty buffer")
    pair = None
    if round_tag is not None:
        pair = buffers.pair_for_round(client, round_tag - 2)
    if pair is None:
        pair = buffers.delta_w[-1], buffers.delta_g[client][-1]
    dw, dg = pair
    denom = float(np.dot(dw, dw))
    if denom == 0.0:
        return sigma_min
    sigma = float(np.dot(dg, dw)) / denom
    return sigma if sigma > sigma_min else sigma_min


def lbfgs_hvp(buffers: LbfgsBuffers, client: int, delta_w: ParamVector, sigma: float,
              rcond_floor: float = RCOND_FLOOR) -> ParamVector:
    """Hessian-vector product via the compact quasi-Newton representation.

    With W the buffered global-model differences and G the client's update
    differences (one column per buffered round, oldest first), the implicit
    Hessian approximation is

        B = sigma*I - [G, sigma*W] @ inv([[-D, Lt], [L, sigma*W'W]]) @ [G'; sigma*W']

    where A = W'G, D = diag(A) and L is the strictly lower triangle of A.
    Returns B @ delta_w.  Raises EstimationUnavailable when the middle block
    system has reciprocal condition number below ``rcond_floor``.
    """
    if len(buffers) == 0:
        raise ValueError("lbfgs_hvp requires a non-empty buffer")
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    delta_w = as_param_vector(delta_w)
    if not np.any(delta_w):
        # Zero displacement: both right-hand sides vanish, so B @ 0 == 0.
        return np.zeros_like(delta_w)

    W = np.column_stack(buffers.delta_w)
    G = np.column_stack(buffers.delta_g[client])
    _check_same_dim(W[:, 0], delta_w)
    k = W.shape[1]

    A = W.T @ G
    D = np.diag(np.diag(A))
    L = np.tril(A, -1)
    M = np.block([[-D, L.T], [L, sigma * (W.T @ W)]])

    # 2k x 2k system; a direct SVD-based condition estimate is cheap.
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] / sv[0] < rcond_floor:
        raise EstimationUnavailable(
            f"block system rcond below {rcond_floor:g} for client {client}")

    rhs = np.concatenate([G.T @ delta_w, sigma * (W.T @ delta_w)])
    p = np.linalg.solve(M, rhs)
    return sigma * delta_w - (G @ p[:k] + sigma * (W @ p[k:]))
