"""Unlearning methods: retraining baselines, estimate-and-verify recovery,
and the convergence-bound checker.

``unlearnguard`` rebuilds the model from archived training rounds.  Early
rounds (t < r) run exact training; afterwards each client's update is
predicted from its stored update plus a quasi-Newton Hessian-vector
correction, and a consistency filter decides per client whether the estimate
is trustworthy or an exact update must be requested -- the only moments a
malicious client gets to speak.

Two filters exist.  The distance filter accepts an estimate whose largest
distance to the client's stored window does not exceed the window's own
diameter.  The direction filter compares maximal cosine similarities (over
distinct stored pairs on the right-hand side) and rescales accepted estimates
to the median stored norm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aggregation import aggregate
from .fl import FederationRun, HistoryStore, craft_updates, run_fl
from .models import ConvexityProfile, gradient
from .numerics import (
    EstimationUnavailable,
    LbfgsBuffers,
    ParamVector,
    cosine_similarity,
    l2_norm,
    lbfgs_hvp,
    sigma_coefficient,
)
from .seeding import rng_for

UNLEARN_METHODS = ("scratch", "historical", "fedrecover",
                   "unlearnguard_dist", "unlearnguard_dir")


@dataclass
class FilterWindow:
    """Stored updates g[t-r] .. g[t] for one client, drawn from the archive."""

    r: int
    stored: list[ParamVector]

    @classmethod
    def from_history(cls, history: HistoryStore, client_id: int, t: int, r: int):
        lo = max(0, t - r)
        return cls(r, [history.update(tt, client_id) for tt in range(lo, t + 1)])


@dataclass
class UnlearnSetting:
    """Knobs shared by the history-replay unlearning methods."""

    r: int = 5                      # warm-up length and filter window radius
    s: int = 2                      # quasi-Newton memory
    dir_filter_flipped: bool = False
    rescale_exact_dir: bool = True  # median-norm rescale of exact updates (dir)
    fr_warmup: int = 20
    fr_correction_every: int = 10
    fr_final: int = 5
    fr_tau_factor: float = 10.0
    measure_m: bool = True
    detection_mode: str = "perfect"

    def __post_init__(self) -> None:
        if self.r < 1 or self.s < 1:
            raise ValueError("r and s must be positive")
        if self.fr_correction_every < 1:
            raise ValueError("correction interval must be positive")


@dataclass
class UnlearnReport:
    """Outcome of one unlearning run plus the bookkeeping the analysis needs."""

    method: str
    unlearned_model: ParamVector
    model_trace: list[ParamVector]
    estimated_per_round: list[int] = field(default_factory=list)
    exact_per_round: list[int] = field(default_factory=list)
    rejections_by_client: dict[int, int] = field(default_factory=dict)
    filter_rejections: int = 0
    hvp_failures: int = 0
    exact_requests: int = 0
    measured_m: float = 0.0
    warmup_rounds: int = 0
    n_clients: int = 0
    detection_mode: str = "perfect"
    fu_attack_kind: str = "none"
    final_ter: float | None = None
    final_asr: float | None = None
    distance_trace: list[float] | None = None
    bound_trace: list[float] | None = None
    bound_holds: bool | None = None
    config_echo: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "method": self.method,
            "metrics": {
                "ter": self.final_ter,
                "asr": self.final_asr,
                "measured_m": self.measured_m,
                "exact_requests": self.exact_requests,
                "filter_rejections": self.filter_rejections,
                "hvp_failures": self.hvp_failures,
            },
            "counts": {
                "estimated_per_round": self.estimated_per_round,
                "exact_per_round": self.exact_per_round,
                "rejections_by_client": {str(k): v for k, v in
                                         sorted(self.rejections_by_client.items())},
                "warmup_rounds": self.warmup_rounds,
                "n_clients": self.n_clients,
            },
            "traces": {
                "distance": self.distance_trace,
                "bound": self.bound_trace,
            },
            "bound_holds": self.bound_holds,
            "detection_mode": self.detection_mode,
            "fu_attack_kind": self.fu_attack_kind,
            "config": self.config_echo,
        }
        return json.dumps(doc, sort_keys=True, indent=2)


# --------------------------------------------------------------------------
# Filters


def _as_stored(window) -> list[ParamVector]:
    return list(window.stored) if isinstance(window, FilterWindow) else list(window)


def dist_filter(estimate: ParamVector, window: Sequence[ParamVector] | FilterWindow) -> bool:
    """Accept iff the estimate's largest distance to the stored window is at
    most the largest distance between two distinct stored updates."""
    stored = _as_stored(window)
    if not stored:
        raise ValueError("empty filter window")
    lhs = max(l2_norm(estimate - g) for g in stored)
    rhs = 0.0
    for i in range(len(stored)):
        for j in range(i + 1, len(stored)):
            rhs = max(rhs, l2_norm(stored[i] - stored[j]))
    return lhs <= rhs


def dir_filter_and_rescale(estimate: ParamVector,
                           window: Sequence[ParamVector] | FilterWindow,
                           flipped: bool = False) -> tuple[bool, ParamVector]:
    """Direction check plus median-norm rescale of accepted estimates.

    Literal form: accept iff the estimate's maximal cosine to the window does
    not exceed the maximal cosine between two distinct stored updates.
    ``flipped`` reverses the inequality for sensitivity runs.  A zero-norm
    estimate is rejected.  The adjusted vector keeps the estimate's direction
    at the median stored magnitude.
    """
    stored = _as_stored(window)
    if len(stored) < 2:
        raise ValueError("direction filter needs at least two stored updates")
    norm = l2_norm(estimate)
    if norm == 0.0:
        return False, estimate
    lhs = max(cosine_similarity(estimate, g) for g in stored)
    rhs = -np.inf
    for i in range(len(stored)):
        for j in range(i + 1, len(stored)):
            rhs = max(rhs, cosine_similarity(stored[i], stored[j]))
    accept = (lhs >= rhs) if flipped else (lhs <= rhs)
    adjusted = (estimate / norm) * median_stored_norm(stored)
    return accept, adjusted


def median_stored_norm(window: Sequence[ParamVector] | FilterWindow) -> float:
    return float(np.median([l2_norm(g) for g in _as_stored(window)]))


# --------------------------------------------------------------------------
# Baselines


def train_from_scratch(run: FederationRun, removed: set[int],
                       init: ParamVector | None = None,
                       return_history: bool = False):
    """Exact retraining with the removed clients excluded.

    Remaining malicious clients still answer with their unlearning-phase
    attack every round.  A fresh seed-derived initialization is used unless
    one is supplied.
    """
    remaining = [c.id for c in run.roster if c.id not in removed]
    if not remaining:
        raise ValueError("no clients left after removal")
    scratch = _phase_run(run, remaining)
    if init is None:
        from .models import init_params
        init = init_params(run.spec, rng_for(run.seed, "init", "scratch"))
    model, history = run_fl(scratch, init=init)
    return (model, history) if return_history else model


def _phase_run(run: FederationRun, remaining: list[int]) -> FederationRun:
    return FederationRun(
        spec=run.spec, shards=run.shards, roster=run.roster, arr=run.arr,
        eta=run.eta, rounds=run.rounds, seed=run.seed, phase="fu",
        active=remaining, learned_model=run.learned_model,
        eps_grid=run.eps_grid, bad_unlearn_anchor=run.bad_unlearn_anchor)


def historical_only(history: HistoryStore, removed: set[int], arr,
                    eta: float, weights: list[float] | None = None) -> ParamVector:
    """Replay the archived updates of the remaining clients; no communication."""
    remaining = [i for i in history.client_ids if i not in removed]
    if not remaining:
        raise ValueError("no clients left after removal")
    w = history.model(0).copy()
    for t in range(history.n_rounds):
        ups = history.updates(t)
        agg = aggregate(arr, [ups[i] for i in remaining], weights)
        w = w - eta * agg
    return w


# --------------------------------------------------------------------------
# Shared estimation helpers


class _EstimationState:
    """Buffer maintenance and measurement shared by the replay methods."""

    def __init__(self, run: FederationRun, history: HistoryStore,
                 remaining: list[int], setting: UnlearnSetting):
        self.run = run
        self.history = history
        self.remaining = remaining
        self.setting = setting
        self.buffers = LbfgsBuffers(s=setting.s)
        self.weights = (run.fedavg_weights(remaining)
                        if run.arr.kind == "fedavg" else None)
        self.poisoned = _fu_poisoned_shards(run)
        self.measured_m = 0.0

    def estimate(self, cid: int, t: int, delta_w: ParamVector) -> ParamVector:
        """Stored update plus Hessian-vector correction (may raise)."""
        sigma = sigma_coefficient(self.buffers, cid, round_tag=t)
        hv = lbfgs_hvp(self.buffers, cid, delta_w, sigma)
        return self.history.update(t, cid) + hv

    def exact_replies(self, w: ParamVector, t: int, asked: list[int],
                      filter_windows=None, filter_variant=None) -> dict[int, ParamVector]:
        honest = {i: gradient(self.run.spec, w, self.run.shards.shards[i]) for i in asked}
        return craft_updates(self.run, w, honest, asked, t, self.poisoned,
                             filter_windows=filter_windows, filter_variant=filter_variant)

    def measure(self, w: ParamVector, used: dict[int, ParamVector]) -> None:
        if not self.setting.measure_m:
            return
        for i in self.remaining:
            exact = gradient(self.run.spec, w, self.run.shards.shards[i])
            self.measured_m = max(self.measured_m, l2_norm(used[i] - exact))

    def push_buffers(self, t: int, w: ParamVector, used: dict[int, ParamVector]) -> None:
        delta_w = w - self.history.model(t)
        delta_g = {i: used[i] - self.history.update(t, i) for i in self.remaining}
        self.buffers.append(t, delta_w, delta_g)

    def step(self, w: ParamVector, used: dict[int, ParamVector]) -> ParamVector:
        agg = aggregate(self.run.arr, [used[i] for i in self.remaining], self.weights)
        return w - self.run.eta * agg


def _fu_poisoned_shards(run: FederationRun):
    from .fl import _poisoned_shards
    return _poisoned_shards(run)


def _fu_attack_kind(run: FederationRun, remaining: list[int]) -> str:
    kinds = {run.client(i).attack_for("fu").kind for i in remaining
             if run.client(i).attack_for("fu") is not None}
    return sorted(kinds)[0] if kinds else "none"


# --------------------------------------------------------------------------
# Estimate-and-verify recovery


def unlearnguard(history: HistoryStore, run: FederationRun, removed: set[int],
                 setting: UnlearnSetting, variant: str) -> UnlearnReport:
    """History-driven recovery with per-client estimate verification."""
    if variant not in ("dist", "dir"):
        raise ValueError("variant must be 'dist' or 'dir'")
    remaining = [i for i in history.client_ids if i not in removed]
    if not remaining:
        raise ValueError("no clients left after removal")
    fu_run = _phase_run(run, remaining)
    state = _EstimationState(fu_run, history, remaining, setting)
    T = history.n_rounds
    r = setting.r

    w = history.model(0).copy()
    trace = [w.copy()]
    report = UnlearnReport(
        method=f"unlearnguard_{variant}", unlearned_model=w, model_trace=trace,
        warmup_rounds=min(r, T), n_clients=len(remaining),
        detection_mode=setting.detection_mode,
        fu_attack_kind=_fu_attack_kind(fu_run, remaining),
        rejections_by_client={i: 0 for i in remaining})

    for t in range(T):
        if t < r:
            used = state.exact_replies(w, t, remaining)
        else:
            delta_w = w - history.model(t)
            used: dict[int, ParamVector] = {}
            windows: dict[int, list[ParamVector]] = {}
            need_exact: list[int] = []
            estimated = 0
            for i in remaining:
                windows[i] = FilterWindow.from_history(history, i, t, r).stored
                try:
                    est = state.estimate(i, t, delta_w)
                except EstimationUnavailable:
                    report.hvp_failures += 1
                    need_exact.append(i)
                    continue
                if variant == "dist":
                    ok, adjusted = dist_filter(est, windows[i]), est
                else:
                    ok, adjusted = dir_filter_and_rescale(
                        est, windows[i], flipped=setting.dir_filter_flipped)
                if ok:
                    used[i] = adjusted
                    estimated += 1
                else:
                    report.filter_rejections += 1
                    report.rejections_by_client[i] += 1
                    need_exact.append(i)
            if need_exact:
                replies = state.exact_replies(w, t, need_exact,
                                              filter_windows=windows,
                                              filter_variant=variant)
                for i in need_exact:
                    g = replies[i]
                    if variant == "dir" and setting.rescale_exact_dir and l2_norm(g) > 0:
                        g = (g / l2_norm(g)) * median_stored_norm(windows[i])
                    used[i] = g
            report.exact_requests += len(need_exact)
            report.estimated_per_round.append(estimated)
            report.exact_per_round.append(len(need_exact))
        state.measure(w, used)
        state.push_buffers(t, w, used)
        w = state.step(w, used)
        trace.append(w.copy())

    report.unlearned_model = w
    report.measured_m = state.measured_m
    return report


def fedrecover_baseline(history: HistoryStore, run: FederationRun, removed: set[int],
                        setting: UnlearnSetting) -> UnlearnReport:
    """Estimation with scheduled, rather than verified, exact rounds.

    Warm-up and final rounds are exact, plus one full exact correction every
    ``fr_correction_every`` rounds; per-client exact requests trigger only
    when an estimate's norm exceeds the abnormality threshold.
    """
    remaining = [i for i in history.client_ids if i not in removed]
    if not remaining:
        raise ValueError("no clients left after removal")
    fu_run = _phase_run(run, remaining)
    state = _EstimationState(fu_run, history, remaining, setting)
    T = history.n_rounds

    norms = [l2_norm(history.update(t, i)) for t in range(T) for i in remaining]
    tau = setting.fr_tau_factor * float(np.median(norms))

    w = history.model(0).copy()
    trace = [w.copy()]
    report = UnlearnReport(
        method="fedrecover", unlearned_model=w, model_trace=trace,
        warmup_rounds=min(setting.fr_warmup, T), n_clients=len(remaining),
        detection_mode=setting.detection_mode,
        fu_attack_kind=_fu_attack_kind(fu_run, remaining),
        rejections_by_client={i: 0 for i in remaining})

    for t in range(T):
        scheduled_exact = (
            t < setting.fr_warmup
            or t >= T - setting.fr_final
            or (t - setting.fr_warmup) % setting.fr_correction_every == 0)
        if scheduled_exact:
            used = state.exact_replies(w, t, remaining)
        else:
            delta_w = w - history.model(t)
            used = {}
            need_exact = []
            estimated = 0
            for i in remaining:
                try:
                    est = state.estimate(i, t, delta_w)
                except EstimationUnavailable:
                    report.hvp_failures += 1
                    need_exact.append(i)
                    continue
                if l2_norm(est) > tau:
                    report.filter_rejections += 1
                    report.rejections_by_client[i] += 1
                    need_exact.append(i)
                else:
                    used[i] = est
                    estimated += 1
            if need_exact:
                used.update(state.exact_replies(w, t, need_exact))
            report.exact_requests += len(need_exact)
            report.estimated_per_round.append(estimated)
            report.exact_per_round.append(len(need_exact))
        state.measure(w, used)
        state.push_buffers(t, w, used)
        w = state.step(w, used)
        trace.append(w.copy())

    report.unlearned_model = w
    report.measured_m = state.measured_m
    return report


# --------------------------------------------------------------------------
# Convergence-bound verification


def theorem_bound(report: UnlearnReport, profile: ConvexityProfile, eta: float,
                  scratch_trace: Sequence[ParamVector],
                  slack: float = 1e-9) -> list[dict]:
    """Per-round check of the geometric-decay recovery bound.

    rhs(t) = rho^t ||w0 - v0|| + (1 - rho^t) / (1 - rho) * eta * M with
    rho = sqrt(1 - eta mu) and M the measured worst-case update error.  Only
    valid on a convex task with perfect detection, no unlearning-phase attack,
    and eta <= min(1/mu, 1/L).
    """
    if eta > min(1.0 / profile.mu, 1.0 / profile.lipschitz_l) + 1e-12:
        raise ValueError("learning rate violates eta <= min(1/mu, 1/L)")
    if report.detection_mode != "perfect":
        raise ValueError("bound requires the perfect detection oracle")
    if report.fu_attack_kind != "none":
        raise ValueError("bound requires an attack-free unlearning phase")
    if len(scratch_trace) != len(report.model_trace):
        raise ValueError("trace length mismatch")

    rho = float(np.sqrt(1.0 - eta * profile.mu))
    m = report.measured_m
    d0 = l2_norm(report.model_trace[0] - scratch_trace[0])
    rows = []
    for t in range(len(scratch_trace)):
        lhs = l2_norm(report.model_trace[t] - scratch_trace[t])
        geo = rho ** t
        rhs = geo * d0 + (1.0 - geo) / (1.0 - rho) * eta * m
        rows.append({"round": t, "lhs": lhs, "rhs": rhs, "holds": lhs <= rhs + slack})
    report.distance_trace = [row["lhs"] for row in rows]
    report.bound_trace = [row["rhs"] for row in rows]
    report.bound_holds = all(row["holds"] for row in rows)
    return rows
