"""Federated training loop, per-round history archive, and the detection oracle.

The server broadcasts the global model, every active client replies with an
update (malicious ones may substitute a crafted vector), the aggregation rule
reduces the replies, and the model steps by the learning rate.  Every round's
global model and received updates are archived so the unlearning phase can
replay and estimate from them.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregatorKind, aggregate
from .attacks import (
    AttackContext,
    AttackSpec,
    backdoor_update,
    bad_unlearn,
    lie_attack,
    trim_attack,
)
from .datasets import ClientShards, TriggerSpec, inject_trigger
from .models import ModelSpec, gradient, init_params
from .numerics import ParamVector
from .seeding import rng_for

HISTORY_MAGIC = b"FUHS"
HISTORY_VERSION = 1

# Default backdoor: stamp the last three feature coordinates, relabel to 0.
DEFAULT_TRIGGER_VALUE = 3.0
DEFAULT_TRIGGER_TARGET = 0
DEFAULT_TRIGGER_FRACTION = 0.3
DEFAULT_BACKDOOR_SCALE = 5.0


@dataclass
class Client:
    """Roster entry: who the client is and what it does in each phase."""

    id: int
    role: str = "benign"  # benign | malicious
    fl_attack: AttackSpec | None = None
    fu_attack: AttackSpec | None = None
    detected: bool = False

    def attack_for(self, phase: str) -> AttackSpec | None:
        spec = self.fl_attack if phase == "fl" else self.fu_attack
        if spec is not None and spec.kind == "none":
            return None
        return spec


def build_roster(n_clients: int, fl_fraction: float, fu_fraction: float,
                 fl_attack: AttackSpec | None, fu_attack: AttackSpec | None) -> list[Client]:
    """Fixed deterministic roster.

    The first floor(n * fl_fraction) clients attack during training; the next
    floor(remaining * fu_fraction) stay dormant through training and attack
    during unlearning.
    """
    n_fl = int(np.floor(n_clients * fl_fraction)) if fl_attack else 0
    n_fu = int(np.floor((n_clients - n_fl) * fu_fraction)) if fu_attack else 0
    roster = []
    for i in range(n_clients):
        if i < n_fl:
            roster.append(Client(i, "malicious", fl_attack=fl_attack))
        elif i < n_fl + n_fu:
            roster.append(Client(i, "malicious", fu_attack=fu_attack))
        else:
            roster.append(Client(i))
    return roster


# --------------------------------------------------------------------------
# History archive


@dataclass
class RoundRecord:
    round: int
    global_model: ParamVector
    client_updates: dict[int, ParamVector]


class HistoryStore:
    """Ordered archive of the training run: one record per round plus the
    final model.  Spills to an append-only file when the estimated footprint
    exceeds the memory budget; the record framing is a fixed little-endian
    header (round, n, d) followed by raw float64 payloads.
    """

    def __init__(self, dim: int, client_ids: list[int], rounds_hint: int = 0,
                 memory_budget_mb: float = 256.0, spill_path: str | None = None):
        self.dim = dim
        self.client_ids = sorted(client_ids)
        self._records: list[RoundRecord] = []
        self._final: ParamVector | None = None
        footprint_mb = rounds_hint * (len(client_ids) + 1) * dim * 8 / 1e6
        self._file = None
        self._offsets: list[int] = []
        if spill_path is not None and footprint_mb > memory_budget_mb:
            self._file = open(spill_path, "w+b")
            header = HISTORY_MAGIC + struct.pack("<IQQ", HISTORY_VERSION, dim,
                                                 len(self.client_ids))
            header += struct.pack(f"<{len(self.client_ids)}Q", *self.client_ids)
            self._file.write(header)

    @property
    def file_backed(self) -> bool:
        return self._file is not None

    @property
    def n_rounds(self) -> int:
        return len(self._records) if not self.file_backed else len(self._offsets)

    def append_round(self, t: int, model: ParamVector, updates: dict[int, ParamVector]) -> None:
        if t != self.n_rounds:
            raise ValueError(f"rounds must be appended contiguously (got {t})")
        if set(updates) != set(self.client_ids):
            raise ValueError("update set does not match the roster")
        if self.file_backed:
            self._offsets.append(self._file.seek(0, io.SEEK_END))
            buf = struct.pack("<QQQ", t, len(self.client_ids), self.dim)
            buf += np.ascontiguousarray(model, dtype="<f8").tobytes()
            for cid in self.client_ids:
                buf += np.ascontiguousarray(updates[cid], dtype="<f8").tobytes()
            self._file.write(buf)
        else:
            self._records.append(RoundRecord(t, model.copy(),
                                             {c: updates[c].copy() for c in self.client_ids}))

    def finalize(self, final_model: ParamVector) -> None:
        self._final = final_model.copy()
        if self.file_backed:
            self._file.seek(0, io.SEEK_END)
            self._file.write(struct.pack("<QQQ", self.n_rounds, 0, self.dim))
            self._file.write(np.ascontiguousarray(final_model, dtype="<f8").tobytes())
            self._file.flush()

    def _read_record(self, t: int) -> RoundRecord:
        self._file.seek(self._offsets[t])
        rnd, n, d = struct.unpack("<QQQ", self._file.read(24))
        model = np.frombuffer(self._file.read(8 * d), dtype="<f8").copy()
        updates = {}
        for cid in self.client_ids:
            updates[cid] = np.frombuffer(self._file.read(8 * d), dtype="<f8").copy()
        return RoundRecord(rnd, model, updates)

    def model(self, t: int) -> ParamVector:
        if t == self.n_rounds:
            if self._final is None:
                raise ValueError("history not finalized")
            return self._final
        if self.file_backed:
            return self._read_record(t).global_model
        return self._records[t].global_model

    def update(self, t: int, client_id: int) -> ParamVector:
        if self.file_backed:
            return self._read_record(t).client_updates[client_id]
        return self._records[t].client_updates[client_id]

    def updates(self, t: int) -> dict[int, ParamVector]:
        if self.file_backed:
            return self._read_record(t).client_updates
        return self._records[t].client_updates

    def to_file(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(HISTORY_MAGIC + struct.pack("<IQQ", HISTORY_VERSION, self.dim,
                                                len(self.client_ids)))
            f.write(struct.pack(f"<{len(self.client_ids)}Q", *self.client_ids))
            for t in range(self.n_rounds):
                ups = self.updates(t)
                f.write(struct.pack("<QQQ", t, len(self.client_ids), self.dim))
                f.write(np.ascontiguousarray(self.model(t), dtype="<f8").tobytes())
                for cid in self.client_ids:
                    f.write(np.ascontiguousarray(ups[cid], dtype="<f8").tobytes())
            f.write(struct.pack("<QQQ", self.n_rounds, 0, self.dim))
            f.write(np.ascontiguousarray(self.model(self.n_rounds), dtype="<f8").tobytes())

    @classmethod
    def from_file(cls, path: str) -> "HistoryStore":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != HISTORY_MAGIC:
            raise ValueError(f"{path}: not a history file")
        version, dim, n = struct.unpack("<IQQ", raw[4:24])
        if version != HISTORY_VERSION:
            raise ValueError(f"unsupported history version {version}")
        off = 24
        ids = list(struct.unpack(f"<{n}Q", raw[off:off + 8 * n]))
        off += 8 * n
        store = cls(dim, ids)
        while off < len(raw):
            rnd, n_rec, d = struct.unpack("<QQQ", raw[off:off + 24])
            off += 24
            model = np.frombuffer(raw, dtype="<f8", count=d, offset=off).copy()
            off += 8 * d
            if n_rec == 0:
                store._final = model
                break
            updates = {}
            for cid in ids:
                updates[cid] = np.frombuffer(raw, dtype="<f8", count=d, offset=off).copy()
                off += 8 * d
            store._records.append(RoundRecord(rnd, model, updates))
        return store


# --------------------------------------------------------------------------
# Round orchestration


@dataclass
class FederationRun:
    """Everything one training (or unlearning-phase) loop needs."""

    spec: ModelSpec
    shards: ClientShards
    roster: list[Client]
    arr: AggregatorKind
    eta: float
    rounds: int
    seed: int
    phase: str = "fl"
    active: list[int] | None = None
    learned_model: ParamVector | None = None
    eps_grid: tuple[float, ...] | None = None
    bad_unlearn_anchor: str = "learned_model"  # or "pre_attack_aggregate"

    def active_ids(self) -> list[int]:
        if self.active is not None:
            return sorted(self.active)
        return sorted(c.id for c in self.roster)

    def client(self, cid: int) -> Client:
        for c in self.roster:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def fedavg_weights(self, active: list[int]) -> list[float]:
        return [float(f) for f in self.shards.weights(active)]


def _poisoned_shards(run: FederationRun) -> dict[int, object]:
    """Trigger-injected shards for clients running a backdoor in this phase."""
    out = {}
    for c in run.roster:
        spec = c.attack_for(run.phase)
        if spec is not None and spec.kind == "backdoor":
            trig = spec.params.get("trigger", _default_trigger(run))
            out[c.id] = inject_trigger(run.shards.shards[c.id], trig,
                                       seed=int(rng_for(run.seed, "trigger", c.id).integers(2 ** 32)))
    return out


def _default_trigger(run: FederationRun) -> TriggerSpec:
    dim = run.shards.shards[0].dim
    coords = tuple(range(max(dim - 3, 0), dim))
    return TriggerSpec(coords, DEFAULT_TRIGGER_VALUE, DEFAULT_TRIGGER_TARGET,
                       DEFAULT_TRIGGER_FRACTION)


def craft_updates(run: FederationRun, w: ParamVector, honest: dict[int, ParamVector],
                  asked: list[int], t: int,
                  poisoned: dict | None = None,
                  filter_windows: dict[int, list[ParamVector]] | None = None,
                  filter_variant: str | None = None) -> dict[int, ParamVector]:
    """Replies for the asked clients: honest gradients, or attack substitutes.

    ``honest`` must contain gradients for every asked client.  Attackers of
    the same kind are crafted together from one context.  The adaptive attack
    projects into the filter-feasible region when the caller supplies this
    round's windows; without filter state it degenerates to its unprojected
    target.
    """
    replies = {i: honest[i] for i in asked}
    attackers: dict[str, list[int]] = {}
    for i in asked:
        spec = run.client(i).attack_for(run.phase)
        if spec is not None:
            attackers.setdefault(spec.kind, []).append(i)

    for kind in sorted(attackers):
        ids = sorted(attackers[kind])
        spec = run.client(ids[0]).attack_for(run.phase)
        ctx = _context(run, honest, ids, spec)
        if kind == "trim":
            outs = trim_attack(ctx, rng_for(run.seed, "trim", run.phase, t),
                               b=spec.params.get("b", 2.0))
        elif kind == "lie":
            outs = lie_attack(ctx, z=spec.params.get("z", 1.5))
        elif kind == "backdoor":
            scale = spec.params.get("scale", DEFAULT_BACKDOOR_SCALE)
            outs = [backdoor_update(honest[i], gradient(run.spec, w, poisoned[i]), scale)
                    for i in ids]
        elif kind == "bad_unlearn":
            outs = bad_unlearn(ctx, run.eps_grid or _default_grid(),
                               anchor=_anchor(run, ctx))
        elif kind == "adaptive":
            if filter_windows is None or filter_variant is None:
                outs = bad_unlearn(ctx, run.eps_grid or _default_grid(),
                                   anchor=_anchor(run, ctx))
            else:
                from .attacks import adaptive_attack
                outs = adaptive_attack(ctx, {i: filter_windows[i] for i in ids},
                                       filter_variant, run.eps_grid or _default_grid())
        else:
            raise ValueError(f"unhandled attack kind {kind!r}")
        for i, u in zip(ids, outs):
            replies[i] = u
    return replies


def _default_grid() -> tuple[float, ...]:
    from .attacks import DEFAULT_EPS_GRID
    return DEFAULT_EPS_GRID


def _anchor(run: FederationRun, ctx: AttackContext) -> ParamVector | None:
    if run.bad_unlearn_anchor == "pre_attack_aggregate" and ctx.benign_updates:
        return aggregate(ctx.effective_arr(), ctx.benign_updates)
    return ctx.learned_model


def _context(run: FederationRun, honest: dict[int, ParamVector], ids: list[int],
             spec: AttackSpec) -> AttackContext:
    if spec.knowledge == "full":
        visible = [honest[i] for i in sorted(honest)
                   if run.client(i).attack_for(run.phase) is None]
    else:
        visible = [honest[i] for i in ids if i in honest]
    return AttackContext(benign_updates=visible, malicious_ids=ids, arr=run.arr,
                         knowledge=spec.knowledge, learned_model=run.learned_model)


def exact_round_step(run: FederationRun, w: ParamVector, t: int, active: list[int],
                     weights: list[float], poisoned: dict) -> tuple[ParamVector, dict]:
    """One fully-exact round: gradients, attack substitution, aggregate, step."""
    honest = {i: gradient(run.spec, w, run.shards.shards[i]) for i in active}
    final = craft_updates(run, w, honest, active, t, poisoned)
    agg = aggregate(run.arr, [final[i] for i in active], weights)
    return w - run.eta * agg, final


def run_fl(run: FederationRun, init: ParamVector | None = None,
           history_budget_mb: float = 256.0,
           spill_path: str | None = None) -> tuple[ParamVector, HistoryStore]:
    """Run the federation for ``run.rounds`` rounds and archive every round."""
    active = run.active_ids()
    if not active:
        raise ValueError("no active clients")
    weights = run.fedavg_weights(active) if run.arr.kind == "fedavg" else None
    w = init.copy() if init is not None else init_params(
        run.spec, rng_for(run.seed, "init", run.phase))
    poisoned = _poisoned_shards(run)
    history = HistoryStore(run.spec.n_params, active, rounds_hint=run.rounds,
                           memory_budget_mb=history_budget_mb, spill_path=spill_path)
    for t in range(run.rounds):
        w_next, final = exact_round_step(run, w, t, active, weights, poisoned)
        history.append_round(t, w, final)
        w = w_next
    history.finalize(w)
    return w, history


def detection_oracle(roster: list[Client], mode: str,
                     subset_ids: list[int] | None = None) -> set[int]:
    """Which clients the experiment removes before unlearning.

    perfect: every client that attacked during training (dormant
    unlearning-phase attackers are not included).  subset: the given ids.
    none: nobody.
    """
    if mode == "perfect":
        return {c.id for c in roster if c.attack_for("fl") is not None}
    if mode == "none":
        return set()
    if mode == "subset":
        known = {c.id for c in roster}
        ids = set(subset_ids or [])
        if not ids <= known:
            raise ValueError(f"unknown client ids in subset: {sorted(ids - known)}")
        return ids
    raise ValueError(f"unknown detection mode {mode!r}")
