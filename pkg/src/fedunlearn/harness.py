"""Experiment driver: run configs, persist rows and reports, render tables.

One experiment cell is (config, seed).  A cell runs the training phase, the
detection oracle, and every requested unlearning method, producing one result
row per method plus a row for the learned (possibly poisoned) model.  Cells
are deterministic, so re-running a config rewrites byte-identical CSV and
JSON artifacts; wall-clock timings go to a separate non-deterministic file.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .aggregation import AggregatorKind
from .attacks import AttackSpec
from .config import ExperimentConfig
from .datasets import LabeledDataset, TriggerSpec, generate_synthetic, partition_noniid, trigger_eval_set
from .fl import FederationRun, build_roster, detection_oracle, run_fl
from .models import ConvexityProfile, ModelSpec, convexity_profile, test_error_rate
from .seeding import rng_for
from .unlearn import (
    UnlearnReport,
    UnlearnSetting,
    fedrecover_baseline,
    historical_only,
    theorem_bound,
    train_from_scratch,
    unlearnguard,
)

CSV_HEADER = ["config", "seed", "method", "arr", "fl_attack", "fu_attack",
              "knowledge", "ter", "asr", "bound_holds"]

AXES = {"noniid_q": "noniid_degree",
        "malicious_fraction": "fu_malicious_fraction",
        "buffer_r": "buffer_rounds"}


@dataclass
class ResultRow:
    config: str
    seed: int
    method: str
    arr: str
    fl_attack: str
    fu_attack: str
    knowledge: str
    ter: float
    asr: float | None = None
    bound_holds: bool | None = None

    def as_csv(self) -> list[str]:
        return [self.config, str(self.seed), self.method, self.arr,
                self.fl_attack, self.fu_attack, self.knowledge,
                f"{self.ter:.4f}",
                "" if self.asr is None else f"{self.asr:.4f}",
                "" if self.bound_holds is None else str(self.bound_holds).lower()]


def make_task_data(cfg: ExperimentConfig, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """One pooled draw split per class block into train and held-out test."""
    per = cfg.train_per_class + cfg.test_per_class
    pool = generate_synthetic(cfg.classes, cfg.input_dim, per, cfg.spread,
                              seed=int(rng_for(seed, "data").integers(2 ** 32)))
    tr_idx, te_idx = [], []
    for c in range(cfg.classes):
        lo = c * per
        tr_idx.extend(range(lo, lo + cfg.train_per_class))
        te_idx.extend(range(lo + cfg.train_per_class, lo + per))
    train = LabeledDataset(pool.features[tr_idx], pool.labels[tr_idx], cfg.classes)
    test = LabeledDataset(pool.features[te_idx], pool.labels[te_idx], cfg.classes)
    return train, test


def model_spec_for(cfg: ExperimentConfig) -> ModelSpec:
    if cfg.kind == "quadratic_probe":
        diag = tuple(np.linspace(cfg.probe_mu, cfg.probe_lipschitz, cfg.input_dim))
        return ModelSpec(kind=cfg.kind, dims=[cfg.input_dim], probe_hessian=diag)
    return ModelSpec(kind=cfg.kind, dims=[cfg.input_dim, cfg.classes],
                     l2_lambda=cfg.l2_lambda)


def trigger_for(cfg: ExperimentConfig) -> TriggerSpec | None:
    if "backdoor" not in (cfg.fl_attack, cfg.fu_attack):
        return None
    coords = tuple(range(max(cfg.input_dim - cfg.trigger_coords, 0), cfg.input_dim))
    return TriggerSpec(coords, cfg.trigger_value, cfg.trigger_target,
                       cfg.trigger_fraction)


def _attack_spec(cfg: ExperimentConfig, phase: str) -> AttackSpec | None:
    kind = cfg.fl_attack if phase == "fl" else cfg.fu_attack
    if kind == "none":
        return None
    params: dict = {}
    if kind == "trim":
        params["b"] = cfg.trim_b
    elif kind == "lie":
        params["z"] = cfg.lie_z
    elif kind == "backdoor":
        params["scale"] = cfg.backdoor_scale
        params["trigger"] = trigger_for(cfg)
    return AttackSpec(kind, phase, knowledge=cfg.knowledge, params=params)


def _setting(cfg: ExperimentConfig) -> UnlearnSetting:
    return UnlearnSetting(
        r=cfg.buffer_rounds, s=cfg.lbfgs_memory,
        dir_filter_flipped=cfg.dir_filter_flipped,
        rescale_exact_dir=cfg.rescale_exact_dir,
        fr_warmup=cfg.fedrecover_warmup,
        fr_correction_every=cfg.fedrecover_correction_every,
        fr_final=cfg.fedrecover_final,
        fr_tau_factor=cfg.fedrecover_tau_factor,
        measure_m=cfg.verify_bound,
        detection_mode=cfg.detection)


def build_cell(cfg: ExperimentConfig, seed: int):
    """Training phase of one cell: world construction plus the learned model."""
    train, test = make_task_data(cfg, seed)
    shards = partition_noniid(train, cfg.clients, cfg.noniid_degree,
                              seed=int(rng_for(seed, "partition").integers(2 ** 32)))
    roster = build_roster(cfg.clients, cfg.fl_malicious_fraction,
                          cfg.fu_malicious_fraction,
                          _attack_spec(cfg, "fl"), _attack_spec(cfg, "fu"))
    arr = AggregatorKind(cfg.aggregator, cfg.effective_aggregator_param())
    run = FederationRun(spec=model_spec_for(cfg), shards=shards, roster=roster,
                        arr=arr, eta=cfg.learning_rate, rounds=cfg.rounds,
                        seed=seed, bad_unlearn_anchor=cfg.bad_unlearn_anchor)
    learned, history = run_fl(run, history_budget_mb=cfg.history_budget_mb)
    run.learned_model = learned
    removed = detection_oracle(roster, cfg.detection,
                               cfg.detection_subset or None)
    return run, learned, history, removed, test


def _metrics(cfg: ExperimentConfig, run: FederationRun, model, test: LabeledDataset):
    if cfg.kind == "quadratic_probe":
        return float("nan"), None
    ter = test_error_rate(run.spec, model, test)
    trig = trigger_for(cfg)
    if trig is None:
        return ter, None
    asr = 1.0 - test_error_rate(run.spec, model, trigger_eval_set(test, trig))
    return ter, asr


def run_cell(cfg: ExperimentConfig, seed: int):
    """Execute one (config, seed) cell: rows, reports, timings."""
    digest = cfg.digest()
    rows: list[ResultRow] = []
    reports: dict[str, str] = {}
    timings: list[tuple[str, float]] = []

    t0 = time.perf_counter()
    run, learned, history, removed, test = build_cell(cfg, seed)
    timings.append(("fl", time.perf_counter() - t0))

    def add_row(method: str, model, bound=None):
        ter, asr = _metrics(cfg, run, model, test)
        rows.append(ResultRow(digest, seed, method, cfg.aggregator, cfg.fl_attack,
                              cfg.fu_attack, cfg.knowledge, ter, asr, bound))
        return ter, asr

    add_row("learned", learned)
    setting = _setting(cfg)
    remaining = [i for i in history.client_ids if i not in removed]
    weights = (run.fedavg_weights(remaining) if cfg.aggregator == "fedavg" else None)

    scratch_history = None
    if "scratch" in cfg.methods or cfg.verify_bound:
        t0 = time.perf_counter()
        scratch_model, scratch_history = train_from_scratch(
            run, removed, return_history=True)
        timings.append(("scratch", time.perf_counter() - t0))
        if "scratch" in cfg.methods:
            add_row("scratch", scratch_model)

    if "historical" in cfg.methods:
        t0 = time.perf_counter()
        model = historical_only(history, removed, run.arr, run.eta, weights)
        timings.append(("historical", time.perf_counter() - t0))
        add_row("historical", model)

    profile = None
    scratch_trace = None
    if cfg.verify_bound:
        profile = convexity_profile(run.spec, _union_remaining(run, remaining))
        scratch_trace = [scratch_history.model(t) for t in range(cfg.rounds + 1)]

    engine_methods = [m for m in cfg.methods
                      if m in ("fedrecover", "unlearnguard_dist", "unlearnguard_dir")]
    for method in engine_methods:
        t0 = time.perf_counter()
        if method == "fedrecover":
            report = fedrecover_baseline(history, run, removed, setting)
        else:
            report = unlearnguard(history, run, removed, setting, method.split("_")[-1])
        timings.append((method, time.perf_counter() - t0))
        bound = None
        if cfg.verify_bound and method.startswith("unlearnguard"):
            prof = ConvexityProfile(profile.mu, profile.lipschitz_l, report.measured_m)
            theorem_bound(report, prof, cfg.learning_rate, scratch_trace)
            bound = report.bound_holds
        ter, asr = add_row(method, report.unlearned_model, bound)
        report.final_ter, report.final_asr = ter, asr
        report.config_echo = _echo(cfg, seed)
        reports[f"{digest}_{seed}_{method}.json"] = report.to_json()

    return rows, reports, timings


def _union_remaining(run: FederationRun, remaining: list[int]) -> LabeledDataset:
    feats = np.vstack([run.shards.shards[i].features for i in remaining])
    labels = np.concatenate([run.shards.shards[i].labels for i in remaining])
    return LabeledDataset(feats, labels, run.shards.shards[0].n_classes)


def _echo(cfg: ExperimentConfig, seed: int) -> dict:
    doc = {k: v for k, v in sorted(vars(cfg).items())}
    doc["cell_seed"] = seed
    return doc


def _cell_task(args):
    cfg, seed = args
    return seed, run_cell(cfg, seed)


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> list[ResultRow]:
    """Run every seed of a config and persist results under the output root."""
    out = resolve_out_dir(cfg, out_dir)
    os.makedirs(out, exist_ok=True)
    os.makedirs(os.path.join(out, "reports"), exist_ok=True)

    cells: dict[int, tuple] = {}
    if cfg.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for seed, cell in pool.map(_cell_task, [(cfg, s) for s in cfg.seeds]):
                cells[seed] = cell
    else:
        for seed in cfg.seeds:
            cells[seed] = run_cell(cfg, seed)

    all_rows: list[ResultRow] = []
    timing_lines = []
    for seed in sorted(cells):
        rows, reports, timings = cells[seed]
        all_rows.extend(rows)
        for name in sorted(reports):
            with open(os.path.join(out, "reports", name), "w") as f:
                f.write(reports[name])
        timing_lines.extend((cfg.digest(), seed, step, sec) for step, sec in timings)

    all_rows.sort(key=lambda r: (r.config, r.seed, r.method))
    write_rows(os.path.join(out, "results.csv"), all_rows)
    with open(os.path.join(out, "timings.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "seed", "step", "seconds"])
        for digest, seed, step, sec in timing_lines:
            w.writerow([digest, seed, step, f"{sec:.3f}"])
    return all_rows


def resolve_out_dir(cfg: ExperimentConfig, out_dir: str | None) -> str:
    out = out_dir or cfg.output_dir
    root = os.environ.get("FEDUNLEARN_OUTPUT_ROOT")
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return out


def write_rows(path: str, rows: list[ResultRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow(row.as_csv())


def read_rows(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------------------
# Tables


_ARR_ORDER = ["fedavg", "median", "trimmed_mean", "krum", "bulyan"]
_ATTACK_ORDER = ["none", "trim", "backdoor", "lie", "bad_unlearn", "adaptive"]
_METHOD_ORDER = ["learned", "scratch", "historical", "fedrecover",
                 "unlearnguard_dist", "unlearnguard_dir"]


def _ordered(values, order):
    known = [v for v in order if v in values]
    return known + sorted(set(values) - set(order))


def _cell_value(rows: list[dict], show_asr: bool) -> str:
    if not rows:
        return "—"
    ter = np.mean([float(r["ter"]) for r in rows])
    if show_asr and all(r["asr"] for r in rows):
        asr = np.mean([float(r["asr"]) for r in rows])
        return f"{ter:.4f} / {asr:.4f}"
    return f"{ter:.4f}"


def _grid_text(title, row_labels, col_labels, cells) -> str:
    width = max([len(c) for c in col_labels]
                + [len(x) for row in cells for x in row] + [6])
    label_w = max(len(r) for r in row_labels) + 2
    lines = [title]
    lines.append(" " * label_w + " | ".join(c.ljust(width) for c in col_labels))
    for label, row in zip(row_labels, cells):
        lines.append(label.ljust(label_w) + " | ".join(x.ljust(width) for x in row))
    return "\n".join(lines) + "\n"


def _grid_csv(row_key, row_labels, col_labels, cells) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow([row_key] + col_labels)
    for label, row in zip(row_labels, cells):
        w.writerow([label] + row)
    return buf.getvalue()


def emit_table(rows: list[dict], template: str) -> tuple[str, str]:
    """Render rows into one of the canonical grids; returns (text, csv)."""
    if template == "t1":
        sel = [r for r in rows if r["method"] == "learned"]
        fl = _ordered({r["fl_attack"] for r in sel}, _ATTACK_ORDER)
        arrs = _ordered({r["arr"] for r in sel}, _ARR_ORDER)
        cells = [[_cell_value([r for r in sel if r["fl_attack"] == a and r["arr"] == c],
                              show_asr=(a == "backdoor")) for c in arrs] for a in fl]
        return (_grid_text("Learned-model error by training-phase attack", fl, arrs, cells),
                _grid_csv("fl_attack", fl, arrs, cells))

    if template == "t2":
        methods = ["scratch", "historical"]
        sel = [r for r in rows if r["method"] in methods]
        keys = _ordered({(r["fl_attack"], r["arr"]) for r in sel},
                        [(a, c) for a in _ATTACK_ORDER for c in _ARR_ORDER])
        labels = [f"{a}/{c}" for a, c in keys]
        cells = [[_cell_value([r for r in sel if (r["fl_attack"], r["arr"]) == k
                               and r["method"] == m], show_asr=(k[0] == "backdoor"))
                  for m in methods] for k in keys]
        return (_grid_text("Retraining vs stored-update replay", labels, methods, cells),
                _grid_csv("fl_attack/arr", labels, methods, cells))

    if template == "t3":
        methods = ["fedrecover", "unlearnguard_dist", "unlearnguard_dir"]
        sel = [r for r in rows if r["method"] in methods]
        keys = _ordered({(r["fl_attack"], r["fu_attack"], r["arr"]) for r in sel},
                        [(a, b, c) for a in _ATTACK_ORDER for b in _ATTACK_ORDER
                         for c in _ARR_ORDER])
        labels = [f"{a}/{b}/{c}" for a, b, c in keys]
        cells = [[_cell_value([r for r in sel
                               if (r["fl_attack"], r["fu_attack"], r["arr"]) == k
                               and r["method"] == m], show_asr=("backdoor" in k))
                  for m in methods] for k in keys]
        return (_grid_text("Unlearning methods under both-phase attacks",
                           labels, methods, cells),
                _grid_csv("fl/fu/arr", labels, methods, cells))

    if template == "t4":
        methods = ["fedrecover", "unlearnguard_dist", "unlearnguard_dir"]
        settings = ["partial", "black_box"]
        sel = [r for r in rows if r["method"] in methods]
        arrs = _ordered({r["arr"] for r in sel}, _ARR_ORDER)
        cols = [f"{k}:{m}" for k in settings for m in methods]
        cells = [[_cell_value([r for r in sel if r["arr"] == a
                               and r["knowledge"] == k and r["method"] == m], False)
                  for k in settings for m in methods] for a in arrs]
        return (_grid_text("Reduced-knowledge attacks", arrs, cols, cells),
                _grid_csv("arr", arrs, cols, cells))

    if template == "ablation":
        # Input rows come from the sweep plot CSV: axis,value,method,ter.
        values = _ordered({r["value"] for r in rows}, [])
        methods = _ordered({r["method"] for r in rows}, _METHOD_ORDER)
        cells = [[next((f'{float(r["ter"]):.4f}' for r in rows
                        if r["value"] == v and r["method"] == m), "—")
                  for m in methods] for v in values]
        axis = rows[0]["axis"] if rows else "value"
        return (_grid_text(f"Ablation over {axis}", values, methods, cells),
                _grid_csv(axis, values, methods, cells))

    raise ValueError(f"unknown table template {template!r}")


# --------------------------------------------------------------------------
# Ablation sweeps


def ablation_sweep(cfg: ExperimentConfig, axis: str, values: list,
                   out_dir: str | None = None) -> list[dict]:
    """One experiment per axis value; emits plot-ready CSV (value, method, TER)."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}")
    if not values:
        raise ValueError("sweep values must be non-empty")
    out = resolve_out_dir(cfg, out_dir)
    os.makedirs(out, exist_ok=True)

    field = AXES[axis]
    plot_rows: list[dict] = []
    all_rows: list[ResultRow] = []
    for value in values:
        typed = int(value) if field == "buffer_rounds" else float(value)
        sub = cfg.with_overrides(**{field: typed, "output_dir":
                                    os.path.join(out, f"{axis}_{value}")})
        rows = run_experiment(sub)
        all_rows.extend(rows)
        by_method: dict[str, list[float]] = {}
        for r in rows:
            by_method.setdefault(r.method, []).append(r.ter)
        for method in sorted(by_method):
            plot_rows.append({"axis": axis, "value": str(value), "method": method,
                              "ter": f"{np.mean(by_method[method]):.4f}"})

    with open(os.path.join(out, f"sweep_{axis}.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["axis", "value", "method", "ter"])
        w.writeheader()
        w.writerows(plot_rows)
    return plot_rows
