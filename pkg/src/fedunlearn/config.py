"""Experiment configuration: TOML ingestion and validation.

One flat-table TOML file describes a full run: the task, the federation, the
attacks in each phase, the unlearning methods, and the seeds.  Validation
errors name the offending dotted key.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .aggregation import AGGREGATOR_KINDS
from .attacks import FL_ATTACKS, FU_ATTACKS, KNOWLEDGE
from .models import MODEL_KINDS
from .unlearn import UNLEARN_METHODS


class ConfigError(ValueError):
    """Configuration problem, reported with its dotted key."""


@dataclass
class ExperimentConfig:
    # task
    kind: str = "softmax_regression"
    classes: int = 10
    input_dim: int = 20
    train_per_class: int = 100
    test_per_class: int = 50
    spread: float = 1.0
    l2_lambda: float = 0.01
    probe_mu: float = 0.5
    probe_lipschitz: float = 2.0
    # federation
    clients: int = 20
    rounds: int = 300
    learning_rate: float = 0.05
    aggregator: str = "median"
    aggregator_param: int | None = None
    noniid_degree: float = 0.5
    fl_malicious_fraction: float = 0.2
    fu_malicious_fraction: float = 0.2
    # attacks
    fl_attack: str = "none"
    fu_attack: str = "none"
    knowledge: str = "full"
    trim_b: float = 2.0
    lie_z: float = 1.5
    backdoor_scale: float = 5.0
    trigger_value: float = 3.0
    trigger_coords: int = 3
    trigger_target: int = 0
    trigger_fraction: float = 0.3
    bad_unlearn_anchor: str = "learned_model"
    # unlearn
    methods: list[str] = field(default_factory=lambda: ["scratch"])
    detection: str = "perfect"
    detection_subset: list[int] = field(default_factory=list)
    buffer_rounds: int = 5
    lbfgs_memory: int = 2
    dir_filter_flipped: bool = False
    rescale_exact_dir: bool = True
    fedrecover_warmup: int = 20
    fedrecover_correction_every: int = 10
    fedrecover_final: int = 5
    fedrecover_tau_factor: float = 10.0
    verify_bound: bool = False
    # run
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    output_dir: str = "results"
    history_budget_mb: float = 256.0
    jobs: int = 1

    def validate(self) -> "ExperimentConfig":
        checks = [
            (self.kind in MODEL_KINDS, "task.kind", f"one of {MODEL_KINDS}"),
            (self.classes >= 2, "task.classes", ">= 2"),
            (self.input_dim >= 1, "task.input_dim", ">= 1"),
            (self.train_per_class >= 1, "task.train_per_class", ">= 1"),
            (self.test_per_class >= 1, "task.test_per_class", ">= 1"),
            (self.spread >= 0, "task.spread", ">= 0"),
            (self.l2_lambda >= 0, "task.l2_lambda", ">= 0"),
            (0 < self.probe_mu <= self.probe_lipschitz, "task.probe_mu",
             "0 < probe_mu <= probe_lipschitz"),
            (self.clients >= self.classes, "federation.clients",
             ">= task.classes (grouping partition)"),
            (self.rounds >= 1, "federation.rounds", ">= 1"),
            (self.learning_rate > 0, "federation.learning_rate", "> 0"),
            (self.aggregator in AGGREGATOR_KINDS, "federation.aggregator",
             f"one of {AGGREGATOR_KINDS}"),
            (1.0 / self.classes <= self.noniid_degree <= 1.0,
             "federation.noniid_degree", "in [1/classes, 1]"),
            (0 <= self.fl_malicious_fraction < 1, "federation.fl_malicious_fraction",
             "in [0, 1)"),
            (0 <= self.fu_malicious_fraction < 1, "federation.fu_malicious_fraction",
             "in [0, 1)"),
            (self.fl_attack in FL_ATTACKS, "attacks.fl", f"one of {FL_ATTACKS}"),
            (self.fu_attack in FU_ATTACKS, "attacks.fu", f"one of {FU_ATTACKS}"),
            (self.knowledge in KNOWLEDGE, "attacks.knowledge", f"one of {KNOWLEDGE}"),
            (self.bad_unlearn_anchor in ("learned_model", "pre_attack_aggregate"),
             "attacks.bad_unlearn_anchor", "learned_model or pre_attack_aggregate"),
            (all(m in UNLEARN_METHODS for m in self.methods), "unlearn.methods",
             f"subset of {UNLEARN_METHODS}"),
            (self.detection in ("perfect", "none", "subset"), "unlearn.detection",
             "perfect, none or subset"),
            (1 <= self.buffer_rounds, "unlearn.buffer_rounds", ">= 1"),
            (1 <= self.lbfgs_memory, "unlearn.lbfgs_memory", ">= 1"),
            (self.fedrecover_correction_every >= 1,
             "unlearn.fedrecover_correction_every", ">= 1"),
            (len(self.seeds) >= 1, "run.seeds", "non-empty"),
            (self.jobs >= 1, "run.jobs", ">= 1"),
        ]
        for ok, key, want in checks:
            if not ok:
                raise ConfigError(f"{key}: expected {want}")
        if self.verify_bound:
            if self.kind == "mlp2":
                raise ConfigError("unlearn.verify_bound: requires a convex task kind")
            if self.detection != "perfect" or self.fu_attack != "none":
                raise ConfigError("unlearn.verify_bound: requires detection=perfect "
                                  "and attacks.fu='none'")
        if self.aggregator == "trimmed_mean":
            k = self.effective_aggregator_param()
            if self.clients <= 2 * k:
                raise ConfigError("federation.aggregator_param: trimmed_mean needs n > 2k")
        return self

    def effective_aggregator_param(self) -> int:
        if self.aggregator_param is not None:
            return self.aggregator_param
        if self.aggregator == "fedavg" or self.aggregator == "median":
            return 0
        # Server-side tolerance default: 20% of the client count, rounded up.
        return math.ceil(0.2 * self.clients)

    def digest(self) -> str:
        payload = "\n".join(f"{k}={v!r}" for k, v in sorted(vars(self).items())
                            if k not in ("output_dir", "jobs", "history_budget_mb"))
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs).validate()


_SECTIONS = {
    "task": {"kind": "kind", "classes": "classes", "input_dim": "input_dim",
             "train_per_class": "train_per_class", "test_per_class": "test_per_class",
             "spread": "spread", "l2_lambda": "l2_lambda", "probe_mu": "probe_mu",
             "probe_lipschitz": "probe_lipschitz"},
    "federation": {"clients": "clients", "rounds": "rounds",
                   "learning_rate": "learning_rate", "aggregator": "aggregator",
                   "aggregator_param": "aggregator_param",
                   "noniid_degree": "noniid_degree",
                   "fl_malicious_fraction": "fl_malicious_fraction",
                   "fu_malicious_fraction": "fu_malicious_fraction"},
    "attacks": {"fl": "fl_attack", "fu": "fu_attack", "knowledge": "knowledge",
                "trim_b": "trim_b", "lie_z": "lie_z",
                "backdoor_scale": "backdoor_scale", "trigger_value": "trigger_value",
                "trigger_coords": "trigger_coords", "trigger_target": "trigger_target",
                "trigger_fraction": "trigger_fraction",
                "bad_unlearn_anchor": "bad_unlearn_anchor"},
    "unlearn": {"methods": "methods", "detection": "detection",
                "detection_subset": "detection_subset",
                "buffer_rounds": "buffer_rounds", "lbfgs_memory": "lbfgs_memory",
                "dir_filter_flipped": "dir_filter_flipped",
                "rescale_exact_dir": "rescale_exact_dir",
                "fedrecover_warmup": "fedrecover_warmup",
                "fedrecover_correction_every": "fedrecover_correction_every",
                "fedrecover_final": "fedrecover_final",
                "fedrecover_tau_factor": "fedrecover_tau_factor",
                "verify_bound": "verify_bound"},
    "run": {"seeds": "seeds", "output_dir": "output_dir",
            "history_budget_mb": "history_budget_mb", "jobs": "jobs"},
}


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment file."""
    with open(path, "rb") as f:
        try:
            doc = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(doc, source=path)


def config_from_dict(doc: dict, source: str = "<dict>") -> ExperimentConfig:
    kwargs = {}
    for section, keys in _SECTIONS.items():
        table = doc.get(section, {})
        if not isinstance(table, dict):
            raise ConfigError(f"{source}: [{section}] must be a table")
        for key, value in table.items():
            if key not in keys:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            kwargs[keys[key]] = value
    for section in doc:
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{source}: {e}") from e
    return cfg.validate()
