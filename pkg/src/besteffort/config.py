"""Structured run configuration: schema, validation, seed derivation.

One JSON file describes the whole system: cluster tiers, tasks and reward
matrix, training hyperparameters, and scenario knobs. Validation collects
every violation instead of stopping at the first. Environment variables
prefixed BESTEFFORT_ override keys, with double underscores separating the
path (e.g. BESTEFFORT_training__learning_rate=0.001).
"""

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

from besteffort.evalkit import STABLE_HOLD_SECONDS, STABLE_SWEEP_RATES, ScenarioConfig
from besteffort.policy import StateEncoding
from besteffort.reward import RewardSpec, TaskSpec
from besteffort.simcore import ModelTierSpec
from besteffort.trainer import TrainConfig

ENV_PREFIX = "BESTEFFORT_"

DEFAULT_CONFIG: dict = {
    "rng": "pcg64",
    "out_dir": "out",
    "cluster": {
        "gpu_count": 4,
        "tiers": [
            {"name": "small", "replicas": 4, "alpha_ms": 4.75, "beta_ms": 0.25,
             "max_batch": 128, "tokens_per_request": 100, "baseline_max_batch": 160},
            {"name": "medium", "replicas": 4, "alpha_ms": 8.0, "beta_ms": 1.2,
             "max_batch": 32, "tokens_per_request": 100, "baseline_max_batch": 48},
            {"name": "large", "replicas": 4, "alpha_ms": 28.0, "beta_ms": 4.0,
             "max_batch": 8, "tokens_per_request": 100, "baseline_max_batch": 12},
        ],
    },
    "rewards": {
        "tasks": [
            {"name": "hellaswag", "deadline_ms_per_token": 40.0, "kind": "hard"},
            {"name": "copa", "deadline_ms_per_token": 40.0, "kind": "hard"},
            {"name": "piqa", "deadline_ms_per_token": 40.0, "kind": "hard"},
            {"name": "openbookqa", "deadline_ms_per_token": 40.0, "kind": "hard"},
        ],
        "matrix": [
            [0.45, 0.78, 1.00],
            [0.80, 0.95, 1.00],
            [0.82, 0.96, 1.00],
            [0.70, 0.94, 1.00],
        ],
        "soft_decay_per_ms": 0.01,
        "soft_cutoff_fraction": 0.10,
    },
    "encoding": {"rate_scale": 48.0},
    "training": {
        "discount": 0.99,
        "learning_rate": 0.0001,
        "batch_size": 1024,
        "target_sync_every": 500,
        "total_iterations": 200_000,
        "fine_tune_iterations": 100_000,
        "fine_tune_epsilon_start": 0.25,
        "epsilon_start": 1.0,
        "epsilon_end": 0.05,
        "epsilon_decay_fraction": 0.25,
        "buffer_capacity": 500_000,
        "warmup": 10_000,
        "optimizer": "adam",
        "loss": "huber",
        "log_every": 10_000,
        "rate_low": 0.25,
        "rate_high": 48.0,
        "regime_cadence": "equal-time",
        "regime_mean_seconds": 20.0,
        "regime_mean_requests": 100.0,
        "estimator_mode": "true-rate",
        "prior_rate": 1.0,
    },
    "scenario": {
        "stable_rates": list(STABLE_SWEEP_RATES),
        "hold_seconds": STABLE_HOLD_SECONDS,
        "n_requests": 10_000,
    },
}


class ConfigError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def component_seed(global_seed: int, component: str) -> int:
    """Derive a component seed: first 8 bytes of sha256('<component>:<seed>')."""
    digest = hashlib.sha256(f"{component}:{global_seed}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


@dataclass
class AppConfig:
    data: dict
    warnings: list[str] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        return isinstance(other, AppConfig) and self.data == other.data

    @property
    def out_dir(self) -> str:
        return self.data["out_dir"]

    @property
    def gpu_count(self) -> int:
        return int(self.data["cluster"]["gpu_count"])

    @property
    def n_tasks(self) -> int:
        return len(self.data["rewards"]["tasks"])

    @property
    def n_tiers(self) -> int:
        return len(self.data["cluster"]["tiers"])

    def tiers(self, baseline: bool = False) -> list[ModelTierSpec]:
        """Cluster tier specs; `baseline` swaps in the whole-memory batch caps."""
        out = []
        for i, t in enumerate(self.data["cluster"]["tiers"]):
            max_batch = t["baseline_max_batch"] if baseline and "baseline_max_batch" in t \
                else t["max_batch"]
            out.append(ModelTierSpec(
                tier_id=i, replicas=int(t["replicas"]), alpha_ms=float(t["alpha_ms"]),
                beta_ms=float(t["beta_ms"]), max_batch=int(max_batch),
                tokens_per_request=int(t.get("tokens_per_request", 100)),
                name=t.get("name", f"tier{i}")))
        return out

    def reward_spec(self) -> RewardSpec:
        r = self.data["rewards"]
        tasks = tuple(TaskSpec(t["name"], float(t["deadline_ms_per_token"]),
                               t.get("kind", "hard")) for t in r["tasks"])
        matrix = tuple(tuple(float(v) for v in row) for row in r["matrix"])
        return RewardSpec(tasks=tasks, matrix=matrix,
                          decay_per_ms=float(r.get("soft_decay_per_ms", 0.01)),
                          cutoff_fraction=float(r.get("soft_cutoff_fraction", 0.10)))

    def encoding(self) -> StateEncoding:
        return StateEncoding(
            n_tasks=self.n_tasks,
            batch_scales=tuple(float(t["max_batch"]) for t in self.data["cluster"]["tiers"]),
            rate_scale=float(self.data["encoding"].get("rate_scale", 48.0)))

    def train_config(self, seed: int, total_iterations: Optional[int] = None) -> TrainConfig:
        t = self.data["training"]
        return TrainConfig(
            discount=float(t["discount"]), learning_rate=float(t["learning_rate"]),
            batch_size=int(t["batch_size"]), target_sync_every=int(t["target_sync_every"]),
            total_iterations=int(total_iterations if total_iterations is not None
                                 else t["total_iterations"]),
            epsilon_start=float(t["epsilon_start"]), epsilon_end=float(t["epsilon_end"]),
            epsilon_decay_fraction=float(t["epsilon_decay_fraction"]),
            buffer_capacity=int(t["buffer_capacity"]), warmup=int(t["warmup"]),
            optimizer=t["optimizer"], loss=t["loss"], seed=seed,
            log_every=int(t["log_every"]), rate_low=float(t["rate_low"]),
            rate_high=float(t["rate_high"]),
            regime_cadence=t["regime_cadence"],
            regime_mean_seconds=float(t["regime_mean_seconds"]),
            regime_mean_requests=float(t["regime_mean_requests"]),
            estimator_mode=t["estimator_mode"], prior_rate=float(t["prior_rate"]))

    @property
    def fine_tune_iterations(self) -> int:
        return int(self.data["training"].get("fine_tune_iterations", 100_000))

    @property
    def fine_tune_epsilon_start(self) -> float:
        return float(self.data["training"].get("fine_tune_epsilon_start", 0.25))

    def scenario(self, name: str) -> ScenarioConfig:
        """Scenario preset with this config's sweep/workload sizes applied."""
        from besteffort.evalkit import scenario_suite
        sc = scenario_suite(name)
        s = self.data["scenario"]
        return replace(sc, rates=tuple(float(r) for r in s["stable_rates"]),
                       hold_seconds=float(s["hold_seconds"]),
                       n_requests=int(s["n_requests"]))


def _apply_env_overrides(data: dict, env) -> None:
    for key, raw in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].split("__")
        node = data
        for part in path[:-1]:
            if not isinstance(node, dict) or part not in node:
                node = None
                break
            node = node[part]
        if node is None or not isinstance(node, dict):
            continue
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[path[-1]] = value


def _validate(data: dict) -> tuple[list[str], list[str]]:
    errors: list[str] = []
    warnings: list[str] = []

    for section in ("cluster", "rewards", "training", "scenario"):
        if section not in data:
            errors.append(f"missing section '{section}'")
    if errors:
        return errors, warnings

    tiers = data["cluster"].get("tiers", [])
    if not tiers:
        errors.append("cluster.tiers must be nonempty")
    for i, t in enumerate(tiers):
        if float(t.get("alpha_ms", 0)) <= 0:
            errors.append(f"tier {i}: alpha_ms must be positive")
        if float(t.get("beta_ms", 0)) < 0:
            errors.append(f"tier {i}: beta_ms must be nonnegative")
        if int(t.get("max_batch", 0)) < 1:
            errors.append(f"tier {i}: max_batch must be >= 1")
        if int(t.get("replicas", 0)) < 1:
            errors.append(f"tier {i}: replicas must be >= 1")
    if int(data["cluster"].get("gpu_count", 0)) < 1:
        errors.append("cluster.gpu_count must be >= 1")

    tasks = data["rewards"].get("tasks", [])
    matrix = data["rewards"].get("matrix", [])
    if not tasks:
        errors.append("rewards.tasks must be nonempty")
    for i, task in enumerate(tasks):
        if float(task.get("deadline_ms_per_token", 0)) <= 0:
            errors.append(f"task {i}: deadline_ms_per_token must be positive")
        if task.get("kind", "hard") not in ("hard", "soft"):
            errors.append(f"task {i}: kind must be 'hard' or 'soft'")
    if len(matrix) != len(tasks):
        errors.append(f"reward matrix has {len(matrix)} rows for {len(tasks)} tasks")
    for i, row in enumerate(matrix):
        if len(row) != len(tiers):
            errors.append(f"reward matrix row {i} has {len(row)} entries for "
                          f"{len(tiers)} tiers")
        if any(not 0.0 <= float(v) <= 1.0 for v in row):
            errors.append(f"reward matrix row {i} has entries outside [0, 1]")
        elif row and len(row) == len(tiers) and float(row[-1]) != 1.0:
            warnings.append(f"reward matrix row {i} is not normalized to the largest "
                            f"tier (last entry {row[-1]}, expected 1.0)")

    tr = data["training"]
    if not 0.0 < float(tr.get("discount", 0)) < 1.0:
        errors.append("training.discount must lie in (0, 1)")
    if int(tr.get("batch_size", 0)) > int(tr.get("buffer_capacity", 0)):
        errors.append("training.batch_size must not exceed buffer_capacity")
    if int(tr.get("batch_size", 0)) < 1:
        errors.append("training.batch_size must be >= 1")
    if float(tr.get("learning_rate", 0)) <= 0:
        errors.append("training.learning_rate must be positive")

    sc = data["scenario"]
    if not sc.get("stable_rates") or any(float(r) <= 0 for r in sc["stable_rates"]):
        errors.append("scenario.stable_rates must be nonempty and positive")
    if float(sc.get("hold_seconds", 0)) <= 0:
        errors.append("scenario.hold_seconds must be positive")
    if int(sc.get("n_requests", 0)) < 1:
        errors.append("scenario.n_requests must be >= 1")

    return errors, warnings


def parse_config(source=None, env=None) -> AppConfig:
    """Build a validated AppConfig from a path, a dict, or the defaults.

    Raises ConfigError carrying the full violation list. Missing keys fall
    back to the shipped defaults so partial configs stay usable.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        with open(source, "r", encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError([f"{source}: not valid JSON ({e})"])
        if not isinstance(raw, dict):
            raise ConfigError([f"{source}: top level must be a JSON object"])

    data = _merge(default_config(), raw)
    _apply_env_overrides(data, os.environ if env is None else env)
    errors, warnings = _validate(data)
    if errors:
        raise ConfigError(errors)
    return AppConfig(data=data, warnings=warnings)


def write_config(cfg: AppConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(cfg.data, f, indent=2, sort_keys=True)
        f.write("\n")


def _merge(base: dict, override: dict) -> dict:
    for key, value in override.items():
        if key in base and isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base
