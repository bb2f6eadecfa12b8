"""Policy and baseline evaluation: replay, metrics, and scenario presets.

Every run produces one record per trace event: the chosen tier, the realized
per-token latency, and the earned reward. Metrics mirror the reporting used
throughout the evaluation: running and trailing-20 averages, counts of
windows above performance thresholds, tier-selection distributions and their
Riemann sums over the rate sweep, and per-GPU utility.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from besteffort.policy import QNetwork, RouterState, StateEncoding, encode
from besteffort.reward import RewardSpec, request_reward
from besteffort.simcore import ClusterSim, ModelTierSpec, Request
from besteffort.workload import (
    RateEstimator,
    WorkloadTrace,
    estimate_rate,
    gen_stable,
    gen_unpredictable_request_based,
    gen_unpredictable_time_based,
)

WINDOW = 20
STABLE_SWEEP_RATES = (0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0,
                      24.0, 32.0, 40.0, 48.0)
STABLE_HOLD_SECONDS = 40.0
THRESHOLDS = (1.00, 0.99, 0.98, 0.96, 0.94)

METRICS_HEADER = "request_index,arrival_ms,task_id,tier_id,reward,realized_ms_per_token,segment_rate"


@dataclass
class RequestRecord:
    index: int
    arrival_ms: float
    task_id: int
    tier_id: int
    reward: float
    realized_ms_per_token: float
    segment_rate: float


@dataclass
class EvalRun:
    records: list[RequestRecord]
    policy_id: str
    gpu_count: int
    seed: int

    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records])

    def rates(self) -> np.ndarray:
        return np.array([r.segment_rate for r in self.records])

    def miss_fractions_by_rate(self, spec: RewardSpec) -> dict[float, float]:
        """Fraction of requests past their task deadline, grouped by segment rate."""
        missed: dict[float, list[int]] = {}
        for r in self.records:
            deadline = spec.tasks[r.task_id].deadline_ms_per_token
            missed.setdefault(r.segment_rate, []).append(
                1 if r.realized_ms_per_token > deadline else 0)
        return {rate: float(np.mean(v)) for rate, v in missed.items()}

    def mean_reward_by_rate(self) -> dict[float, float]:
        by_rate: dict[float, list[float]] = {}
        for r in self.records:
            by_rate.setdefault(r.segment_rate, []).append(r.reward)
        return {rate: float(np.mean(v)) for rate, v in by_rate.items()}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    workload: str = "stable"  # stable | unpredictable-time | unpredictable-request
    rates: tuple[float, ...] = STABLE_SWEEP_RATES
    hold_seconds: float = STABLE_HOLD_SECONDS
    n_requests: int = 10_000
    task_ids: Optional[tuple[int, ...]] = None
    estimator_mode: str = "estimated"
    reset_between_segments: bool = False
    reward_kind: Optional[str] = None          # override every task's deadline kind
    deadline_overrides: tuple[tuple[str, float], ...] = ()
    replicas: Optional[int] = None             # override replica count per tier
    gpu_count: Optional[int] = None

    def adjust_rewards(self, spec: RewardSpec) -> RewardSpec:
        if self.reward_kind is not None:
            spec = spec.with_kind(self.reward_kind)
        if self.deadline_overrides:
            spec = spec.with_deadlines(dict(self.deadline_overrides))
        return spec

    def adjust_tiers(self, tiers: Sequence[ModelTierSpec]) -> list[ModelTierSpec]:
        if self.replicas is None:
            return list(tiers)
        return [replace(t, replicas=self.replicas) for t in tiers]


_SCENARIOS = {
    "stable": ScenarioConfig(
        name="stable", workload="stable", estimator_mode="true-rate",
        reset_between_segments=True),
    "unpredictable-1": ScenarioConfig(
        name="unpredictable-1", workload="unpredictable-time"),
    "unpredictable-2": ScenarioConfig(
        name="unpredictable-2", workload="unpredictable-request"),
    "hellaswag-copa-soft": ScenarioConfig(
        name="hellaswag-copa-soft", workload="unpredictable-time",
        task_ids=(0, 1), reward_kind="soft"),
    "different-deadlines": ScenarioConfig(
        name="different-deadlines", workload="stable", estimator_mode="true-rate",
        reset_between_segments=True,
        deadline_overrides=(("openbookqa", 80.0), ("copa", 32.0))),
    "hw-utility-8gpu": ScenarioConfig(
        name="hw-utility-8gpu", workload="unpredictable-time",
        replicas=8, gpu_count=8),
}
for _k in range(4):
    _SCENARIOS[f"single-task-{_k}"] = ScenarioConfig(
        name=f"single-task-{_k}", workload="stable", estimator_mode="true-rate",
        reset_between_segments=True, task_ids=(_k,))


def scenario_names() -> list[str]:
    return sorted(_SCENARIOS)


def scenario_suite(name: str) -> ScenarioConfig:
    try:
        return _SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; known: {', '.join(scenario_names())}")


def make_trace(scenario: ScenarioConfig, n_tasks: int, seed: int) -> WorkloadTrace:
    if scenario.workload == "stable":
        return gen_stable(scenario.rates, scenario.hold_seconds, n_tasks, seed,
                          task_ids=scenario.task_ids)
    if scenario.workload == "unpredictable-time":
        return gen_unpredictable_time_based(scenario.n_requests, n_tasks, seed,
                                            task_ids=scenario.task_ids)
    if scenario.workload == "unpredictable-request":
        return gen_unpredictable_request_based(scenario.n_requests, n_tasks, seed,
                                               task_ids=scenario.task_ids)
    raise ValueError(f"unknown workload kind {scenario.workload!r}")


def run_eval(policy: Union[QNetwork, int], trace: WorkloadTrace,
             tiers: Sequence[ModelTierSpec], reward_spec: RewardSpec,
             encoding: Optional[StateEncoding] = None, seed: int = 0, *,
             gpu_count: int = 4, estimator_mode: str = "estimated",
             prior_rate: float = 1.0, reset_between_segments: bool = False,
             policy_id: Optional[str] = None) -> EvalRun:
    """Replay a trace, routing greedily (policy) or to a fixed tier (baseline)."""
    static_tier = policy if isinstance(policy, int) else None
    if static_tier is not None and not 0 <= static_tier < len(tiers):
        raise ValueError(f"static tier {static_tier} out of range")
    if static_tier is None and encoding is None:
        encoding = StateEncoding(n_tasks=reward_spec.n_tasks,
                                 batch_scales=tuple(float(t.max_batch) for t in tiers))
    if policy_id is None:
        policy_id = f"static:{static_tier}" if static_tier is not None else "policy"

    sim = ClusterSim(tiers)
    estimator = RateEstimator(estimator_mode, prior_rate)
    event_rates = trace.event_rates()
    boundary_iter = iter(m.start_index for m in trace.segment_marks)
    next_boundary = next(boundary_iter, None)
    records: list[Optional[RequestRecord]] = [None] * len(trace.events)
    open_requests: dict[int, int] = {}  # request id -> tier chosen

    def finalize(req: Request) -> None:
        tier = open_requests.pop(req.id)
        rw = request_reward(req.task_id, tier, req.realized_ms_per_token, reward_spec)
        i = req.id
        records[i] = RequestRecord(i, req.arrival_ms, req.task_id, tier, rw,
                                   req.realized_ms_per_token, float(event_rates[i]))

    for i, ev in enumerate(trace.events):
        while next_boundary is not None and i >= next_boundary:
            if reset_between_segments and i == next_boundary and i > 0:
                for req in sim.drain():
                    finalize(req)
                sim = ClusterSim(tiers)
                estimator.reset()
            next_boundary = next(boundary_iter, None)
        for req in sim.advance(ev.time_ms):
            finalize(req)
        estimator.true_rate = float(event_rates[i])
        rate_signal = estimate_rate(estimator, ev.time_ms)
        if static_tier is not None:
            tier = static_tier
        else:
            state = RouterState(ev.task_id, tuple(sim.observe()), rate_signal)
            tier = int(np.argmax(policy.forward(encode(state, encoding))))
        req = Request(id=i, task_id=ev.task_id, arrival_ms=ev.time_ms,
                      tokens_target=tiers[tier].tokens_per_request)
        sim.submit(req, tier)
        open_requests[req.id] = tier
    for req in sim.drain():
        finalize(req)
    assert all(r is not None for r in records)
    return EvalRun(records=records, policy_id=policy_id, gpu_count=gpu_count, seed=seed)


def running_average(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return np.cumsum(v) / np.arange(1, v.size + 1)


def windowed(values: Sequence[float], window: int = WINDOW) -> np.ndarray:
    """Trailing mean; position k covers requests k..k+window-1, so the series
    only starts once `window` requests exist."""
    if window < 1:
        raise ValueError("window must be >= 1")
    v = np.asarray(values, dtype=float)
    if v.size < window:
        return np.empty(0)
    c = np.concatenate(([0.0], np.cumsum(v)))
    return (c[window:] - c[:-window]) / window


def threshold_counts(windowed_values: Sequence[float],
                     thresholds: Sequence[float] = THRESHOLDS) -> dict[float, int]:
    """Windows meeting each threshold; 1.00 counts exact peak windows only."""
    v = np.asarray(windowed_values, dtype=float)
    counts: dict[float, int] = {}
    for theta in thresholds:
        if not 0.0 <= theta <= 1.0:
            raise ValueError("thresholds must lie in [0, 1]")
        if theta == 1.0:
            counts[theta] = int(np.sum(v == 1.0))
        else:
            counts[theta] = int(np.sum(v >= theta))
    return counts


def selection_distribution(runs: Sequence[EvalRun], rate_buckets: Sequence[float],
                           n_tasks: int, n_tiers: int) -> np.ndarray:
    """Tier-selection frequency per (task, rate bucket); shape (T, K, M).

    Records map to the nearest bucket by segment rate; rows with no traffic
    stay all-zero.
    """
    if not runs:
        raise ValueError("need at least one run")
    buckets = np.asarray(rate_buckets, dtype=float)
    counts = np.zeros((n_tasks, buckets.size, n_tiers))
    for run in runs:
        for r in run.records:
            k = int(np.argmin(np.abs(buckets - r.segment_rate)))
            counts[r.task_id, k, r.tier_id] += 1
    totals = counts.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore"):
        freq = np.where(totals > 0, counts / np.maximum(totals, 1), 0.0)
    return freq


def riemann_usage(freq: np.ndarray, rate_buckets: Sequence[float], task_id: int,
                  tier_id: int) -> float:
    """Left-endpoint Riemann sum of a tier's selection frequency over the sweep."""
    rates = np.asarray(rate_buckets, dtype=float)
    widths = np.diff(rates)
    return float(np.sum(freq[task_id, :-1, tier_id] * widths))


def hardware_utility(run: EvalRun, gpu_count: int) -> np.ndarray:
    """Per-request reward normalized by the GPUs backing the system."""
    if gpu_count < 1:
        raise ValueError("gpu_count must be >= 1")
    return run.rewards() / gpu_count


def trial_band(series: Sequence[Sequence[float]]) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and population standard deviation across trials."""
    if len(series) < 2:
        raise ValueError("need at least two runs")
    lengths = {len(s) for s in series}
    if len(lengths) != 1:
        raise ValueError("runs must have equal length")
    stack = np.asarray(series, dtype=float)
    return stack.mean(axis=0), stack.std(axis=0)


def collapse_rate(miss_by_rate: dict[float, float], rates: Sequence[float],
                  threshold: float = 0.5) -> Optional[float]:
    """Lowest swept rate whose deadline-miss fraction exceeds the threshold."""
    for rate in rates:
        if miss_by_rate.get(rate, 0.0) > threshold:
            return float(rate)
    return None


def write_metrics_csv(run: EvalRun, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(METRICS_HEADER + "\n")
        for r in run.records:
            f.write(f"{r.index},{r.arrival_ms!r},{r.task_id},{r.tier_id},"
                    f"{r.reward!r},{r.realized_ms_per_token!r},{r.segment_rate!r}\n")


def read_metrics_csv(path: str) -> list[RequestRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header!r}")
        for line in f:
            cols = line.strip().split(",")
            if len(cols) != 7:
                raise ValueError(f"{path}: expected 7 columns, got {len(cols)}")
            records.append(RequestRecord(int(cols[0]), float(cols[1]), int(cols[2]),
                                         int(cols[3]), float(cols[4]), float(cols[5]),
                                         float(cols[6])))
    return records
