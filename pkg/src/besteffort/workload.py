"""Arrival-trace generation and online arrival-rate estimation.

Three synthetic client workloads drive the serving simulator: a stable one
(fixed-rate Poisson segments) and two unpredictable ones whose rate switches
under a stochastic regime process. Traces are plain CSV so they can be
inspected and replayed across runs.
"""

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

RNG_ALGO = "pcg64"

# unpredictable workload 1: rate bands with their pick probabilities
TIME_BASED_BANDS = ((0.25, 2.0), (2.0, 40.0), (40.0, 48.0))
TIME_BASED_PROBS = (0.90, 0.08, 0.02)
TIME_BASED_MEAN_FACTOR = 20.0

# unpredictable workload 2: uniform rate range, fixed mean segment length
REQUEST_BASED_RATE_RANGE = (1.0, 48.0)
REQUEST_BASED_MEAN_REQUESTS = 500.0


class InvalidParameterError(ValueError):
    pass


class TraceParseError(ValueError):
    def __init__(self, message: str, path: str = "?", line: int = 0):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class ArrivalEvent:
    time_ms: float
    task_id: int


@dataclass(frozen=True)
class SegmentMark:
    start_index: int
    rate: float  # requests/second the generator used for this segment


@dataclass
class WorkloadTrace:
    events: list[ArrivalEvent]
    segment_marks: list[SegmentMark]
    seed: int
    rng_algo: str = RNG_ALGO

    def __len__(self) -> int:
        return len(self.events)

    def validate(self) -> None:
        last = -math.inf
        for i, ev in enumerate(self.events):
            if ev.time_ms < 0 or ev.time_ms < last:
                raise ValueError(f"event {i}: times must be nonnegative and sorted")
            last = ev.time_ms
        if self.segment_marks:
            if self.segment_marks[0].start_index != 0:
                raise ValueError("first segment mark must start at index 0")
            starts = [m.start_index for m in self.segment_marks]
            if any(b < a for a, b in zip(starts, starts[1:])):
                raise ValueError("segment mark start indices must be nondecreasing")

    def event_rates(self) -> np.ndarray:
        """Generator's true rate for every event, aligned with `events`."""
        rates = np.empty(len(self.events))
        starts = [m.start_index for m in self.segment_marks]
        for k, mark in enumerate(self.segment_marks):
            end = starts[k + 1] if k + 1 < len(starts) else len(self.events)
            rates[mark.start_index:end] = mark.rate
        return rates

    def segments(self) -> list[tuple[int, int, float]]:
        """(start_index, end_index, rate) triples; empty segments are dropped."""
        out = []
        starts = [m.start_index for m in self.segment_marks]
        for k, mark in enumerate(self.segment_marks):
            end = starts[k + 1] if k + 1 < len(starts) else len(self.events)
            if end > mark.start_index:
                out.append((mark.start_index, end, mark.rate))
        return out


def _poisson_arrivals(rng: np.random.Generator, rate: float, t0_ms: float,
                      duration_ms: float) -> np.ndarray:
    """Arrival times of a Poisson process on [t0, t0 + duration)."""
    mean_gap = 1000.0 / rate
    times = []
    t = t0_ms
    end = t0_ms + duration_ms
    # draw in chunks; expected count plus slack, top up if the channel runs dry
    chunk = max(16, int(duration_ms / mean_gap * 1.2) + 16)
    while True:
        gaps = rng.exponential(mean_gap, size=chunk)
        arr = t + np.cumsum(gaps)
        inside = arr[arr < end]
        times.append(inside)
        if inside.size < arr.size:
            break
        t = arr[-1]
    return np.concatenate(times) if times else np.empty(0)


def _poisson_count(rng: np.random.Generator, rate: float, t0_ms: float,
                   count: int) -> np.ndarray:
    gaps = rng.exponential(1000.0 / rate, size=count)
    return t0_ms + np.cumsum(gaps)


def gen_stable(rates: Sequence[float], hold_seconds: float, n_tasks: int, seed: int,
               task_ids: Optional[Sequence[int]] = None) -> WorkloadTrace:
    """Fixed-rate Poisson segments, one per rate, each held for `hold_seconds`.

    Segment k occupies [k*hold, (k+1)*hold) on the trace clock; tasks are drawn
    uniformly from `task_ids` (default: all of 0..n_tasks-1).
    """
    if not rates or any(r <= 0 for r in rates):
        raise InvalidParameterError("rates must be nonempty and positive")
    if hold_seconds <= 0:
        raise InvalidParameterError("hold_seconds must be positive")
    choices = _task_choices(n_tasks, task_ids)
    rng = np.random.default_rng(seed)
    hold_ms = hold_seconds * 1000.0
    events: list[ArrivalEvent] = []
    marks: list[SegmentMark] = []
    for k, rate in enumerate(rates):
        marks.append(SegmentMark(start_index=len(events), rate=float(rate)))
        times = _poisson_arrivals(rng, float(rate), k * hold_ms, hold_ms)
        tasks = choices[rng.integers(0, len(choices), size=times.size)]
        events.extend(ArrivalEvent(float(t), int(task)) for t, task in zip(times, tasks))
    return WorkloadTrace(events=events, segment_marks=marks, seed=seed)


def gen_unpredictable_time_based(n_requests: int, n_tasks: int, seed: int,
                                 task_ids: Optional[Sequence[int]] = None) -> WorkloadTrace:
    """Rate-switching workload whose segments last the same expected wall time.

    Each segment picks a rate band (90/8/2 mixture), a rate uniform within the
    band, then serves a shifted-geometric number of requests with mean
    20*rate before switching.
    """
    if n_requests < 1:
        raise InvalidParameterError("n_requests must be >= 1")
    choices = _task_choices(n_tasks, task_ids)
    rng = np.random.default_rng(seed)
    events: list[ArrivalEvent] = []
    marks: list[SegmentMark] = []
    bands = TIME_BASED_BANDS
    cum = np.cumsum(TIME_BASED_PROBS)
    t = 0.0
    while len(events) < n_requests:
        band = bands[int(np.searchsorted(cum, rng.random(), side="right"))]
        rate = float(rng.uniform(band[0], band[1]))
        count = int(rng.geometric(1.0 / (TIME_BASED_MEAN_FACTOR * rate)))
        count = min(count, n_requests - len(events))
        marks.append(SegmentMark(start_index=len(events), rate=rate))
        times = _poisson_count(rng, rate, t, count)
        tasks = choices[rng.integers(0, len(choices), size=count)]
        events.extend(ArrivalEvent(float(tt), int(task)) for tt, task in zip(times, tasks))
        t = float(times[-1])
    return WorkloadTrace(events=events, segment_marks=marks, seed=seed)


def gen_unpredictable_request_based(n_requests: int, n_tasks: int, seed: int,
                                    task_ids: Optional[Sequence[int]] = None) -> WorkloadTrace:
    """Rate-switching workload whose segments serve the same expected request count.

    Rates are uniform on [1, 48]; each segment's request count is shifted
    geometric with mean 500, so high rates occupy less wall time.
    """
    if n_requests < 1:
        raise InvalidParameterError("n_requests must be >= 1")
    choices = _task_choices(n_tasks, task_ids)
    rng = np.random.default_rng(seed)
    events: list[ArrivalEvent] = []
    marks: list[SegmentMark] = []
    lo, hi = REQUEST_BASED_RATE_RANGE
    t = 0.0
    while len(events) < n_requests:
        rate = float(rng.uniform(lo, hi))
        count = int(rng.geometric(1.0 / REQUEST_BASED_MEAN_REQUESTS))
        count = min(count, n_requests - len(events))
        marks.append(SegmentMark(start_index=len(events), rate=rate))
        times = _poisson_count(rng, rate, t, count)
        tasks = choices[rng.integers(0, len(choices), size=count)]
        events.extend(ArrivalEvent(float(tt), int(task)) for tt, task in zip(times, tasks))
        t = float(times[-1])
    return WorkloadTrace(events=events, segment_marks=marks, seed=seed)


def _task_choices(n_tasks: int, task_ids: Optional[Sequence[int]]) -> np.ndarray:
    if n_tasks < 1:
        raise InvalidParameterError("n_tasks must be >= 1")
    if task_ids is None:
        return np.arange(n_tasks)
    ids = np.asarray(list(task_ids), dtype=int)
    if ids.size == 0 or ids.min() < 0 or ids.max() >= n_tasks:
        raise InvalidParameterError(f"task_ids must be a nonempty subset of [0, {n_tasks})")
    return ids


class RateEstimator:
    """Arrival-rate signal for the router state.

    In "estimated" mode the rate is the reciprocal of the mean gap among the
    last 5 arrival timestamps (up to 4 gaps). In "true-rate" mode the caller
    keeps `true_rate` synced to the trace segment and that value is returned
    instead; arrivals are still recorded so the mode can be switched.
    """

    MODES = ("estimated", "true-rate")

    def __init__(self, mode: str = "estimated", prior_rate: float = 1.0,
                 window_size: int = 5):
        if mode not in self.MODES:
            raise InvalidParameterError(f"mode must be one of {self.MODES}")
        if prior_rate <= 0:
            raise InvalidParameterError("prior_rate must be positive")
        self.mode = mode
        self.prior_rate = prior_rate
        self.window: deque[float] = deque(maxlen=window_size)
        self.true_rate = prior_rate

    def observe(self, arrival_ms: float) -> float:
        if self.window and arrival_ms < self.window[-1]:
            raise ValueError(
                f"arrival times must be nondecreasing ({arrival_ms} after {self.window[-1]})")
        self.window.append(arrival_ms)
        return self.rate()

    def rate(self) -> float:
        if self.mode == "true-rate":
            return self.true_rate
        if len(self.window) < 2:
            return self.prior_rate
        mean_gap_s = (self.window[-1] - self.window[0]) / (len(self.window) - 1) / 1000.0
        return 1.0 / max(mean_gap_s, 1e-6)  # cap at 1e6 req/s for zero gaps

    def reset(self) -> None:
        self.window.clear()


def estimate_rate(estimator: RateEstimator, now_arrival_ms: float) -> float:
    """Record an arrival and return the current rate estimate (requests/sec)."""
    return estimator.observe(now_arrival_ms)


def write_trace(trace: WorkloadTrace, path: str) -> None:
    trace.validate()
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# rng,{trace.rng_algo}\n")
        f.write(f"# seed,{trace.seed}\n")
        for mark in trace.segment_marks:
            f.write(f"# segment,{mark.start_index},{mark.rate!r}\n")
        f.write("arrival_ms,task_id\n")
        for ev in trace.events:
            f.write(f"{ev.time_ms!r},{ev.task_id}\n")


def read_trace(path: str, n_tasks: Optional[int] = None) -> WorkloadTrace:
    events: list[ArrivalEvent] = []
    marks: list[SegmentMark] = []
    seed = 0
    rng_algo = RNG_ALGO
    saw_header = False
    last_time = -math.inf
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = [p.strip() for p in line[1:].split(",")]
                try:
                    if parts[0] == "segment":
                        marks.append(SegmentMark(int(parts[1]), float(parts[2])))
                    elif parts[0] == "seed":
                        seed = int(parts[1])
                    elif parts[0] == "rng":
                        rng_algo = parts[1]
                except (IndexError, ValueError):
                    raise TraceParseError(f"malformed comment line: {line}", path, lineno)
                continue
            if not saw_header:
                if line != "arrival_ms,task_id":
                    raise TraceParseError(f"expected header 'arrival_ms,task_id', got {line!r}",
                                          path, lineno)
                saw_header = True
                continue
            cols = line.split(",")
            if len(cols) != 2:
                raise TraceParseError(f"expected 2 columns, got {len(cols)}", path, lineno)
            try:
                t = float(cols[0])
                task = int(cols[1])
            except ValueError:
                raise TraceParseError(f"malformed row: {line}", path, lineno)
            if not math.isfinite(t) or t < 0:
                raise TraceParseError(f"arrival_ms must be finite and nonnegative: {cols[0]}",
                                      path, lineno)
            if t < last_time:
                raise TraceParseError("arrival times must be nondecreasing", path, lineno)
            if task < 0 or (n_tasks is not None and task >= n_tasks):
                raise TraceParseError(f"unknown task id {task}", path, lineno)
            last_time = t
            events.append(ArrivalEvent(t, task))
    if not saw_header:
        raise TraceParseError("missing header", path, 0)
    trace = WorkloadTrace(events=events, segment_marks=marks, seed=seed, rng_algo=rng_algo)
    trace.validate()
    return trace
