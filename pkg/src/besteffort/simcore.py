"""Event-driven simulation of a replicated multi-tier serving cluster.

Each model tier is replicated across GPUs; every replica runs iteration-level
(continuous) batching: one iteration emits one token for each request in the
batch and lasts alpha + beta * batch_size milliseconds. Requests queue FIFO
behind a replica once its batch is full, and queueing time counts toward the
realized per-token latency.
"""

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from besteffort.workload import InvalidParameterError, gen_stable

_END, _START = 0, 1  # iteration-end before iteration-start at equal times


@dataclass(frozen=True)
class ModelTierSpec:
    tier_id: int
    replicas: int
    alpha_ms: float  # per-token iteration latency at batch 0
    beta_ms: float   # per-token latency increase per unit batch size
    max_batch: int
    tokens_per_request: int = 100
    name: str = ""

    def __post_init__(self):
        if self.replicas < 1:
            raise InvalidParameterError("replicas must be >= 1")
        if self.alpha_ms <= 0 or self.beta_ms < 0:
            raise InvalidParameterError("alpha_ms must be > 0 and beta_ms >= 0")
        if self.max_batch < 1 or self.tokens_per_request < 1:
            raise InvalidParameterError("max_batch and tokens_per_request must be >= 1")


@dataclass
class Request:
    id: int
    task_id: int
    arrival_ms: float
    tokens_target: int
    tier_id: Optional[int] = None
    replica_id: Optional[int] = None
    tokens_done: int = 0
    completion_ms: Optional[float] = None
    realized_ms_per_token: Optional[float] = None


@dataclass
class ReplicaState:
    tier_id: int
    replica_id: int
    active: dict = field(default_factory=dict)   # request id -> Request, insertion order
    queue: deque = field(default_factory=deque)  # admitted but waiting for a batch slot
    running: Optional[list] = None               # members of the in-flight iteration
    has_event: bool = False


class ClusterSim:
    """Single-owner, sequential simulation of the whole cluster.

    Drive it with `submit` for each arrival and `advance(until_ms)` between
    arrivals; `advance` returns the requests completed up to (and including)
    `until_ms`. Iterations that would begin exactly at `until_ms` stay pending
    so that same-timestamp arrivals can still join the forming batch.
    """

    def __init__(self, tiers: Sequence[ModelTierSpec]):
        if not tiers:
            raise InvalidParameterError("at least one tier required")
        self.tiers = list(tiers)
        if [t.tier_id for t in self.tiers] != list(range(len(self.tiers))):
            raise InvalidParameterError("tier_ids must be 0..M-1 in order")
        self.replicas: list[list[ReplicaState]] = [
            [ReplicaState(t.tier_id, r) for r in range(t.replicas)] for t in self.tiers
        ]
        self.clock_ms = 0.0
        self._events: list[tuple[float, int, int, int]] = []
        self.submitted = 0
        self.completed = 0

    @property
    def n_tiers(self) -> int:
        return len(self.tiers)

    @property
    def in_flight(self) -> int:
        return self.submitted - self.completed

    def submit(self, request: Request, tier_id: int) -> int:
        if not 0 <= tier_id < len(self.tiers):
            raise InvalidParameterError(f"unknown tier {tier_id}")
        if request.tier_id is not None:
            raise InvalidParameterError(f"request {request.id} already submitted")
        spec = self.tiers[tier_id]
        rep = min(self.replicas[tier_id],
                  key=lambda r: (len(r.active), len(r.queue), r.replica_id))
        request.tier_id = tier_id
        request.replica_id = rep.replica_id
        if len(rep.active) < spec.max_batch:
            rep.active[request.id] = request
            if not rep.has_event:
                self._schedule(self.clock_ms, _START, rep)
        else:
            rep.queue.append(request)
        self.submitted += 1
        return rep.replica_id

    def advance(self, until_ms: float) -> list[Request]:
        if until_ms < self.clock_ms:
            raise InvalidParameterError("cannot advance backwards")
        completions: list[Request] = []
        events = self._events
        while events:
            time, kind, tier_id, replica_id = events[0]
            if time > until_ms or (time == until_ms and kind == _START):
                break
            heapq.heappop(events)
            self.clock_ms = time
            rep = self.replicas[tier_id][replica_id]
            rep.has_event = False
            spec = self.tiers[tier_id]
            if kind == _END:
                members = rep.running
                rep.running = None
                for req in members:
                    req.tokens_done += 1
                    if req.tokens_done >= req.tokens_target:
                        del rep.active[req.id]
                        req.completion_ms = time
                        req.realized_ms_per_token = (time - req.arrival_ms) / req.tokens_target
                        completions.append(req)
                        self.completed += 1
                while rep.queue and len(rep.active) < spec.max_batch:
                    waiting = rep.queue.popleft()
                    rep.active[waiting.id] = waiting
                if rep.active:
                    self._schedule(time, _START, rep)
            else:
                members = list(rep.active.values())
                rep.running = members
                self._schedule(time + spec.alpha_ms + spec.beta_ms * len(members), _END, rep)
        if math.isfinite(until_ms):
            self.clock_ms = max(self.clock_ms, until_ms)
        return completions

    def drain(self) -> list[Request]:
        """Run every pending request to completion."""
        return self.advance(math.inf)

    def observe(self) -> list[int]:
        """Aggregate batch size (active + queued) per tier."""
        return [sum(len(r.active) + len(r.queue) for r in reps) for reps in self.replicas]

    def _schedule(self, time: float, kind: int, rep: ReplicaState) -> None:
        rep.has_event = True
        heapq.heappush(self._events, (time, kind, rep.tier_id, rep.replica_id))


def static_serve(tier_spec: ModelTierSpec, arrivals: Sequence[tuple[float, int]],
                 n_replicas: Optional[int] = None) -> list[Request]:
    """Serve every arrival on one tier; returns completed requests in arrival order."""
    solo = ModelTierSpec(tier_id=0, replicas=n_replicas or tier_spec.replicas,
                         alpha_ms=tier_spec.alpha_ms, beta_ms=tier_spec.beta_ms,
                         max_batch=tier_spec.max_batch,
                         tokens_per_request=tier_spec.tokens_per_request, name=tier_spec.name)
    sim = ClusterSim([solo])
    requests = []
    for i, (t, task) in enumerate(arrivals):
        sim.advance(t)
        req = Request(id=i, task_id=task, arrival_ms=t, tokens_target=solo.tokens_per_request)
        sim.submit(req, 0)
        requests.append(req)
    sim.drain()
    return requests


def calibrate_defaults(tiers: Sequence[ModelTierSpec], deadline_ms_per_token: float,
                       sweep_rates: Sequence[float], hold_seconds: float = 40.0,
                       seed: int = 0) -> dict[int, Optional[float]]:
    """Measure each tier's collapse rate under static serving.

    Serves a fresh fixed-rate trace per (tier, rate) and reports the lowest
    swept rate at which more than half the requests miss the deadline; None if
    the tier survives the entire sweep.
    """
    collapse: dict[int, Optional[float]] = {}
    for spec in tiers:
        collapse[spec.tier_id] = None
        for rate in sweep_rates:
            trace = gen_stable([rate], hold_seconds, 1, seed)
            done = static_serve(spec, [(ev.time_ms, ev.task_id) for ev in trace.events])
            if not done:
                continue
            misses = sum(1 for r in done if r.realized_ms_per_token > deadline_ms_per_token)
            if misses / len(done) > 0.5:
                collapse[spec.tier_id] = float(rate)
                break
    return collapse
