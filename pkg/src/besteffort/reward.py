"""Per-request utility: quality matrix lookup scaled by a deadline weight.

A request routed to tier m for task t earns matrix[t][m] if it met its
deadline. Hard deadlines zero the utility when missed; soft deadlines decay
it linearly per millisecond of per-token excess and fall to zero once the
excess passes a fraction of the deadline.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

HARD, SOFT = "hard", "soft"

# default system: four tasks on three model sizes, quality normalized to the
# largest tier, all deadlines 40 ms/token
DEFAULT_TASKS = (
    ("hellaswag", 40.0, HARD),
    ("copa", 40.0, HARD),
    ("piqa", 40.0, HARD),
    ("openbookqa", 40.0, HARD),
)
DEFAULT_MATRIX = (
    (0.45, 0.78, 1.00),
    (0.80, 0.95, 1.00),
    (0.82, 0.96, 1.00),
    (0.70, 0.94, 1.00),
)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    deadline_ms_per_token: float
    kind: str = HARD

    def __post_init__(self):
        if self.deadline_ms_per_token <= 0:
            raise ValueError(f"task {self.name}: deadline must be positive")
        if self.kind not in (HARD, SOFT):
            raise ValueError(f"task {self.name}: kind must be '{HARD}' or '{SOFT}'")


@dataclass(frozen=True)
class RewardSpec:
    tasks: tuple[TaskSpec, ...]
    matrix: tuple[tuple[float, ...], ...]  # tasks x tiers, columns smallest -> largest
    decay_per_ms: float = 0.01
    cutoff_fraction: float = 0.10

    def __post_init__(self):
        if not self.tasks or not self.matrix:
            raise ValueError("tasks and matrix must be nonempty")
        if len(self.matrix) != len(self.tasks):
            raise ValueError("matrix must have one row per task")
        width = len(self.matrix[0])
        if any(len(row) != width for row in self.matrix):
            raise ValueError("matrix rows must have equal length")
        if any(v < 0 or v > 1 for row in self.matrix for v in row):
            raise ValueError("matrix entries must lie in [0, 1]")
        if not 0 < self.decay_per_ms <= 1 or not 0 < self.cutoff_fraction <= 1:
            raise ValueError("decay_per_ms and cutoff_fraction must lie in (0, 1]")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_tiers(self) -> int:
        return len(self.matrix[0])

    def as_array(self) -> np.ndarray:
        return np.array(self.matrix)

    def normalized_rows(self) -> bool:
        """True when every row peaks at exactly 1.0 on the largest tier."""
        return all(row[-1] == 1.0 and max(row) == 1.0 for row in self.matrix)

    def with_kind(self, kind: str) -> "RewardSpec":
        return replace(self, tasks=tuple(replace(t, kind=kind) for t in self.tasks))

    def with_deadlines(self, deadlines: dict[str, float]) -> "RewardSpec":
        tasks = tuple(
            replace(t, deadline_ms_per_token=deadlines.get(t.name, t.deadline_ms_per_token))
            for t in self.tasks)
        return replace(self, tasks=tasks)

    @classmethod
    def default(cls) -> "RewardSpec":
        return cls(tasks=tuple(TaskSpec(*t) for t in DEFAULT_TASKS), matrix=DEFAULT_MATRIX)


def weight_hard(realized_ms_per_token: float, deadline_ms_per_token: float) -> float:
    """1.0 when the deadline is met (inclusive), else 0.0."""
    return 1.0 if realized_ms_per_token <= deadline_ms_per_token else 0.0


def weight_soft(realized_ms_per_token: float, deadline_ms_per_token: float,
                decay_per_ms: float = 0.01, cutoff_fraction: float = 0.10) -> float:
    """Linear decay past the deadline, zero once the excess passes the cutoff.

    The exact-cutoff point belongs to the decay region, so a 10% violation of
    a 40 ms deadline still earns 0.96 rather than zero.
    """
    excess = realized_ms_per_token - deadline_ms_per_token
    if excess <= 0:
        return 1.0
    if excess <= cutoff_fraction * deadline_ms_per_token:
        return max(0.0, 1.0 - decay_per_ms * excess)
    return 0.0


def request_reward(task_id: int, tier_id: int, realized_ms_per_token: float,
                   spec: RewardSpec) -> float:
    if not 0 <= task_id < spec.n_tasks:
        raise ValueError(f"task_id {task_id} out of range")
    if not 0 <= tier_id < spec.n_tiers:
        raise ValueError(f"tier_id {tier_id} out of range")
    task = spec.tasks[task_id]
    if task.kind == HARD:
        w = weight_hard(realized_ms_per_token, task.deadline_ms_per_token)
    else:
        w = weight_soft(realized_ms_per_token, task.deadline_ms_per_token,
                        spec.decay_per_ms, spec.cutoff_fraction)
    return w * spec.matrix[task_id][tier_id]
