"""Router value function: state encoding, 2-layer MLP, action selection.

The network maps (task one-hot, per-tier batch sizes, arrival rate) to one
value per tier. Everything is float64 numpy; gradients are computed by hand
so they can be verified against finite differences.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

CHECKPOINT_MAGIC = "BEQN1"
HIDDEN_DEFAULT = 256
HUBER_DELTA = 1.0


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class StateEncoding:
    """Normalization constants keeping network inputs O(1)."""
    n_tasks: int
    batch_scales: tuple[float, ...]  # per tier, typically the tier's max_batch
    rate_scale: float = 48.0

    def __post_init__(self):
        if self.n_tasks < 1 or not self.batch_scales:
            raise ValueError("n_tasks and batch_scales must be nonempty")
        if self.rate_scale <= 0 or any(s <= 0 for s in self.batch_scales):
            raise ValueError("scales must be positive")

    @property
    def n_tiers(self) -> int:
        return len(self.batch_scales)

    @property
    def input_dim(self) -> int:
        return self.n_tasks + self.n_tiers + 1


@dataclass(frozen=True)
class RouterState:
    task_id: int
    tier_batches: tuple[int, ...]
    arrival_rate: float


def encode(state: RouterState, encoding: StateEncoding) -> np.ndarray:
    """Task one-hot, then normalized tier batches, then normalized rate."""
    if not 0 <= state.task_id < encoding.n_tasks:
        raise ValueError(f"task_id {state.task_id} out of range")
    if len(state.tier_batches) != encoding.n_tiers:
        raise ValueError("tier_batches length does not match encoding")
    if state.arrival_rate < 0:
        raise ValueError("arrival rate must be nonnegative")
    x = np.zeros(encoding.input_dim)
    x[state.task_id] = 1.0
    for m, b in enumerate(state.tier_batches):
        x[encoding.n_tasks + m] = b / encoding.batch_scales[m]
    x[-1] = state.arrival_rate / encoding.rate_scale
    return x


class QNetwork:
    """2-layer MLP with rectified-linear hidden units, one output per tier."""

    def __init__(self, n_tasks: int, n_tiers: int, w1: np.ndarray, b1: np.ndarray,
                 w2: np.ndarray, b2: np.ndarray):
        self.n_tasks = n_tasks
        self.n_tiers = n_tiers
        self.hidden = w1.shape[1]
        self.input_dim = n_tasks + n_tiers + 1
        if w1.shape != (self.input_dim, self.hidden) or b1.shape != (self.hidden,):
            raise ValueError("layer 1 shape mismatch")
        if w2.shape != (self.hidden, n_tiers) or b2.shape != (n_tiers,):
            raise ValueError("layer 2 shape mismatch")
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)

    @classmethod
    def init_random(cls, n_tasks: int, n_tiers: int, hidden: int = HIDDEN_DEFAULT,
                    rng: Optional[np.random.Generator] = None) -> "QNetwork":
        """Fan-in scaled uniform weights, zero biases."""
        rng = rng if rng is not None else np.random.default_rng()
        input_dim = n_tasks + n_tiers + 1
        bound1 = math.sqrt(6.0 / input_dim)
        bound2 = math.sqrt(6.0 / hidden)
        return cls(n_tasks, n_tiers,
                   w1=rng.uniform(-bound1, bound1, size=(input_dim, hidden)),
                   b1=np.zeros(hidden),
                   w2=rng.uniform(-bound2, bound2, size=(hidden, n_tiers)),
                   b2=np.zeros(n_tiers))

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "QNetwork":
        return QNetwork(self.n_tasks, self.n_tiers, self.w1.copy(), self.b1.copy(),
                        self.w2.copy(), self.b2.copy())

    def load_from(self, other: "QNetwork") -> None:
        for dst, src in zip(self.params(), other.params()):
            np.copyto(dst, src)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite network input")
        h = np.maximum(x @ self.w1 + self.b1, 0.0)
        return h @ self.w2 + self.b2


def q_forward(net: QNetwork, encoded: np.ndarray) -> np.ndarray:
    return net.forward(encoded)


def select_action(net: QNetwork, encoded: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy over tier values; ties break to the lowest tier."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(0, net.n_tiers))
    return int(np.argmax(net.forward(encoded)))


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def as_list(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


def q_gradient(net: QNetwork, encoded: np.ndarray, actions: np.ndarray,
               td_targets: np.ndarray, loss: str = "huber") -> tuple[Gradients, float]:
    """Loss and exact parameter gradients for a regression batch.

    The loss is the mean over rows of huber (or half squared error) applied to
    Q(s)[a] - target; only the selected action's output receives error signal.
    """
    x = np.atleast_2d(np.asarray(encoded, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.intp).ravel()
    targets = np.asarray(td_targets, dtype=np.float64).ravel()
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if actions.shape[0] != n or targets.shape[0] != n:
        raise ValueError("batch size mismatch")
    if not np.all(np.isfinite(targets)):
        raise ValueError("non-finite targets")

    h_pre = x @ net.w1 + net.b1
    h = np.maximum(h_pre, 0.0)
    q = h @ net.w2 + net.b2
    rows = np.arange(n)
    residual = q[rows, actions] - targets

    if loss == "huber":
        a = np.abs(residual)
        quad = a <= HUBER_DELTA
        loss_val = float(np.mean(np.where(quad, 0.5 * residual**2,
                                          HUBER_DELTA * (a - 0.5 * HUBER_DELTA))))
        dq_a = np.clip(residual, -HUBER_DELTA, HUBER_DELTA) / n
    elif loss == "squared":
        loss_val = float(np.mean(0.5 * residual**2))
        dq_a = residual / n
    else:
        raise ValueError(f"unknown loss {loss!r}")

    g = np.zeros_like(q)
    g[rows, actions] = dq_a
    dw2 = h.T @ g
    db2 = g.sum(axis=0)
    dh = g @ net.w2.T
    dh[h_pre <= 0.0] = 0.0
    dw1 = x.T @ dh
    db1 = dh.sum(axis=0)
    return Gradients(dw1, db1, dw2, db2), loss_val


def save_checkpoint(net: QNetwork, path: str) -> None:
    """Magic line, text dimension line, then float64 little-endian parameters."""
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC}\n".encode("ascii"))
        f.write(f"{net.n_tasks} {net.n_tiers} {net.hidden}\n".encode("ascii"))
        for p in net.params():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path: str, n_tasks: Optional[int] = None,
                    n_tiers: Optional[int] = None) -> QNetwork:
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii", errors="replace").strip()
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        header = f.readline().decode("ascii", errors="replace").split()
        if len(header) != 3:
            raise CheckpointError(f"{path}: malformed dimension header")
        try:
            t, m, hidden = (int(v) for v in header)
        except ValueError:
            raise CheckpointError(f"{path}: malformed dimension header")
        if t < 1 or m < 1 or hidden < 1:
            raise CheckpointError(f"{path}: nonpositive dimensions")
        if (n_tasks is not None and t != n_tasks) or (n_tiers is not None and m != n_tiers):
            raise CheckpointError(
                f"{path}: dimensions ({t}, {m}) do not match expected "
                f"({n_tasks}, {n_tiers})")
        input_dim = t + m + 1
        shapes = [(input_dim, hidden), (hidden,), (hidden, m), (m,)]
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape))
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointError(f"{path}: truncated parameter payload")
            arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after parameters")
    return QNetwork(t, m, *arrays)
