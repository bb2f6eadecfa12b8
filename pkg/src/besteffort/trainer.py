"""Q-learning training loop for the request router.

The router's reward is only known once a request finishes, and its successor
state only exists at the next routing decision, so transitions sit in a
pending store until both resolve. Training drives the cluster simulator with
a regime-switching workload: a rate drawn log-uniformly, held for a shifted
geometric number of requests, with tasks drawn uniformly.
"""

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from besteffort.policy import (
    HUBER_DELTA,
    QNetwork,
    RouterState,
    StateEncoding,
    encode,
    select_action,
)
from besteffort.reward import RewardSpec, request_reward
from besteffort.simcore import ClusterSim, ModelTierSpec, Request
from besteffort.workload import RateEstimator, estimate_rate


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    continue_flag: float


@dataclass
class TrainConfig:
    discount: float = 0.99
    learning_rate: float = 1e-4
    batch_size: int = 1024
    target_sync_every: int = 500
    total_iterations: int = 200_000   # desk-scale default
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.25
    buffer_capacity: int = 500_000
    warmup: int = 10_000
    optimizer: str = "adam"
    loss: str = "huber"
    hidden: int = 256
    seed: int = 0
    log_every: int = 10_000
    # training workload: rates are sampled log-uniformly and held for a
    # shifted-geometric number of requests. "equal-time" scales the mean count
    # with the rate so every regime lasts regime_mean_seconds in expectation;
    # fixed-length regimes starve the high-rate regimes of the sustained
    # congestion they produce at evaluation time.
    rate_low: float = 0.25
    rate_high: float = 48.0
    regime_cadence: str = "equal-time"  # equal-time | requests
    regime_mean_seconds: float = 20.0
    regime_mean_requests: float = 100.0
    estimator_mode: str = "true-rate"
    prior_rate: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size must not exceed buffer capacity")
        if self.batch_size < 1 or self.total_iterations < 0:
            raise ValueError("batch_size must be >= 1 and total_iterations >= 0")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.rate_low <= 0 or self.rate_high < self.rate_low:
            raise ValueError("need 0 < rate_low <= rate_high")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.regime_cadence not in ("equal-time", "requests"):
            raise ValueError("regime_cadence must be 'equal-time' or 'requests'")

    def epsilon_at(self, iteration: int) -> float:
        decay_steps = int(self.epsilon_decay_fraction * self.total_iterations)
        if decay_steps <= 0:
            return self.epsilon_end
        frac = min(1.0, iteration / decay_steps)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


@dataclass
class _Pending:
    state: np.ndarray
    action: int
    reward: Optional[float] = None
    next_state: Optional[np.ndarray] = None


class ReplayBuffer:
    """Ring buffer of resolved transitions plus a pending store.

    A transition enters the ring only once its reward (request completion) and
    next state (the following routing decision) have both been observed.
    """

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.empty((capacity, state_dim))
        self.actions = np.empty(capacity, dtype=np.intp)
        self.rewards = np.empty(capacity)
        self.next_states = np.empty((capacity, state_dim))
        self.cont = np.empty(capacity)
        self.size = 0
        self.cursor = 0
        self.pending: dict[int, _Pending] = {}

    def __len__(self) -> int:
        return self.size

    def push(self, state: np.ndarray, action: int, reward: float,
             next_state: np.ndarray, continue_flag: float) -> None:
        if not 0.0 <= reward <= 1.0:
            raise ValueError(f"reward {reward} outside [0, 1]")
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.cont[i] = continue_flag
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def add(self, tr: Transition) -> None:
        self.push(tr.state, tr.action, tr.reward, tr.next_state, tr.continue_flag)

    def begin(self, request_id: int, state: np.ndarray, action: int) -> None:
        self.pending[request_id] = _Pending(state, action)

    def resolve_reward(self, request_id: int, reward: float) -> None:
        p = self.pending[request_id]
        p.reward = reward
        self._maybe_commit(request_id, p)

    def resolve_next_state(self, request_id: int, next_state: np.ndarray) -> None:
        p = self.pending[request_id]
        p.next_state = next_state
        self._maybe_commit(request_id, p)

    def _maybe_commit(self, request_id: int, p: _Pending) -> None:
        if p.reward is not None and p.next_state is not None:
            self.push(p.state, p.action, p.reward, p.next_state, 1.0)
            del self.pending[request_id]

    def sample(self, batch_size: int, rng: np.random.Generator):
        if self.size < 1:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.cont[idx])


def td_targets_double_q(online: QNetwork, target: QNetwork, rewards: np.ndarray,
                        next_states: np.ndarray, continue_flags: np.ndarray,
                        discount: float) -> np.ndarray:
    """r + continue * discount * Q_target(s')[argmax_a Q_online(s')[a]]."""
    q_online = online.forward(next_states)
    q_target = target.forward(next_states)
    best = np.argmax(q_online, axis=1)
    boot = q_target[np.arange(q_target.shape[0]), best]
    return np.asarray(rewards) + np.asarray(continue_flags) * discount * boot


class Adam:
    """Adaptive moment estimation with bias correction, standard defaults."""

    def __init__(self, params: Sequence[np.ndarray], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class SGD:
    def __init__(self, params: Sequence[np.ndarray], learning_rate: float):
        self.lr = learning_rate

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class _StepKernel:
    """Preallocated forward/backward buffers; one instance per batch shape.

    Matches q_gradient and td_targets_double_q exactly but avoids the
    per-step array allocations, which dominate at this network size.
    """

    def __init__(self, input_dim: int, hidden: int, n_actions: int, n: int):
        self.h = np.empty((n, hidden))
        self.ht = np.empty((n, hidden))
        self.q = np.empty((n, n_actions))
        self.q2 = np.empty((n, n_actions))
        self.g = np.empty((n, n_actions))
        self.dh = np.empty((n, hidden))
        self.dw1 = np.empty((input_dim, hidden))
        self.db1 = np.empty(hidden)
        self.dw2 = np.empty((hidden, n_actions))
        self.db2 = np.empty(n_actions)
        self.rows = np.arange(n)

    def _forward(self, net: QNetwork, x: np.ndarray, h: np.ndarray, q: np.ndarray) -> None:
        np.matmul(x, net.w1, out=h)
        h += net.b1
        np.maximum(h, 0.0, out=h)
        np.matmul(h, net.w2, out=q)
        q += net.b2

    def compute(self, online: QNetwork, target: QNetwork, states, actions, rewards,
                next_states, cont, discount: float, loss: str) -> float:
        self._forward(online, next_states, self.ht, self.q2)
        best = self.q2.argmax(axis=1)
        self._forward(target, next_states, self.ht, self.q2)
        targets = rewards + cont * discount * self.q2[self.rows, best]

        self._forward(online, states, self.h, self.q)
        residual = self.q[self.rows, actions] - targets
        if loss == "huber":
            a = np.abs(residual)
            quad = a <= HUBER_DELTA
            loss_val = float(np.mean(np.where(quad, 0.5 * residual**2,
                                              HUBER_DELTA * (a - 0.5 * HUBER_DELTA))))
            dq = np.clip(residual, -HUBER_DELTA, HUBER_DELTA) / len(residual)
        else:
            loss_val = float(np.mean(0.5 * residual**2))
            dq = residual / len(residual)
        self.g[:] = 0.0
        self.g[self.rows, actions] = dq
        np.matmul(self.h.T, self.g, out=self.dw2)
        np.sum(self.g, axis=0, out=self.db2)
        np.matmul(self.g, online.w2.T, out=self.dh)
        self.dh[self.h <= 0.0] = 0.0
        np.matmul(states.T, self.dh, out=self.dw1)
        np.sum(self.dh, axis=0, out=self.db1)
        return loss_val

    def grads(self) -> list[np.ndarray]:
        return [self.dw1, self.db1, self.dw2, self.db2]


def make_optimizer(cfg: TrainConfig, params: Sequence[np.ndarray]):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate)
    return SGD(params, cfg.learning_rate)


def train_step(online: QNetwork, target: QNetwork, buffer: ReplayBuffer,
               cfg: TrainConfig, step_index: int, optimizer, rng: np.random.Generator,
               kernel: Optional[_StepKernel] = None) -> Optional[float]:
    """One sampled update; returns the loss, or None while the buffer warms up."""
    if len(buffer) < max(cfg.batch_size, cfg.warmup):
        return None
    states, actions, rewards, next_states, cont = buffer.sample(cfg.batch_size, rng)
    if kernel is None:
        kernel = _StepKernel(states.shape[1], online.hidden, online.n_tiers, cfg.batch_size)
    loss = kernel.compute(online, target, states, actions, rewards, next_states,
                          cont, cfg.discount, cfg.loss)
    optimizer.step(online.params(), kernel.grads())
    if step_index % cfg.target_sync_every == 0:
        target.load_from(online)
    return loss


class TrainingWorkload:
    """Online arrival stream with randomly switching Poisson rate regimes."""

    def __init__(self, cfg: TrainConfig, n_tasks: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_tasks = n_tasks
        self.rng = rng
        self.time_ms = 0.0
        self.rate = 0.0
        self.segment_left = 0

    def next_arrival(self) -> tuple[float, int]:
        if self.segment_left <= 0:
            lo, hi = math.log(self.cfg.rate_low), math.log(self.cfg.rate_high)
            self.rate = math.exp(self.rng.uniform(lo, hi))
            if self.cfg.regime_cadence == "equal-time":
                mean = max(1.0, self.cfg.regime_mean_seconds * self.rate)
            else:
                mean = self.cfg.regime_mean_requests
            self.segment_left = int(self.rng.geometric(1.0 / mean))
        self.segment_left -= 1
        self.time_ms += self.rng.exponential(1000.0 / self.rate)
        task = int(self.rng.integers(0, self.n_tasks))
        return self.time_ms, task


@dataclass
class LogRow:
    step: int
    loss: float
    mean_recent_reward: float
    epsilon: float


@dataclass
class TrainResult:
    net: QNetwork
    log: list[LogRow] = field(default_factory=list)


def run_training(tiers: Sequence[ModelTierSpec], reward_spec: RewardSpec,
                 cfg: TrainConfig, encoding: Optional[StateEncoding] = None,
                 init_net: Optional[QNetwork] = None,
                 completion_log: Optional[list] = None) -> TrainResult:
    """Train a router against the simulated cluster.

    One routing decision per workload arrival; one gradient step per decision
    once the replay buffer passes warmup. Rewards resolve at request
    completion and transitions commit once the following decision's state is
    known. `completion_log`, when given, collects
    (request_id, task, tier, realized_ms_per_token, reward) for auditing.
    """
    n_tasks, n_tiers = reward_spec.n_tasks, reward_spec.n_tiers
    if len(tiers) != n_tiers:
        raise ValueError("tier count must match reward matrix width")
    if encoding is None:
        encoding = StateEncoding(n_tasks=n_tasks,
                                 batch_scales=tuple(float(t.max_batch) for t in tiers))
    seq = np.random.SeedSequence(cfg.seed)
    rng_init, rng_env, rng_policy, rng_sample = (np.random.default_rng(s)
                                                 for s in seq.spawn(4))
    if init_net is None:
        online = QNetwork.init_random(n_tasks, n_tiers, cfg.hidden, rng_init)
    else:
        if init_net.n_tasks != n_tasks or init_net.n_tiers != n_tiers:
            raise ValueError("init_net dimensions do not match the environment")
        online = init_net.copy()
    target = online.copy()
    buffer = ReplayBuffer(cfg.buffer_capacity, encoding.input_dim)
    optimizer = make_optimizer(cfg, online.params())
    kernel = _StepKernel(encoding.input_dim, online.hidden, n_tiers, cfg.batch_size)
    workload = TrainingWorkload(cfg, n_tasks, rng_env)
    estimator = RateEstimator(cfg.estimator_mode, cfg.prior_rate)
    sim = ClusterSim(tiers)

    log: list[LogRow] = []
    recent = deque(maxlen=1000)
    last_request_id = None
    grad_steps = 0
    last_loss = math.nan

    for it in range(cfg.total_iterations):
        t_ms, task = workload.next_arrival()
        for req in sim.advance(t_ms):
            rw = request_reward(req.task_id, req.tier_id, req.realized_ms_per_token,
                                reward_spec)
            buffer.resolve_reward(req.id, rw)
            recent.append(rw)
            if completion_log is not None:
                completion_log.append((req.id, req.task_id, req.tier_id,
                                       req.realized_ms_per_token, rw))
        estimator.true_rate = workload.rate
        rate_signal = estimate_rate(estimator, t_ms)
        state = RouterState(task, tuple(sim.observe()), rate_signal)
        x = encode(state, encoding)
        if last_request_id is not None:
            buffer.resolve_next_state(last_request_id, x)
        action = select_action(online, x, cfg.epsilon_at(it), rng_policy)
        req = Request(id=it, task_id=task, arrival_ms=t_ms,
                      tokens_target=tiers[action].tokens_per_request)
        sim.submit(req, action)
        buffer.begin(req.id, x, action)
        last_request_id = req.id

        loss = train_step(online, target, buffer, cfg, grad_steps + 1, optimizer,
                          rng_sample, kernel)
        if loss is not None:
            grad_steps += 1
            last_loss = loss
        if (it + 1) % cfg.log_every == 0:
            mean_recent = float(np.mean(recent)) if recent else math.nan
            log.append(LogRow(it + 1, last_loss, mean_recent, cfg.epsilon_at(it)))
    # unresolved pendings (no successor decision or still in flight) are dropped
    return TrainResult(net=online, log=log)


def fine_tune(net: QNetwork, reward_spec: RewardSpec, cfg: TrainConfig,
              tiers: Sequence[ModelTierSpec], encoding: Optional[StateEncoding] = None,
              completion_log: Optional[list] = None) -> TrainResult:
    """Continue training from an existing network under a new reward spec."""
    return run_training(tiers, reward_spec, cfg, encoding=encoding, init_net=net,
                        completion_log=completion_log)
