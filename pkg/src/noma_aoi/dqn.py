"""Double-Dueling-DQN learner.

The Q-network is a small ReLU MLP written directly in numpy with explicit
backpropagation: a shared trunk feeding a scalar value head and a
per-action advantage head, aggregated as Q = V + A - mean(A).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class Environment(Protocol):
    n_actions: int
    feature_dim: int

    def reset(self, rng=None): ...
    def step(self, state, index: int, rng): ...
    def action_mask(self, state) -> np.ndarray: ...
    def encode(self, state) -> np.ndarray: ...
    def weighted_aoi(self, state) -> float: ...


@dataclass
class TrainConfig:
    episodes: int = 500
    slots: int = 1000
    gamma: float = 0.95
    learning_rate: float = 1e-3
    epsilon: float = 0.1
    epsilon_decay: float = 0.99
    epsilon_min: float = 0.01
    replay_threshold: int = 200
    train_period: int = 4
    target_sync: int = 100
    batch_size: int = 64
    replay_capacity: int = 10_000
    hidden: tuple[int, ...] = (128, 128)
    double_dqn: bool = True
    dtype: str = "float32"
    reward_scale: float = 1.0
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        for name in ("epsilon", "epsilon_decay", "epsilon_min"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.train_period < 1 or self.target_sync < 1:
            raise ValueError("train_period and target_sync must be >= 1")
        if self.batch_size < 1 or self.replay_capacity < 1:
            raise ValueError("batch_size and replay_capacity must be >= 1")
        if self.episodes < 0 or self.slots < 1:
            raise ValueError("episodes must be >= 0 and slots >= 1")

    def epsilon_at(self, slot: int) -> float:
        """Exploration rate after ``slot`` decay steps."""
        return max(self.epsilon_min, self.epsilon * self.epsilon_decay ** slot)


# ---------------------------------------------------------------------------
# network


@dataclass
class DuelingQNet:
    """Parameters of the dueling MLP.

    ``trunk`` holds (W, b) pairs for the hidden layers; W has shape
    (fan_in, fan_out) so a batch X of shape (B, d) maps to X @ W + b.
    """

    trunk: list[tuple[np.ndarray, np.ndarray]]
    value: tuple[np.ndarray, np.ndarray]
    advantage: tuple[np.ndarray, np.ndarray]

    @classmethod
    def create(cls, input_dim: int, n_actions: int, hidden: Sequence[int] = (128, 128),
               rng: np.random.Generator | None = None, dtype="float64") -> "DuelingQNet":
        rng = rng if rng is not None else np.random.default_rng(0)

        def layer(fan_in, fan_out):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            return w.astype(dtype), np.zeros(fan_out, dtype=dtype)

        dims = [input_dim, *hidden]
        trunk = [layer(a, b) for a, b in zip(dims, dims[1:])]
        return cls(trunk, layer(dims[-1], 1), layer(dims[-1], n_actions))

    @property
    def input_dim(self) -> int:
        return self.trunk[0][0].shape[0] if self.trunk else self.value[0].shape[0]

    @property
    def dtype(self):
        return self.value[0].dtype

    @property
    def n_actions(self) -> int:
        return self.advantage[0].shape[1]

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [w.shape[1] for w, _ in self.trunk] + [self.n_actions]

    def params(self) -> list[np.ndarray]:
        out = [p for wb in self.trunk for p in wb]
        return out + [*self.value, *self.advantage]

    def copy(self) -> "DuelingQNet":
        return DuelingQNet([(w.copy(), b.copy()) for w, b in self.trunk],
                           tuple(p.copy() for p in self.value),
                           tuple(p.copy() for p in self.advantage))

    def same_architecture(self, other: "DuelingQNet") -> bool:
        return [p.shape for p in self.params()] == [p.shape for p in other.params()]


def _forward_cache(net: DuelingQNet, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    for w, b in net.trunk:
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    v = h @ net.value[0] + net.value[1]
    a = h @ net.advantage[0] + net.advantage[1]
    q = v + a - a.mean(axis=1, keepdims=True)
    return q, v, a, acts, pre


def forward_parts(net: DuelingQNet, features) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (Q, V, A) for a batch (or a single feature vector)."""
    x = np.asarray(features, dtype=net.dtype)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != net.input_dim:
        raise ValueError(f"feature length {x.shape[1]} does not match network input {net.input_dim}")
    q, v, a, _, _ = _forward_cache(net, x)
    if single:
        return q[0], v[0], a[0]
    return q, v, a


def forward(net: DuelingQNet, features) -> np.ndarray:
    return forward_parts(net, features)[0]


def loss_and_grads(net: DuelingQNet, states: np.ndarray, actions: np.ndarray,
                   targets: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean squared TD error and its exact gradient, ordered like ``net.params()``."""
    x = np.atleast_2d(np.asarray(states, dtype=net.dtype))
    q, v, a, acts, pre = _forward_cache(net, x)
    bsz = x.shape[0]
    rows = np.arange(bsz)
    err = np.asarray(targets, dtype=net.dtype) - q[rows, actions]
    loss = float(np.mean(err ** 2))

    dq = np.zeros_like(q)
    dq[rows, actions] = -2.0 * err / bsz
    dadv = dq - dq.mean(axis=1, keepdims=True)
    dv = dq.sum(axis=1, keepdims=True)
    h = acts[-1]
    g_adv = (h.T @ dadv, dadv.sum(axis=0))
    g_val = (h.T @ dv, dv.sum(axis=0))
    dh = dadv @ net.advantage[0].T + dv @ net.value[0].T

    g_trunk = []
    for k in range(len(net.trunk) - 1, -1, -1):
        dz = dh * (pre[k] > 0)
        g_trunk.append((acts[k].T @ dz, dz.sum(axis=0)))
        if k:
            dh = dz @ net.trunk[k][0].T
    g_trunk.reverse()
    grads = [g for wb in g_trunk for g in wb] + [*g_val, *g_adv]
    return loss, grads


def sgd_update(net: DuelingQNet, states, actions, targets, learning_rate: float) -> float:
    """One plain gradient-descent step in place; returns the pre-step loss."""
    with np.errstate(invalid="ignore", over="ignore"):
        loss, grads = loss_and_grads(net, states, np.asarray(actions), np.asarray(targets, dtype=float))
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDiverged(f"non-finite loss {loss}")
    if learning_rate:
        for p, g in zip(net.params(), grads):
            p -= learning_rate * g
    return loss


class Adam:
    """Adam moments for a network's parameter list."""

    def __init__(self, net: DuelingQNet, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in net.params()]
        self.v = [np.zeros_like(p) for p in net.params()]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def update(self, net: DuelingQNet, states, actions, targets, learning_rate: float) -> float:
        with np.errstate(invalid="ignore", over="ignore"):
            loss, grads = loss_and_grads(net, states, np.asarray(actions), np.asarray(targets, dtype=float))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr = learning_rate * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, g, m, v in zip(net.params(), grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * m / (np.sqrt(v) + self.eps)
        return loss


def sync_target(main: DuelingQNet, target: DuelingQNet) -> DuelingQNet:
    if not main.same_architecture(target):
        raise ValueError("main and target networks differ in architecture")
    for dst, src in zip(target.params(), main.params()):
        dst[...] = src
    return target


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> int:
    """Index of the largest valid Q value; ties resolve to the lowest index."""
    if not mask.any():
        raise ValueError("no valid action")
    return int(np.argmax(np.where(mask, q, -np.inf)))


def select_action(net: DuelingQNet, features, mask: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> int:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("action mask has no valid entry")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.choice(np.flatnonzero(mask)))
    return masked_argmax(forward(net, features), mask)


def td_targets(rewards, next_states, next_masks, main: DuelingQNet, target: DuelingQNet,
               gamma: float, double_dqn: bool = True) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size == 0:
        raise ValueError("empty batch")
    if gamma == 0:
        return rewards.copy()
    next_masks = np.asarray(next_masks, dtype=bool)
    q_tgt = forward(target, next_states)
    if double_dqn:
        q_main = forward(main, next_states)
        best = np.argmax(np.where(next_masks, q_main, -np.inf), axis=1)
        boot = q_tgt[np.arange(len(best)), best]
    else:
        boot = np.where(next_masks, q_tgt, -np.inf).max(axis=1)
    return rewards + gamma * boot


# ---------------------------------------------------------------------------
# replay


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored as numpy arrays."""

    def __init__(self, capacity: int, feature_dim: int, n_actions: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, feature_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, feature_dim))
        self.next_masks = np.zeros((capacity, n_actions), dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, state, action, reward, next_state, next_mask):
        k = self._next
        self.states[k] = state
        self.actions[k] = action
        self.rewards[k] = reward
        self.next_states[k] = next_state
        self.next_masks[k] = next_mask
        self._next = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def oldest(self) -> int:
        """Ring position of the oldest stored transition."""
        return self._next if self._size == self.capacity else 0

    def ordered_indices(self) -> np.ndarray:
        return (self.oldest() + np.arange(self._size)) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self._size, size=batch_size)
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.next_masks[idx])


# ---------------------------------------------------------------------------
# policies and evaluation


class GreedyPolicy:
    """Greedy action of a frozen network; memoises per state."""

    def __init__(self, net: DuelingQNet, env: Environment):
        self.net = net
        self.env = env
        self._memo: dict = {}

    def __call__(self, state) -> int:
        a = self._memo.get(state)
        if a is None:
            q = forward(self.net, self.env.encode(state))
            a = masked_argmax(q, self.env.action_mask(state))
            if len(self._memo) > 500_000:
                self._memo.clear()
            self._memo[state] = a
        return a


@dataclass
class EvalResult:
    mean_aoi: float
    stderr: float
    round_fractions: list[float]
    slots: int
    episode_means: list[float] = field(default_factory=list)
    episode_fractions: list[list[float]] = field(default_factory=list)

    def fraction_stderr(self) -> list[float]:
        """Standard error of each round fraction across episodes."""
        f = np.asarray(self.episode_fractions, dtype=float)
        if f.shape[0] < 2:
            return [0.0] * len(self.round_fractions)
        return (f.std(axis=0, ddof=1) / math.sqrt(f.shape[0])).tolist()


def evaluate_policy(env: Environment, policy: Callable, horizon: int = 10_000, episodes: int = 10,
                    warmup: float = 0.1, rng: np.random.Generator | None = None,
                    t_max: int | None = None) -> EvalResult:
    """Time-averaged weighted AoI after warm-up, averaged over episodes.

    Also tallies, for every package whose transmission ended after warm-up,
    the round count it reached (index T-1 holds the fraction for T rounds).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    skip = int(round(warmup * horizon))
    if horizon < 1 or episodes < 1 or skip >= horizon:
        raise ValueError(f"degenerate evaluation: horizon={horizon}, warmup slots={skip}")
    t_max = t_max or env.config.t_max
    counts = np.zeros(t_max, dtype=np.int64)
    means, per_episode = [], []
    for _ in range(episodes):
        before = counts.copy()
        state = env.reset(rng)
        if hasattr(policy, "reset"):
            policy.reset()
        total = 0.0
        for t in range(horizon):
            a = policy(state)
            outcome = env.step(state, a, rng)
            if t >= skip:
                for r in env.finished_packages(state, a):
                    counts[r - 1] += 1
                total += env.weighted_aoi(outcome.next_state)
            if hasattr(policy, "observe"):
                policy.observe(outcome)
            state = outcome.next_state
        means.append(total / (horizon - skip))
        ep = counts - before
        per_episode.append((ep / ep.sum()).tolist() if ep.sum() else [1.0] + [0.0] * (t_max - 1))
    means_arr = np.asarray(means)
    se = float(means_arr.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    n = counts.sum()
    fractions = (counts / n).tolist() if n else [1.0] + [0.0] * (t_max - 1)
    return EvalResult(float(means_arr.mean()), se, fractions, episodes * (horizon - skip), means, per_episode)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    net: DuelingQNet
    curve: list[tuple[int, float, float, float]]  # episode, mean reward, mean weighted AoI, epsilon
    gradient_steps: int


def train(env: Environment, config: TrainConfig, callback: Callable | None = None,
          slot_hook: Callable | None = None) -> TrainResult:
    """Run the episodic DQN loop and return the final main network.

    ``callback(episode, mean_reward)`` fires after each episode and
    ``slot_hook(slot, net, target, epsilon)`` after each slot (global slot
    count starting at 1, epsilon as used for that slot's action).
    """
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, env_rng, agent_rng = (np.random.default_rng(s) for s in seeds)
    net = DuelingQNet.create(env.feature_dim, env.n_actions, config.hidden, init_rng, config.dtype)
    target = net.copy()
    if config.optimizer == "adam":
        update = Adam(net).update
    elif config.optimizer == "sgd":
        update = sgd_update
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    replay = ReplayBuffer(config.replay_capacity, env.feature_dim, env.n_actions)
    curve = []
    slot = 0
    steps = 0
    for episode in range(1, config.episodes + 1):
        state = env.reset(env_rng)
        x = env.encode(state)
        mask = env.action_mask(state)
        reward_sum = 0.0
        for t in range(1, config.slots + 1):
            eps = config.epsilon_at(slot)
            a = select_action(net, x, mask, eps, agent_rng)
            slot += 1
            outcome = env.step(state, a, env_rng)
            nxt = outcome.next_state
            x_next = env.encode(nxt)
            mask_next = env.action_mask(nxt)
            replay.add(x, a, outcome.reward * config.reward_scale, x_next, mask_next)
            reward_sum += outcome.reward
            if len(replay) > config.replay_threshold and t % config.train_period == 0:
                s, act, r, s2, m2 = replay.sample(config.batch_size, agent_rng)
                y = td_targets(r, s2, m2, net, target, config.gamma, config.double_dqn)
                try:
                    update(net, s, act, y, config.learning_rate)
                except TrainingDiverged as exc:
                    raise TrainingDiverged(f"episode {episode}: {exc}") from exc
                steps += 1
            if t % config.target_sync == 0:
                sync_target(net, target)
            if slot_hook is not None:
                slot_hook(slot, net, target, eps)
            state, x, mask = nxt, x_next, mask_next
        mean_reward = reward_sum / config.slots
        curve.append((episode, mean_reward, -mean_reward, config.epsilon_at(slot)))
        if callback is not None:
            callback(episode, mean_reward)
    return TrainResult(net, curve, steps)


# ---------------------------------------------------------------------------
# serialisation

NET_MAGIC = "dueling-qnet v1"


def config_hash(*objs) -> str:
    blob = json.dumps([asdict(o) if hasattr(o, "__dataclass_fields__") else o for o in objs],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_net(net: DuelingQNet, path, cfg_hash: str = "") -> None:
    """Text format: magic line, JSON header, then one line per parameter array
    (row-major, ``repr`` floats so values round-trip exactly)."""
    header = {"layer_dims": net.layer_dims, "n_actions": net.n_actions, "config_hash": cfg_hash,
              "dtype": str(net.dtype), "shapes": [list(p.shape) for p in net.params()]}
    with open(path, "w") as fh:
        fh.write(NET_MAGIC + "\n")
        fh.write(json.dumps(header) + "\n")
        for p in net.params():
            fh.write(" ".join(repr(float(v)) for v in p.ravel()) + "\n")


def load_net(path) -> tuple[DuelingQNet, dict]:
    with open(path) as fh:
        if fh.readline().strip() != NET_MAGIC:
            raise ValueError(f"{path}: not a dueling-qnet file")
        header = json.loads(fh.readline())
        dtype = header.get("dtype", "float64")
        arrays = [np.array([float(v) for v in fh.readline().split()], dtype=dtype).reshape(shape)
                  for shape in header["shapes"]]
    pairs = [(arrays[k], arrays[k + 1]) for k in range(0, len(arrays), 2)]
    return DuelingQNet(pairs[:-2], pairs[-2], pairs[-1]), header
