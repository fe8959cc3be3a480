"""Reference policies, NACK-gated and user-pairing variants, and an exact
value-iteration oracle for small instances."""

from __future__ import annotations

import csv
import enum
import hashlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .channel import ChannelMode
from .env import (EnvAction, EnvConfig, EnvState, NomaEnv, StepOutcome, check_power_vector,
                  enumerate_power_vectors, user_blers, weighted_aoi)

log = logging.getLogger(__name__)

Policy = Callable[[Any], int]


class PolicyKind(str, enum.Enum):
    FIXED = "fixed"
    RESTRICTED = "restricted"
    RETRANSMIT_AT_WILL = "raw"
    RANDOM = "random"
    PAIRING = "pairing"


@dataclass(frozen=True)
class PolicySpec:
    kind: PolicyKind
    params: dict = field(default_factory=dict, hash=False, compare=False)

    @property
    def name(self) -> str:
        return PolicyKind(self.kind).value

    @property
    def learned(self) -> bool:
        return PolicyKind(self.kind) in (PolicyKind.RESTRICTED, PolicyKind.RETRANSMIT_AT_WILL,
                                         PolicyKind.PAIRING)


def fixed_policy(env: NomaEnv, alloc: Sequence[int]) -> Policy:
    """Always send new packages with the same power vector."""
    alloc = check_power_vector(alloc, env.config.m_levels, env.n_users)
    index = env.encode_action(EnvAction(alloc, (False,) * env.n_users))

    def policy(state):
        return index

    return policy


def random_policy(env, rng: np.random.Generator) -> Policy:
    def policy(state):
        return int(rng.choice(np.flatnonzero(env.action_mask(state))))

    return policy


# ---------------------------------------------------------------------------
# NACK-gated retransmission


class RestrictedPolicy:
    """Retransmission allowed only after a NACK.

    Wraps any decision rule over plain environment states and clears the
    retransmit flag of every user that acknowledged in the previous slot.
    Feedback must be supplied through ``observe`` after every step.
    """

    def __init__(self, inner: Policy, env: NomaEnv):
        self.inner = inner
        self.env = env
        self.reset()

    def reset(self):
        # a fresh start behaves like an all-ACK slot: only new packages
        self.last_decoded: tuple[bool, ...] | None = (True,) * self.env.n_users
        self._awaiting = False

    def observe(self, outcome: StepOutcome):
        self.last_decoded = tuple(outcome.decoded)
        self._awaiting = False

    def allowed_bits(self) -> int:
        if self.last_decoded is None or self._awaiting:
            raise RuntimeError("restricted policy called without decode feedback from the last slot")
        return sum(1 << i for i, ok in enumerate(self.last_decoded) if not ok)

    def allowed_mask(self, state: EnvState) -> np.ndarray:
        bits = self.allowed_bits()
        flags = np.array([(b & ~bits) == 0 for b in range(self.env.n_flags)])
        return self.env.action_mask(state) & np.tile(flags, len(self.env.power_vectors))

    def __call__(self, state: EnvState) -> int:
        bits = self.allowed_bits()
        a = int(self.inner(state))
        p, flags = divmod(a, self.env.n_flags)
        self._awaiting = True
        return p * self.env.n_flags + (flags & bits)


def restricted_policy(inner: Policy, env: NomaEnv) -> RestrictedPolicy:
    return RestrictedPolicy(inner, env)


@dataclass(frozen=True)
class GatedState:
    base: EnvState
    acked: tuple[bool, ...]

    @property
    def aoi(self):
        return self.base.aoi

    @property
    def rounds(self):
        return self.base.rounds


class NackGatedEnv:
    """The transmission MDP with the prior-work constraint built in.

    The last slot's ACK flags join the state, and the action mask only lets
    NACKed users retransmit.  Used to train the restricted-retransmission
    agent on equal footing with the unrestricted one.
    """

    def __init__(self, config: EnvConfig, **kwargs):
        self.base = NomaEnv(config, **kwargs)
        self.config = config
        self.n_users = config.n_users
        self.n_actions = self.base.n_actions
        self.n_flags = self.base.n_flags
        self.power_vectors = self.base.power_vectors
        self.feature_dim = self.base.feature_dim + self.n_users

    def reset(self, rng=None) -> GatedState:
        return GatedState(self.base.reset(rng), (True,) * self.n_users)

    def action_mask(self, state: GatedState) -> np.ndarray:
        nacked = sum(1 << i for i, ok in enumerate(state.acked) if not ok)
        flags = np.array([(b & ~nacked) == 0 for b in range(self.n_flags)])
        return self.base.action_mask(state.base) & np.tile(flags, len(self.power_vectors))

    def is_valid(self, state: GatedState, index: int) -> bool:
        nacked = sum(1 << i for i, ok in enumerate(state.acked) if not ok)
        return self.base.is_valid(state.base, index) and (index % self.n_flags) & ~nacked == 0

    def step(self, state: GatedState, index: int, rng) -> StepOutcome:
        if not self.is_valid(state, index):
            raise ValueError(f"action {index} retransmits to an acknowledged user")
        out = self.base.step(state.base, index, rng)
        return StepOutcome(GatedState(out.next_state, out.decoded), out.reward, out.decoded, out.blers)

    def encode(self, state: GatedState) -> np.ndarray:
        return np.concatenate([self.base.encode(state.base), np.asarray(state.acked, dtype=float)])

    def weighted_aoi(self, state) -> float:
        return self.base.weighted_aoi(state.base)

    def finished_packages(self, state: GatedState, index: int) -> list[int]:
        return self.base.finished_packages(state.base, index)

    def decode_action(self, index: int) -> EnvAction:
        return self.base.decode_action(index)


# ---------------------------------------------------------------------------
# user pairing


@dataclass(frozen=True)
class PairingPlan:
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pairs = tuple(tuple(sorted(int(u) for u in p)) for p in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        users = [u for p in pairs for u in p]
        if any(len(p) != 2 or p[0] == p[1] for p in pairs):
            raise ValueError(f"malformed pairs {pairs}")
        if sorted(users) != list(range(1, len(users) + 1)):
            raise ValueError(f"pairs {pairs} must cover users 1..{len(users)} exactly once")

    @classmethod
    def strongest_weakest(cls, n_users: int) -> "PairingPlan":
        if n_users % 2:
            raise ValueError("pairing needs an even number of users")
        return cls(tuple((i, n_users + 1 - i) for i in range(1, n_users // 2 + 1)))


@dataclass(frozen=True)
class PairedState:
    buffers: tuple[tuple[tuple[int, int], ...], ...]  # per pair, oldest first
    rounds: tuple[int, ...]
    aoi: tuple[int, ...]
    gain_buffers: tuple = ()


class PairedNomaEnv:
    """One strongest/weakest pair is served per slot with 2-user NOMA.

    Action index = (pair * P2 + power_index) * 4 + flags, where P2 counts the
    2-user power vectors and flag bit 0 (1) belongs to the pair's stronger
    (weaker) user.  Users outside the served pair age by one slot and keep
    their pending package.
    """

    def __init__(self, config: EnvConfig, plan: PairingPlan | None = None,
                 bler_override: Callable | None = None):
        if config.n_users % 2:
            raise ValueError("pairing needs an even number of users")
        self.config = config
        self.plan = plan if plan is not None else PairingPlan.strongest_weakest(config.n_users)
        if len(self.plan.pairs) * 2 != config.n_users:
            raise ValueError("pairing plan does not match the user count")
        self.n_users = config.n_users
        self.power_vectors = enumerate_power_vectors(2, config.m_levels)
        if not self.power_vectors:
            raise ValueError(f"no 2-user power vector for M={config.m_levels}")
        self.n_pairs = len(self.plan.pairs)
        self.n_flags = 4
        self.n_actions = self.n_pairs * len(self.power_vectors) * self.n_flags
        self.feature_dim = self.n_pairs * (config.t_max - 1) * 2 + 2 * self.n_users
        self._base = NomaEnv(config)
        self._mean_gains = self._base._mean_gains
        self._cache: dict = {}
        self.bler_override = bler_override

    def decode_action(self, index: int) -> tuple[int, tuple[int, int], tuple[bool, bool]]:
        rest, bits = divmod(int(index), self.n_flags)
        pair, p = divmod(rest, len(self.power_vectors))
        return pair, self.power_vectors[p], (bool(bits & 1), bool(bits & 2))

    def reset(self, rng=None) -> PairedState:
        t = self.config.t_max
        buf = ((self.power_vectors[0],) * (t - 1),) * self.n_pairs
        gains = ()
        if self.config.channel_mode is ChannelMode.SAMPLED_RAYLEIGH:
            gains = tuple(((self._mean_gains[s - 1], self._mean_gains[w - 1]),) * (t - 1)
                          for s, w in self.plan.pairs)
        return PairedState(buf, (1,) * self.n_users, (1,) * self.n_users, gains)

    def _blocked(self, state: PairedState, pair: int) -> int:
        s, w = self.plan.pairs[pair]
        t = self.config.t_max
        return (state.rounds[s - 1] >= t) | ((state.rounds[w - 1] >= t) << 1)

    def action_mask(self, state: PairedState) -> np.ndarray:
        rows = []
        for pair in range(self.n_pairs):
            blocked = self._blocked(state, pair)
            flags = np.array([(b & blocked) == 0 for b in range(4)])
            rows.append(np.tile(flags, len(self.power_vectors)))
        return np.concatenate(rows)

    def is_valid(self, state: PairedState, index: int) -> bool:
        if not 0 <= index < self.n_actions:
            return False
        pair = index // (self.n_flags * len(self.power_vectors))
        return (index % self.n_flags) & self._blocked(state, pair) == 0

    def _pair_rounds(self, state, pair, flags):
        s, w = self.plan.pairs[pair]
        return tuple(state.rounds[u - 1] + 1 if f else 1 for u, f in zip((s, w), flags))

    def blers(self, state: PairedState, index: int, gains=None) -> tuple[float, float]:
        """(stronger, weaker) user BLERs of the served pair."""
        if self.bler_override is not None:
            return tuple(self.bler_override(state, index))
        cfg = self.config
        pair, alloc, flags = self.decode_action(index)
        rounds = self._pair_rounds(state, pair, flags)
        history = state.buffers[pair] + (alloc,)
        s, w = self.plan.pairs[pair]
        if gains is None:
            depth = max(rounds)
            key = (pair, history[len(history) - depth:], rounds)
            hit = self._cache.get(key)
            if hit is None:
                g = (self._mean_gains[s - 1], self._mean_gains[w - 1])
                hit = user_blers(key[1], rounds, (g,) * depth, cfg.m_levels, cfg.snr_linear, cfg.code)
                self._cache[key] = hit
            return hit
        gain_hist = state.gain_buffers[pair] + (tuple(gains),)
        return user_blers(history, rounds, gain_hist, cfg.m_levels, cfg.snr_linear, cfg.code)

    def _advance(self, state: PairedState, index: int, decoded_pair, gains):
        cfg = self.config
        pair, alloc, flags = self.decode_action(index)
        served = self.plan.pairs[pair]
        new_rounds = dict(zip(served, self._pair_rounds(state, pair, flags)))
        ok = dict(zip(served, decoded_pair))
        rounds, aoi = [], []
        for u in range(1, self.n_users + 1):
            if u in new_rounds:
                rounds.append(new_rounds[u])
                aoi.append(new_rounds[u] if ok[u] else min(state.aoi[u - 1] + 1, cfg.aoi_cap))
            else:
                rounds.append(state.rounds[u - 1])
                aoi.append(min(state.aoi[u - 1] + 1, cfg.aoi_cap))
        buffers = list(state.buffers)
        if cfg.t_max > 1:
            buffers[pair] = buffers[pair][1:] + (alloc,)
        gain_buffers = state.gain_buffers
        if gains is not None and cfg.t_max > 1:
            gain_buffers = list(gain_buffers)
            gain_buffers[pair] = gain_buffers[pair][1:] + (tuple(gains),)
            gain_buffers = tuple(gain_buffers)
        nxt = PairedState(tuple(buffers), tuple(rounds), tuple(aoi), gain_buffers)
        return nxt, -weighted_aoi(cfg.weights, aoi)

    def step(self, state: PairedState, index: int, rng) -> StepOutcome:
        if not self.is_valid(state, index):
            raise ValueError(f"action {index} is not valid")
        pair = self.decode_action(index)[0]
        gains = None
        if self.config.channel_mode is ChannelMode.SAMPLED_RAYLEIGH and self.bler_override is None:
            s, w = self.plan.pairs[pair]
            draw = rng.exponential(1.0, 2)
            gains = (self._mean_gains[s - 1] * draw[0], self._mean_gains[w - 1] * draw[1])
        eps = self.blers(state, index, gains)
        u = rng.random(2)
        dec = (bool(u[0] >= eps[0]), bool(u[1] >= eps[1]))
        nxt, reward = self._advance(state, index, dec, gains)
        served = self.plan.pairs[pair]
        decoded = tuple(dec[served.index(u)] if u in served else False
                        for u in range(1, self.n_users + 1))
        blers = tuple(eps[served.index(u)] if u in served else 1.0
                      for u in range(1, self.n_users + 1))
        return StepOutcome(nxt, reward, decoded, blers)

    def transition_table(self, state: PairedState, index: int):
        if self.config.channel_mode is not ChannelMode.DETERMINISTIC_MEAN:
            raise NotImplementedError("exact transitions need DeterministicMean channels")
        eps = self.blers(state, index)
        out = []
        for dec in itertools.product((False, True), repeat=2):
            p = (1 - eps[0] if dec[0] else eps[0]) * (1 - eps[1] if dec[1] else eps[1])
            out.append((self._advance(state, index, dec, None)[0], p))
        return out

    def finished_packages(self, state: PairedState, index: int) -> list[int]:
        pair, _, flags = self.decode_action(index)
        return [state.rounds[u - 1] for u, f in zip(self.plan.pairs[pair], flags) if not f]

    def encode(self, state: PairedState) -> np.ndarray:
        cfg = self.config
        parts = [lvl / cfg.m_levels for buf in state.buffers for pv in buf for lvl in pv]
        parts += [t / cfg.t_max for t in state.rounds]
        parts += [min(a, cfg.aoi_cap) / cfg.aoi_cap for a in state.aoi]
        return np.array(parts, dtype=float)

    def weighted_aoi(self, state) -> float:
        return weighted_aoi(self.config.weights, state.aoi)


# ---------------------------------------------------------------------------
# exact oracle


@dataclass
class ValueIterationResult:
    states: list[EnvState]
    values: np.ndarray
    actions: np.ndarray  # greedy action index per state
    residuals: list[float]
    gamma: float

    def __post_init__(self):
        self._index = {s: k for k, s in enumerate(self.states)}

    def policy(self) -> Policy:
        lookup = {s: int(a) for s, a in zip(self.states, self.actions)}

        def act(state):
            return lookup[state]

        return act

    def value(self, state: EnvState) -> float:
        return float(self.values[self._index[state]])


def enumerate_states(env: NomaEnv) -> list[EnvState]:
    cfg = env.config
    n = cfg.n_users
    bufs = itertools.product(env.power_vectors, repeat=cfg.t_max - 1)
    return [EnvState(tuple(b), tuple(r), tuple(a))
            for b in bufs
            for r in itertools.product(range(1, cfg.t_max + 1), repeat=n)
            for a in itertools.product(range(1, cfg.aoi_cap + 1), repeat=n)]


def state_space_size(config: EnvConfig) -> int:
    n_pv = len(enumerate_power_vectors(config.n_users, config.m_levels))
    return n_pv ** (config.t_max - 1) * config.t_max ** config.n_users * config.aoi_cap ** config.n_users


def value_iteration(env: NomaEnv, gamma: float = 0.95, tolerance: float = 1e-6,
                    max_states: int = 1_000_000, max_sweeps: int = 100_000) -> ValueIterationResult:
    """Discounted value iteration over the full (capped) state space."""
    cfg = env.config
    if cfg.channel_mode is not ChannelMode.DETERMINISTIC_MEAN:
        raise ValueError("value iteration needs DeterministicMean channels")
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    size = state_space_size(cfg)
    if size > max_states:
        raise ValueError(f"state space has {size} states, above the limit of {max_states}")
    states = enumerate_states(env)
    index = {s: k for k, s in enumerate(states)}
    n_out = 2 ** cfg.n_users
    n_s, n_a = len(states), env.n_actions
    nxt = np.zeros((n_s, n_a, n_out), dtype=np.int64)
    prob = np.zeros((n_s, n_a, n_out))
    reward = np.full((n_s, n_a), -np.inf)
    valid = np.zeros((n_s, n_a), dtype=bool)
    for k, s in enumerate(states):
        for a in env.valid_actions(s):
            table = env.transition_table(s, a)
            valid[k, a] = True
            r = 0.0
            for o, (s2, p) in enumerate(table):
                nxt[k, a, o] = index[s2]
                prob[k, a, o] = p
                r += p * -weighted_aoi(cfg.weights, s2.aoi)
            reward[k, a] = r
    values = np.zeros(n_s)
    residuals = []
    for _ in range(max_sweeps):
        q = np.where(valid, reward + gamma * np.einsum("sao,sao->sa", prob, values[nxt]), -np.inf)
        new = q.max(axis=1)
        res = float(np.max(np.abs(new - values)))
        residuals.append(res)
        values = new
        if res < tolerance:
            break
    q = np.where(valid, reward + gamma * np.einsum("sao,sao->sa", prob, values[nxt]), -np.inf)
    return ValueIterationResult(states, values, np.argmax(q, axis=1), residuals, gamma)


def state_hash(state) -> str:
    return hashlib.sha1(repr(state).encode()).hexdigest()[:16]


def write_policy_table(path, result: ValueIterationResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state_hash", "power_buffer", "rounds", "aoi", "action"])
        for s, a in zip(result.states, result.actions):
            w.writerow([state_hash(s), " ".join("-".join(map(str, pv)) for pv in s.power_buffer),
                        " ".join(map(str, s.rounds)), " ".join(map(str, s.aoi)), int(a)])
