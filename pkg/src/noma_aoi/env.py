"""Slotted MDP for age-optimal HARQ-CC NOMA downlink transmission.

State is (power buffer, transmission rounds, AoI).  An action picks a power
vector on the M-level grid plus a retransmit flag per user; actions are
indexed ``power_index * 2**N + flag_bits`` with bit ``i-1`` holding user i's
flag.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from .channel import ChannelMode, ChannelParams, db_to_linear, path_loss_gain
from .fbl import CodeParams, bler_from_sinr, chain_bler

PowerVector = tuple[int, ...]


def enumerate_power_vectors(n_users: int, m_levels: int) -> list[PowerVector]:
    """Strictly increasing level vectors summing to ``m_levels``, lexicographic."""
    if n_users < 1 or m_levels < 2:
        return []
    return [c for c in itertools.combinations(range(1, m_levels), n_users) if sum(c) == m_levels]


def check_power_vector(levels: Sequence[int], m_levels: int, n_users: int | None = None) -> PowerVector:
    levels = tuple(int(x) for x in levels)
    if n_users is not None and len(levels) != n_users:
        raise ValueError(f"power vector {levels} has {len(levels)} entries, expected {n_users}")
    if any(x < 1 or x >= m_levels for x in levels):
        raise ValueError(f"power levels {levels} outside 1..{m_levels - 1}")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"power levels {levels} not strictly increasing")
    if sum(levels) != m_levels:
        raise ValueError(f"power levels {levels} do not sum to {m_levels}")
    return levels


@dataclass(frozen=True)
class EnvConfig:
    n_users: int = 4
    m_levels: int = 20
    t_max: int = 2
    weights: tuple[float, ...] | None = None
    aoi_cap: int = 64
    distances: tuple[float, ...] = (1.5, 2.0, 2.5, 3.0)
    path_loss_exponent: float = 2.0
    snr_db: float = 10.0
    channel_mode: ChannelMode = ChannelMode.DETERMINISTIC_MEAN
    code: CodeParams = field(default_factory=CodeParams)
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1:
            raise ValueError("n_users must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.aoi_cap < 1:
            raise ValueError("aoi_cap must be >= 1")
        if self.m_levels < self.n_users * (self.n_users + 1) // 2:
            raise ValueError(f"m_levels={self.m_levels} admits no valid power vector for "
                             f"{self.n_users} users (need >= {self.n_users * (self.n_users + 1) // 2})")
        if len(self.distances) != self.n_users:
            raise ValueError(f"{len(self.distances)} distances given for {self.n_users} users")
        if self.weights is None:
            object.__setattr__(self, "weights", (1.0 / self.n_users,) * self.n_users)
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "distances", tuple(float(d) for d in self.distances))
        object.__setattr__(self, "channel_mode", ChannelMode(self.channel_mode))
        if len(self.weights) != self.n_users or any(w <= 0 for w in self.weights):
            raise ValueError(f"weights must be {self.n_users} positive reals, got {self.weights}")
        # validates distances / exponent / snr
        self.channel

    @property
    def snr_linear(self) -> float:
        return db_to_linear(self.snr_db)

    @property
    def channel(self) -> ChannelParams:
        return ChannelParams(self.distances, self.path_loss_exponent, self.snr_linear)


@dataclass(frozen=True)
class EnvState:
    power_buffer: tuple[PowerVector, ...]
    rounds: tuple[int, ...]
    aoi: tuple[int, ...]
    # realised gains of the last T_max-1 slots, oldest first (SampledRayleigh only)
    gain_buffer: tuple[tuple[float, ...], ...] = ()


@dataclass(frozen=True)
class EnvAction:
    alloc: PowerVector
    retransmit: tuple[bool, ...]


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    reward: float
    decoded: tuple[bool, ...]
    blers: tuple[float, ...]


def weighted_aoi(weights: Sequence[float], aoi: Sequence[int]) -> float:
    return math.fsum(w * a for w, a in zip(weights, aoi))


def user_blers(alloc_history: Sequence[Sequence[PowerVector]], rounds: Sequence[int],
               gains_history: Sequence[Sequence[float]], m_levels: int, snr_linear: float,
               code: CodeParams) -> tuple[float, ...]:
    """Per-user SIC-chain BLERs.

    ``alloc_history`` lists the power vectors of the recent slots, oldest
    first, ending with the current one; ``gains_history`` is aligned with it
    (one gain per user per slot).  Package j combines its newest
    ``rounds[j]`` rounds.
    """
    n = len(rounds)
    inv_snr = 1.0 / snr_linear
    out = []
    for i in range(n):
        links = []
        for j in range(i, n):
            t = rounds[j]
            sinr = 0.0
            for alloc, gains in zip(alloc_history[-t:], gains_history[-t:]):
                g = gains[i]
                sinr += alloc[j] * g / (sum(alloc[:j]) * g + m_levels * inv_snr)
            links.append(bler_from_sinr(sinr, code))
        out.append(chain_bler(links))
    return tuple(out)


class NomaEnv:
    """Environment for one configuration.

    Stateless with respect to the trajectory: ``step`` maps a state and an
    action index to an outcome, so the same instance serves training,
    evaluation and exact transition enumeration.  ``bler_override`` replaces
    the physical layer (tests use it to pin every user's BLER).
    """

    def __init__(self, config: EnvConfig,
                 bler_override: Callable[[EnvState, int], Sequence[float]] | None = None):
        self.config = config
        self.n_users = config.n_users
        self.power_vectors = enumerate_power_vectors(config.n_users, config.m_levels)
        if not self.power_vectors:
            raise ValueError(f"no valid power vector for N={config.n_users}, M={config.m_levels}")
        self._pv_index = {pv: k for k, pv in enumerate(self.power_vectors)}
        self.n_flags = 2 ** self.n_users
        self.n_actions = len(self.power_vectors) * self.n_flags
        self.feature_dim = (config.t_max - 1) * self.n_users + 2 * self.n_users
        self.weights = np.asarray(config.weights)
        self._mean_gains = tuple(path_loss_gain(d, config.path_loss_exponent) for d in config.distances)
        self._bler_cache: dict = {}
        self.bler_override = bler_override

    # -- actions -------------------------------------------------------------
    def decode_action(self, index: int) -> EnvAction:
        p, bits = divmod(int(index), self.n_flags)
        return EnvAction(self.power_vectors[p],
                         tuple(bool(bits >> i & 1) for i in range(self.n_users)))

    def encode_action(self, action: EnvAction) -> int:
        alloc = check_power_vector(action.alloc, self.config.m_levels, self.n_users)
        if alloc not in self._pv_index:
            raise ValueError(f"unknown power vector {alloc}")
        bits = sum(1 << i for i, f in enumerate(action.retransmit) if f)
        return self._pv_index[alloc] * self.n_flags + bits

    def _blocked_bits(self, state: EnvState) -> int:
        return sum(1 << i for i, t in enumerate(state.rounds) if t >= self.config.t_max)

    def action_mask(self, state: EnvState) -> np.ndarray:
        blocked = self._blocked_bits(state)
        flag_ok = np.array([(b & blocked) == 0 for b in range(self.n_flags)])
        return np.tile(flag_ok, len(self.power_vectors))

    def valid_actions(self, state: EnvState) -> list[int]:
        return [int(a) for a in np.flatnonzero(self.action_mask(state))]

    def enumerate_actions(self, state: EnvState) -> list[EnvAction]:
        return [self.decode_action(a) for a in self.valid_actions(state)]

    def finished_packages(self, state: EnvState, index: int) -> list[int]:
        """Final round counts of the packages superseded by a new one in this slot."""
        bits = int(index) % self.n_flags
        return [t for i, t in enumerate(state.rounds) if not bits >> i & 1]

    def is_valid(self, state: EnvState, index: int) -> bool:
        if not 0 <= index < self.n_actions:
            return False
        return (index % self.n_flags) & self._blocked_bits(state) == 0

    # -- dynamics ------------------------------------------------------------
    def reset(self, rng: np.random.Generator | None = None) -> EnvState:
        cfg = self.config
        buf = (self.power_vectors[0],) * (cfg.t_max - 1)
        gains: tuple = ()
        if cfg.channel_mode is ChannelMode.SAMPLED_RAYLEIGH:
            gains = (self._mean_gains,) * (cfg.t_max - 1)
        return EnvState(buf, (1,) * self.n_users, (1,) * self.n_users, gains)

    def next_rounds(self, state: EnvState, action: EnvAction) -> tuple[int, ...]:
        return tuple(t + 1 if chi else 1 for t, chi in zip(state.rounds, action.retransmit))

    def blers(self, state: EnvState, index: int,
              gains: Sequence[float] | None = None) -> tuple[float, ...]:
        """Per-user BLERs if ``index`` is played in ``state``.

        ``gains`` are this slot's realised gains (SampledRayleigh); under
        DeterministicMean the mean gains are used and results are cached.
        """
        if self.bler_override is not None:
            return tuple(float(e) for e in self.bler_override(state, index))
        cfg = self.config
        action = self.decode_action(index)
        rounds = self.next_rounds(state, action)
        history = state.power_buffer + (action.alloc,)
        if cfg.channel_mode is ChannelMode.DETERMINISTIC_MEAN and gains is None:
            # only the rounds actually combined matter for the key
            depth = max(rounds)
            key = (history[len(history) - depth:], rounds)
            hit = self._bler_cache.get(key)
            if hit is None:
                hit = user_blers(key[0], rounds, (self._mean_gains,) * depth,
                                 cfg.m_levels, cfg.snr_linear, cfg.code)
                self._bler_cache[key] = hit
            return hit
        if gains is None:
            raise ValueError("SampledRayleigh BLERs need the slot's realised gains")
        gain_hist = state.gain_buffer + (tuple(gains),)
        return user_blers(history, rounds, gain_hist, cfg.m_levels, cfg.snr_linear, cfg.code)

    def _advance(self, state: EnvState, action: EnvAction, decoded: Sequence[bool],
                 gains: tuple[float, ...] | None) -> tuple[EnvState, float]:
        cfg = self.config
        rounds = self.next_rounds(state, action)
        aoi = tuple(t if ok else min(a + 1, cfg.aoi_cap)
                    for a, t, ok in zip(state.aoi, rounds, decoded))
        if cfg.t_max > 1:
            buf = state.power_buffer[1:] + (action.alloc,)
        else:
            buf = ()
        gain_buf = state.gain_buffer
        if gains is not None and cfg.t_max > 1:
            gain_buf = gain_buf[1:] + (gains,)
        reward = -weighted_aoi(cfg.weights, aoi)
        return EnvState(buf, rounds, aoi, gain_buf), reward

    def step(self, state: EnvState, index: int, rng: np.random.Generator) -> StepOutcome:
        if not self.is_valid(state, index):
            raise ValueError(f"action {index} is not valid in state with rounds {state.rounds}")
        action = self.decode_action(index)
        gains = None
        if self.config.channel_mode is ChannelMode.SAMPLED_RAYLEIGH and self.bler_override is None:
            gains = tuple(float(g) for g in self._mean_gains * rng.exponential(1.0, self.n_users))
        eps = self.blers(state, index, gains)
        u = rng.random(self.n_users)
        decoded = tuple(bool(u[i] >= eps[i]) for i in range(self.n_users))
        next_state, reward = self._advance(state, action, decoded, gains)
        return StepOutcome(next_state, reward, decoded, eps)

    def transition_table(self, state: EnvState, index: int) -> list[tuple[EnvState, float]]:
        """All 2**N decode outcomes with their probabilities (DeterministicMean only)."""
        if self.config.channel_mode is not ChannelMode.DETERMINISTIC_MEAN:
            raise NotImplementedError("exact transitions need DeterministicMean channels")
        if not self.is_valid(state, index):
            raise ValueError(f"action {index} is not valid")
        action = self.decode_action(index)
        eps = self.blers(state, index)
        table = []
        for decoded in itertools.product((False, True), repeat=self.n_users):
            p = 1.0
            for ok, e in zip(decoded, eps):
                p *= (1.0 - e) if ok else e
            table.append((self._advance(state, action, decoded, None)[0], p))
        return table

    # -- features ------------------------------------------------------------
    def encode(self, state: EnvState) -> np.ndarray:
        cfg = self.config
        m = cfg.m_levels
        parts = [lvl / m for pv in state.power_buffer for lvl in pv]
        parts += [t / cfg.t_max for t in state.rounds]
        parts += [min(a, cfg.aoi_cap) / cfg.aoi_cap for a in state.aoi]
        return np.array(parts, dtype=float)

    def weighted_aoi(self, state: EnvState) -> float:
        return weighted_aoi(self.config.weights, state.aoi)


def write_trajectory(path, env: NomaEnv, records: Iterable[tuple[int, EnvState, int, float]]):
    """One CSV row per slot: slot, aoi_1..N, rounds_1..N, action, reward."""
    n = env.n_users
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot"] + [f"aoi_{i + 1}" for i in range(n)]
                   + [f"rounds_{i + 1}" for i in range(n)] + ["action", "reward"])
        for slot, state, action, reward in records:
            w.writerow([slot, *state.aoi, *state.rounds, action, repr(float(reward))])
