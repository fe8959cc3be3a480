"""Channel gains and SINRs for the superposition-coded downlink.

Channels are kept as power gains |h|^2 only.  Noise variance is fixed to 1,
so the transmit SNR rho = P / sigma^2 is the single power knob.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ChannelMode(str, enum.Enum):
    DETERMINISTIC_MEAN = "deterministic_mean"
    SAMPLED_RAYLEIGH = "sampled_rayleigh"


@dataclass(frozen=True)
class ChannelParams:
    distances: tuple[float, ...]
    path_loss_exponent: float
    snr_linear: float

    def __post_init__(self):
        object.__setattr__(self, "distances", tuple(float(d) for d in self.distances))
        if not self.distances:
            raise ValueError("at least one user distance is required")
        if any(d <= 0 for d in self.distances):
            raise ValueError(f"distances must be positive, got {self.distances}")
        if any(b <= a for a, b in zip(self.distances, self.distances[1:])):
            raise ValueError(f"distances must be strictly ascending, got {self.distances}")
        if not self.path_loss_exponent > 0:
            raise ValueError("path_loss_exponent must be positive")
        if not self.snr_linear > 0:
            raise ValueError("snr_linear must be positive")

    @property
    def n_users(self) -> int:
        return len(self.distances)

    def mean_gains(self) -> np.ndarray:
        return np.array([path_loss_gain(d, self.path_loss_exponent) for d in self.distances])


@dataclass(frozen=True)
class ChannelGain:
    user_index: int  # 1-based
    gain: float

    def __post_init__(self):
        if self.gain < 0:
            raise ValueError("channel power gain must be nonnegative")


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def path_loss_gain(distance: float, tau: float) -> float:
    """Mean power gain ``distance ** -tau``."""
    if not distance > 0 or not tau > 0:
        raise ValueError(f"invalid path-loss parameters: distance={distance}, tau={tau}")
    return distance ** (-tau)


def channel_gain(params: ChannelParams, user: int, mode: ChannelMode,
                 rng: np.random.Generator | None = None) -> ChannelGain:
    if not 1 <= user <= params.n_users:
        raise IndexError(f"user index {user} outside 1..{params.n_users}")
    mean = path_loss_gain(params.distances[user - 1], params.path_loss_exponent)
    if ChannelMode(mode) is ChannelMode.DETERMINISTIC_MEAN:
        return ChannelGain(user, mean)
    if rng is None:
        raise ValueError("SampledRayleigh mode needs an rng")
    # |g|^2 for g ~ CN(0, 1) is unit exponential
    return ChannelGain(user, mean * float(rng.exponential(1.0)))


def sample_gains(params: ChannelParams, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw Rayleigh power gains for all users; trailing axis indexes users."""
    shape = (params.n_users,) if size is None else tuple(np.atleast_1d(size)) + (params.n_users,)
    return params.mean_gains() * rng.exponential(1.0, size=shape)


def sinr_single(alloc: Sequence[float], gain: float, target: int, snr_linear: float,
                receiver: int | None = None) -> float:
    """SINR at a receiver for decoding package ``target`` (1-based) in one round.

    Packages 1..target-1 carry less power and are still undecoded, so they
    act as interference; packages above ``target`` were already cancelled.
    """
    if receiver is not None and receiver > target:
        raise ValueError(f"SIC order violated: user {receiver} cannot decode package {target}")
    if not 1 <= target <= len(alloc):
        raise IndexError(f"target {target} outside 1..{len(alloc)}")
    g = float(gain.gain if isinstance(gain, ChannelGain) else gain)
    interference = sum(alloc[:target - 1]) * g
    return alloc[target - 1] * g / (interference + 1.0 / snr_linear)


def sinr_mrc(history: Sequence[tuple[Sequence[float], float]], target: int,
             snr_linear: float, receiver: int | None = None) -> float:
    """Chase-combined SINR: per-round SINRs of the same package add up."""
    if not history:
        raise ValueError("MRC needs at least one round")
    return math.fsum(sinr_single(alloc, gain, target, snr_linear, receiver)
                     for alloc, gain in history)
