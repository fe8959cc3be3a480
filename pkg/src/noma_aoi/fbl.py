"""Finite-blocklength block error rates (normal approximation).

Error probability of an (L, m) code at SINR g is approximated by
Q((C(g) - L/m) / sqrt(V(g)/m)) with C = log2(1+g) and
V = (1 - (1+g)^-2) (log2 e)^2.  HARQ chase combining enters through the
summed SINR, and SIC chains multiply the per-stage success probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erfc

from .channel import ChannelMode, ChannelParams, sinr_mrc

LOG2E_SQ = math.log2(math.e) ** 2


@dataclass(frozen=True)
class CodeParams:
    message_bits: int = 160
    symbols: int = 200

    def __post_init__(self):
        if int(self.message_bits) <= 0 or int(self.symbols) <= 0:
            raise ValueError(f"invalid code parameters L={self.message_bits}, m={self.symbols}")

    @property
    def rate(self) -> float:
        return self.message_bits / self.symbols


def gaussian_q(x: float) -> float:
    """Standard normal tail probability P(Z > x).

    Evaluated from the complementary error function on |x| and reflected, so
    Q(-x) = 1 - Q(x) holds by construction.
    """
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"gaussian_q needs a finite argument, got {x}")
    q = 0.5 * math.erfc(abs(x) / math.sqrt(2.0))
    return q if x >= 0 else 1.0 - q


def capacity(sinr: float) -> float:
    if sinr < 0:
        raise ValueError(f"negative SINR {sinr}")
    return math.log2(1.0 + sinr)


def dispersion(sinr: float) -> float:
    if sinr < 0:
        raise ValueError(f"negative SINR {sinr}")
    return (1.0 - 1.0 / (1.0 + sinr) ** 2) * LOG2E_SQ


def bler_from_sinr(sinr: float, code: CodeParams) -> float:
    if sinr < 0:
        raise ValueError(f"negative SINR {sinr}")
    if sinr == 0:
        return 1.0
    m = code.symbols
    arg = (capacity(sinr) - code.rate) / math.sqrt(dispersion(sinr) / m)
    return min(1.0, max(0.0, gaussian_q(arg)))


def bler_from_sinr_array(sinr, code: CodeParams) -> np.ndarray:
    """Vectorised ``bler_from_sinr`` for Monte-Carlo batches."""
    g = np.asarray(sinr, dtype=float)
    if np.any(g < 0):
        raise ValueError("negative SINR")
    out = np.ones_like(g)
    pos = g > 0
    gp = g[pos]
    v = (1.0 - 1.0 / (1.0 + gp) ** 2) * LOG2E_SQ
    arg = (np.log2(1.0 + gp) - code.rate) / np.sqrt(v / code.symbols)
    out[pos] = np.clip(0.5 * erfc(arg / math.sqrt(2.0)), 0.0, 1.0)
    return out


def bler_link(receiver: int, target: int, rounds: int, power_history: Sequence[Sequence[float]],
              gains_history: Sequence[float], code: CodeParams, snr_linear: float) -> float:
    """BLER at ``receiver`` for package ``target`` after ``rounds`` combined rounds.

    ``power_history`` and ``gains_history`` are ordered oldest first; the
    newest ``rounds`` entries are combined.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if len(power_history) < rounds or len(gains_history) < rounds:
        raise ValueError(f"history shorter than {rounds} rounds")
    hist = list(zip(power_history[-rounds:], gains_history[-rounds:]))
    return bler_from_sinr(sinr_mrc(hist, target, snr_linear, receiver), code)


def chain_bler(link_blers: Sequence[float]) -> float:
    """Failure probability of a SIC chain given its per-stage BLERs."""
    success = 1.0
    for e in link_blers:
        success *= 1.0 - e
    return min(1.0, max(0.0, 1.0 - success))


def bler_sic_chain(receiver: int, rounds_vector: Sequence[int],
                   power_history: Sequence[Sequence[Sequence[float]]],
                   gains_history: Sequence[float], code: CodeParams, snr_linear: float) -> float:
    """BLER of user ``receiver`` (1-based) after cancelling packages receiver+1..N.

    ``rounds_vector[j-1]`` is the round count of package j and
    ``power_history[j-1]`` the power vectors it was sent with, oldest first.
    ``gains_history`` holds the receiver's gain in each of the recent slots,
    oldest first, aligned with the newest entries of every power history.
    """
    n = len(rounds_vector)
    if len(power_history) < n:
        raise ValueError("missing power history for some packages")
    links = []
    for j in range(receiver, n + 1):
        t = rounds_vector[j - 1]
        if t is None:
            raise ValueError(f"missing round count for package {j}")
        links.append(bler_link(receiver, j, t, power_history[j - 1], gains_history, code, snr_linear))
    return chain_bler(links)


def expected_bler(receiver: int, target: int, rounds: int, power_history: Sequence[Sequence[float]],
                  code: CodeParams, params: ChannelParams, mc_samples: int,
                  rng: np.random.Generator | None,
                  mode: ChannelMode = ChannelMode.SAMPLED_RAYLEIGH) -> tuple[float, float]:
    """Rayleigh-averaged link BLER; returns (mean, standard error).

    Each combined round sees an independent fading draw.  Under
    DeterministicMean every draw is the mean gain (zero variance).
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    if len(power_history) < rounds:
        raise ValueError(f"history shorter than {rounds} rounds")
    mean_gain = params.mean_gains()[receiver - 1]
    if ChannelMode(mode) is ChannelMode.DETERMINISTIC_MEAN:
        gains = np.full((mc_samples, rounds), mean_gain)
    else:
        gains = mean_gain * rng.exponential(1.0, size=(mc_samples, rounds))
    total = np.zeros(mc_samples)
    for k, alloc in enumerate(power_history[-rounds:]):
        alloc = np.asarray(alloc, dtype=float)
        interf = alloc[:target - 1].sum()
        g = gains[:, k]
        total += alloc[target - 1] * g / (interf * g + 1.0 / params.snr_linear)
    eps = bler_from_sinr_array(total, code)
    se = float(eps.std(ddof=1) / math.sqrt(mc_samples)) if mc_samples > 1 else 0.0
    return float(eps.mean()), se


__all__ = [
    "CodeParams", "gaussian_q", "capacity", "dispersion", "bler_from_sinr", "bler_from_sinr_array",
    "bler_link", "chain_bler", "bler_sic_chain", "expected_bler",
]
