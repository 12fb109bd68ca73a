"""Transition kernels of one user's local state.

The local state of user ``k`` at slot ``m`` is
``(q, h_prev, c_prev, z_prev, h_cur)`` where ``c_prev`` is the common
threshold state of the previous slot (one threshold index in a symmetric
network, a tuple of per-user indices in an asymmetric one) and ``z_prev``
the broadcast feedback.  Its transition factorises into a deterministic
threshold update, the user's channel row, a feedback kernel and a
birth-death queue kernel.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .channel import FsmcChannel, transmission_event_prob, transmit_count_distribution
from .errors import InvalidInputError, NullEventError, TimeScaleError

__all__ = [
    "Feedback",
    "SystemParams",
    "LocalState",
    "others_prev_count_distribution",
    "feedback_kernel_symmetric",
    "feedback_kernel_asymmetric",
    "belief_other_csi",
    "service_rate",
    "queue_kernel",
    "local_state_kernel",
    "FeedbackModel",
]


class Feedback(IntEnum):
    NAK = 0
    ACK = 1
    COLLISION = 2

    @property
    def symbol(self) -> str:
        return "01e"[self]


FEEDBACKS = (Feedback.NAK, Feedback.ACK, Feedback.COLLISION)


@dataclass(frozen=True)
class SystemParams:
    """Physical and traffic constants shared by all users.

    Attributes
    ----------
    tau : float
        Slot duration in seconds.
    W : float
        Bandwidth in Hz.
    N0 : float
        Noise spectral density in W/Hz.
    lam : float
        Mean packet arrival rate per user, packets/s.
    mean_packet_bits : float
        Mean packet length in bits.
    N : int
        Buffer size in packets.
    K : int
        Number of users.
    """

    tau: float = 1e-3
    W: float = 1e3
    N0: float = 1e-3
    lam: float = 1.0
    mean_packet_bits: float = 1e3
    N: int = 5
    K: int = 5

    def __post_init__(self):
        if min(self.tau, self.W, self.N0, self.mean_packet_bits) <= 0:
            raise InvalidInputError("tau, W, N0 and mean_packet_bits must be positive")
        if self.lam < 0 or self.lam * self.tau >= 1:
            raise InvalidInputError(f"need 0 <= lam*tau < 1, got {self.lam * self.tau}")
        if self.N < 1 or self.K < 1:
            raise InvalidInputError("N and K must be at least 1")

    @property
    def arrival_prob(self) -> float:
        return self.lam * self.tau

    @property
    def noise_power(self) -> float:
        return self.N0 * self.W

    def max_power(self, gain):
        """Largest power keeping ``lam*tau + mu*tau <= 1`` at channel gain ``gain``."""
        spectral = (1.0 - self.arrival_prob) * self.mean_packet_bits / (self.W * self.tau)
        with np.errstate(over="ignore"):
            return np.expm1(spectral * math.log(2.0)) * self.noise_power / np.asarray(gain, dtype=float)

    def with_(self, **changes) -> "SystemParams":
        return SystemParams(**{**self.__dict__, **changes})


class LocalState(NamedTuple):
    q: int
    h_prev: int
    c_prev: object
    z_prev: Feedback
    h_cur: int


def others_prev_count_distribution(channel: FsmcChannel, g_prev: int, z_prev, transmitted_prev: bool, K: int) -> np.ndarray:
    """Pmf of how many of the other ``K-1`` users transmitted last slot.

    The others' previous channel states are taken as independent stationary
    draws, so the count is binomial with the stationary tail probability and
    the feedback symbol fixes or truncates it.
    """
    z_prev = Feedback(z_prev)
    others = K - 1
    eta = channel.tail(g_prev)
    out = np.zeros(others + 1)
    if z_prev == Feedback.NAK or (z_prev == Feedback.ACK and transmitted_prev):
        if z_prev == Feedback.NAK and transmitted_prev:
            raise NullEventError("NAK is impossible when this user transmitted")
        if others and eta >= 1.0:
            raise NullEventError(f"all others silent is impossible at threshold index {g_prev}")
        out[0] = 1.0
        return out
    if z_prev == Feedback.ACK:
        if others < 1:
            raise NullEventError("ACK while silent needs another user")
        if others > 1 and eta >= 1.0:
            raise NullEventError(f"a lone transmitter is impossible at threshold index {g_prev}")
        out[1] = 1.0
        return out
    need = 1 if transmitted_prev else 2
    if others < need:
        raise NullEventError(f"collision needs {need} other transmitter(s), only {others} exist")
    return transmit_count_distribution(eta, others, need)


def _zero_one_given_count(c: int, m: int, zeta: float, ups: float) -> tuple[float, float]:
    """Pr{no one} and Pr{exactly one} transmit now, out of ``c`` previous
    transmitters (each again w.p. ``zeta``) and ``m`` previously silent users
    (each w.p. ``ups``)."""
    zb, ub = 1.0 - zeta, 1.0 - ups
    p0 = zb**c * ub**m
    p1 = 0.0
    if c:
        p1 += c * zeta * zb ** (c - 1) * ub**m
    if m:
        p1 += m * ups * zb**c * ub ** (m - 1)
    return p0, p1


def _feedback_from_others(p0: float, p1: float, transmitted_cur: bool) -> np.ndarray:
    if transmitted_cur:
        out = np.array([0.0, p0, 1.0 - p0])
    else:
        out = np.array([p0, p1, 1.0 - p0 - p1])
    # drop round-off mass on structurally impossible symbols
    out[out < 1e-14] = 0.0
    return out / out.sum()


def feedback_kernel_symmetric(z_prev, transmitted_prev: bool, transmitted_cur: bool, g_prev: int, g_cur: int, K: int, channel: FsmcChannel) -> np.ndarray:
    """``Pr{Z_m = NAK, ACK, COLLISION}`` seen from one user of a symmetric network.

    Parameters
    ----------
    z_prev : Feedback
        Previous broadcast feedback.
    transmitted_prev, transmitted_cur : bool
        This user's transmit events in the previous and current slot.
    g_prev, g_cur : int
        Common threshold indices of the previous and current slot.
    K : int
        Number of users.
    channel : FsmcChannel
        Common channel model.

    Returns
    -------
    np.ndarray
        Length-3 probability vector indexed by ``Feedback``.
    """
    counts = others_prev_count_distribution(channel, g_prev, z_prev, transmitted_prev, K)
    others = K - 1
    zeta = transmission_event_prob(channel, g_prev, g_cur, True)
    ups = transmission_event_prob(channel, g_prev, g_cur, False) if g_prev > 0 else 0.0
    p0 = p1 = 0.0
    for c, w in enumerate(counts):
        if w == 0.0:
            continue
        a, b = _zero_one_given_count(c, others - c, zeta, ups)
        p0 += w * a
        p1 += w * b
    return _feedback_from_others(p0, p1, transmitted_cur)


def service_rate(gain: float, power: float, z, params: SystemParams) -> float:
    """Mean packet service rate in packets/s; zero unless the slot is an ACK."""
    if power < 0:
        raise InvalidInputError("power must be non-negative")
    if Feedback(z) != Feedback.ACK or power == 0:
        return 0.0
    snr = power * gain / params.noise_power
    return params.W / params.mean_packet_bits * math.log2(1.0 + snr)


def queue_kernel(q: int, mu: float, params: SystemParams) -> dict[int, float]:
    """Next-slot queue length distribution of the birth-death queue."""
    up, down = params.arrival_prob, mu * params.tau
    if up + down > 1.0 + 1e-12:
        raise TimeScaleError(f"lambda*tau + mu*tau = {up + down:.6g} exceeds 1")
    N = params.N
    out: dict[int, float] = {}
    for nxt, p in ((min(q + 1, N), up), (max(q - 1, 0), down), (q, 1.0 - up - down)):
        out[nxt] = out.get(nxt, 0.0) + p
    return out


class FeedbackModel:
    """Feedback kernel and threshold bookkeeping as seen by user ``k``.

    ``threshold_of(c)`` extracts the user's own threshold index from a
    common threshold state ``c``; ``probs`` returns the feedback pmf.
    Kernel evaluations are memoised, so instances must be treated as
    read-only once built.
    """

    def __init__(self, kernel: Callable, threshold_of: Callable, channel: FsmcChannel, K: int, k: int = 0,
                 others_tails: Callable | None = None):
        self._kernel = lru_cache(maxsize=None)(kernel)
        self.threshold_of = threshold_of
        self.channel = channel
        self.K = K
        self.k = k
        self._others_tails = others_tails

    @classmethod
    def symmetric(cls, channel: FsmcChannel, K: int) -> "FeedbackModel":
        def kernel(z_prev, tx_prev, tx_cur, c_prev, c_cur):
            return feedback_kernel_symmetric(z_prev, tx_prev, tx_cur, c_prev, c_cur, K, channel)

        return cls(kernel, lambda c: c, channel, K, 0, lambda c: [channel.tail(c)] * (K - 1))

    @classmethod
    def asymmetric(cls, channels: Sequence[FsmcChannel], k: int) -> "FeedbackModel":
        channels = tuple(channels)

        def kernel(z_prev, tx_prev, tx_cur, c_prev, c_cur):
            return feedback_kernel_asymmetric(z_prev, tx_prev, tx_cur, c_prev, c_cur, channels, k)

        def tails(c):
            return [channels[i].tail(c[i]) for i in range(len(channels)) if i != k]

        return cls(kernel, lambda c: c[k], channels[k], len(channels), k, tails)

    def probs(self, z_prev, tx_prev: bool, tx_cur: bool, c_prev, c_cur) -> np.ndarray:
        return self._kernel(int(z_prev), bool(tx_prev), bool(tx_cur), c_prev, c_cur)

    def unconditioned_ack(self, c_cur) -> float:
        """Pr{ACK | this user transmits} when the others transmit independently at stationary rates."""
        return math.prod(1.0 - t for t in self._others_tails(c_cur))


def local_state_kernel(state: LocalState, power: float, next_common: Callable, model: FeedbackModel, params: SystemParams) -> dict[LocalState, float]:
    """Sparse next-state distribution of one user's local state.

    ``next_common(c_prev, z_prev)`` is the threshold policy.  Power is
    forced to zero when the current channel is below the current threshold.
    """
    q, h_prev, c_prev, z_prev, h_cur = state
    channel = model.channel
    c_cur = next_common(c_prev, Feedback(z_prev))
    g_prev, g_cur = model.threshold_of(c_prev), model.threshold_of(c_cur)
    tx_prev, tx_cur = h_prev >= g_prev, h_cur >= g_cur
    if not tx_cur:
        power = 0.0
    pz = model.probs(z_prev, tx_prev, tx_cur, c_prev, c_cur)
    out: dict[LocalState, float] = {}
    row = channel.transition[h_cur]
    for z in FEEDBACKS:
        if pz[z] == 0.0:
            continue
        mu = service_rate(channel.states[h_cur], power, z, params)
        for q_next, pq in queue_kernel(q, mu, params).items():
            if pq == 0.0:
                continue
            for h_next in np.flatnonzero(row):
                key = LocalState(q_next, h_cur, c_cur, z, int(h_next))
                out[key] = out.get(key, 0.0) + pz[z] * pq * row[h_next]
    return out


# -- asymmetric network -----------------------------------------------------

def belief_other_csi(h_prev: int, c_prev, z_prev, channels: Sequence[FsmcChannel], k: int,
                     *, propagate: bool = False, condition: bool = False) -> np.ndarray:
    """Joint belief over the other users' channel states.

    By default this is the product of the others' stationary laws over their
    previous-slot states, which is what the normalised belief reduces to.
    ``condition=True`` keeps only realisations whose transmit pattern is
    compatible with ``(c_prev, z_prev)`` and this user's own previous event.
    ``propagate=True`` pushes the belief one slot forward through each
    user's transition matrix.

    The result is a dense array with one axis per other user, in user order,
    so it is only practical for a handful of users.
    """
    K = len(channels)
    if K < 2:
        raise InvalidInputError("belief over other users needs K >= 2")
    others = [i for i in range(K) if i != k]
    belief = np.ones(())
    for i in others:
        belief = np.multiply.outer(belief, channels[i].stationary)
    if condition:
        own_tx = h_prev >= c_prev[k]
        grids = np.meshgrid(*[np.arange(channels[i].J) for i in others], indexing="ij")
        n_tx = own_tx + sum((g >= c_prev[i]).astype(int) for g, i in zip(grids, others))
        allowed = {Feedback.NAK: n_tx == 0, Feedback.ACK: n_tx == 1}.get(Feedback(z_prev), n_tx >= 2)
        belief = np.where(allowed, belief, 0.0)
        if belief.sum() <= 0:
            raise NullEventError("no realisation of the other users matches the feedback")
    belief = belief / belief.sum()
    if propagate:
        for axis, i in enumerate(others):
            belief = np.moveaxis(np.tensordot(belief, channels[i].transition, axes=([axis], [0])), -1, axis)
    return belief


def feedback_kernel_asymmetric(z_prev, transmitted_prev: bool, transmitted_cur: bool, c_prev: tuple, c_cur: tuple,
                               channels: Sequence[FsmcChannel], k: int) -> np.ndarray:
    """Feedback pmf for user ``k`` when users have their own channels and thresholds.

    Sums the prior weight of every transmit pattern of the other users that
    is compatible with ``z_prev`` and user ``k``'s own previous event, then
    propagates each user independently one slot with its own
    transmitted/silent continuation probability.
    """
    z_prev = Feedback(z_prev)
    K = len(channels)
    others = [i for i in range(K) if i != k]
    eta = [channels[i].tail(c_prev[i]) for i in others]
    zeta = [transmission_event_prob(channels[i], c_prev[i], c_cur[i], True) for i in others]
    ups = [transmission_event_prob(channels[i], c_prev[i], c_cur[i], False) if c_prev[i] > 0 else 0.0
           for i in others]
    target = {Feedback.NAK: (0, 0), Feedback.ACK: (1, 1)}.get(z_prev, (2, K))
    total = p0 = p1 = 0.0
    for pattern in itertools.product((False, True), repeat=len(others)):
        n_tx = int(transmitted_prev) + sum(pattern)
        if not target[0] <= n_tx <= target[1]:
            continue
        w = math.prod(e if t else 1.0 - e for e, t in zip(eta, pattern))
        if w == 0.0:
            continue
        now = [z if t else u for z, u, t in zip(zeta, ups, pattern)]
        a, b = _poisson_binomial_zero_one(now)
        total += w
        p0 += w * a
        p1 += w * b
    if total <= 0.0:
        raise NullEventError(f"feedback {z_prev.name} is impossible under thresholds {c_prev}")
    return _feedback_from_others(p0 / total, p1 / total, transmitted_cur)


def _poisson_binomial_zero_one(probs) -> tuple[float, float]:
    p0 = math.prod(1.0 - p for p in probs)
    p1 = 0.0
    for j, p in enumerate(probs):
        p1 += p * math.prod(1.0 - r for i, r in enumerate(probs) if i != j)
    return p0, p1
