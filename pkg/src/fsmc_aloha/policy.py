"""Threshold control policies and the reference baselines.

A threshold policy maps the common information of the previous slot, the
common threshold state ``c`` and the feedback ``z``, to the common threshold
state of the current slot.  In a symmetric network ``c`` is a single state
index shared by all users; in an asymmetric network it is a tuple holding
one index per user.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .channel import FsmcChannel, transmission_event_prob, transmit_count_distribution
from .dynamics import FEEDBACKS, Feedback, SystemParams
from .errors import NullEventError, PolicyTableMissError

__all__ = [
    "ThresholdPolicy",
    "argmax_largest",
    "lcsihp_objective",
    "lcsihp_threshold",
    "lcsihp_policy",
    "transmit_posterior",
    "asymmetric_threshold",
    "asymmetric_policy",
    "fixed_policy",
    "binary_scheduling_threshold",
    "variable_rate_power",
    "calibrate_variable_rate",
    "baseline_binary_scheduling",
    "baseline_variable_rate",
    "bsp_thresholds",
    "initial_common_info",
]

TIE_TOL = 1e-12


def argmax_largest(values) -> int:
    """Index of the maximum, resolving ties (within 1e-12) toward the largest index."""
    v = np.asarray(values, dtype=float)
    return int(np.flatnonzero(v >= v.max() - TIE_TOL)[-1])


@dataclass(frozen=True)
class ThresholdPolicy:
    """Lookup table ``(c_prev, z_prev) -> c_cur``.

    Attributes
    ----------
    table : dict
        Maps ``(c, int(z))`` to the next common threshold state.
    mode : str
        ``"symmetric"`` or ``"asymmetric"``.
    K : int
        Number of users.
    fallback : frozenset
        Entries whose conditioning event is impossible under the stationary
        model; they are filled from the unconditioned objective so online
        lookups never miss.
    """

    table: dict
    mode: str
    K: int
    fallback: frozenset = field(default_factory=frozenset)

    def __call__(self, c, z):
        try:
            return self.table[(c, int(z))]
        except KeyError:
            raise PolicyTableMissError(f"no threshold entry for common state {c!r}, feedback {Feedback(z).name}") from None

    @property
    def common_states(self) -> list:
        """Sorted common threshold states appearing in the table."""
        return sorted({c for c, _ in self.table} | set(self.table.values()))

    def threshold_of(self, c, k: int = 0) -> int:
        return c[k] if self.mode == "asymmetric" else c

    def is_constant(self) -> bool:
        return len(set(self.table.values())) == 1

    def rows(self):
        for (c, z), nxt in sorted(self.table.items()):
            yield c, Feedback(z), nxt


def initial_common_info(K: int, mode: str = "symmetric"):
    """Common information of a notional slot 0 where every user transmits.

    The threshold is the lowest state, so the feedback is a collision for
    ``K >= 2`` and an ACK for a single user.
    """
    z0 = Feedback.COLLISION if K >= 2 else Feedback.ACK
    c0 = tuple([0] * K) if mode == "asymmetric" else 0
    return c0, z0


# -- symmetric: larger CSI higher priority ----------------------------------

def lcsihp_objective(channel: FsmcChannel, g_prev: int, z_prev, g_cur: int, K: int) -> float:
    """Probability that exactly one user transmits now, given the common information.

    Raises
    ------
    NullEventError
        If ``z_prev`` is impossible under threshold ``g_prev``.
    """
    z_prev = Feedback(z_prev)
    zeta = transmission_event_prob(channel, g_prev, g_cur, True)
    if g_prev == 0:
        # every user sits at/above the lowest threshold: nobody was silent
        if z_prev == Feedback.NAK or (z_prev == Feedback.ACK and K > 1) or (z_prev == Feedback.COLLISION and K < 2):
            raise NullEventError(f"feedback {z_prev.name} impossible at threshold index 0 with K={K}")
        ups = 0.0
    else:
        ups = transmission_event_prob(channel, g_prev, g_cur, False)
    ub, zb = 1.0 - ups, 1.0 - zeta
    if z_prev == Feedback.NAK:
        return K * ups * ub ** (K - 1)
    if z_prev == Feedback.ACK:
        out = zeta * ub ** (K - 1)
        if K > 1:
            out += (K - 1) * zb * ups * ub ** (K - 2)
        return out
    if K < 2:
        raise NullEventError("collision impossible with one user")
    counts = transmit_count_distribution(channel.tail(g_prev), K, 2)
    total = 0.0
    for k in range(2, K + 1):
        term = k * zeta * zb ** (k - 1) * ub ** (K - k)
        if K > k:
            term += (K - k) * zb**k * ups * ub ** (K - k - 1)
        total += counts[k] * term
    return total


def _iid_objective(channel: FsmcChannel, g: int, K: int) -> float:
    eta = channel.tail(g)
    return K * eta * (1.0 - eta) ** (K - 1)


def lcsihp_threshold(g_prev: int, z_prev, K: int, channel: FsmcChannel) -> int:
    """Threshold index maximising the lone-transmitter probability."""
    scores = [lcsihp_objective(channel, g_prev, z_prev, g, K) for g in range(channel.J)]
    return argmax_largest(scores)


def lcsihp_policy(channel: FsmcChannel, K: int) -> ThresholdPolicy:
    """Full symmetric policy table over every ``(threshold, feedback)`` pair.

    Pairs that cannot occur under the stationary model (for example a NAK
    at the lowest threshold) still get an entry, chosen by the
    unconditioned objective, because the actual system with empty buffers
    can produce them.
    """
    table, fallback = {}, set()
    for g_prev in range(channel.J):
        for z in FEEDBACKS:
            try:
                table[(g_prev, int(z))] = lcsihp_threshold(g_prev, z, K, channel)
            except NullEventError:
                table[(g_prev, int(z))] = argmax_largest([_iid_objective(channel, g, K) for g in range(channel.J)])
                fallback.add((g_prev, int(z)))
    return ThresholdPolicy(table, "symmetric", K, frozenset(fallback))


def fixed_policy(g, K: int, common_states=None, mode: str = "symmetric") -> ThresholdPolicy:
    """Constant threshold state ``g`` regardless of feedback."""
    if common_states is None:
        common_states = [g, initial_common_info(K, mode)[0]]
    table = {(c, int(z)): g for c in common_states for z in FEEDBACKS}
    return ThresholdPolicy(table, mode, K)


def binary_scheduling_threshold(channel: FsmcChannel, K: int) -> int:
    """Fixed threshold maximising ``K eta (1-eta)^(K-1)`` with stationary ``eta``."""
    return argmax_largest([_iid_objective(channel, g, K) for g in range(channel.J)])


# -- asymmetric: product fairness -------------------------------------------

def transmit_posterior(etas: Sequence[float], z_prev) -> np.ndarray:
    """Probability that each user transmitted last slot given the feedback.

    ``etas[k]`` is user ``k``'s stationary transmit probability under its
    previous threshold.
    """
    eta = np.asarray(etas, dtype=float)
    K = eta.size
    bar = 1.0 - eta
    z_prev = Feedback(z_prev)
    if z_prev == Feedback.NAK:
        if np.any(eta >= 1.0):
            raise NullEventError("NAK impossible when some user always transmits")
        return np.zeros(K)
    alone = np.array([eta[k] * np.prod(np.delete(bar, k)) for k in range(K)])
    if z_prev == Feedback.ACK:
        if alone.sum() <= 0:
            raise NullEventError("ACK impossible under these thresholds")
        return alone / alone.sum()
    denom = 1.0 - np.prod(bar) - alone.sum()
    num = np.array([eta[k] * (1.0 - np.prod(np.delete(bar, k))) for k in range(K)])
    if denom <= 1e-15:
        raise NullEventError("collision impossible under these thresholds")
    return np.clip(num / denom, 0.0, 1.0)


def _asym_user_scores(channel: FsmcChannel, g_prev: int, rho: float, K: int, z_prev) -> list[float]:
    scores = []
    for g in range(channel.J):
        zeta = transmission_event_prob(channel, g_prev, g, True)
        s = rho * zeta * (1.0 - zeta) ** (K - 1) if rho > 0 else 0.0
        if rho < 1:
            ups = transmission_event_prob(channel, g_prev, g, False)
            s += (1.0 - rho) * ups * (1.0 - ups) ** (K - 1)
        scores.append(s)
    return scores


def asymmetric_threshold(c_prev: Sequence[int], z_prev, channels: Sequence[FsmcChannel]) -> tuple:
    """Per-user thresholds maximising the decoupled product of lone-transmit probabilities.

    Raises
    ------
    NullEventError
        If ``z_prev`` is impossible under ``c_prev``.
    """
    K = len(channels)
    etas = [ch.tail(g) for ch, g in zip(channels, c_prev)]
    rho = transmit_posterior(etas, z_prev)
    return tuple(argmax_largest(_asym_user_scores(ch, g, r, K, z_prev)) for ch, g, r in zip(channels, c_prev, rho))


def _asym_iid(channels, K):
    return tuple(argmax_largest([_iid_objective(ch, g, K) for g in range(ch.J)]) for ch in channels)


def asymmetric_policy(channels: Sequence[FsmcChannel], start=None) -> ThresholdPolicy:
    """Asymmetric policy table over the threshold vectors reachable from ``start``.

    Every feedback symbol is expanded from every reachable vector, so the
    table is total on its own closure.
    """
    K = len(channels)
    if start is None:
        start = initial_common_info(K, "asymmetric")[0]
    table, fallback = {}, set()
    frontier, seen = [tuple(start)], {tuple(start)}
    while frontier:
        c = frontier.pop()
        for z in FEEDBACKS:
            try:
                nxt = asymmetric_threshold(c, z, channels)
            except NullEventError:
                nxt = _asym_iid(channels, K)
                fallback.add((c, int(z)))
            table[(c, int(z))] = nxt
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return ThresholdPolicy(table, "asymmetric", K, frozenset(fallback))


# -- power rules of the baselines -------------------------------------------

def variable_rate_power(channel: FsmcChannel, g: int, K: int, xi_tilde: float, params: SystemParams,
                        success_prob: float | None = None) -> np.ndarray:
    """Water-filling power per channel state at a fixed threshold.

    ``P(S_j) = (W tau s / (Nb xi_tilde ln2) - N0 W / S_j)^+`` for ``j >= g``
    and zero below, where ``s`` is the probability that all other users are
    silent (``(sum_{i<g} pi_i)^(K-1)`` unless given).  Capped at the
    time-scale power limit.
    """
    if success_prob is None:
        success_prob = channel.head(g) ** (K - 1)
    s = channel.states
    with np.errstate(divide="ignore"):
        level = params.W * params.tau * success_prob / (params.mean_packet_bits * xi_tilde * math.log(2.0))
    p = np.clip(level - params.noise_power / s, 0.0, params.max_power(s))
    p[:g] = 0.0
    return p


def calibrate_variable_rate(channel: FsmcChannel, g: int, K: int, P0: float, params: SystemParams,
                            success_prob: float | None = None) -> float:
    """Multiplier ``xi_tilde`` so the stationary mean of :func:`variable_rate_power` equals ``P0``."""
    pi = channel.stationary

    def excess(log_xi):
        return pi @ variable_rate_power(channel, g, K, math.exp(log_xi), params, success_prob) - P0

    lo, hi = -60.0, 60.0
    if excess(lo) <= 0:
        return math.exp(lo)
    return math.exp(brentq(excess, lo, hi, xtol=1e-13, rtol=1e-14))


def _throughput_bits(channel: FsmcChannel, g: int, K: int, power: np.ndarray, params: SystemParams,
                     others_silent: float) -> float:
    rate = params.W * np.log2(1.0 + power * channel.states / params.noise_power)
    return float(channel.stationary[g:] @ rate[g:] * others_silent)


def baseline_variable_rate(channel: FsmcChannel, K: int, P0: float, params: SystemParams):
    """Fixed threshold plus CSI water-filling power (no feedback or queue adaptation).

    For each candidate threshold the multiplier is calibrated to the
    budget; the threshold with the largest saturated network throughput
    ``K * Pr{others silent} * E[rate; H >= g]`` wins.

    Returns
    -------
    (g, xi_tilde, power) : tuple
        Threshold index, calibrated multiplier and per-state power vector.
    """
    best = None
    scores = []
    for g in range(channel.J):
        xi = calibrate_variable_rate(channel, g, K, P0, params)
        p = variable_rate_power(channel, g, K, xi, params)
        scores.append(K * _throughput_bits(channel, g, K, p, params, channel.head(g) ** (K - 1)))
    g = argmax_largest(scores)
    xi = calibrate_variable_rate(channel, g, K, P0, params)
    best = (g, xi, variable_rate_power(channel, g, K, xi, params))
    return best


def baseline_binary_scheduling(channel: FsmcChannel, K: int, P0: float, params: SystemParams):
    """Binary-scheduling threshold with constant transmit power.

    Returns
    -------
    (g, power) : tuple
        Threshold index and per-state power vector; power is
        ``min(P0 / Pr{H >= S_g}, P_max)`` at/above the threshold.
    """
    g = binary_scheduling_threshold(channel, K)
    return g, constant_power_rule(channel, g, P0 / channel.tail(g), params)


def constant_power_rule(channel: FsmcChannel, g: int, p_tx: float, params: SystemParams) -> np.ndarray:
    p = np.minimum(np.full(channel.J, float(p_tx)), params.max_power(channel.states))
    p[:g] = 0.0
    return p


def bsp_thresholds(channels: Sequence[FsmcChannel], P0: float, params: SystemParams):
    """Per-user fixed thresholds and water-filling powers for heterogeneous users.

    Maximises the product over users of ``Pr{k alone} * E[rate_k | k transmits]``.
    With stationary, independent transmit events the product separates into
    per-user factors ``E_k(g_k) * (1 - eta_k(g_k))^(K-1)``, and the
    calibrated power profile of user ``k`` depends only on its own
    threshold, so each user is optimised on its own.

    Returns
    -------
    list of (g, xi_tilde, power)
    """
    K = len(channels)
    out = []
    for ch in channels:
        scores, cand = [], []
        for g in range(ch.J):
            xi = calibrate_variable_rate(ch, g, K, P0, params, success_prob=1.0)
            p = variable_rate_power(ch, g, K, xi, params, success_prob=1.0)
            scores.append(_throughput_bits(ch, g, K, p, params, ch.head(g) ** (K - 1)))
            cand.append((g, xi, p))
        out.append(cand[argmax_largest(scores)])
    return out
