"""Offline power-control synthesis on the reduced state space.

For a fixed threshold policy each user faces a single-user average-cost MDP
on the reduced state ``(q, h_prev, c_prev, z_prev)``; the current channel
state is averaged out and the per-state power is the water-filling closed
form.  The non-queue part ``Phi = (h_prev, c_prev, z_prev)`` evolves
independently of power, so its recurrent classes are found once, relative
value iteration runs per class, and transient states are valued against the
gains of the classes they drain into.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .channel import FsmcChannel
from .dynamics import FEEDBACKS, Feedback, FeedbackModel, SystemParams
from .errors import ConvergenceError, InvalidInputError, NullEventError
from .policy import ThresholdPolicy, initial_common_info

log = logging.getLogger(__name__)

__all__ = [
    "ReducedModel",
    "build_reduced_model",
    "build_phi_chain",
    "Unichains",
    "find_unichains",
    "ValueFunction",
    "relative_value_iteration",
    "water_filling_power",
    "optimal_power",
    "PowerPolicy",
    "controlled_stationary_distribution",
    "average_power",
    "average_queue",
    "Calibration",
    "calibrate_lagrange",
    "power_table_from_rule",
    "transmit_probability",
]

LN2 = math.log(2.0)


@dataclass
class ReducedModel:
    """Enumerated reduced-state MDP for one user under a fixed threshold policy.

    ``phis`` lists every consistent ``(h_prev, c_prev, z_prev)`` over the
    policy's common states, in lexicographic order.  The per-(phi, h_cur)
    arrays hold the channel weight ``w``, whether the user transmits now
    (``txc``), the feedback pmf ``pz`` and the successor phi index ``nxt``
    (``-1`` where ``pz`` is zero).
    """

    params: SystemParams
    policy: ThresholdPolicy
    model: FeedbackModel
    phis: list
    index: dict
    common_states: list
    w: np.ndarray
    txc: np.ndarray
    pz: np.ndarray
    nxt: np.ndarray
    initial: np.ndarray

    @property
    def channel(self) -> FsmcChannel:
        return self.model.channel

    @property
    def n_phi(self) -> int:
        return len(self.phis)

    @property
    def n_states(self) -> int:
        return self.n_phi * (self.params.N + 1)

    def gains(self) -> np.ndarray:
        return self.channel.states

    def pmax(self) -> np.ndarray:
        return np.asarray(self.params.max_power(self.channel.states), dtype=float)


def build_reduced_model(policy: ThresholdPolicy, model: FeedbackModel, params: SystemParams) -> ReducedModel:
    """Enumerate phi states and tabulate their one-step transition ingredients."""
    ch = model.channel
    J = ch.J
    commons = policy.common_states
    phis = []
    for h in range(J):
        for c in commons:
            g = model.threshold_of(c)
            for z in FEEDBACKS:
                try:
                    model.probs(z, h >= g, True, c, policy(c, z))
                except NullEventError:
                    continue
                phis.append((h, c, int(z)))
    phis.sort()
    index = {p: i for i, p in enumerate(phis)}
    n = len(phis)
    w = np.zeros((n, J))
    txc = np.zeros((n, J), dtype=np.bool_)
    pz = np.zeros((n, J, 3))
    nxt = np.full((n, J, 3), -1, dtype=np.int64)
    for i, (h_prev, c, z) in enumerate(phis):
        c_cur = policy(c, z)
        g_prev, g_cur = model.threshold_of(c), model.threshold_of(c_cur)
        w[i] = ch.transition[h_prev]
        for h in np.flatnonzero(w[i]):
            tx = h >= g_cur
            txc[i, h] = tx
            pz[i, h] = model.probs(z, h_prev >= g_prev, tx, c, c_cur)
            for zn in np.flatnonzero(pz[i, h]):
                nxt[i, h, zn] = index[(int(h), c_cur, int(zn))]
    c0, z0 = initial_common_info(policy.K, policy.mode)
    initial = np.zeros(n)
    for h in range(J):
        key = (h, c0, int(z0))
        if key in index:
            initial[index[key]] = ch.stationary[h]
    if initial.sum() <= 0:
        raise InvalidInputError("initial common information is not in the state space")
    initial /= initial.sum()
    return ReducedModel(params, policy, model, phis, index, commons, w, txc, pz, nxt, initial)


def build_phi_chain(reduced: ReducedModel) -> np.ndarray:
    """Row-stochastic transition matrix of ``Phi``; independent of queue and power."""
    n = reduced.n_phi
    P = np.zeros((n, n))
    rows = np.broadcast_to(np.arange(n)[:, None, None], reduced.nxt.shape)
    mass = reduced.w[:, :, None] * reduced.pz
    ok = reduced.nxt >= 0
    np.add.at(P, (rows[ok], reduced.nxt[ok]), mass[ok])
    return P


@dataclass
class Unichains:
    """Recurrent classes of the phi chain (index arrays) and the transient set."""

    recurrent: list
    transient: np.ndarray

    def class_of(self, i: int) -> int:
        for k, c in enumerate(self.recurrent):
            if i in c:
                return k
        return -1


def find_unichains(phi_chain) -> Unichains:
    """Strongly connected component decomposition; closed components are recurrent."""
    P = np.asarray(phi_chain)
    support = P > 0
    n_comp, labels = connected_components(csr_matrix(support), directed=True, connection="strong")
    rows, cols = np.nonzero(support)
    leaving = labels[rows] != labels[cols]
    open_ = np.zeros(n_comp, dtype=bool)
    open_[labels[rows[leaving]]] = True
    recurrent = [np.flatnonzero(labels == c) for c in range(n_comp) if not open_[c]]
    recurrent.sort(key=lambda a: a[0])
    transient = np.flatnonzero(np.isin(labels, np.flatnonzero(open_)))
    return Unichains(recurrent, transient)


def absorption_probabilities(phi_chain, chains: Unichains) -> np.ndarray:
    """``A[i, k]`` = probability that phi state ``i`` ends in recurrent class ``k``."""
    P = np.asarray(phi_chain)
    n = P.shape[0]
    A = np.zeros((n, len(chains.recurrent)))
    for k, cls in enumerate(chains.recurrent):
        A[cls, k] = 1.0
    T = chains.transient
    if T.size:
        into = np.stack([P[np.ix_(T, cls)].sum(axis=1) for cls in chains.recurrent], axis=1)
        A[T] = np.linalg.solve(np.eye(T.size) - P[np.ix_(T, T)], into)
    return A


# -- Bellman operator ---------------------------------------------------------

@numba.njit(cache=True)
def _bellman(V, rows, w, pz, nxt, txc, gains, pmax, up, rate_coef, noise, xi, out, pw):
    N = V.shape[0] - 1
    J = w.shape[1]
    for ii in range(rows.size):
        i = rows[ii]
        for q in range(N + 1):
            qu = q + 1 if q < N else N
            acc = 0.0
            for h in range(J):
                wh = w[i, h]
                if wh == 0.0:
                    continue
                base = 0.0
                for z in range(3):
                    p = pz[i, h, z]
                    if p == 0.0:
                        continue
                    j = nxt[i, h, z]
                    base += p * (up * V[qu, j] + (1.0 - up) * V[q, j])
                power = 0.0
                val = 0.0
                pa = pz[i, h, 1]
                if txc[i, h] and pa > 0.0 and q > 0:
                    j = nxt[i, h, 1]
                    coef = pa * rate_coef * (V[q - 1, j] - V[q, j])
                    if coef < 0.0:
                        power = -coef / (xi * LN2) - noise / gains[h]
                        if power < 0.0:
                            power = 0.0
                        elif power > pmax[h]:
                            power = pmax[h]
                        val = xi * power + coef * math.log2(1.0 + power * gains[h] / noise)
                acc += wh * (base + val)
                pw[q, i, h] = power
            out[q, i] = q + acc


@numba.njit(cache=True)
def _rvi_loop(V, rows, anchor, w, pz, nxt, txc, gains, pmax, up, rate_coef, noise, xi,
              tol, max_iter, log_every, log_buf):
    TV = V.copy()
    pw = np.zeros((V.shape[0], V.shape[1], w.shape[1]))
    span = np.inf
    theta = 0.0
    n_log = 0
    it = 0
    for it in range(1, max_iter + 1):
        _bellman(V, rows, w, pz, nxt, txc, gains, pmax, up, rate_coef, noise, xi, TV, pw)
        lo = np.inf
        hi = -np.inf
        for ii in range(rows.size):
            i = rows[ii]
            for q in range(V.shape[0]):
                d = TV[q, i] - V[q, i]
                if d < lo:
                    lo = d
                if d > hi:
                    hi = d
        span = hi - lo
        theta = 0.5 * (hi + lo)
        ref = TV[0, anchor]
        for ii in range(rows.size):
            i = rows[ii]
            for q in range(V.shape[0]):
                V[q, i] = TV[q, i] - ref
        if log_every > 0 and (it % log_every == 0) and n_log < log_buf.shape[0]:
            log_buf[n_log, 0] = it
            log_buf[n_log, 1] = span
            log_buf[n_log, 2] = theta
            n_log += 1
        if span < tol:
            break
    return it, span, theta, n_log


@numba.njit(cache=True)
def _transient_loop(V, rows, gain, w, pz, nxt, txc, gains, pmax, up, rate_coef, noise, xi, tol, max_iter):
    TV = V.copy()
    pw = np.zeros((V.shape[0], V.shape[1], w.shape[1]))
    delta = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        _bellman(V, rows, w, pz, nxt, txc, gains, pmax, up, rate_coef, noise, xi, TV, pw)
        delta = 0.0
        for ii in range(rows.size):
            i = rows[ii]
            for q in range(V.shape[0]):
                new = TV[q, i] - gain[i]
                d = abs(new - V[q, i])
                if d > delta:
                    delta = d
                V[q, i] = new
        if delta < tol:
            break
    return it, delta


@dataclass
class ValueFunction:
    """Relative values and average price per stage.

    ``values[q, i]`` is the relative value of reduced state ``(q, phis[i])``;
    it is zero at each recurrent class's anchor (``q = 0`` and the class's
    lexicographically smallest phi).  ``theta[k]`` is the average price of
    class ``k`` and ``gain[i]`` the expected price rate of phi state ``i``.
    """

    values: np.ndarray
    theta: np.ndarray
    gain: np.ndarray
    xi: float
    chains: Unichains
    absorption: np.ndarray
    iterations: list
    log: list = field(default_factory=list)

    def theta_from(self, dist: np.ndarray) -> float:
        """Average price for a start distribution over phi states."""
        return float(dist @ self.gain)


def _operator_args(reduced: ReducedModel, xi: float):
    p = reduced.params
    return (reduced.w, reduced.pz, reduced.nxt, reduced.txc, reduced.gains(), reduced.pmax(),
            p.arrival_prob, p.W * p.tau / p.mean_packet_bits, p.noise_power, float(xi))


def relative_value_iteration(reduced: ReducedModel, xi: float, *, tol: float = 1e-9, max_iter: int = 1_000_000,
                             warm: ValueFunction | None = None, log_every: int = 1000,
                             phi_chain=None, chains: Unichains | None = None) -> ValueFunction:
    """Solve the reduced Bellman equation by relative value iteration.

    Each recurrent class of the phi chain is iterated on its own, anchored
    at its smallest state, until the span of ``T V - V`` drops below
    ``tol``.  Transient phi states are then valued with the gain of the
    classes they drain into.

    Raises
    ------
    InvalidInputError
        If ``xi`` is not positive.
    ConvergenceError
        If a class does not reach ``tol`` within ``max_iter`` sweeps.
    """
    if not xi > 0:
        raise InvalidInputError("the Lagrange multiplier must be positive")
    if phi_chain is None:
        phi_chain = build_phi_chain(reduced)
    if chains is None:
        chains = find_unichains(phi_chain)
    A = absorption_probabilities(phi_chain, chains)
    args = _operator_args(reduced, xi)
    N = reduced.params.N
    V = warm.values.copy() if warm is not None else np.zeros((N + 1, reduced.n_phi))
    thetas, iters, records = [], [], []
    for k, cls in enumerate(chains.recurrent):
        rows = np.ascontiguousarray(cls, dtype=np.int64)
        anchor = int(rows.min())
        buf = np.zeros((max(1, max_iter // max(log_every, 1)) if log_every else 1, 3))
        buf = buf[: min(buf.shape[0], 10_000)]
        it, span, theta, n_log = _rvi_loop(V, rows, anchor, *args, tol, max_iter, log_every, buf)
        for row in buf[:n_log]:
            records.append((k, int(row[0]), float(row[1]), float(row[2])))
        records.append((k, int(it), float(span), float(theta)))
        log.debug("class %d: %d iterations, span %.3g, theta %.9g", k, it, span, theta)
        if not span < tol:
            raise ConvergenceError(f"relative value iteration stopped at span {span:.3g} after {it} sweeps",
                                   span=span, iterations=it)
        thetas.append(theta)
        iters.append(int(it))
    thetas = np.array(thetas)
    gain = A @ thetas
    T = np.ascontiguousarray(chains.transient, dtype=np.int64)
    if T.size:
        it, delta = _transient_loop(V, T, gain, *args, tol, max_iter)
        if not delta < tol:
            raise ConvergenceError(f"transient valuation stopped at change {delta:.3g}", span=delta, iterations=it)
    return ValueFunction(V, thetas, gain, float(xi), chains, A, iters, records)


def greedy_powers(reduced: ReducedModel, vf: ValueFunction) -> np.ndarray:
    """Water-filling power ``pw[q, i, h_cur]`` for every reduced state and current channel."""
    N = reduced.params.N
    rows = np.arange(reduced.n_phi, dtype=np.int64)
    out = np.zeros((N + 1, reduced.n_phi))
    pw = np.zeros((N + 1, reduced.n_phi, reduced.channel.J))
    _bellman(vf.values, rows, *_operator_args(reduced, vf.xi), out, pw)
    return pw


def bellman_residual(reduced: ReducedModel, vf: ValueFunction) -> float:
    """Largest ``|T V - V - gain|`` over all reduced states."""
    N = reduced.params.N
    rows = np.arange(reduced.n_phi, dtype=np.int64)
    out = np.zeros((N + 1, reduced.n_phi))
    pw = np.zeros((N + 1, reduced.n_phi, reduced.channel.J))
    _bellman(vf.values, rows, *_operator_args(reduced, vf.xi), out, pw)
    return float(np.abs(out - vf.values - vf.gain[None, :]).max())


def water_filling_power(delta, p_ack, gain, xi: float, params: SystemParams):
    """Closed-form minimiser of ``xi P + p_ack (W tau / Nb) log2(1 + P g / N0 W) delta``.

    ``delta`` is the value drop from serving one packet (non-positive when
    service helps).  The result is clamped to ``[0, P_max(gain)]``.
    """
    if not xi > 0:
        raise InvalidInputError("the Lagrange multiplier must be positive")
    delta, p_ack, gain = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (delta, p_ack, gain)))
    level = -params.W * params.tau * p_ack * delta / (params.mean_packet_bits * xi * LN2)
    p = np.clip(level - params.noise_power / gain, 0.0, params.max_power(gain))
    p = np.where(p_ack * delta < 0, p, 0.0)
    return p if p.ndim else float(p)


# -- power tables ---------------------------------------------------------------

@dataclass
class PowerPolicy:
    """Online power lookup table of one user.

    ``table[q, h_prev, c_idx, z_prev, tx_prev, h_cur]`` in watts, where
    ``c_idx`` indexes ``common_states`` and ``tx_prev`` is whether this user
    actually transmitted last slot.  In the dominant system ``tx_prev`` always
    equals ``h_prev >= threshold``; the actual system can also be silent
    above threshold with an empty buffer.  NaN marks impossible entries.
    """

    table: np.ndarray
    common_states: list
    xi: float = float("nan")
    label: str = ""

    def lookup(self, q, h_prev, c, z_prev, tx_prev, h_cur) -> float:
        ci = self.common_states.index(c)
        p = self.table[q, h_prev, ci, int(z_prev), int(tx_prev), h_cur]
        if np.isnan(p):
            from .errors import PolicyTableMissError
            raise PolicyTableMissError(f"no power entry for q={q}, h_prev={h_prev}, c={c!r}, z={Feedback(z_prev).name}, "
                                       f"tx_prev={tx_prev}, h_cur={h_cur}")
        return float(p)


def _nan_table(N, J, C):
    return np.full((N + 1, J, C, 3, 2, J), np.nan)


def _valid_mask(policy: ThresholdPolicy, commons: list, J: int, k: int = 0) -> np.ndarray:
    """Entries ``(h_prev, c, tx_prev)`` that can occur online."""
    mask = np.ones((J, len(commons), 2), dtype=bool)
    for ci, c in enumerate(commons):
        g = policy.threshold_of(c, k)
        mask[:g, ci, 1] = False
    return mask


def power_table_from_rule(policy: ThresholdPolicy, rule, N: int, J: int, k: int = 0, label: str = "") -> PowerPolicy:
    """Tabulate a power rule ``rule(h_cur, g_cur) -> watts`` that ignores queue and history."""
    commons = policy.common_states
    table = _nan_table(N, J, len(commons))
    mask = _valid_mask(policy, commons, J, k)
    for ci, c in enumerate(commons):
        for z in FEEDBACKS:
            g_cur = policy.threshold_of(policy(c, z), k)
            row = np.array([rule(h, g_cur) if h >= g_cur else 0.0 for h in range(J)])
            for h_prev in range(J):
                for tx in (0, 1):
                    if mask[h_prev, ci, tx]:
                        table[:, h_prev, ci, int(z), tx, :] = row
    return PowerPolicy(table, commons, label=label)


def optimal_power_table(reduced: ReducedModel, vf: ValueFunction) -> PowerPolicy:
    """Power table from a solved value function, covering actual-system states too.

    Entries whose phi state is in the reduced model reuse the greedy powers;
    the rest (own silence above threshold, or feedback the stationary model
    deems impossible) are computed from the same closed form, with the
    feedback pmf falling back to unconditioned stationary behaviour of the
    other users when the conditioning event is null.
    """
    p = reduced.params
    N, J = p.N, reduced.channel.J
    policy, model = reduced.policy, reduced.model
    commons = reduced.common_states
    pw = greedy_powers(reduced, vf)
    table = _nan_table(N, J, len(commons))
    mask = _valid_mask(policy, commons, J, model.k)
    gains = reduced.gains()
    V = vf.values
    for ci, c in enumerate(commons):
        g_prev = model.threshold_of(c)
        for z in FEEDBACKS:
            c_cur = policy(c, z)
            g_cur = model.threshold_of(c_cur)
            for h_prev in range(J):
                for tx in (0, 1):
                    if not mask[h_prev, ci, tx]:
                        continue
                    key = (h_prev, c, int(z))
                    if bool(tx) == (h_prev >= g_prev) and key in reduced.index:
                        table[:, h_prev, ci, int(z), tx, :] = pw[:, reduced.index[key], :]
                        continue
                    try:
                        p_ack = model.probs(z, bool(tx), True, c, c_cur)[Feedback.ACK]
                    except NullEventError:
                        p_ack = model.unconditioned_ack(c_cur)
                    row = np.zeros((N + 1, J))
                    for h in range(g_cur, J):
                        j = reduced.index.get((h, c_cur, int(Feedback.ACK)))
                        if j is None or p_ack == 0.0:
                            continue
                        delta = np.r_[0.0, V[:-1, j] - V[1:, j]]
                        row[:, h] = water_filling_power(delta, p_ack, gains[h], vf.xi, p)
                    table[:, h_prev, ci, int(z), tx, :] = row
    return PowerPolicy(table, commons, xi=vf.xi, label="proposed")


def optimal_power(state, reduced: ReducedModel, vf: ValueFunction) -> float:
    """Power of one local state ``(q, h_prev, c_prev, z_prev, h_cur)`` from a solved value function."""
    q, h_prev, c, z, h_cur = state
    model, policy = reduced.model, reduced.policy
    c_cur = policy(c, z)
    if h_cur < model.threshold_of(c_cur) or q == 0:
        return 0.0
    p_ack = model.probs(z, h_prev >= model.threshold_of(c), True, c, c_cur)[Feedback.ACK]
    j = reduced.index.get((h_cur, c_cur, int(Feedback.ACK)))
    if j is None or p_ack == 0.0:
        return 0.0
    delta = vf.values[q - 1, j] - vf.values[q, j]
    return water_filling_power(delta, p_ack, reduced.channel.states[h_cur], vf.xi, reduced.params)


# -- stationary behaviour under a fixed power policy -----------------------------

def reduced_transition_matrix(reduced: ReducedModel, pw: np.ndarray, rows=None):
    """Sparse transition matrix over reduced states ``s = q * n_phi + i``."""
    p = reduced.params
    N, n = p.N, reduced.n_phi
    up = p.arrival_prob
    rate_coef = p.W * p.tau / p.mean_packet_bits
    gains = reduced.gains()
    if rows is None:
        rows = np.arange(n)
    src, dst, val = [], [], []
    q = np.arange(N + 1)
    for i in rows:
        for h in np.flatnonzero(reduced.w[i]):
            wh = reduced.w[i, h]
            for z in range(3):
                pzv = reduced.pz[i, h, z]
                if pzv == 0.0:
                    continue
                j = reduced.nxt[i, h, z]
                if z == Feedback.ACK and reduced.txc[i, h]:
                    mu_tau = rate_coef * np.log2(1.0 + pw[:, i, h] * gains[h] / p.noise_power)
                    mu_tau[0] = 0.0
                else:
                    mu_tau = np.zeros(N + 1)
                s = q * n + i
                for target_q, prob in ((np.minimum(q + 1, N), np.full(N + 1, up)),
                                       (np.maximum(q - 1, 0), mu_tau),
                                       (q, 1.0 - up - mu_tau)):
                    src.append(s)
                    dst.append(target_q * n + j)
                    val.append(wh * pzv * prob)
    src, dst, val = (np.concatenate(a) for a in (src, dst, val))
    size = (N + 1) * n
    return coo_matrix((val, (src, dst)), shape=(size, size)).tocsr()


def controlled_stationary_distribution(reduced: ReducedModel, pw: np.ndarray, chains: Unichains | None = None,
                                       start: np.ndarray | None = None) -> np.ndarray:
    """Stationary law ``omega[q, i]`` of the reduced chain under power ``pw``.

    Each recurrent class is solved on its own and the classes are mixed by
    their absorption probabilities from ``start`` (the initial phi law by
    default).
    """
    phi_chain = build_phi_chain(reduced)
    if chains is None:
        chains = find_unichains(phi_chain)
    if start is None:
        start = reduced.initial
    A = absorption_probabilities(phi_chain, chains)
    weights = start @ A
    N, n = reduced.params.N, reduced.n_phi
    P = reduced_transition_matrix(reduced, pw)
    omega = np.zeros((N + 1) * n)
    for k, cls in enumerate(chains.recurrent):
        if weights[k] <= 0:
            continue
        idx = (np.arange(N + 1)[:, None] * n + cls[None, :]).ravel()
        sub = P[idx][:, idx]
        m = idx.size
        M = (sub.T - _speye(m)).tolil()
        M[0, :] = np.ones(m)
        b = np.zeros(m)
        b[0] = 1.0
        x = spsolve(M.tocsr(), b)
        if not np.all(np.isfinite(x)):
            raise np.linalg.LinAlgError(f"singular stationary system for class {k} ({m} states)")
        x = np.clip(x, 0.0, None)
        omega[idx] += weights[k] * x / x.sum()
    return omega.reshape(N + 1, n)


def _speye(m):
    from scipy.sparse import identity
    return identity(m, format="csr")


def average_power(omega: np.ndarray, pw: np.ndarray, reduced: ReducedModel) -> float:
    """``sum_s omega(s) sum_h Pr{h | h_prev} P(s, h)``."""
    return float(np.einsum("qi,ih,qih->", omega, reduced.w, pw))


def average_queue(omega: np.ndarray) -> float:
    return float(omega.sum(axis=1) @ np.arange(omega.shape[0]))


def transmit_probability(reduced: ReducedModel, chains: Unichains | None = None) -> float:
    """Stationary probability that the user's channel is at/above the current threshold."""
    phi_chain = build_phi_chain(reduced)
    if chains is None:
        chains = find_unichains(phi_chain)
    A = absorption_probabilities(phi_chain, chains)
    weights = reduced.initial @ A
    total = 0.0
    for k, cls in enumerate(chains.recurrent):
        if weights[k] <= 0:
            continue
        sub = phi_chain[np.ix_(cls, cls)]
        m = cls.size
        M = np.vstack([sub.T - np.eye(m), np.ones((1, m))])
        b = np.zeros(m + 1)
        b[-1] = 1.0
        nu, *_ = np.linalg.lstsq(M, b, rcond=None)
        total += weights[k] * float(nu @ (reduced.w[cls] * reduced.txc[cls]).sum(axis=1))
    return total


# -- Lagrange calibration ---------------------------------------------------------

@dataclass
class Calibration:
    """Outcome of the multiplier search for one power budget."""

    xi: float
    power: float
    budget: float
    value_function: ValueFunction
    powers: np.ndarray
    omega: np.ndarray
    saturated: bool
    evaluations: list

    start: np.ndarray | None = None

    @property
    def theta(self) -> float:
        """Average price per stage from the initial phi law."""
        return self.value_function.theta_from(self.start)

    @property
    def relative_error(self) -> float:
        return abs(self.power - self.budget) / self.budget

    @property
    def avg_queue(self) -> float:
        return average_queue(self.omega)


def evaluate_xi(reduced: ReducedModel, xi: float, warm=None, phi_chain=None, chains=None, **rvi):
    vf = relative_value_iteration(reduced, xi, warm=warm, phi_chain=phi_chain, chains=chains, **rvi)
    pw = greedy_powers(reduced, vf)
    omega = controlled_stationary_distribution(reduced, pw, vf.chains)
    return vf, pw, omega, average_power(omega, pw, reduced)


def calibrate_lagrange(reduced: ReducedModel, P0: float, *, xi_lo: float = 1e-9, xi_hi: float = 1e6,
                       xi_start: float = 1.0, rel_tol: float = 1e-2, width_tol: float = 1e-12,
                       max_evals: int = 200, **rvi) -> Calibration:
    """Bisect the multiplier until the stationary average power is within ``rel_tol`` of ``P0``.

    Average power is non-increasing in the multiplier, so the search first
    brackets ``P0`` by geometric steps from ``xi_start`` and then bisects in
    log space, warm-starting each value iteration from the previous one.
    If even ``xi_lo`` cannot spend ``P0`` the ``xi_lo`` policy is returned
    with ``saturated=True``.
    """
    if not P0 > 0:
        raise InvalidInputError("power budget must be positive")
    phi_chain = build_phi_chain(reduced)
    chains = find_unichains(phi_chain)
    evals = []
    warm = None

    def run(xi):
        nonlocal warm
        vf, pw, omega, pbar = evaluate_xi(reduced, xi, warm=warm, phi_chain=phi_chain, chains=chains, **rvi)
        warm = vf
        evals.append((xi, pbar, float(reduced.initial @ vf.gain)))
        log.info("xi=%.6g  P=%.6g  (target %.6g)", xi, pbar, P0)
        return vf, pw, omega, pbar

    def done(pbar):
        return abs(pbar - P0) / P0 < rel_tol

    xi = min(max(xi_start, xi_lo), xi_hi)
    res = run(xi)
    if done(res[3]):
        return _calibration(xi, res, P0, False, evals, reduced)
    lo_xi, hi_xi = None, None
    if res[3] > P0:
        lo_xi = xi
        while res[3] > P0:
            if xi >= xi_hi:
                raise ConvergenceError(f"average power {res[3]:.4g} still above budget at xi={xi_hi:g}")
            lo_xi = xi
            xi = min(xi * 10.0, xi_hi)
            res = run(xi)
            if done(res[3]):
                return _calibration(xi, res, P0, False, evals, reduced)
        hi_xi = xi
    else:
        hi_xi = xi
        while res[3] < P0:
            if xi <= xi_lo:
                return _calibration(xi, res, P0, True, evals, reduced)
            hi_xi = xi
            xi = max(xi / 10.0, xi_lo)
            res = run(xi)
            if done(res[3]):
                return _calibration(xi, res, P0, False, evals, reduced)
        lo_xi = xi
    a, b = math.log(lo_xi), math.log(hi_xi)
    while len(evals) < max_evals:
        mid = 0.5 * (a + b)
        xi = math.exp(mid)
        res = run(xi)
        if done(res[3]) or (b - a) < width_tol:
            return _calibration(xi, res, P0, False, evals, reduced)
        if res[3] > P0:
            a = mid
        else:
            b = mid
    raise ConvergenceError(f"multiplier search did not reach {rel_tol:g} relative error in {max_evals} evaluations")


def _calibration(xi, res, P0, saturated, evals, reduced):
    vf, pw, omega, pbar = res
    return Calibration(xi, pbar, P0, vf, pw, omega, saturated, evals, reduced.initial)
