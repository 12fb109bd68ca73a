"""Finite-state Markov channel (FSMC) model and CSI-derived probabilities.

Channel states are addressed by their 0-based index into the ordered gain
alphabet ``S_1 < ... < S_J``.  A transmission threshold is likewise a state
index ``g``: a user transmits when its current state index is ``>= g``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from math import comb

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import InvalidInputError, NoUniqueStationaryError, NullEventError

__all__ = [
    "FsmcChannel",
    "stationary_distribution",
    "conditioned_distribution",
    "transmission_event_prob",
    "multi_transmit_prob",
    "transmit_count_distribution",
    "load_table1",
    "iid_channel",
]

ROW_SUM_TOL = 1e-9


def _check_stochastic(transition):
    P = np.asarray(transition, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise InvalidInputError(f"transition must be square, got shape {P.shape}")
    if np.any(P < 0):
        raise InvalidInputError("transition has negative entries")
    bad = np.flatnonzero(np.abs(P.sum(axis=1) - 1.0) > ROW_SUM_TOL)
    if bad.size:
        raise InvalidInputError(f"rows {bad.tolist()} of transition do not sum to 1")
    return P


def _recurrent_classes(P):
    """Return the closed strongly connected components of the support graph."""
    n_comp, labels = connected_components(csr_matrix(P > 0), directed=True, connection="strong")
    closed = np.ones(n_comp, dtype=bool)
    rows, cols = np.nonzero(P > 0)
    leaving = labels[rows] != labels[cols]
    closed[np.unique(labels[rows[leaving]])] = False
    return [np.flatnonzero(labels == c) for c in range(n_comp) if closed[c]]


def stationary_distribution(transition) -> np.ndarray:
    """Stationary distribution of an irreducible row-stochastic matrix.

    Solves ``v (P - I) = 0`` together with ``sum(v) = 1`` as one
    overdetermined linear system.

    Raises
    ------
    InvalidInputError
        If ``transition`` is not square and row-stochastic.
    NoUniqueStationaryError
        If the chain is not irreducible.
    """
    P = _check_stochastic(transition)
    n = P.shape[0]
    classes = _recurrent_classes(P)
    if len(classes) != 1 or classes[0].size != n:
        raise NoUniqueStationaryError(
            f"chain has {len(classes)} recurrent class(es) covering "
            f"{sum(c.size for c in classes)} of {n} states"
        )
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    v, *_ = np.linalg.lstsq(A, b, rcond=None)
    v = np.clip(v, 0.0, None)
    return v / v.sum()


@dataclass(frozen=True)
class FsmcChannel:
    """Per-user finite-state Markov channel.

    Attributes
    ----------
    states : np.ndarray
        Strictly increasing positive linear power gains, shape ``(J,)``.
    transition : np.ndarray
        Row-stochastic ``(J, J)`` matrix, ``transition[i, j] = Pr{S_j | S_i}``.
    stationary : np.ndarray
        Stationary probabilities, shape ``(J,)``.
    """

    states: np.ndarray
    transition: np.ndarray
    stationary: np.ndarray

    @classmethod
    def from_matrix(cls, states, transition) -> "FsmcChannel":
        s = np.asarray(states, dtype=float)
        P = _check_stochastic(transition)
        if s.ndim != 1 or s.size != P.shape[0]:
            raise InvalidInputError("states and transition sizes disagree")
        if np.any(s <= 0) or np.any(np.diff(s) <= 0):
            raise InvalidInputError("states must be positive and strictly increasing")
        # renormalise the 2-decimal rows so internal rows are stochastic to 1e-12
        P = P / P.sum(axis=1, keepdims=True)
        pi = stationary_distribution(P)
        for arr in (s, P, pi):
            arr.setflags(write=False)
        return cls(s, P, pi)

    @property
    def J(self) -> int:
        return self.states.size

    def tail(self, g: int) -> float:
        """``Pr{H >= S_g}`` under the stationary law."""
        return min(1.0, float(self.stationary[g:].sum()))

    def head(self, g: int) -> float:
        """``Pr{H < S_g}`` under the stationary law."""
        return min(1.0, float(self.stationary[:g].sum()))

    def to_dict(self) -> dict:
        return {"states": self.states.tolist(), "transition": self.transition.tolist()}


def iid_channel(states, probs) -> FsmcChannel:
    """Memoryless channel: every transition row equals ``probs``."""
    p = np.asarray(probs, dtype=float)
    return FsmcChannel.from_matrix(states, np.tile(p / p.sum(), (p.size, 1)))


def load_table1() -> dict[str, FsmcChannel]:
    """The bundled ten-state models, keyed ``"user1"`` and ``"user2"``."""
    raw = json.loads(resources.files("fsmc_aloha.data").joinpath("table1.json").read_text())
    return {
        name: FsmcChannel.from_matrix(raw["states"], user["transition"])
        for name, user in raw["users"].items()
    }


def table1_printed_stationary() -> dict[str, np.ndarray]:
    raw = json.loads(resources.files("fsmc_aloha.data").joinpath("table1.json").read_text())
    return {name: np.array(u["stationary_printed"]) for name, u in raw["users"].items()}


def conditioned_distribution(channel: FsmcChannel, g: int, side: str) -> np.ndarray:
    """Stationary law restricted to states below or at/above threshold ``g``.

    Returns a length-``J`` vector that is zero outside the restricted set.
    ``side="below"`` keeps indices ``< g``; ``side="above"`` keeps ``>= g``.
    """
    pi = channel.stationary
    mask = np.arange(channel.J) < g
    if side == "above":
        mask = ~mask
    elif side != "below":
        raise InvalidInputError(f"side must be 'below' or 'above', got {side!r}")
    mass = pi[mask].sum()
    if not mask.any() or mass <= 0:
        raise NullEventError(f"no channel state {side} threshold index {g}")
    out = np.where(mask, pi, 0.0)
    return out / mass


def transmission_event_prob(channel: FsmcChannel, g_prev: int, g_cur: int, transmitted_prev: bool) -> float:
    """Probability of transmitting now given the previous transmit event.

    With ``transmitted_prev=False`` this is the quantity often written
    upsilon: the previous state is drawn from the stationary law below
    ``g_prev``.  With ``True`` it is zeta, drawn from the law at/above
    ``g_prev``.  Either way the result is ``Pr{H_now >= S_{g_cur}}``.
    """
    side = "above" if transmitted_prev else "below"
    w = conditioned_distribution(channel, g_prev, side)
    if g_cur == 0:
        return 1.0
    return float(np.clip(w @ channel.transition[:, g_cur:].sum(axis=1), 0.0, 1.0))


def _binomial_terms(q: float, K: int) -> np.ndarray:
    k = np.arange(K + 1)
    coef = np.array([comb(K, i) for i in k], dtype=float)
    return coef * q**k * (1.0 - q) ** (K - k)


def multi_transmit_prob(channel: FsmcChannel, g: int, K: int, k: int, n: int = 0) -> float:
    """Probability that ``k`` of ``K`` users are at/above ``g``, given at least ``n`` are.

    Each user is independently at/above the threshold with the stationary
    tail probability.  The conditional is normalised over ``k >= n``.
    """
    if not 0 <= n <= k <= K:
        raise InvalidInputError(f"need 0 <= n <= k <= K, got n={n}, k={k}, K={K}")
    return float(transmit_count_distribution(channel.tail(g), K, n)[k])


def transmit_count_distribution(q: float, K: int, n: int = 0) -> np.ndarray:
    """Binomial(K, q) pmf conditioned on the count being at least ``n``."""
    terms = _binomial_terms(q, K)
    terms[:n] = 0.0
    mass = 1.0 - _binomial_terms(q, K)[:n].sum()
    if mass <= 1e-300 or terms.sum() <= 0:
        raise NullEventError(f"at least {n} of {K} transmitters has probability zero")
    return terms / terms.sum()
