"""Slot-level Monte Carlo simulation of the K-user network.

Policies are executed as plain table lookups.  The hot loop is compiled
with numba and consumes pre-drawn uniforms, so a run is fully determined
by its config and seed.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .channel import FsmcChannel
from .dynamics import Feedback, SystemParams
from .errors import InvalidInputError, PolicyTableMissError
from .policy import ThresholdPolicy, initial_common_info
from .solver import PowerPolicy

__all__ = ["SimConfig", "SimMetrics", "run_episode", "capture_decode", "aggregate_runs", "snr_db_to_power"]

CHUNK = 1 << 16
N_BATCHES = 20


def snr_db_to_power(snr_db: float, params: SystemParams) -> float:
    """Per-user power budget for an SNR in dB, taken relative to the noise power ``N0 W``."""
    return params.noise_power * 10.0 ** (snr_db / 10.0)


@dataclass
class SimConfig:
    """One simulation episode.

    ``power_policies`` holds one table per user (the same object may be
    repeated).  ``virtual_power`` controls what a dominant-system user with
    an empty buffer spends: ``"clamp"`` looks the table up at ``q = 1``,
    ``"table"`` uses the ``q = 0`` entry.
    """

    params: SystemParams
    channels: Sequence[FsmcChannel]
    threshold_policy: ThresholdPolicy
    power_policies: Sequence[PowerPolicy]
    mode: str = "actual"
    channel_model: str = "collision"
    beta: float = 1.0
    horizon: int = 1_000_000
    seed: int = 0
    warmup: int | None = None
    virtual_power: str = "clamp"
    trace: int = 0

    def __post_init__(self):
        K = self.params.K
        if len(self.channels) != K or len(self.power_policies) != K:
            raise InvalidInputError(f"need one channel and one power policy per user (K={K})")
        if self.mode not in ("dominant", "actual"):
            raise InvalidInputError(f"unknown mode {self.mode!r}")
        if self.channel_model not in ("collision", "capture"):
            raise InvalidInputError(f"unknown channel model {self.channel_model!r}")
        if self.channel_model == "capture" and not 0.0 < self.beta <= 1.0:
            raise InvalidInputError("capture back-off beta must lie in (0, 1]")
        if self.virtual_power not in ("clamp", "table"):
            raise InvalidInputError(f"unknown virtual_power {self.virtual_power!r}")
        if self.warmup is None:
            self.warmup = self.horizon // 10
        if not self.horizon > self.warmup >= 0:
            raise InvalidInputError("need horizon > warmup >= 0")
        if len({ch.J for ch in self.channels}) != 1:
            raise InvalidInputError("all users must have the same number of channel states")

    def signature(self) -> str:
        """Digest of everything except the seed, for checking that runs can be pooled."""
        h = hashlib.sha1()
        h.update(repr((self.params, self.mode, self.channel_model, self.beta, self.horizon, self.warmup,
                       self.virtual_power, self.threshold_policy.mode, sorted(self.threshold_policy.table.items())
                       )).encode())
        for ch in self.channels:
            h.update(ch.states.tobytes())
            h.update(ch.transition.tobytes())
        for pp in self.power_policies:
            h.update(np.ascontiguousarray(pp.table).tobytes())
        return h.hexdigest()


@dataclass
class SimMetrics:
    """Per-user time averages over the measured slots, with standard errors.

    ``*_se`` arrays come from batch means inside one run, or from the spread
    between runs after :func:`aggregate_runs`.
    """

    avg_queue: np.ndarray
    avg_delay_slots: np.ndarray  # avg_queue / (lambda tau)
    throughput_pkts_per_slot: np.ndarray
    throughput_bits_per_s: np.ndarray
    drop_prob: np.ndarray
    avg_power_W: np.ndarray
    avg_queue_se: np.ndarray
    avg_delay_se: np.ndarray
    drop_prob_se: np.ndarray
    avg_power_se: np.ndarray
    slots: int
    tau: float
    counts: dict = field(default_factory=dict)
    feedback_freq: np.ndarray = field(default_factory=lambda: np.zeros(3))
    n_runs: int = 1
    signature: str | None = None
    trajectory: dict | None = None
    sojourn_slots: np.ndarray | None = None
    sojourn_se: np.ndarray | None = None
    queue_dist: np.ndarray | None = None
    queue_dist_se: np.ndarray | None = None

    @property
    def avg_delay_ms(self) -> np.ndarray:
        return self.avg_delay_slots * self.tau * 1e3

    def network(self) -> dict:
        """User-averaged scalars."""
        K = self.avg_queue.size
        return {
            "avg_queue": float(self.avg_queue.mean()),
            "avg_queue_se": float(np.sqrt((self.avg_queue_se**2).sum()) / K),
            "avg_delay_slots": float(self.avg_delay_slots.mean()),
            "avg_delay_se": float(np.sqrt((self.avg_delay_se**2).sum()) / K),
            "avg_delay_ms": float(self.avg_delay_ms.mean()),
            "sojourn_slots": float(self.sojourn_slots.mean()) if self.sojourn_slots is not None else float("nan"),
            "throughput_pkts_per_slot": float(self.throughput_pkts_per_slot.sum()),
            "throughput_bits_per_s": float(self.throughput_bits_per_s.sum()),
            "drop_prob": float(self.drop_prob.mean()),
            "drop_prob_se": float(np.sqrt((self.drop_prob_se**2).sum()) / K),
            "avg_power_W": float(self.avg_power_W.mean()),
            "avg_power_se": float(np.sqrt((self.avg_power_se**2).sum()) / K),
        }


def capture_decode(powers, gains, params: SystemParams, beta: float) -> np.ndarray:
    """Which simultaneous transmitters the AP decodes under the capture model.

    User ``k`` is decoded when its backed-off rate ``beta W log2(1 + P_k H_k / N0 W)``
    does not exceed ``W log2(1 + P_k H_k / (sum_{i != k} P_i H_i + N0 W))``.

    Parameters
    ----------
    powers, gains : array_like
        Transmit power and channel gain of each transmitting user.
    params : SystemParams
    beta : float
        Rate back-off factor in ``(0, 1]``.

    Returns
    -------
    np.ndarray
        Boolean mask over the transmitters.
    """
    rx = np.asarray(powers, dtype=float) * np.asarray(gains, dtype=float)
    noise = params.noise_power
    interference = rx.sum() - rx
    rate = beta * np.log2(1.0 + rx / noise)
    cap = np.log2(1.0 + rx / (interference + noise))
    return rate <= cap + 1e-12


# -- compiled slot loop -----------------------------------------------------------

# scalar state layout: [c, z, t]
@numba.njit(cache=True)
def _run_chunk(u, state, h_prev, q, tx_prev, cdf, gains, thr, next_c, tables, tid, dominant, clamp, capture, beta,
               up, rate_tau, noise, N, warmup, n_batches, batch_len, acc, qhist, facc, miss, trace, trace_len):
    K = q.size
    c = state[0]
    z = state[1]
    t = state[2]
    n = u.shape[0]
    J = cdf.shape[2]
    h_cur = np.empty(K, dtype=np.int64)
    tx = np.zeros(K, dtype=np.bool_)
    power = np.zeros(K)
    decoded = np.zeros(K, dtype=np.bool_)
    for s in range(n):
        c_cur = next_c[c, z]
        n_tx = 0
        for k in range(K):
            row = cdf[k, h_prev[k]]
            x = u[s, k, 0]
            h = 0
            while h < J - 1 and x >= row[h]:
                h += 1
            h_cur[k] = h
            tx[k] = h >= thr[k, c_cur] and (dominant or q[k] > 0)
            power[k] = 0.0
            if tx[k]:
                n_tx += 1
                qq = q[k]
                if qq == 0 and clamp:
                    qq = 1
                p = tables[tid[k], qq, h_prev[k], c, z, 1 if tx_prev[k] else 0, h]
                if np.isnan(p):
                    miss[0] = k
                    miss[1] = qq
                    miss[2] = h_prev[k]
                    miss[3] = c
                    miss[4] = z
                    miss[5] = 1 if tx_prev[k] else 0
                    miss[6] = h
                    miss[7] = t
                    state[0] = c
                    state[1] = z
                    state[2] = t
                    return False
                power[k] = p
        # resolve the slot
        for k in range(K):
            decoded[k] = False
        if capture:
            total = 0.0
            for k in range(K):
                if tx[k]:
                    total += power[k] * gains[k, h_cur[k]]
            for k in range(K):
                if tx[k]:
                    rx = power[k] * gains[k, h_cur[k]]
                    rate = beta * math.log2(1.0 + rx / noise)
                    cap = math.log2(1.0 + rx / (total - rx + noise))
                    decoded[k] = rate <= cap + 1e-12
        elif n_tx == 1:
            for k in range(K):
                decoded[k] = tx[k]
        z_new = 0 if n_tx == 0 else (1 if n_tx == 1 else 2)
        measured = t >= warmup
        b = (t - warmup) // batch_len if measured else 0
        if b >= n_batches:
            b = n_batches - 1
        if measured:
            facc[z_new] += 1.0
        for k in range(K):
            if trace_len > 0 and t < trace_len:
                trace[t, k, 0] = q[k]
                trace[t, k, 1] = h_cur[k]
                trace[t, k, 2] = 1 if tx[k] else 0
                trace[t, k, 3] = z_new
                trace[t, k, 4] = power[k]
            if measured:
                # acc[k, b, :] = queue, arrivals, accepted, dropped, departures, power, tx, decoded
                acc[k, b, 0] += q[k]
                qhist[k, b, q[k]] += 1.0
                acc[k, b, 5] += power[k]
                acc[k, b, 6] += 1.0 if tx[k] else 0.0
                acc[k, b, 7] += 1.0 if decoded[k] else 0.0
            x = u[s, k, 1]
            mu_tau = 0.0
            if decoded[k] and power[k] > 0.0:
                mu_tau = rate_tau * math.log2(1.0 + power[k] * gains[k, h_cur[k]] / noise)
                if capture:
                    # backed-off rate leaves margin for capture
                    mu_tau *= beta
            if x < up:
                if measured:
                    acc[k, b, 1] += 1.0
                if q[k] < N:
                    q[k] += 1
                    if measured:
                        acc[k, b, 2] += 1.0
                elif measured:
                    acc[k, b, 3] += 1.0
            elif x < up + mu_tau and q[k] > 0:
                q[k] -= 1
                if measured:
                    acc[k, b, 4] += 1.0
            tx_prev[k] = tx[k]
            h_prev[k] = h_cur[k]
        c = c_cur
        z = z_new
        t += 1
    state[0] = c
    state[1] = z
    state[2] = t
    return True


def _compile_tables(cfg: SimConfig):
    pol = cfg.threshold_policy
    commons = pol.common_states
    cidx = {c: i for i, c in enumerate(commons)}
    C = len(commons)
    next_c = np.zeros((C, 3), dtype=np.int64)
    for (c, z), nxt in pol.table.items():
        next_c[cidx[c], z] = cidx[nxt]
    K = cfg.params.K
    thr = np.array([[pol.threshold_of(c, k) for c in commons] for k in range(K)], dtype=np.int64)
    uniq, tid = [], np.zeros(K, dtype=np.int64)
    for k, pp in enumerate(cfg.power_policies):
        if list(pp.common_states) != list(commons):
            raise InvalidInputError(f"power table of user {k} is indexed by different common states")
        for i, other in enumerate(uniq):
            if other is pp:
                tid[k] = i
                break
        else:
            tid[k] = len(uniq)
            uniq.append(pp)
    tables = np.ascontiguousarray(np.stack([pp.table for pp in uniq]))
    return commons, cidx, next_c, thr, tables, tid


def run_episode(cfg: SimConfig) -> SimMetrics:
    """Simulate ``cfg.horizon`` slots and return per-user metrics.

    Raises
    ------
    PolicyTableMissError
        If a user reaches a state with no power entry.
    """
    p = cfg.params
    K, N = p.K, p.N
    commons, cidx, next_c, thr, tables, tid = _compile_tables(cfg)
    if tables.shape[1] != N + 1:
        raise InvalidInputError("power tables were built for a different buffer size")
    cdf = np.stack([np.cumsum(ch.transition, axis=1) for ch in cfg.channels])
    gains = np.stack([ch.states for ch in cfg.channels])
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    # initial CSI drawn from the stationary law; every user 'transmitted' in slot 0
    h_prev = np.array([min(int(np.searchsorted(np.cumsum(ch.stationary), x, side="right")), ch.J - 1)
                       for ch, x in zip(cfg.channels, rng.random(K))], dtype=np.int64)
    c0, z0 = initial_common_info(K, cfg.threshold_policy.mode)
    state = np.array([cidx[c0], int(z0), 0], dtype=np.int64)
    q = np.zeros(K, dtype=np.int64)
    tx_prev = np.ones(K, dtype=np.bool_)
    measured = cfg.horizon - cfg.warmup
    n_batches = min(N_BATCHES, measured)
    batch_len = measured // n_batches
    acc = np.zeros((K, n_batches, 8))
    qhist = np.zeros((K, n_batches, N + 1))
    facc = np.zeros(3)
    miss = np.full(8, -1, dtype=np.int64)
    trace_len = min(cfg.trace, cfg.horizon)
    trace = np.zeros((max(trace_len, 1), K, 5))
    q_start = None
    done = 0
    while done < cfg.horizon:
        if done == cfg.warmup:
            q_start = q.copy()
        limit = cfg.warmup if done < cfg.warmup else cfg.horizon
        n = min(CHUNK, limit - done)
        u = rng.random((n, K, 2))
        ok = _run_chunk(u, state, h_prev, q, tx_prev, cdf, gains, thr, next_c, tables, tid,
                        cfg.mode == "dominant", cfg.virtual_power == "clamp", cfg.channel_model == "capture",
                        float(cfg.beta), p.arrival_prob, p.tau * p.W / p.mean_packet_bits, p.noise_power, N,
                        cfg.warmup, n_batches, batch_len, acc, qhist, facc, miss, trace, trace_len)
        if not ok:
            k, qq, hp, c, z, txp, h, t = miss.tolist()
            raise PolicyTableMissError(
                f"slot {t}, user {k}: no power entry for q={qq}, h_prev={hp}, c={commons[c]!r}, "
                f"z={Feedback(z).name}, tx_prev={bool(txp)}, h_cur={h}")
        done += n
    return _metrics(cfg, acc, qhist, facc, measured, q_start, q, trace[:trace_len] if trace_len else None)


def _ratio_se(num, den):
    """Batch-means standard error of a ratio estimator ``sum(num) / sum(den)``."""
    B = num.shape[-1]
    tot_n, tot_d = num.sum(-1), den.sum(-1)
    r = np.divide(tot_n, tot_d, out=np.zeros_like(tot_n), where=tot_d > 0)
    if B < 2:
        return r, np.zeros_like(r)
    mean_d = tot_d / B
    resid = num - r[..., None] * den
    se = np.sqrt((resid**2).sum(-1) / (B * (B - 1)))
    se = np.divide(se, mean_d, out=np.zeros_like(se), where=mean_d > 0)
    return r, se


def _metrics(cfg: SimConfig, acc, qhist, facc, measured, q_start, q_end, trace) -> SimMetrics:
    p = cfg.params
    per_batch_slots = np.full(acc.shape[1], measured // acc.shape[1], dtype=float)
    per_batch_slots[-1] += measured - per_batch_slots.sum()
    slots = np.broadcast_to(per_batch_slots, acc.shape[:2])
    qbar, q_se = _ratio_se(acc[..., 0], slots)
    pbar, p_se = _ratio_se(acc[..., 5], slots)
    drop, drop_se = _ratio_se(acc[..., 3], acc[..., 1])
    # delay by Little's law at the offered rate, so it orders policies exactly like the queue length
    up = p.arrival_prob
    delay = qbar / up if up > 0 else np.zeros_like(qbar)
    delay_se = q_se / up if up > 0 else np.zeros_like(q_se)
    # mean time an accepted packet spends in the buffer
    sojourn, sojourn_se = _ratio_se(acc[..., 0], acc[..., 2])
    frac = qhist / per_batch_slots[None, :, None]
    qdist = qhist.sum(1) / measured
    B = frac.shape[1]
    qdist_se = frac.std(axis=1, ddof=1) / math.sqrt(B) if B > 1 else np.zeros_like(qdist)
    deps = acc[..., 4].sum(-1)
    thr_slot = deps / measured
    counts = {
        "arrivals": acc[..., 1].sum(-1), "accepted": acc[..., 2].sum(-1), "dropped": acc[..., 3].sum(-1),
        "departures": deps, "transmissions": acc[..., 6].sum(-1), "decoded": acc[..., 7].sum(-1),
        "q_start": np.asarray(q_start, dtype=float), "q_end": np.asarray(q_end, dtype=float),
    }
    traj = None
    if trace is not None:
        traj = {"q": trace[..., 0].astype(int), "h": trace[..., 1].astype(int), "tx": trace[..., 2].astype(bool),
                "z": trace[:, 0, 3].astype(int), "power": trace[..., 4]}
    return SimMetrics(qbar, delay, thr_slot, thr_slot * p.mean_packet_bits / p.tau, drop, pbar,
                      q_se, delay_se, drop_se, p_se, measured, p.tau, counts, facc / measured, 1,
                      cfg.signature(), traj, sojourn, sojourn_se, qdist, qdist_se)


def aggregate_runs(runs: Sequence[SimMetrics]) -> SimMetrics:
    """Pool independent runs of the same config.

    Means are averaged over runs; standard errors come from the spread
    between runs (zero for a single run).  Order of ``runs`` does not matter.

    Raises
    ------
    InvalidInputError
        If the runs were produced by different configs.
    """
    runs = list(runs)
    if not runs:
        raise InvalidInputError("nothing to aggregate")
    sig = runs[0].signature
    if any(r.signature != sig for r in runs[1:]) or any(r.slots != runs[0].slots for r in runs[1:]):
        raise InvalidInputError("runs differ in more than their seed")
    R = len(runs)

    def pool(name):
        x = np.stack([getattr(r, name) for r in runs])
        mean = x.mean(axis=0)
        se = x.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros_like(mean)
        return mean, se

    q, q_se = pool("avg_queue")
    d, d_se = pool("avg_delay_slots")
    th, _ = pool("throughput_pkts_per_slot")
    tb, _ = pool("throughput_bits_per_s")
    dr, dr_se = pool("drop_prob")
    pw, pw_se = pool("avg_power_W")
    so, so_se = pool("sojourn_slots")
    qd, qd_se = pool("queue_dist")
    counts = {k: sum(r.counts[k] for r in runs) for k in runs[0].counts}
    ff = np.mean([r.feedback_freq for r in runs], axis=0)
    return SimMetrics(q, d, th, tb, dr, pw, q_se, d_se, dr_se, pw_se, runs[0].slots, runs[0].tau,
                      counts, ff, R, sig, None, so, so_se, qd, qd_se)
