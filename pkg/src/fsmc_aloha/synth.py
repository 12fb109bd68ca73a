"""Offline synthesis of every evaluated policy, ready for the simulator.

Each builder returns a :class:`SynthesizedPolicy` holding the shared
threshold table, one power table per user and a flat ``info`` dict with the
numbers worth logging (multipliers, average price, state counts).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channel import FsmcChannel
from .dynamics import FeedbackModel, SystemParams
from .errors import InvalidInputError
from .policy import (
    ThresholdPolicy,
    asymmetric_policy,
    baseline_binary_scheduling,
    baseline_variable_rate,
    bsp_thresholds,
    constant_power_rule,
    fixed_policy,
    lcsihp_policy,
)
from .solver import (
    PowerPolicy,
    build_reduced_model,
    calibrate_lagrange,
    find_unichains,
    build_phi_chain,
    optimal_power_table,
    power_table_from_rule,
    transmit_probability,
)

log = logging.getLogger(__name__)

POLICIES = ("proposed", "binary_scheduling", "lcsihp_fixed_power", "variable_rate", "bsp")
SYMMETRIC_ONLY = ("binary_scheduling", "lcsihp_fixed_power", "variable_rate")


@dataclass
class SynthesizedPolicy:
    name: str
    threshold_policy: ThresholdPolicy
    power_policies: list
    info: dict = field(default_factory=dict)
    convergence: list = field(default_factory=list)


def _profile_table(policy: ThresholdPolicy, profile: np.ndarray, N: int, k: int, label: str) -> PowerPolicy:
    return power_table_from_rule(policy, lambda h, g: float(profile[h]), N, profile.size, k, label)


def _proposed_user(policy, model, params, P0, k, rvi):
    red = build_reduced_model(policy, model, params)
    cal = calibrate_lagrange(red, P0, **rvi)
    table = optimal_power_table(red, cal.value_function)
    chains = cal.value_function.chains
    info = {
        "xi": cal.xi, "theta": cal.theta, "model_power_W": cal.power, "model_avg_queue": cal.avg_queue,
        "saturated": cal.saturated, "phi_states": red.n_phi, "reduced_states": red.n_states,
        "recurrent_classes": len(chains.recurrent),
        "recurrent_states": int(sum(c.size for c in chains.recurrent)) * (params.N + 1),
        "evaluations": len(cal.evaluations),
    }
    conv = [(k, xi, pbar, theta) for xi, pbar, theta in cal.evaluations]
    return table, info, conv, cal


def synthesize_proposed(channels: Sequence[FsmcChannel], params: SystemParams, P0: float, mode: str = "symmetric",
                        **rvi) -> SynthesizedPolicy:
    """Threshold table plus queue-aware water-filling power, calibrated to ``P0`` per user.

    In symmetric mode one solve serves every user.  In asymmetric mode each
    user gets its own reduced model and multiplier.
    """
    K = params.K
    if mode == "symmetric":
        policy = lcsihp_policy(channels[0], K)
        table, info, conv, _ = _proposed_user(policy, FeedbackModel.symmetric(channels[0], K), params, P0, 0, rvi)
        return SynthesizedPolicy("proposed", policy, [table] * K, info, conv)
    policy = asymmetric_policy(channels)
    tables, infos, convs = [], [], []
    for k in range(K):
        table, info, conv, _ = _proposed_user(policy, FeedbackModel.asymmetric(channels, k), params, P0, k, rvi)
        tables.append(table)
        infos.append(info)
        convs.extend(conv)
    merged = {key: [i[key] for i in infos] for key in infos[0]}
    merged["common_states"] = len(policy.common_states)
    return SynthesizedPolicy("proposed", policy, tables, merged, convs)


def synthesize_binary_scheduling(channels, params: SystemParams, P0: float) -> SynthesizedPolicy:
    """Fixed stationary-optimal threshold, constant power while transmitting."""
    ch, K = channels[0], params.K
    g, profile = baseline_binary_scheduling(ch, K, P0, params)
    policy = fixed_policy(g, K)
    table = _profile_table(policy, profile, params.N, 0, "binary_scheduling")
    return SynthesizedPolicy("binary_scheduling", policy, [table] * K,
                             {"threshold": g, "tx_power_W": float(profile[g:].max())})


def synthesize_lcsihp_fixed_power(channels, params: SystemParams, P0: float) -> SynthesizedPolicy:
    """Feedback-adaptive thresholds with a constant transmit power.

    The power is ``P0`` over the stationary transmit probability of the
    threshold process, capped per state at the time-scale limit.
    """
    ch, K = channels[0], params.K
    policy = lcsihp_policy(ch, K)
    red = build_reduced_model(policy, FeedbackModel.symmetric(ch, K), params)
    p_tx = transmit_probability(red)
    profile = constant_power_rule(ch, 0, P0 / p_tx, params)
    table = _profile_table(policy, profile, params.N, 0, "lcsihp_fixed_power")
    return SynthesizedPolicy("lcsihp_fixed_power", policy, [table] * K,
                             {"tx_prob": p_tx, "tx_power_W": P0 / p_tx})


def synthesize_variable_rate(channels, params: SystemParams, P0: float) -> SynthesizedPolicy:
    """Fixed threshold with CSI-only water-filling power."""
    ch, K = channels[0], params.K
    g, xi, profile = baseline_variable_rate(ch, K, P0, params)
    policy = fixed_policy(g, K)
    table = _profile_table(policy, profile, params.N, 0, "variable_rate")
    return SynthesizedPolicy("variable_rate", policy, [table] * K, {"threshold": g, "xi": xi})


def synthesize_bsp(channels, params: SystemParams, P0: float) -> SynthesizedPolicy:
    """Per-user fixed thresholds and per-user CSI water-filling for heterogeneous users."""
    K = params.K
    picks = bsp_thresholds(channels, P0, params)
    g = tuple(int(p[0]) for p in picks)
    policy = fixed_policy(g, K, mode="asymmetric")
    tables = [_profile_table(policy, p[2], params.N, k, "bsp") for k, p in enumerate(picks)]
    return SynthesizedPolicy("bsp", policy, tables, {"threshold": list(g), "xi": [float(p[1]) for p in picks]})


def synthesize(name: str, channels, params: SystemParams, P0: float, mode: str = "symmetric", **rvi):
    """Dispatch to the builder of policy ``name``."""
    if name == "proposed":
        return synthesize_proposed(channels, params, P0, mode, **rvi)
    if name == "bsp":
        return synthesize_bsp(channels, params, P0)
    if name in SYMMETRIC_ONLY:
        if mode != "symmetric":
            raise InvalidInputError(f"policy {name!r} needs a symmetric network")
        return {"binary_scheduling": synthesize_binary_scheduling,
                "lcsihp_fixed_power": synthesize_lcsihp_fixed_power,
                "variable_rate": synthesize_variable_rate}[name](channels, params, P0)
    raise InvalidInputError(f"unknown policy {name!r}; choose from {', '.join(POLICIES)}")


def reachable_state_count(channel: FsmcChannel, K: int, params: SystemParams) -> tuple[int, int]:
    """Reduced states recurrent under the symmetric threshold policy, and the policy's distinct outputs."""
    policy = lcsihp_policy(channel, K)
    red = build_reduced_model(policy, FeedbackModel.symmetric(channel, K), params)
    chains = find_unichains(build_phi_chain(red))
    n = sum(c.size for c in chains.recurrent) * (params.N + 1)
    return n, len(set(policy.table.values()))
