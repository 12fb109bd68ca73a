import math

import numpy as np
import pytest
from oracles import FullStateMdp

from fsmc_aloha.channel import FsmcChannel, iid_channel
from fsmc_aloha.dynamics import Feedback, FeedbackModel, SystemParams
from fsmc_aloha.errors import InvalidInputError
from fsmc_aloha.policy import fixed_policy, lcsihp_policy
from fsmc_aloha.solver import (
    average_power,
    average_queue,
    bellman_residual,
    build_phi_chain,
    build_reduced_model,
    calibrate_lagrange,
    controlled_stationary_distribution,
    evaluate_xi,
    find_unichains,
    greedy_powers,
    optimal_power,
    optimal_power_table,
    power_table_from_rule,
    relative_value_iteration,
    transmit_probability,
    water_filling_power,
)

TINY = SystemParams(tau=1e-3, W=1e3, N0=1e-3, lam=100.0, mean_packet_bits=100.0, N=1, K=2)


@pytest.fixture(scope="module")
def tiny():
    ch = FsmcChannel.from_matrix([0.5, 2.0], [[0.7, 0.3], [0.4, 0.6]])
    pol = lcsihp_policy(ch, 2)
    model = FeedbackModel.symmetric(ch, 2)
    return ch, pol, model, build_reduced_model(pol, model, TINY)


@pytest.fixture(scope="module")
def small(table1):
    ch = table1["user1"]
    params = SystemParams(lam=20.0, mean_packet_bits=100.0, N=3, K=3)
    pol = lcsihp_policy(ch, 3)
    red = build_reduced_model(pol, FeedbackModel.symmetric(ch, 3), params)
    return ch, params, pol, red


def test_phi_chain_stochastic(table1):
    ch = table1["user1"]
    red = build_reduced_model(lcsihp_policy(ch, 5), FeedbackModel.symmetric(ch, 5), SystemParams())
    P = build_phi_chain(red)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)
    assert red.n_states <= (red.params.N + 1) * ch.J * ch.J * 3


def test_phi_chain_single_user(user1):
    pol = lcsihp_policy(user1, 1)
    red = build_reduced_model(pol, FeedbackModel.symmetric(user1, 1), SystemParams(K=1))
    P = build_phi_chain(red)
    for i, (h, c, z) in enumerate(red.phis):
        g = pol(c, z)
        for j in np.flatnonzero(P[i]):
            h2, c2, z2 = red.phis[j]
            assert c2 == g
            assert z2 == (Feedback.ACK if h2 >= g else Feedback.NAK)
            assert P[i, j] == pytest.approx(user1.transition[h, h2])


def test_phi_chain_hand_enumeration():
    # memoryless two-state channel, threshold at the top state, two users
    ch = iid_channel([1.0, 2.0], [0.4, 0.6])
    pol = fixed_policy(1, 2)
    red = build_reduced_model(pol, FeedbackModel.symmetric(ch, 2), SystemParams(K=2))
    P = build_phi_chain(red)
    # from any phi: own next state h with prob pi_h, the other user independently transmits w.p. 0.6
    for i, phi in enumerate(red.phis):
        for j, (h2, c2, z2) in enumerate(red.phis):
            own = h2 >= 1
            if c2 != 1:
                ref = {}
            elif own:
                ref = {Feedback.ACK: 0.4, Feedback.COLLISION: 0.6}
            else:
                ref = {Feedback.NAK: 0.4, Feedback.ACK: 0.6}
            assert P[i, j] == pytest.approx(ch.stationary[h2] * ref.get(Feedback(z2), 0.0), abs=1e-14)


def test_unichains_by_hand():
    P = np.array([
        [0.5, 0.5, 0.0, 0.0, 0.0],
        [0.5, 0.5, 0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0, 0.0],
        [0.2, 0.0, 0.3, 0.5, 0.0],
        [0.0, 0.0, 0.0, 1.0, 0.0],
    ])
    ch = find_unichains(P)
    assert [c.tolist() for c in ch.recurrent] == [[0, 1], [2]]
    assert ch.transient.tolist() == [3, 4]
    assert ch.class_of(2) == 1 and ch.class_of(4) == -1


@pytest.mark.parametrize("xi", [0.002, 0.02])
def test_reduced_matches_full_state(tiny, xi):
    ch, pol, model, red = tiny
    vf = relative_value_iteration(red, xi)
    theta_full, _, _ = FullStateMdp(pol, model, TINY).solve(xi)
    assert vf.theta_from(red.initial) == pytest.approx(theta_full, abs=1e-8)


def test_grid_search_never_beats_closed_form(tiny):
    ch, pol, model, red = tiny
    xi = 0.005
    vf = relative_value_iteration(red, xi)
    theta = vf.theta_from(red.initial)
    pmax = greedy_powers(red, vf).max()
    theta_grid, _, _ = FullStateMdp(pol, model, TINY, grid=51, grid_hi=2 * pmax).solve(xi)
    assert theta_grid >= theta - 1e-9
    # a 51-level grid costs at most one grid step of price
    assert theta_grid - theta <= xi * 2 * pmax / 50


def test_water_filling_matches_grid():
    rng = np.random.default_rng(8)
    p = SystemParams()
    for _ in range(20):
        delta, gain = -rng.uniform(0, 50), rng.uniform(0.05, 5)
        pa, xi = rng.uniform(0, 1), 10 ** rng.uniform(-3, 1)
        cf = water_filling_power(delta, pa, gain, xi, p)
        hi = min(float(p.max_power(gain)), 2 * cf + 1.0)
        grid = np.linspace(0, hi, 100_001)
        obj = xi * grid + pa * p.W * p.tau / p.mean_packet_bits * np.log2(1 + grid * gain / p.noise_power) * delta
        assert abs(grid[np.argmin(obj)] - cf) <= hi / 100_000 + 1e-12


def test_water_filling_edges():
    p = SystemParams()
    assert water_filling_power(0.0, 0.8, 1.0, 0.1, p) == 0.0
    assert water_filling_power(-5.0, 0.0, 1.0, 0.1, p) == 0.0
    assert water_filling_power(3.0, 0.8, 1.0, 0.1, p) == 0.0
    with pytest.raises(InvalidInputError):
        water_filling_power(-1.0, 0.5, 1.0, 0.0, p)
    gains = np.linspace(0.1, 5, 20)
    pw = water_filling_power(-10.0, 0.7, gains, 0.01, p)
    assert np.all(np.diff(pw) >= 0)
    level = -p.W * p.tau * 0.7 * -10.0 / (p.mean_packet_bits * 0.01 * math.log(2))
    np.testing.assert_allclose(pw, np.clip(level - p.noise_power / gains, 0, None))


def test_rvi_rejects_bad_multiplier(small):
    *_, red = small
    with pytest.raises(InvalidInputError):
        relative_value_iteration(red, 0.0)


def test_bellman_fixed_point(small):
    *_, red = small
    vf = relative_value_iteration(red, 0.05)
    assert bellman_residual(red, vf) < 1e-6
    assert np.isfinite(vf.values).all()
    assert np.all(vf.theta >= 0)


def test_huge_multiplier_means_no_power(small):
    ch, params, pol, red = small
    vf, pw, omega, pbar = evaluate_xi(red, 1e12)
    assert pbar == pytest.approx(0.0, abs=1e-9)
    assert vf.theta_from(red.initial) == pytest.approx(params.N, abs=1e-6)
    assert omega.sum() == pytest.approx(1.0)
    assert omega[params.N].sum() == pytest.approx(1.0, abs=1e-9)


def test_price_monotone_and_concave(small):
    *_, red = small
    xis = np.geomspace(1e-3, 1.0, 7)
    th = [relative_value_iteration(red, x).theta_from(red.initial) for x in xis]
    assert all(b >= a - 1e-8 for a, b in zip(th, th[1:]))
    # concave in xi: chords lie below the curve
    for a, b, c in zip(range(5), range(1, 6), range(2, 7)):
        t = (xis[b] - xis[a]) / (xis[c] - xis[a])
        assert th[b] >= (1 - t) * th[a] + t * th[c] - 1e-8


def test_power_decreasing_in_multiplier(small):
    *_, red = small
    ps = [evaluate_xi(red, x)[3] for x in (0.001, 0.01, 0.1, 1.0)]
    assert all(b <= a + 1e-12 for a, b in zip(ps, ps[1:]))


def test_constant_power_average(small):
    ch, params, pol, red = small
    pw = np.zeros((params.N + 1, red.n_phi, ch.J))
    pw[:] = 0.3 * red.txc[None, :, :]
    omega = controlled_stationary_distribution(red, pw)
    assert average_power(omega, pw, red) == pytest.approx(0.3 * transmit_probability(red), rel=1e-9)
    assert 0 <= average_queue(omega) <= params.N


def test_calibration_hits_budget(small):
    ch, params, pol, red = small
    cal = calibrate_lagrange(red, 0.05)
    assert not cal.saturated
    assert cal.relative_error < 1e-2
    assert cal.theta == pytest.approx(cal.avg_queue + cal.xi * cal.power, rel=1e-6)


def test_calibration_saturates(user1):
    params = SystemParams(lam=20.0, mean_packet_bits=10.0, N=2, K=2)
    red = build_reduced_model(lcsihp_policy(user1, 2), FeedbackModel.symmetric(user1, 2), params)
    cal = calibrate_lagrange(red, 1e6)
    assert cal.saturated
    assert cal.power < 1e6


def test_power_table_consistency(small):
    ch, params, pol, red = small
    vf = relative_value_iteration(red, 0.05)
    table = optimal_power_table(red, vf)
    pmax = params.max_power(ch.states)
    checked = 0
    for (h, c, z), i in red.index.items():
        g_cur = pol(c, z)
        g_prev = pol.threshold_of(c)
        tx = int(h >= g_prev)
        for q in range(params.N + 1):
            for hc in np.flatnonzero(ch.transition[h]):
                p = table.lookup(q, h, c, z, tx, hc)
                assert 0.0 <= p <= pmax[hc] + 1e-12
                if hc < g_cur or q == 0:
                    assert p == 0.0
                assert p == pytest.approx(optimal_power((q, h, c, z, hc), red, vf), abs=1e-12)
                checked += 1
    assert checked > 100
    # silent-above-threshold entries exist for the actual system
    h_hi = ch.J - 1
    assert not np.isnan(table.table[2, h_hi, table.common_states.index(pol.common_states[0]), 2, 0, h_hi])


def test_rule_table_masks_impossible(user1):
    pol = fixed_policy(6, 3)
    t = power_table_from_rule(pol, lambda h, g: 1.5, 2, 10)
    ci = t.common_states.index(6)
    assert np.isnan(t.table[0, 3, ci, 0, 1, 7])
    assert t.table[1, 7, ci, 0, 1, 7] == 1.5
    assert t.table[1, 7, ci, 0, 1, 2] == 0.0
