"""Synthesize and simulate a small network end to end.

Three users share the first measured channel.  For two transmit SNRs the
delay-optimal power control and the fixed-threshold baseline are built
offline, then simulated for a short horizon.  The optimizer budgets power
for a model in which every user always holds a packet, so the simulated
network, where empty users stay silent, spends somewhat less.  Takes under a minute.
Run with ``python3 demos/small_network.py``.
"""

from fsmc_aloha.channel import load_table1
from fsmc_aloha.dynamics import SystemParams
from fsmc_aloha.sim import SimConfig, aggregate_runs, run_episode, snr_db_to_power
from fsmc_aloha.synth import synthesize

ch = load_table1()["user1"]
params = SystemParams(lam=5.0, mean_packet_bits=100.0, N=3, K=3)

for snr in (5, 15):
    P0 = snr_db_to_power(snr, params)
    print(f"\nSNR {snr} dB, budget {P0:.3g} W per user")
    for name in ("proposed", "binary_scheduling"):
        sp = synthesize(name, [ch] * params.K, params, P0)
        runs = [run_episode(SimConfig(params, [ch] * params.K, sp.threshold_policy, sp.power_policies,
                                      horizon=200_000, seed=s)) for s in range(3)]
        net = aggregate_runs(runs).network()
        model = sp.info.get("model_power_W")
        note = f"   (model {model:.3g} W)" if model is not None else ""
        print(f"  {name:<18} delay {net['avg_delay_slots']:7.2f} slots   "
              f"drop {net['drop_prob']:.4f}   power {net['avg_power_W']:.3g} W{note}")
