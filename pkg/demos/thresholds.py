"""How the shared transmission thresholds react to feedback and network size.

Loads the two measured fading chains, prints their stationary laws, then
shows the threshold chosen after each feedback symbol as the number of users
grows.  Run with ``python3 demos/thresholds.py``.
"""

import numpy as np

from fsmc_aloha.channel import load_table1
from fsmc_aloha.dynamics import FEEDBACKS
from fsmc_aloha.policy import lcsihp_policy

np.set_printoptions(precision=4, suppress=True)

chans = load_table1()
for name, ch in chans.items():
    print(f"{name}: {ch.J} states, stationary law {ch.stationary}")

ch = chans["user1"]
# some thresholds are never visited once the network is large; see below
print("\nthreshold after (previous threshold 5, feedback) for growing K")
print("K     " + "  ".join(f"{z.name:>9}" for z in FEEDBACKS))
for K in (1, 2, 3, 5, 10, 20, 40):
    pol = lcsihp_policy(ch, K)
    print(f"{K:<5} " + "  ".join(f"{pol(5, z):>9}" for z in FEEDBACKS))


def reachable(pol, start=0):
    seen, todo = {start}, [start]
    while todo:
        c = todo.pop()
        for z in FEEDBACKS:
            if pol(c, z) not in seen:
                seen.add(pol(c, z))
                todo.append(pol(c, z))
    return sorted(seen)


for K in (5, 40):
    print(f"K={K}: thresholds reachable from the start {reachable(lcsihp_policy(ch, K))}")
