"""Plain-text policy tables.

Threshold table::

    # fsmc-aloha threshold-table v1
    # mode=symmetric K=5
    # c_prev z_prev c_cur flag
    3 e 7 -

Power table (one file per user)::

    # fsmc-aloha power-table v1
    # user=0 N=5 J=10 xi=0.05 label=proposed
    # q h_prev c_prev z_prev tx_prev h_cur power_W
    1 4 3 e 1 8 12.5

Common states are written as an index (symmetric) or comma-joined indices
(asymmetric); feedback as ``0``, ``1`` or ``e``.  Entries missing from a
power file are impossible states.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dynamics import Feedback
from .errors import InvalidInputError
from .policy import ThresholdPolicy
from .solver import PowerPolicy

THRESHOLD_HEADER = "# fsmc-aloha threshold-table v1"
POWER_HEADER = "# fsmc-aloha power-table v1"
_Z = {"0": 0, "1": 1, "e": 2}


def _fmt_c(c) -> str:
    return ",".join(map(str, c)) if isinstance(c, tuple) else str(c)


def _parse_c(s: str, mode: str):
    return tuple(int(x) for x in s.split(",")) if mode == "asymmetric" else int(s)


def _meta(line: str) -> dict:
    return dict(kv.split("=", 1) for kv in line.lstrip("# ").split())


def format_threshold_table(policy: ThresholdPolicy) -> str:
    lines = [THRESHOLD_HEADER, f"# mode={policy.mode} K={policy.K}", "# c_prev z_prev c_cur flag"]
    for c, z, nxt in policy.rows():
        flag = "fallback" if (c, int(z)) in policy.fallback else "-"
        lines.append(f"{_fmt_c(c)} {z.symbol} {_fmt_c(nxt)} {flag}")
    return "\n".join(lines) + "\n"


def parse_threshold_table(text: str) -> ThresholdPolicy:
    lines = text.splitlines()
    if not lines or lines[0].strip() != THRESHOLD_HEADER:
        raise InvalidInputError("not a threshold table (bad header)")
    meta = _meta(lines[1])
    mode, K = meta["mode"], int(meta["K"])
    table, fallback = {}, set()
    for ln in lines[2:]:
        if not ln.strip() or ln.startswith("#"):
            continue
        c_s, z_s, n_s, flag = ln.split()
        key = (_parse_c(c_s, mode), _Z[z_s])
        table[key] = _parse_c(n_s, mode)
        if flag == "fallback":
            fallback.add(key)
    return ThresholdPolicy(table, mode, K, frozenset(fallback))


def format_power_table(pp: PowerPolicy, user: int = 0) -> str:
    N1, J = pp.table.shape[0], pp.table.shape[1]
    lines = [POWER_HEADER, f"# user={user} N={N1 - 1} J={J} xi={float(pp.xi)!r} label={pp.label or '-'}",
             "# q h_prev c_prev z_prev tx_prev h_cur power_W"]
    idx = np.argwhere(~np.isnan(pp.table))
    for q, hp, ci, z, txp, h in idx:
        lines.append(f"{q} {hp} {_fmt_c(pp.common_states[ci])} {Feedback(z).symbol} {txp} {h} "
                     f"{float(pp.table[q, hp, ci, z, txp, h])!r}")
    return "\n".join(lines) + "\n"


def parse_power_table(text: str, common_states: list, mode: str) -> PowerPolicy:
    lines = text.splitlines()
    if not lines or lines[0].strip() != POWER_HEADER:
        raise InvalidInputError("not a power table (bad header)")
    meta = _meta(lines[1])
    N, J = int(meta["N"]), int(meta["J"])
    cidx = {c: i for i, c in enumerate(common_states)}
    table = np.full((N + 1, J, len(common_states), 3, 2, J), np.nan)
    for ln in lines[2:]:
        if not ln.strip() or ln.startswith("#"):
            continue
        q, hp, c, z, txp, h, p = ln.split()
        table[int(q), int(hp), cidx[_parse_c(c, mode)], _Z[z], int(txp), int(h)] = float(p)
    label = "" if meta.get("label", "-") == "-" else meta["label"]
    return PowerPolicy(table, list(common_states), float(meta.get("xi", "nan")), label)


def write_policy_dir(path, policy: ThresholdPolicy, power_policies) -> None:
    """Write ``threshold.txt`` and ``power_user<k>.txt`` under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "threshold.txt").write_text(format_threshold_table(policy))
    for k, pp in enumerate(power_policies):
        (path / f"power_user{k}.txt").write_text(format_power_table(pp, k))


def read_policy_dir(path):
    """Inverse of :func:`write_policy_dir`; returns ``(policy, power_policies)``."""
    path = Path(path)
    policy = parse_threshold_table((path / "threshold.txt").read_text())
    commons = policy.common_states
    tables = [parse_power_table((path / f"power_user{k}.txt").read_text(), commons, policy.mode)
              for k in range(policy.K)]
    return policy, tables
