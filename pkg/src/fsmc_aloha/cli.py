"""Experiment driver: ``fsmc-aloha {synth,simulate,run} SPEC``.

A spec is a JSON document with unit-suffixed keys; see ``specs/`` for the
bundled experiments.  Outputs land in ``output.dir``:

* ``tables/<point>/<policy>/`` policy tables in the text format of :mod:`tables`
* ``synthesis.json`` per (point, policy) synthesis info
* ``convergence.csv`` multiplier search log
* ``metrics.csv`` one row per (point, policy, mode, seed) plus pooled rows
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .channel import FsmcChannel, load_table1
from .dynamics import SystemParams
from .errors import ConvergenceError, InvalidInputError, PolicyTableMissError
from .sim import SimConfig, aggregate_runs, run_episode, snr_db_to_power
from .synth import POLICIES, SYMMETRIC_ONLY, synthesize
from .tables import read_policy_dir, write_policy_dir

log = logging.getLogger("fsmc_aloha")

CSV_VERSION = "fsmc-aloha-metrics v1"
JOBS_ENV = "FSMC_ALOHA_JOBS"
SCENARIOS = ("symmetric", "asymmetric", "capture")

METRIC_COLUMNS = [
    "scenario", "policy", "snr_dB", "K", "lambda_pkts_per_s", "mode", "seed", "runs", "slots",
    "avg_queue_pkts", "avg_queue_se", "avg_delay_slots", "avg_delay_se", "avg_delay_ms", "sojourn_slots",
    "throughput_pkts_per_slot", "throughput_bits_per_s", "drop_prob", "drop_prob_se",
    "avg_power_W", "avg_power_se", "user_delay_slots", "user_power_W",
    "xi", "theta", "reduced_states", "recurrent_states",
]


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class ExperimentSpec:
    """Parsed and validated experiment description."""

    name: str
    scenario: str
    channels: list
    base: SystemParams
    snr_db: list
    users: list
    lambdas: list
    policies: list
    horizon: int
    warmup: int
    seeds: list
    modes: list
    beta: float
    solver: dict = field(default_factory=dict)
    out_dir: Path = Path("out")

    @property
    def mode(self) -> str:
        return "asymmetric" if self.scenario == "asymmetric" else "symmetric"

    @property
    def channel_model(self) -> str:
        return "capture" if self.scenario == "capture" else "collision"

    def points(self):
        """Sweep points in spec order: (snr_dB, K, lambda)."""
        return list(itertools.product(self.snr_db, self.users, self.lambdas))

    def params(self, K: int, lam: float) -> SystemParams:
        return self.base.with_(K=K, lam=lam)

    def channels_for(self, K: int) -> list:
        if len(self.channels) == K:
            return list(self.channels)
        if len(self.channels) == 1:
            return list(self.channels) * K
        raise InvalidInputError(f"{len(self.channels)} channel models given for K={K}")


def _channel(entry, table1) -> FsmcChannel:
    if isinstance(entry, str):
        if entry not in table1:
            raise InvalidInputError(f"unknown bundled channel {entry!r}")
        return table1[entry]
    if "blend" in entry:
        a, b = (_channel(e, table1) for e in entry["blend"])
        w = float(entry["weight"])
        return FsmcChannel.from_matrix(a.states, (1.0 - w) * a.transition + w * b.transition)
    return FsmcChannel.from_matrix(entry["states"], entry["transition"])


def _listify(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def load_spec(path) -> ExperimentSpec:
    """Parse a spec file; raises :class:`InvalidInputError` on any problem."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read spec {path}: {exc}") from exc
    try:
        return parse_spec(raw)
    except KeyError as exc:
        raise InvalidInputError(f"missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(str(exc)) from exc


def parse_spec(raw: dict) -> ExperimentSpec:
    scenario = raw["scenario"]
    if scenario not in SCENARIOS:
        raise InvalidInputError(f"scenario must be one of {SCENARIOS}")
    system, sweep, sim = raw["system"], raw["sweep"], raw.get("sim", {})
    table1 = load_table1()
    channels = [_channel(e, table1) for e in _listify(raw["channels"])]
    base = SystemParams(
        tau=float(system.get("tau_s", 1e-3)), W=float(system.get("bandwidth_Hz", 1e3)),
        N0=float(system.get("N0_W_per_Hz", 1e-3)), lam=1.0,
        mean_packet_bits=float(system.get("mean_packet_bits", 1e3)),
        N=int(system["buffer_pkts"]), K=1,
    )
    users = [int(k) for k in _listify(sweep.get("users", system.get("users")))]
    lambdas = [float(x) for x in _listify(sweep.get("lambda_pkts_per_s", system.get("lambda_pkts_per_s")))]
    snr = [float(x) for x in _listify(sweep["snr_dB"])]
    if not snr or not users or not lambdas:
        raise InvalidInputError("sweep must contain at least one SNR, user count and arrival rate")
    policies = list(raw["policies"])
    if not policies:
        raise InvalidInputError("policy list is empty")
    for p in policies:
        if p not in POLICIES:
            raise InvalidInputError(f"unknown policy {p!r}")
        if p == "bsp" and scenario != "asymmetric":
            raise InvalidInputError("bsp is only defined for the asymmetric scenario")
        if p in SYMMETRIC_ONLY and scenario == "asymmetric":
            raise InvalidInputError(f"{p} needs a symmetric scenario")
    if len(set(policies)) != len(policies):
        raise InvalidInputError("duplicate policy names")
    horizon = int(sim.get("horizon_slots", 1_000_000))
    spec = ExperimentSpec(
        name=raw.get("name", "experiment"), scenario=scenario, channels=channels, base=base,
        snr_db=snr, users=users, lambdas=lambdas, policies=policies, horizon=horizon,
        warmup=int(sim.get("warmup_slots", horizon // 10)), seeds=[int(s) for s in sim.get("seeds", [0])],
        modes=list(sim.get("modes", ["actual"])), beta=float(sim.get("capture_beta", 1.0)),
        solver=dict(raw.get("solver", {})), out_dir=Path(raw.get("output", {}).get("dir", "out")),
    )
    for K in users:
        spec.channels_for(K)
        for lam in lambdas:
            spec.params(K, lam)
    if not spec.seeds:
        raise InvalidInputError("at least one seed is required")
    if len(set(spec.seeds)) != len(spec.seeds):
        raise InvalidInputError("seeds must be distinct")
    for m in spec.modes:
        if m not in ("actual", "dominant"):
            raise InvalidInputError(f"unknown simulation mode {m!r}")
    if scenario == "capture" and not 0 < spec.beta <= 1:
        raise InvalidInputError("capture_beta must lie in (0, 1]")
    return spec


def bundled_spec(name: str) -> Path:
    """Path of a bundled spec such as ``fig2``."""
    with resources.as_file(resources.files("fsmc_aloha.specs").joinpath(f"{name}.json")) as p:
        return Path(p)


# -- stages -----------------------------------------------------------------

def _point_key(point) -> str:
    snr, K, lam = point
    return f"snr{snr:g}_K{K}_lam{lam:g}"


def _rvi_kwargs(spec: ExperimentSpec) -> dict:
    s = spec.solver
    out = {}
    if "span_tol" in s:
        out["tol"] = float(s["span_tol"])
    if "max_iterations" in s:
        out["max_iter"] = int(s["max_iterations"])
    if "power_rel_tol" in s:
        out["rel_tol"] = float(s["power_rel_tol"])
    return out


def _synth_job(args):
    spec, point, policy = args
    snr, K, lam = point
    params = spec.params(K, lam)
    try:
        sp = synthesize(policy, spec.channels_for(K), params, snr_db_to_power(snr, params), spec.mode,
                        **(_rvi_kwargs(spec) if policy == "proposed" else {}))
    except (ConvergenceError, InvalidInputError, np.linalg.LinAlgError) as exc:
        raise StageError("synthesis", f"{policy} at {_point_key(point)}: {exc}") from exc
    write_policy_dir(spec.out_dir / "tables" / _point_key(point) / policy, sp.threshold_policy, sp.power_policies)
    return sp.info, sp.convergence


def _sim_job(args):
    spec, point, policy, mode, seed = args
    snr, K, lam = point
    params = spec.params(K, lam)
    tp, pps = read_policy_dir(spec.out_dir / "tables" / _point_key(point) / policy)
    cfg = SimConfig(params, spec.channels_for(K), tp, pps, mode=mode, channel_model=spec.channel_model,
                    beta=spec.beta, horizon=spec.horizon, seed=seed, warmup=spec.warmup)
    try:
        return run_episode(cfg)
    except PolicyTableMissError as exc:
        raise StageError("simulation", f"{policy} at {_point_key(point)}, seed {seed}: {exc}") from exc


def _pool_map(fn, jobs, n_jobs):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, jobs))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def run_synthesis(spec: ExperimentSpec, n_jobs: int = 1) -> dict:
    jobs = [(spec, pt, pol) for pt in spec.points() for pol in spec.policies]
    results = _pool_map(_synth_job, jobs, n_jobs)
    manifest = {}
    conv_rows = []
    for (_, pt, pol), (info, conv) in zip(jobs, results):
        manifest.setdefault(_point_key(pt), {})[pol] = _jsonable(info)
        for user, xi, pbar, theta in conv:
            conv_rows.append([_point_key(pt), pol, user, repr(float(xi)), repr(float(pbar)), repr(float(theta))])
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    (spec.out_dir / "synthesis.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point", "policy", "user", "xi", "avg_power_W", "theta"])
    w.writerows(conv_rows)
    (spec.out_dir / "convergence.csv").write_text(buf.getvalue())
    return manifest


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def _first(v):
    return v[0] if isinstance(v, list) else v


def _row(spec, point, policy, mode, seed, m, info) -> list:
    snr, K, lam = point
    net = m.network()
    return [spec.scenario, policy, snr, K, lam, mode, seed, m.n_runs, m.slots,
            net["avg_queue"], net["avg_queue_se"], net["avg_delay_slots"], net["avg_delay_se"], net["avg_delay_ms"],
            net["sojourn_slots"],
            net["throughput_pkts_per_slot"], net["throughput_bits_per_s"], net["drop_prob"], net["drop_prob_se"],
            net["avg_power_W"], net["avg_power_se"],
            ";".join(f"{v:.10g}" for v in m.avg_delay_slots), ";".join(f"{v:.10g}" for v in m.avg_power_W),
            info.get("xi", ""), info.get("theta", ""), info.get("reduced_states", ""), info.get("recurrent_states", "")]


def run_simulation(spec: ExperimentSpec, n_jobs: int = 1, seed_offset: int = 0) -> Path:
    manifest_path = spec.out_dir / "synthesis.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    seeds = [s + seed_offset for s in spec.seeds]
    jobs = [(spec, pt, pol, mode, seed)
            for pt in spec.points() for pol in spec.policies for mode in spec.modes for seed in seeds]
    results = _pool_map(_sim_job, jobs, n_jobs)
    buf = io.StringIO()
    buf.write(f"# {CSV_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    it = iter(results)
    for pt in spec.points():
        for pol in spec.policies:
            info = manifest.get(_point_key(pt), {}).get(pol, {})
            info = {k: ";".join(_fmt(x) for x in v) if isinstance(v, list) else v for k, v in info.items()}
            for mode in spec.modes:
                runs = [next(it) for _ in seeds]
                for seed, m in zip(seeds, runs):
                    w.writerow([_fmt(x) for x in _row(spec, pt, pol, mode, seed, m, info)])
                w.writerow([_fmt(x) for x in _row(spec, pt, pol, mode, "pooled", aggregate_runs(runs), info)])
    out = spec.out_dir / "metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue())
    return out


def read_metrics(path) -> list[dict]:
    """Rows of a metrics CSV as dicts (header comment skipped)."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith(f"# {CSV_VERSION}"):
            raise InvalidInputError(f"unsupported metrics file header {first.strip()!r}")
        return list(csv.DictReader(fh))


# -- entry point -----------------------------------------------------------

def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fsmc-aloha", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("synth", "offline synthesis only"), ("simulate", "simulate previously synthesized tables"),
                           ("run", "synthesis followed by simulation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("spec", help="spec file path, or the name of a bundled spec (fig2, fig5, fig7, asym2)")
        p.add_argument("--jobs", type=int, default=None, help=f"worker processes (default ${JOBS_ENV} or 1)")
        p.add_argument("--seed-offset", type=int, default=0, help="added to every simulation seed")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    jobs = args.jobs if args.jobs is not None else _default_jobs()
    spec_path = Path(args.spec)
    if not spec_path.exists() and not spec_path.suffix:
        try:
            spec_path = bundled_spec(args.spec)
        except FileNotFoundError:
            pass
    try:
        spec = load_spec(spec_path)
    except InvalidInputError as exc:
        print(f"error [spec]: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command in ("synth", "run"):
            run_synthesis(spec, jobs)
        if args.command in ("simulate", "run"):
            out = run_simulation(spec, jobs, args.seed_offset)
            print(out)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 3 if exc.stage == "synthesis" else 4
    except FileNotFoundError as exc:
        print(f"error [simulation]: missing policy tables ({exc.filename}); run 'synth' first", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
