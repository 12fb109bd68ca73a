import copy
import csv
import json

import pytest

from fsmc_aloha import cli
from fsmc_aloha.errors import InvalidInputError

TINY = {
    "name": "tiny",
    "scenario": "symmetric",
    "channels": ["user1"],
    "system": {"buffer_pkts": 2, "users": 2, "lambda_pkts_per_s": 20.0, "mean_packet_bits": 100},
    "sweep": {"snr_dB": [5, 10]},
    "policies": ["proposed", "binary_scheduling", "lcsihp_fixed_power", "variable_rate"],
    "sim": {"horizon_slots": 20000, "seeds": [0, 1], "modes": ["actual", "dominant"]},
}


def _write(tmp_path, raw, out="out"):
    raw = copy.deepcopy(raw)
    raw["output"] = {"dir": str(tmp_path / out)}
    path = tmp_path / f"{out}.json"
    path.write_text(json.dumps(raw))
    return path


@pytest.mark.parametrize("name", ["fig2", "fig5", "fig7", "asym2"])
def test_bundled_specs_parse(name):
    spec = cli.load_spec(cli.bundled_spec(name))
    assert spec.points()
    for K in spec.users:
        assert len(spec.channels_for(K)) == K


def test_fig2_spec_values():
    spec = cli.load_spec(cli.bundled_spec("fig2"))
    assert spec.snr_db == [0, 5, 10, 15, 20]
    assert spec.users == [5] and spec.lambdas == [1.0]
    assert spec.base.N == 5 and len(spec.seeds) >= 10 and spec.horizon >= 1_000_000
    assert set(spec.modes) == {"actual", "dominant"}


def test_fig5_has_ten_blended_users():
    spec = cli.load_spec(cli.bundled_spec("fig5"))
    chans = spec.channels_for(10)
    assert spec.scenario == "asymmetric" and spec.base.N == 10 and spec.lambdas == [0.4]
    assert len({c.transition.tobytes() for c in chans}) == 5


@pytest.mark.parametrize("mutate,msg", [
    (lambda r: r.update(policies=[]), "empty"),
    (lambda r: r.update(policies=["bsp"]), "asymmetric"),
    (lambda r: r.update(policies=["proposed", "proposed"]), "duplicate"),
    (lambda r: r.update(policies=["magic"]), "unknown"),
    (lambda r: r["sim"].update(seeds=[]), "seed"),
    (lambda r: r["sim"].update(seeds=[1, 1]), "distinct"),
    (lambda r: r["sim"].update(modes=["virtual"]), "mode"),
    (lambda r: r.update(scenario="mesh"), "scenario"),
    (lambda r: r["system"].update(lambda_pkts_per_s=5000.0), "lam"),
    (lambda r: r.update(channels=["user1", "user2", "user1"]), "channel"),
    (lambda r: r["system"].pop("buffer_pkts"), "buffer_pkts"),
])
def test_spec_errors(tmp_path, mutate, msg):
    raw = copy.deepcopy(TINY)
    mutate(raw)
    with pytest.raises(InvalidInputError, match=msg):
        cli.load_spec(_write(tmp_path, raw))


def test_asymmetric_rejects_symmetric_baselines(tmp_path):
    raw = copy.deepcopy(TINY)
    raw.update(scenario="asymmetric", channels=["user1", "user2"], policies=["proposed", "variable_rate"])
    with pytest.raises(InvalidInputError, match="symmetric"):
        cli.load_spec(_write(tmp_path, raw))


def test_bad_spec_exit_code(tmp_path, capsys):
    raw = copy.deepcopy(TINY)
    raw["policies"] = []
    assert cli.main(["run", str(_write(tmp_path, raw))]) == 2
    assert "policy list is empty" in capsys.readouterr().err


def test_simulate_without_tables(tmp_path):
    assert cli.main(["simulate", str(_write(tmp_path, TINY))]) == 4


def test_run_is_reproducible(tmp_path):
    a = _write(tmp_path, TINY, "a")
    b = _write(tmp_path, TINY, "b")
    assert cli.main(["run", str(a)]) == 0
    assert cli.main(["run", str(b), "--jobs", "2"]) == 0
    ta = (tmp_path / "a" / "metrics.csv").read_bytes()
    tb = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert ta == tb
    # re-simulating from the stored tables reproduces the file too
    assert cli.main(["simulate", str(a)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == ta

    rows = cli.read_metrics(tmp_path / "a" / "metrics.csv")
    assert len(rows) == 2 * 4 * 2 * 3
    keys = {(r["policy"], r["snr_dB"], r["mode"], r["seed"]) for r in rows}
    assert len(keys) == len(rows)
    assert {r["seed"] for r in rows} == {"0", "1", "pooled"}
    assert (tmp_path / "a" / "synthesis.json").exists()
    assert (tmp_path / "a" / "convergence.csv").exists()
    assert (tmp_path / "a" / "tables").is_dir()
    with open(tmp_path / "a" / "metrics.csv") as fh:
        assert fh.readline().strip() == f"# {cli.CSV_VERSION}"
        assert next(csv.reader(fh)) == cli.METRIC_COLUMNS

    assert cli.main(["simulate", str(a), "--seed-offset", "7"]) == 0
    shifted = cli.read_metrics(tmp_path / "a" / "metrics.csv")
    assert {r["seed"] for r in shifted} == {"7", "8", "pooled"}
