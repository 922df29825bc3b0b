import csv
import json

import numpy as np
import pytest

from lemix import config as cfgmod
from lemix.cli import EXIT_CONFIG, EXIT_OK, main
from lemix.cluster import ProfilingObservation, fit_coefficients, preset_stage, PRESETS
from lemix.errors import ConfigError, ProfilingIncompleteError

SMALL = """
seeds = [0]
output_dir = "{out}"
[cluster]
preset = "gpt-400m"
nodes = 2
stages = 2
[workload]
rate = 20.0
train_rate = 0.3
horizon = 1.0
"""


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(SMALL.format(out=(tmp_path / "out").as_posix()))
    return p


def test_run_one_seed_writes_two_files(conf, tmp_path):
    assert main(["run", "--config", str(conf)]) == EXIT_OK
    assert sorted(f.name for f in (tmp_path / "out").iterdir()) == [
        "lemix_seed0.jsonl", "lemix_seed0.metrics.json"]


def test_three_seeds_six_files_and_stamps(conf, tmp_path):
    assert main(["run", "--config", str(conf), "--seed", "1", "2", "3"]) == EXIT_OK
    files = list((tmp_path / "out").iterdir())
    assert len(files) == 6
    cfg = cfgmod.load(conf, {"seeds": [1, 2, 3]})
    line = json.loads((tmp_path / "out" / "lemix_seed2.jsonl").read_text().splitlines()[0])
    assert line["seed"] == 2 and line["config_hash"] == cfg.config_hash


def test_rerun_is_identical(conf, tmp_path):
    main(["run", "--config", str(conf), "--ledger"])
    first = {f.name: f.read_bytes() for f in (tmp_path / "out").iterdir()}
    main(["run", "--config", str(conf), "--ledger"])
    second = {f.name: f.read_bytes() for f in (tmp_path / "out").iterdir()}
    assert first == second and "lemix_seed0.gpus.csv" in first


def test_dump_plans(conf, tmp_path):
    assert main(["run", "--config", str(conf), "--dump-plans"]) == EXIT_OK
    plans = json.loads((tmp_path / "out" / "lemix_seed0.plans.json").read_text())
    assert plans["plans"]


def test_sweep_rates_policies_seeds(conf, tmp_path):
    rc = main(["sweep", "--config", str(conf), "--axis", "rate", "--values", "5", "10", "20", "40",
               "--seed", "0", "1", "2", "--jobs", "2"])
    assert rc == EXIT_OK
    out = tmp_path / "out"
    assert len(list(out.glob("*.metrics.json"))) == 48
    with open(out / "sweep_rate.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["policy"] for r in rows} == {"lemix", "separate", "round_robin", "luf"}
    assert {r["value"] for r in rows} == {"5", "10", "20", "40"}


def test_sweep_train_rate_grid(conf, tmp_path):
    vals = ["0.1", "0.3", "0.5", "0.7", "0.9"]
    assert main(["sweep", "--config", str(conf), "--axis", "train_rate", "--values", *vals,
                 "--policies", "lemix"]) == EXIT_OK
    summary = json.loads((tmp_path / "out" / "sweep_train_rate.summary.json").read_text())
    assert {f"{v}/lemix" for v in vals} <= set(summary)


def test_sweep_empty_values_rejected(conf, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--config", str(conf), "--axis", "rate", "--values"])
    assert exc.value.code == EXIT_CONFIG
    assert not (tmp_path / "out").exists()


def test_bad_inputs_exit_one(conf, tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    assert main(["run", "--config", str(conf), "--policy", "fastest"]) == EXIT_CONFIG
    bad = tmp_path / "bad.toml"
    bad.write_text("[cluster]\nnodez = 3\n")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert "cluster.nodez" in capsys.readouterr().err


def test_flags_override_config(conf):
    from lemix.cli import build_parser, overrides_from
    args = build_parser().parse_args(["run", "--config", str(conf), "--rate", "7", "--policy", "rr",
                                      "--no-memory-aware"])
    cfg = cfgmod.load(conf, overrides_from(args))
    assert cfg.workload.rate == 7.0
    assert cfg.scheduler.policy.value == "round_robin"
    assert cfg.scheduler.memory_aware is False


def test_include_merge(tmp_path):
    (tmp_path / "base.toml").write_text('[cluster]\nnodes = 3\nstages = 4\n[workload]\nrate = 2.0\n')
    (tmp_path / "top.toml").write_text('include = ["base.toml"]\n[cluster]\nnodes = 5\n')
    cfg = cfgmod.load(tmp_path / "top.toml")
    assert cfg.cluster.n_nodes == 5 and cfg.cluster.nodes[0].n_stages == 4 and cfg.workload.rate == 2.0


def test_include_cycle(tmp_path):
    (tmp_path / "a.toml").write_text('include = ["b.toml"]\n')
    (tmp_path / "b.toml").write_text('include = ["a.toml"]\n')
    with pytest.raises(ConfigError):
        cfgmod.load(tmp_path / "a.toml")


def test_config_hash_ignores_output_dir():
    assert cfgmod.config_hash({"a": 1, "output_dir": "x"}) == cfgmod.config_hash({"a": 1, "output_dir": "y"})
    assert cfgmod.config_hash({"a": 1}) != cfgmod.config_hash({"a": 2})


def _profile_csv(path, coeffs, rng=None, noise=0.0):
    lines = ["stage,op,batch,length,latency"]
    for s, (ef, eb) in coeffs.items():
        for b in (1, 2, 4):
            for l in (128, 256, 512):
                for op, eta in (("forward", ef), ("backward", eb)):
                    lat = eta * b * l * l
                    if rng is not None:
                        lat *= 1 + rng.normal(0, noise)
                    lines.append(f"{s},{op},{b},{l},{lat!r}")
    path.write_text("\n".join(lines) + "\n")


def test_fit_exact_and_include(tmp_path):
    coeffs = {0: (3e-7, 4e-7), 1: (5e-7, 6e-7)}
    _profile_csv(tmp_path / "obs.csv", coeffs)
    assert main(["fit", str(tmp_path / "obs.csv"), "--output", str(tmp_path / "coef.toml")]) == EXIT_OK
    (tmp_path / "run.toml").write_text('include = ["coef.toml"]\n[cluster]\nstages = 2\n')
    cfg = cfgmod.load(tmp_path / "run.toml")
    for s, (ef, eb) in coeffs.items():
        st = cfg.cluster.nodes[0].stages[s]
        assert st.eta_f == pytest.approx(ef, rel=1e-12) and st.eta_b == pytest.approx(eb, rel=1e-12)


def test_fit_noisy_recovery(tmp_path):
    p = preset_stage(PRESETS["gpt-2.5b"], 2)
    coeffs = {0: (p.eta_f, p.eta_b)}
    _profile_csv(tmp_path / "obs.csv", coeffs, np.random.default_rng(0), noise=0.05)
    from lemix.cluster import read_observations
    fitted = fit_coefficients(read_observations(tmp_path / "obs.csv"))
    assert fitted[0][0] == pytest.approx(p.eta_f, rel=0.05)
    assert fitted[0][1] == pytest.approx(p.eta_b, rel=0.05)


def test_fit_missing_ops_listed():
    obs = [ProfilingObservation(0, "forward", 1, 100, 0.1), ProfilingObservation(1, "backward", 1, 100, 0.1)]
    with pytest.raises(ProfilingIncompleteError) as exc:
        fit_coefficients(obs, stages=[0, 1])
    assert set(exc.value.gaps) == {(0, "backward"), (1, "forward")}


def test_compare_command(conf, tmp_path):
    for p in ("lemix", "separate"):
        main(["run", "--config", str(conf), "--policy", p])
    out = tmp_path / "out"
    rc = main(["compare", str(out / "lemix_seed0.metrics.json"), str(out / "separate_seed0.metrics.json"),
               "--output", str(tmp_path / "cmp.csv")])
    assert rc == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "cmp.csv")))
    assert rows[0][0] == "policy" and len(rows) > 2
