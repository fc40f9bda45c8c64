import json
from pathlib import Path

import numpy as np
import pytest

import horizon_bsde
from horizon_bsde import cli, experiments
from horizon_bsde.experiments import ConfigError, ExperimentConfig, run_experiment

CONFIGS = Path(horizon_bsde.__file__).parent / "configs"


def bundled(name):
    return json.loads((CONFIGS / f"{name}.json").read_text())


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def small_example():
    data = bundled("example132")
    data["name"] = "example-small"
    data["grid"] = {"T": 1.0, "steps": 40, "refinements": 2}
    data["solver"] = {**data["solver"], "paths": 2000, "degree": 2}
    data["checks"] = [{"name": "g-residual", "tolerance_dt": 10}]
    return data


# configuration -------------------------------------------------------------------

@pytest.mark.parametrize("name", ["example132", "cox-verification", "tree-oracle", "zero-gen-smoke"])
def test_bundled_configs_load(name):
    cfg = ExperimentConfig.load(CONFIGS / f"{name}.json")
    assert cfg.name == name and len(cfg.digest()) == 64


@pytest.mark.parametrize("edit, where", [
    (lambda d: d.pop("seed"), "$"),
    (lambda d: d["grid"].update(steps=0), "$.grid.steps"),
    (lambda d: d["backend"].update(kind="other"), "$.backend.kind"),
    (lambda d: d["solver"].update(paths=10), "$.solver.paths"),
    (lambda d: d["backend"].pop("sigma"), "$.backend.sigma"),
    (lambda d: d["checks"].append({"name": "g-residual", "paths": 5}), "$.checks[4].paths"),
])
def test_config_errors_name_the_offending_path(edit, where):
    data = bundled("example132")
    edit(data)
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict(data)
    assert info.value.where == where
    assert where in str(info.value)


def test_invalid_json_is_a_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(path)


def test_digest_and_overrides():
    cfg = ExperimentConfig.from_dict(bundled("example132"))
    same = ExperimentConfig.from_dict(json.loads(json.dumps(bundled("example132"), indent=4)))
    assert cfg.digest() == same.digest()
    moved = cfg.with_overrides(seed=8, refine=1)
    assert moved.seed == 8 and moved.levels() == [100, 200] and moved.digest() != cfg.digest()
    assert cfg.levels() == [25, 50, 100, 200]
    with pytest.raises(ConfigError):
        cfg.with_overrides(refine=4).levels()  # 200 is not divisible by 16


def test_subseeds_are_stable_and_distinct():
    a = np.random.default_rng(experiments.subseed(7, "paths")).random(3)
    b = np.random.default_rng(experiments.subseed(7, "paths")).random(3)
    c = np.random.default_rng(experiments.subseed(7, "theta")).random(3)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


# experiments ---------------------------------------------------------------------

def test_zero_generator_smoke_run():
    res = run_experiment(ExperimentConfig.load(CONFIGS / "zero-gen-smoke.json"))
    rep = res.reports[0]
    assert res.passed and rep.value <= 3 * rep.details["se"]


def test_tree_oracle_run_is_exact():
    res = run_experiment(ExperimentConfig.load(CONFIGS / "tree-oracle.json"))
    assert res.passed, [str(r) for r in res.reports if not r.passed]
    exact = [r for r in res.reports if "vs" in r.name and "oracle" in r.name]
    assert exact and all(r.value <= 1e-10 for r in exact)
    assert res.scalars["american_put_price"]["american-put"] == pytest.approx(8.98125, abs=1e-12)


def test_unknown_tree_is_a_config_error():
    data = bundled("tree-oracle")
    data["backend"]["trees"] = ["no-such-tree"]
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig.from_dict(data))


# command line --------------------------------------------------------------------

def test_run_exits_zero_and_writes_reports(tmp_path, capsys):
    out = tmp_path / "trees"
    assert cli.main(["run", "--config", str(CONFIGS / "tree-oracle.json"), "--out", str(out)]) == 0
    reports = json.loads((out / "reports.json").read_text())
    assert reports["passed"] and reports["config_name"] == "tree-oracle"
    manifest = json.loads((out / "manifest.json").read_text())
    assert "reports.json" in manifest["files"] and manifest["stages"] == ["run"]
    assert "PASS" in capsys.readouterr().out


def test_runs_are_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["run", "--config", str(CONFIGS / "tree-oracle.json"), "--out", str(tmp_path / d)]) == 0
    a, b = sorted((tmp_path / "a").iterdir()), sorted((tmp_path / "b").iterdir())
    assert [p.name for p in a] == [p.name for p in b]
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes(), x.name


def test_solve_rbsde_with_inactive_barrier_matches_solve_bsde(tmp_path):
    cfg = str(CONFIGS / "zero-gen-smoke.json")
    assert cli.main(["solve-bsde", "--config", cfg, "--out", str(tmp_path / "plain")]) == 0
    assert cli.main(["solve-rbsde", "--config", cfg, "--out", str(tmp_path / "refl")]) == 0
    with np.load(tmp_path / "plain" / "solution.npz") as a, np.load(tmp_path / "refl" / "solution_reflected.npz") as b:
        assert np.array_equal(a["cox/Y_at"], b["cox/Y_at"])
        assert np.all(b["cox/l_r"] == 0)


def test_staged_run_reuses_stored_paths(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, small_example())
    out = tmp_path / "staged"
    assert cli.main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    digest = cli._sha256(out / "paths.npz")

    def refuse(*args, **kwargs):
        raise AssertionError("paths were simulated again")

    monkeypatch.setattr(cli, "simulate_arrays", refuse)
    monkeypatch.setattr(experiments, "simulate_example132", refuse)
    assert cli.main(["solve-bsde", "--config", cfg, "--out", str(out)]) == 0
    assert cli.main(["reduce-lift", "--config", cfg, "--out", str(out)]) == 0
    assert cli.main(["verify", "--config", cfg, "--out", str(out)]) == 0
    assert cli._sha256(out / "paths.npz") == digest
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stages"] == sorted(["simulate", "solve-bsde", "reduce-lift", "verify"])
    with np.load(out / "lift.npz") as lift:
        assert "example132/theta" in lift.files


def test_report_collates_a_refinement_study(tmp_path, capsys):
    data = bundled("cox-verification")
    data["name"] = "slopes"
    data["checks"] = [{"name": "appendix-slopes", "paths": 1000, "steps": 400, "refinements": 3,
                       "slope": [0.7, 1.3]}]
    cfg = write_config(tmp_path, data)
    runs = []
    for seed in (1, 2):
        runs.append(str(tmp_path / f"run{seed}"))
        assert cli.main(["verify", "--config", cfg, "--seed", str(seed), "--out", runs[-1]]) == 0
    assert cli.main(["report", *runs, "--out", str(tmp_path / "summary")]) == 0
    rows = cli.collate(runs)
    assert len(rows) == 4 and all(0.7 <= r["slope"] <= 1.3 for r in rows)
    text = (tmp_path / "summary" / "summary.csv").read_bytes()
    assert text.startswith(b"run,check,value,tolerance,slope,status\r\n")


def test_bad_config_exits_two(tmp_path, capsys):
    data = bundled("zero-gen-smoke")
    data["grid"]["steps"] = -1
    assert cli.main(["run", "--config", write_config(tmp_path, data), "--out", str(tmp_path / "x")]) == 2
    assert "$.grid.steps" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "y")]) == 2


def test_out_dir_of_another_configuration_is_refused(tmp_path, capsys):
    out = str(tmp_path / "shared")
    cfg = str(CONFIGS / "zero-gen-smoke.json")
    assert cli.main(["simulate", "--config", cfg, "--out", out]) == 0
    assert cli.main(["simulate", "--config", cfg, "--seed", "99", "--out", out]) == 2
    assert "different configuration" in capsys.readouterr().err


def test_argument_checks_exit_two(tmp_path):
    cfg = str(CONFIGS / "zero-gen-smoke.json")
    assert cli.main(["simulate", "--config", cfg, "--threads", "0", "--out", str(tmp_path / "a")]) == 2
    assert cli.main(["simulate", "--config", cfg, "--seed", "-1", "--out", str(tmp_path / "b")]) == 2


def test_thread_count_does_not_change_paths(tmp_path):
    cfg = str(CONFIGS / "zero-gen-smoke.json")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "one")]) == 0
    assert cli.main(["simulate", "--config", cfg, "--threads", "3", "--out", str(tmp_path / "three")]) == 0
    assert (tmp_path / "one" / "paths.npz").read_bytes() == (tmp_path / "three" / "paths.npz").read_bytes()
