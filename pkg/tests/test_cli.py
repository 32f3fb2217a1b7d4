import json
import subprocess
import sys

import pytest

from envar.cli import main

SMALL_EK = {
    "system": "euler_korteweg_1d",
    "horizon": 0.05,
    "steps": 8,
    "euler_korteweg": {"n_nodes": 32, "n_modes": 8},
    "family": {"size": 6, "seed": 0},
    "selection": {"candidates": 4},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = dict(SMALL_EK, output_dir=str(root / "out"))
    path = root / "run.json"
    path.write_text(json.dumps(cfg))
    assert main(["simulate", "--config", str(path)]) == 0
    return root, path


def read_report(root, verb):
    return json.loads((root / "out" / f"{verb}.json").read_text())


def test_simulate_writes_a_passing_report(workspace):
    root, _ = workspace
    report = read_report(root, "simulate")
    assert report["pass"] and report["kind"] == "simulate"
    assert (root / "out" / "trajectory" / "manifest.json").exists()
    assert (root / "out" / "simulate.timing.json").exists()


@pytest.mark.parametrize("verb", ["verify", "select", "reconstruct-defect", "report"])
def test_downstream_verbs_pass_on_a_fresh_run(workspace, verb):
    root, path = workspace
    assert main([verb, "--config", str(path)]) == 0
    assert read_report(root, verb.replace("-", "_"))["pass"]


def test_report_writes_the_series(workspace):
    root, path = workspace
    assert main(["report", "--config", str(path)]) == 0
    header = (root / "out" / "series.csv").read_text().splitlines()[0]
    assert header == "t,E,energy_of_U,defect,mass_or_length"


def test_tampered_trajectory_fails_verification(workspace, tmp_path):
    root, path = workspace
    copy = tmp_path / "trajectory"
    copy.mkdir()
    for name in ("trajectory.json", "manifest.json"):
        (copy / name).write_bytes((root / "out" / "trajectory" / name).read_bytes())
    payload = json.loads((copy / "trajectory.json").read_text())
    payload["aux_energy"][-1] = (5.0).hex()
    (copy / "trajectory.json").write_text(json.dumps(payload))
    out = tmp_path / "report"
    assert main(["verify", "--config", str(path), "--trajectory", str(copy), "--out", str(out)]) == 1
    report = json.loads((out / "verify.json").read_text())
    assert not report["checks"]["manifest_integrity"]["pass"]
    # forcing the load lets the verifier see the raised energy, which breaks the inequality
    assert main(["verify", "--config", str(path), "--trajectory", str(copy), "--out", str(out), "--force"]) == 1
    report = json.loads((out / "verify.json").read_text())
    assert report["checks"]["manifest_integrity"]["pass"]
    assert report["data"]["failing_count"] > 0


def test_malformed_configuration_exits_with_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"system": "euler_korteweg_1d", "horizon": 0.1, "steps": -3}))
    assert main(["simulate", "--config", str(bad)]) == 2
    assert "/steps" in capsys.readouterr().err


def test_missing_config_and_unknown_verb_exit_with_two(tmp_path):
    assert main(["verify"]) == 2
    assert main(["explode"]) == 2
    assert main(["simulate", "--config", str(tmp_path / "absent.json")]) == 2


@pytest.mark.parametrize("gamma,verdict", [(3.05, "convex"), (2.9, "not convex")])
def test_probe_convexity_verdicts(tmp_path, capsys, gamma, verdict):
    args = ["probe-convexity", "--matrix", "1,0,0;0,-1,0;0,0,0", "--gamma", str(gamma), "--out", str(tmp_path)]
    assert main(args) == 0
    assert f"verdict: {verdict}\n" in capsys.readouterr().out
    report = json.loads((tmp_path / "probe_convexity.json").read_text())
    assert report["data"]["threshold"] == pytest.approx(3.0)


def test_probe_rejects_bad_matrices(tmp_path):
    assert main(["probe-convexity", "--matrix", "1,2;3,4", "--gamma", "1", "--out", str(tmp_path)]) == 2
    assert main(["probe-convexity", "--matrix", "1,0,0;0,1,0;0,0,1", "--out", str(tmp_path)]) == 2


def test_weak_strong_on_the_exact_circle(tmp_path):
    args = ["weak-strong", "--n-vertices", "32", "--frames", "3", "--horizon", "0.05", "--out", str(tmp_path)]
    assert main(args) == 0
    report = json.loads((tmp_path / "weak_strong.json").read_text())
    assert report["data"]["gronwall_constant"] == pytest.approx(230.0)
    assert (tmp_path / "envelope.csv").exists()


def test_reports_are_byte_identical_across_runs(tmp_path):
    cfg = dict(SMALL_EK, steps=4, output_dir=str(tmp_path / "out"))
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    contents = []
    for _ in range(2):
        assert main(["simulate", "--config", str(path)]) == 0
        assert main(["verify", "--config", str(path)]) == 0
        contents.append([(tmp_path / "out" / f"{v}.json").read_bytes() for v in ("simulate", "verify")])
    assert contents[0] == contents[1]


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "envar", "probe-convexity", "--matrix", "2,0,0;0,0,0;0,0,-1", "--gamma", "1.0",
         "--out", str(tmp_path)],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0, proc.stderr
    assert "verdict: not convex" in proc.stdout
