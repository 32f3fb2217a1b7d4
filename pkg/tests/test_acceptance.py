import subprocess
import sys

import pytest

from envar.acceptance import CRITERIA, RUNTIME_LIMITS, determinism_check, dumps, run_acceptance, summary_lines


@pytest.fixture(scope="module")
def acceptance():
    return run_acceptance(0)


@pytest.mark.parametrize("key", sorted(CRITERIA))
def test_criterion(acceptance, acceptance_log, key):
    report, _ = acceptance
    result = report["criteria"][key]
    line = next(x for x in summary_lines({"criteria": {key: result}}))
    acceptance_log.append(line)
    print(line)
    assert result["pass"], line
    assert all(c["pass"] for c in result["checks"].values())


@pytest.mark.parametrize("key", sorted(RUNTIME_LIMITS))
def test_runtime(acceptance, acceptance_log, key):
    _, timing = acceptance
    line = f"runtime {key} {'PASS' if timing[key] < RUNTIME_LIMITS[key] else 'FAIL'}: {timing[key]:.2f} s"
    acceptance_log.append(line)
    print(line)
    assert timing[key] < RUNTIME_LIMITS[key]


def test_criterion_16_reports_are_byte_identical(acceptance, acceptance_log, tmp_path):
    report, _ = acceptance
    out = tmp_path / "acceptance.json"
    proc = subprocess.run([sys.executable, "-m", "envar.acceptance", "--seed", "0", "--output", str(out)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    result = determinism_check(dumps(report), out.read_text())
    line = f"criterion 16 {'PASS' if result['pass'] else 'FAIL'}: {result['title']}; bytes={result['data']['bytes']}"
    acceptance_log.append(line)
    print(line)
    assert result["pass"]
