import csv
import shutil

import pytest

from perturbactrl.cli import (
    LAB_COLUMNS,
    RunReport,
    bundled_scenario,
    emit_report,
    main,
    run_scenario,
)
from perturbactrl.config import ConfigError, Scaled, parse_config, parse_config_text

MINIMAL_TRANSPORT = """\
[scenario]
id = small_transport
lab = transport

[problem]
L = 1.0
N = 40
T = 1.2
kernel = zero
"""

LTI_SWEEP = """\
[scenario]
id = lti_sweep
lab = lti
seed = 3

[problem]
system = {system}
T = [0.5, 1.0]

[tolerances]
expect = {expect}
"""


@pytest.fixture
def system_file(tmp_path):
    shutil.copy(bundled_scenario("lti_double_integrator").with_name("double_integrator.txt"), tmp_path)
    return tmp_path / "double_integrator.txt"


def lti_config(tmp_path, expect="Holds"):
    path = tmp_path / "lti_sweep.cfg"
    path.write_text(LTI_SWEEP.format(system="double_integrator.txt", expect=expect))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# parsing


def test_minimal_transport_config_parses():
    cfg = parse_config_text(MINIMAL_TRANSPORT)
    assert cfg.lab == "transport" and cfg.id == "small_transport" and cfg.seed == 0
    assert cfg.problem["N"] == 40 and cfg.problem["kernel"] == "zero"
    assert cfg.tolerances["final_residual"] == 1e-3
    assert cfg.points() == [{}]


def test_negative_grid_size_is_reported_with_key_and_line():
    with pytest.raises(ConfigError) as err:
        parse_config_text(MINIMAL_TRANSPORT.replace("N = 40", "N = -40"))
    assert err.value.errors == ["line 7: N must be positive"]


def test_scaled_horizon_sweep_gives_two_points():
    cfg = parse_config_text(MINIMAL_TRANSPORT.replace("T = 1.2", "T = [0.5L, 1.2L]"))
    points = cfg.points()
    assert len(points) == 2
    assert [p["T"] for p in points] == [Scaled(0.5, "L"), Scaled(1.2, "L")]
    assert points[1]["T"].resolve({"L": 2.0}) == pytest.approx(2.4)


def test_all_errors_are_reported_at_once():
    text = MINIMAL_TRANSPORT.replace("N = 40", "N = 4x0").replace("kernel = zero", "kernal = zero")
    text = text.replace("T = 1.2\n", "")
    with pytest.raises(ConfigError) as err:
        parse_config_text(text)
    msgs = err.value.errors
    assert any(m.startswith("line 7:") and "N" in m for m in msgs)
    assert any(m.startswith("line 8:") and "unknown key kernal" in m for m in msgs)
    assert any("missing required key T" in m for m in msgs)


def test_empty_sweep_axis_and_negative_tolerance_are_rejected():
    text = MINIMAL_TRANSPORT.replace("N = 40", "N = []") + "[tolerances]\nfinal_residual = -1\n"
    with pytest.raises(ConfigError) as err:
        parse_config_text(text)
    assert any("sweep axis N is empty" in m for m in err.value.errors)
    assert any("final_residual" in m for m in err.value.errors)


def test_missing_referenced_file_is_an_error(tmp_path):
    path = tmp_path / "k.cfg"
    path.write_text(MINIMAL_TRANSPORT.replace("kernel = zero", "kernel = file:nowhere.txt"))
    with pytest.raises(ConfigError) as err:
        parse_config(path)
    assert "line 9" in err.value.errors[0] and "nowhere.txt" in err.value.errors[0]


def test_unknown_lab_is_rejected():
    with pytest.raises(ConfigError):
        parse_config_text(MINIMAL_TRANSPORT.replace("lab = transport", "lab = plasma"))


# ---------------------------------------------------------------------------
# running and reporting


def test_two_point_sweep_writes_two_rows_and_passes(tmp_path, system_file):
    report = run_scenario(parse_config(lti_config(tmp_path)), tmp_path / "out")
    assert report.passed and report.exit_code == 0
    rows = read_rows(tmp_path / "out" / "lti_sweep.csv")
    assert rows[0] == LAB_COLUMNS["lti"]
    assert len(rows) == 3
    assert [r[0] for r in rows[1:]] == ["5.000000e-01", "1.000000e+00"]


def test_text_report_carries_quantity_tags(tmp_path, system_file):
    run_scenario(parse_config(lti_config(tmp_path)), tmp_path / "out")
    text = (tmp_path / "out" / "lti_sweep.txt").read_text()
    assert "status PASS" in text
    assert "kalman_rank = 2    # " in text


def test_empty_report_gives_header_only_csv(tmp_path):
    (path,) = emit_report(RunReport("nothing", "wave", 0, []), tmp_path, ("csv",))
    assert read_rows(path) == [LAB_COLUMNS["wave"]]


def test_zero_tolerance_fails_every_point(tmp_path):
    text = MINIMAL_TRANSPORT.replace("T = 1.2", "T = [1.2, 1.5]") + "[tolerances]\nfinal_residual = 0\n"
    report = run_scenario(parse_config_text(text), tmp_path)
    assert len(report.records) == 2 and report.exit_code == 1
    assert all(not r.passed and any("final_residual" in f for f in r.failures) for r in report.records)
    lines = (tmp_path / "small_transport.txt").read_text().splitlines()
    assert [line for line in lines if line.startswith("[point")] == ["[point 0] FAIL", "[point 1] FAIL"]


def test_lab_errors_are_captured_per_point(tmp_path):
    text = MINIMAL_TRANSPORT.replace("kernel = zero", "kernel = no_such_kernel")
    report = run_scenario(parse_config_text(text), tmp_path)
    (rec,) = report.records
    assert not rec.passed and rec.error
    assert "error:" in (tmp_path / "small_transport.txt").read_text()


def test_reruns_are_byte_identical_regardless_of_jobs(tmp_path, system_file):
    cfg = parse_config(lti_config(tmp_path))
    outs = []
    for name, jobs in (("a", 1), ("b", 1), ("c", 2)):
        run_scenario(cfg, tmp_path / name, jobs=jobs)
        outs.append([(tmp_path / name / f).read_bytes() for f in ("lti_sweep.csv", "lti_sweep.txt")])
    assert outs[0] == outs[1] == outs[2]


def test_unwritable_output_directory_is_an_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_report(RunReport("x", "lti", 0, []), blocker / "sub")


# ---------------------------------------------------------------------------
# command line


def test_run_command_exit_codes(tmp_path, system_file, monkeypatch):
    monkeypatch.delenv("PERTURBACTRL_OUT", raising=False)
    assert main(["run", str(lti_config(tmp_path)), "--out", str(tmp_path / "ok")]) == 0
    assert main(["run", str(lti_config(tmp_path, expect="FailsAt")), "--out", str(tmp_path / "bad")]) == 1
    broken = tmp_path / "broken.cfg"
    broken.write_text("[scenario]\nlab = lti\n")
    assert main(["run", str(broken)]) == 2


def test_environment_overrides_output_directory(tmp_path, system_file, monkeypatch):
    monkeypatch.setenv("PERTURBACTRL_OUT", str(tmp_path / "env"))
    assert main(["run", str(lti_config(tmp_path)), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "lti_sweep.csv").exists()
    assert not (tmp_path / "flag").exists()


def test_fattorini_command(capsys):
    assert main(["fattorini", str(bundled_scenario("lti_double_integrator").with_name("double_integrator.txt"))]) == 0
    assert "verdict = Holds" in capsys.readouterr().out
    assert main(["fattorini", str(bundled_scenario("lti_uncontrollable").with_name("uncontrollable.txt"))]) == 1
    out = capsys.readouterr().out
    assert "verdict = FailsAt" in out and "witness eigenvalue = -2" in out


def test_fattorini_command_rejects_missing_file(tmp_path):
    assert main(["fattorini", str(tmp_path / "absent.txt")]) == 2


def test_verify_quick_suite_passes(monkeypatch):
    monkeypatch.delenv("PERTURBACTRL_OUT", raising=False)
    assert main(["verify", "quick"]) == 0


def test_verify_rejects_unknown_suite():
    assert main(["verify", "no_such_suite"]) == 2
