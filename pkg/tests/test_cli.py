import json
import math

import numpy as np
import pytest

from eulervisc.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main
from eulervisc.config import (ConfigParseError, ConfigValidationError, build_gravity, build_initial, build_material,
                              evaluate_expression, parse_config)
from eulervisc.runner import read_summary

MINIMAL = "[model]\nkind = small\n"

EQUILIBRIUM = """
[model]
kind = small
[grid]
n = 6, 6
[scheme]
tau = 0.01
steps = 3
[initial]
preset = equilibrium
"""

# a step far beyond what Newton can take from a violent initial velocity
TOO_LARGE = """
[model]
kind = small
[grid]
n = 8, 8
[scheme]
tau = 5.0
steps = 2
max_iter = 5
max_halvings = 2
[initial]
rho = 1
v_x = 20 * sin(2 * pi * y)
v_y = 20 * cos(2 * pi * x)
"""


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.model == "small" and cfg.params.tau > 0 and cfg.steps >= 1
    assert cfg.grid.dims >= 1 and cfg.params.p_exp > 3
    assert build_material(cfg).K_E > 0
    assert build_initial(cfg).rho.shape == cfg.grid.shape
    assert build_gravity(cfg) is None


def test_violations_are_all_listed():
    text = MINIMAL + "[scheme]\np_exp = 2\nr_exp = 3\n[initial]\nrho = 0\n"
    with pytest.raises(ConfigValidationError) as err:
        parse_config(text)
    msg = str(err.value)
    assert "p > 3" in msg and "r > 3" in msg and "min rho0 > 0" in msg
    assert len(err.value.violations) == 3


def test_override_unsafe_flags_instead():
    cfg = parse_config(MINIMAL + "[scheme]\np_exp = 2\n", override_unsafe=True)
    assert cfg.flags == ["hyperviscosity exponent p > 3"]
    with pytest.raises(ConfigValidationError):
        parse_config(MINIMAL + "[scheme]\ntau = -1\n", override_unsafe=True)


def test_negative_jacobian_rejected():
    text = "[model]\nkind = large\nmaterial = neo-hookean\n[initial]\nF_11 = -1\n"
    with pytest.raises(ConfigValidationError, match="det F0 > 0"):
        parse_config(text)


def test_parse_errors_carry_position():
    with pytest.raises(ConfigParseError) as err:
        parse_config(MINIMAL + "[scheme]\ntau = abc\n")
    assert err.value.line == 4 and "line 4" in str(err.value)
    with pytest.raises(ConfigParseError) as err:
        parse_config(MINIMAL + "[initial]\nrho = 1 + foo(x)\n")
    assert err.value.line == 4 and err.value.column > 1 and "unknown function 'foo'" in str(err.value)
    with pytest.raises(ConfigParseError, match="unknown section"):
        parse_config(MINIMAL + "[nope]\na = 1\n")
    with pytest.raises(ConfigParseError, match="unknown key"):
        parse_config(MINIMAL + "[scheme]\ntaux = 1\n")
    with pytest.raises(ConfigParseError):
        parse_config("tau = 1\n")


def test_expressions():
    assert evaluate_expression("2 * sin(pi * x) + exp(0)", x=0.5) == pytest.approx(3.0)
    assert evaluate_expression("-x ** 2", x=3.0) == -9.0
    with pytest.raises(ConfigParseError):
        evaluate_expression("__import__('os')")
    with pytest.raises(ConfigParseError):
        evaluate_expression("x.real", x=1.0)


def test_gravity_expression():
    cfg = parse_config(MINIMAL + "[gravity]\ng_y = -9.81 * cos(t)\n")
    g = build_gravity(cfg)
    assert np.allclose(g(0.0), [0.0, -9.81, 0.0]) and np.allclose(g(math.pi), [0.0, 9.81, 0.0])


def test_run_equilibrium(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run-small", "--config", write(tmp_path, EQUILIBRIUM), "--out", str(out), "--quiet"]) == EXIT_OK
    summary = read_summary(out / "summary.txt")
    assert summary["status"] == "success" and summary["steps_completed"] == "3"
    assert float(summary["slack_max"]) == 0.0
    assert (out / "final.evs").exists() and (out / "audit.csv").exists()
    assert main(["audit", str(out / "audit.csv")]) == EXIT_OK
    assert "summary_match=true" in capsys.readouterr().out


def test_model_mismatch_and_bad_config(tmp_path):
    assert main(["run-large", "--config", write(tmp_path, EQUILIBRIUM), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    bad = write(tmp_path, EQUILIBRIUM + "p_exp = 2\n", "bad.ini")
    assert main(["run-small", "--config", bad, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_run_failure_reports_halvings(tmp_path):
    out = tmp_path / "out"
    code = main(["run-small", "--config", write(tmp_path, TOO_LARGE), "--out", str(out), "--quiet"])
    assert code == EXIT_FAIL
    summary = read_summary(out / "summary.txt")
    assert summary["status"] == "failure"
    assert "failure_reason" in summary and summary["halving_log"].count("tau=") == 3
    assert (out / "final.evs").exists()


def test_audit_detects_tampering(tmp_path, capsys):
    out = tmp_path / "out"
    main(["run-small", "--config", write(tmp_path, EQUILIBRIUM), "--out", str(out), "--quiet"])
    lines = (out / "audit.csv").read_text().splitlines()
    head = lines[0].split(",")
    cells = lines[1].split(",")
    cells[head.index("inequality_slack")] = "1.0"
    lines[1] = ",".join(cells)
    (out / "audit.csv").write_text("\n".join(lines) + "\n")
    assert main(["audit", str(out / "audit.csv")]) == EXIT_FAIL
    assert "summary_match=false" in capsys.readouterr().out


def test_determinism(tmp_path):
    cfg = write(tmp_path, EQUILIBRIUM.replace("preset = equilibrium", "preset = random\nseed = 7"))
    for d in ("a", "b"):
        assert main(["run-small", "--config", cfg, "--out", str(tmp_path / d), "--quiet"]) == EXIT_OK
    assert (tmp_path / "a" / "audit.csv").read_bytes() == (tmp_path / "b" / "audit.csv").read_bytes()
    assert (tmp_path / "a" / "final.evs").read_bytes() == (tmp_path / "b" / "final.evs").read_bytes()


def test_convexity_check_exit_codes(capsys):
    assert main(["convexity-check", "neo-hookean", "--samples", "300"]) == EXIT_OK
    assert main(["convexity-check", "fj-power", "--p", "1.6667", "--samples", "300"]) == EXIT_FAIL
    assert main(["convexity-check", "fj-power"]) == EXIT_CONFIG
    out = capsys.readouterr().out
    assert "kinetic_identity: PASS" in out


def test_convergence_subcommand(tmp_path, capsys):
    text = EQUILIBRIUM.replace("preset = equilibrium", "preset = smooth").replace("steps = 3", "final_time = 0.02")
    text = text.replace("[scheme]", "[scheme]\nK_V = 0.01\nG_V = 0.01\ntol_rel = 1e-12")
    code = main(["convergence", write(tmp_path, text), "--taus", "0.005", "0.0025", "0.00125", "--json"])
    out = capsys.readouterr().out
    data = json.loads(out[:out.rindex("}") + 1])
    assert code == EXIT_OK and data["orders"][0] > 0.8


def test_thread_limit(monkeypatch):
    monkeypatch.setenv("EULERVISC_THREADS", "0")
    with pytest.raises(SystemExit):
        main(["convexity-check", "barotropic", "--samples", "10"])
    monkeypatch.setenv("EULERVISC_THREADS", "1")
    assert main(["convexity-check", "barotropic", "--samples", "10"]) == EXIT_OK
