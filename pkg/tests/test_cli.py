import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from nearcloak import cli
from nearcloak.cli import (
    SweepConfig,
    check_pairing,
    cmd_check,
    cmd_medium,
    cmd_mie_admittance,
    cmd_props33_34,
    cmd_sweep_rho,
    fit_slope,
    load_config,
    main,
    sweep_rho,
)
from nearcloak.geometry import make_sphere_mesh
from nearcloak.media import MediumValidationError

EIG = 4.493409457909064 / 2   # first TE interior eigenfrequency of the radius-2 ball


def _ini(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


def test_defaults_and_overrides(tmp_path):
    cfg = load_config()
    assert cfg.omega == 1.0 and cfg.R_Omega == 2.0 and cfg.rhos == [0.4, 0.2, 0.1, 0.05]
    assert len(cfg.grid) == 12
    p = _ini(tmp_path, "[run]\nomega = 0.5\nrhos = 0.3, 0.1\n[medium]\nrho = 0.2\neps_a = 3\n[grid]\neps_a = 2\n")
    cfg = load_config(p, refinement=1, out=str(tmp_path / "o"))
    assert cfg.omega == 0.5 and cfg.rhos == [0.3, 0.1] and cfg.rho == 0.2
    assert cfg.core == (3.0, 1.0, 0.0) and cfg.eps_grid == [2.0] and cfg.refinement == 1


def test_resolved_config_roundtrip(tmp_path):
    cfg = load_config(None, n_max=5, rhos=[0.3, 0.15], out=str(tmp_path))
    p = tmp_path / "again.ini"
    p.write_text(cfg.to_ini())
    assert load_config(p, out=str(tmp_path)) == cfg


@pytest.mark.parametrize("text", [
    "[run]\nrhos = 0.1 0.2\n",
    "[run]\nrhos = 0.5 1.5\n",
    "[run]\ntaus = 0.1 0.1\n",
    "[grid]\neps_a =\n",
    "[run]\nomega = -1\n",
    "[run]\nomega = abc\n",
    "[medium]\nR_D = 3\n",
    "[extra]\nx = 1\n",
])
def test_invalid_configs(tmp_path, text):
    with pytest.raises(MediumValidationError):
        load_config(_ini(tmp_path, text))


def test_missing_config_file(tmp_path):
    with pytest.raises(MediumValidationError):
        load_config(tmp_path / "nope.ini")
    with pytest.raises(MediumValidationError):
        SweepConfig(rhos=[])


def test_fit_slope_exact_and_flagged():
    x = np.array([0.4, 0.2, 0.1, 0.05])
    f = fit_slope(x, 7 * x**3)
    assert_allclose(f.slope, 3.0, rtol=1e-12)
    assert f.r2 == pytest.approx(1.0) and not f.flagged
    assert_allclose(f.residuals, 0, atol=1e-12)
    noisy = fit_slope(x, x**3 * np.array([1, 20, 0.05, 30]))
    assert noisy.flagged and noisy.r2 < 0.98
    with pytest.raises(ValueError):
        fit_slope([1.0], [1.0])


def test_vacuum_core_without_layer_skips_fit():
    cfg = load_config(None, n_max=6, gamma0=0.0)
    rows, fits = sweep_rho(cfg, cores=[(1.0, 1.0, 0.0)])
    assert max(r[2] for r in rows) < 1e-12
    assert fits[0]["fit"] is None


def test_sweep_rho_outputs(tmp_path):
    cfg = load_config(None, n_max=6, eps_grid=[10.0], sigma_grid=[1.0], out=str(tmp_path))
    report = cmd_sweep_rho(cfg)
    text = (tmp_path / "sweep_rho.csv").read_text().splitlines()
    assert text[0] == "# nearcloak sweep-rho v1"
    assert text[1].startswith("eps_a,mu_a,sigma_a,rho,diff_thdiv")
    assert len(text) == 2 + 4
    assert 2.7 <= report["fits"][0]["slope"] <= 3.3
    assert (tmp_path / "resolved_config.ini").exists()
    assert json.loads((tmp_path / "sweep_rho_fit.json").read_text())["variable"] == "rho"


def test_sweep_deterministic_and_thread_independent(tmp_path):
    texts = []
    for threads, sub in ((1, "a"), (1, "b"), (3, "c")):
        cfg = load_config(None, n_max=4, threads=threads, out=str(tmp_path / sub))
        cmd_sweep_rho(cfg)
        texts.append((tmp_path / sub / "sweep_rho.csv").read_bytes())
    assert texts[0] == texts[1] == texts[2]


def test_mie_admittance_rows(tmp_path):
    rows = cmd_mie_admittance(load_config(None, n_max=3, out=str(tmp_path)))
    assert len(rows) == 6 and rows[0][:2] == (1, "TE")
    assert all(r[-1] >= 0 for r in rows)


def test_medium_report(tmp_path):
    rep = cmd_medium(load_config(None, out=str(tmp_path)))
    assert rep["physical"]["violations"] == [] and rep["virtual"]["violations"] == []
    assert_allclose(rep["layers"]["radii"], [0.05, 0.1, 2.0])


@pytest.mark.filterwarnings("ignore:evaluation point within")
def test_props_zero_drives(tmp_path):
    from nearcloak.scattering import LemmaDrive, LemmaSolver

    mD = make_sphere_mesh(1.0, 0, curved=True)
    mo = make_sphere_mesh(2.0, 0, curved=True)
    res = LemmaSolver(mo, mD, 1.0).run([0.2], [LemmaDrive(None, None, "zero")])
    assert res[0][0].output.l2_norm() == 0.0


@pytest.mark.filterwarnings("ignore:evaluation point within")
def test_props_command_small(tmp_path):
    cfg = load_config(None, refinement=1, taus=[0.2, 0.1], out=str(tmp_path))
    rep = cmd_props33_34(cfg)
    slopes = {f["core"]: f["slope"] for f in rep["fits"]}
    assert 2.5 < slopes["psi"] < 3.5 and 1.5 < slopes["phi"] < 2.5
    assert (tmp_path / "props.csv").read_text().startswith("# nearcloak props v1")


def test_pairing_check_negative_control():
    assert check_pairing()["pass"]
    bad = check_pairing(weights_scale=2.0)
    assert not bad["pass"] and bad["closed_form_mismatch"] > 1


def test_eigenvalue_check_reports_nearest():
    e = cli.check_eigenvalue(load_config(None, omega=EIG))
    assert not e["pass"]
    assert_allclose(e["nearest"], EIG, rtol=1e-12)
    assert e["mode"] == [1, "TE"]


def test_check_report_fails_at_eigenvalue(tmp_path, monkeypatch):
    # the heavy entries are not needed to see the eigenvalue entry fail
    for name in ("check_mesh_convergence", "check_trace_and_radiation", "check_bie_mie"):
        monkeypatch.setattr(cli, name, lambda *a, **k: cli._entry("stub", 0, 0, True))
    rep = cmd_check(load_config(None, omega=EIG, out=str(tmp_path)))
    assert not rep["all_pass"]
    failed = {e["name"]: e for e in rep["checks"] if not e["pass"]}
    # the vacuum admittance is singular there too, so sweeps fail as well
    assert_allclose(failed["omega_not_eigenvalue"]["nearest"], EIG, rtol=1e-12)
    assert "pairing_skewness" not in failed
    assert json.loads((tmp_path / "check.json").read_text())["all_pass"] is False


def test_main_exit_codes(tmp_path, monkeypatch, capsys):
    out = str(tmp_path / "o")
    assert main(["mie-admittance", "--out", out]) == 0
    bad = _ini(tmp_path, "[run]\nrhos = 0.1 0.2\n")
    assert main(["sweep-rho", "--config", str(bad), "--out", out]) == 1
    eig = _ini(tmp_path, f"[run]\nomega = {EIG!r}\n")
    assert main(["sweep-rho", "--config", str(eig), "--out", out]) == 3
    assert "eigenfrequency" in capsys.readouterr().err

    from nearcloak.scattering import ConditioningError, SolverError

    def boom(exc):
        def f(cfg):
            raise exc
        return f

    monkeypatch.setitem(cli.COMMANDS, "annulus", boom(SolverError("residual 1e-3")))
    assert main(["annulus", "--out", out]) == 2
    monkeypatch.setitem(cli.COMMANDS, "annulus", boom(ConditioningError("cond 1e13")))
    assert main(["annulus", "--out", out]) == 3
    with pytest.raises(SystemExit):
        main(["nonsense"])


def test_stress_uniformity_small_scan():
    cfg = load_config(None, n_max=6, eps_grid=[10.0], sigma_grid=[0.0])
    rep = cli.stress_uniformity(cfg, eps_range=(200.0, 300.0), n_scan=11)
    assert len(rep["resonant_eps"]) == 1 and 240 < rep["resonant_eps"][0] < 250
    assert rep["without_layer"]["any_busted"]
    assert not rep["with_layer"]["any_busted"]
    assert rep["with_layer"]["cores"][-1]["C_ratio"] < 2
