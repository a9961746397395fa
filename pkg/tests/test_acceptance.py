"""Acceptance criteria at their stated tolerances; one verdict line each."""
import time

import numpy as np
import pytest

from nearcloak import cli
from nearcloak.admittance import energy_identity_residual
from nearcloak.bie import TangentialTrace, assemble_magnetic_dipole_remainder, static_sigma_min
from nearcloak.geometry import make_sphere_mesh
from nearcloak.media import Core, build_virtual_medium, layered_spec, pullback_maxwell_residual, radial_blowup_map
from nearcloak.scattering import ScaledExteriorSolver, solve_exterior_scaled
from nearcloak.vsh_mie import LayeredSphereSpec, VshExpansion, solve_layered_sphere

pytestmark = [pytest.mark.slow, pytest.mark.filterwarnings("ignore:evaluation point within")]


@pytest.fixture(scope="module")
def props(tmp_path_factory):
    cfg = cli.load_config(None, refinement=3, out=str(tmp_path_factory.mktemp("props")))
    t = time.perf_counter()
    report = cli.cmd_props33_34(cfg)
    return report, time.perf_counter() - t


def test_criterion_1_rho_cubed_slope(criterion):
    cfg = cli.load_config(None, n_max=12, threads=1)
    t = time.perf_counter()
    _, fits = cli.sweep_rho(cfg)
    elapsed = time.perf_counter() - t
    slopes = [f["fit"].slope for f in fits]
    c = [f["C_hat"] for f in fits]
    spread = max(c) / min(c)
    ok = all(2.7 <= s <= 3.3 for s in slopes) and spread < 10 and elapsed < 120
    assert criterion(1, ok, f"slopes {min(slopes):.3f}..{max(slopes):.3f}, C_hat spread {spread:.2f}, "
                            f"{elapsed:.1f} s")


def test_criterion_2_uniformity_stress(criterion):
    rep = cli.stress_uniformity(cli.load_config(None))
    worst0 = max(rep["without_layer"]["cores"], key=lambda e: e["C_ratio"])
    worst1 = max(rep["with_layer"]["cores"], key=lambda e: e["C_ratio"])
    ok = rep["without_layer"]["any_busted"] and not rep["with_layer"]["any_busted"]
    assert criterion(2, ok, f"{len(rep['resonant_eps'])} resonant cores; no layer: max C ratio "
                            f"{worst0['C_ratio']:.3g} (eps_a {worst0['core'][0]:.4g}); layer: max C ratio "
                            f"{worst1['C_ratio']:.3g}")


def _slope(report, label):
    return next(f["slope"] for f in report["fits"] if f["core"] == label)


def test_criterion_3_psi_drive_tau_cubed(props, criterion):
    report, elapsed = props
    s = _slope(report, "psi")
    ok = 2.7 <= s <= 3.3 and elapsed < 600
    assert criterion(3, ok, f"psi-driven slope {s:.3f}, refinement 3, {elapsed:.0f} s")


def test_criterion_4_phi_drive_tau_squared(props, criterion):
    report, elapsed = props
    s = _slope(report, "phi")
    ok = 1.7 <= s <= 2.3 and elapsed < 600
    assert criterion(4, ok, f"phi-driven slope {s:.3f}, refinement 3, {elapsed:.0f} s")


def test_criterion_5_energy_identity(criterion):
    worst = 0.0
    rng = np.random.default_rng(0)
    for rho in (0.2, 0.1):
        spec = layered_spec(build_virtual_medium(rho, core=Core(10.0, 1.0, 1.0)), 1.0)
        for psi in (VshExpansion.single(4, 1, 0, "a", radius=2.0), VshExpansion.random(4, rng, radius=2.0)):
            worst = max(worst, energy_identity_residual(solve_layered_sphere(spec, psi), n_radial=48))
    assert criterion(5, worst < 1e-6, f"max relative residual {worst:.2e}")


def test_criterion_6_pec_far_field(tmp_path, criterion):
    rep = cli.cmd_exterior(cli.load_config(None, refinement=3, out=str(tmp_path)))
    err = rep["far_field_rel_l2"]
    assert criterion(6, err < 1e-3, f"far-field relative L2 error {err:.2e} at refinement 3")


def test_criterion_7_static_invertibility(criterion):
    sig = {}
    for ref in (2, 3, 4):
        sig[ref] = static_sigma_min(make_sphere_mesh(1.0, ref, curved=True))
    # the matrix-free estimate at the finest level bounds the minimum from above; the dense
    # route on the same mesh family checks it at refinement 3
    ritz3 = static_sigma_min(make_sphere_mesh(1.0, 3, curved=True), "ritz")["sigma"]
    s = np.array([sig[r]["sigma"] for r in (2, 3, 4)])
    stable = s.max() / s.min() - 1 < 0.05
    bounded = np.all(s >= 0.95 * s[-1])
    agree = abs(ritz3 - sig[3]["sigma"]) < 1e-3 * sig[3]["sigma"]
    ok = stable and bounded and agree
    assert criterion(7, ok, "sigma_min " + ", ".join(f"ref {r}: {sig[r]['sigma']:.6f} ({sig[r]['method']})"
                                                     for r in (2, 3, 4)) + f"; ritz at ref 3 {ritz3:.6f}")


def test_criterion_8_kernel_split_remainder(criterion):
    split = cli.check_kernel_split()
    m = make_sphere_mesh(1.0, 2, curved=True)
    e = VshExpansion.single(2, 1, 0, "a")
    phi = TangentialTrace(m, e.synthesize(m.quad_nodes))
    solver = ScaledExteriorSolver(m, 1.0)
    ratios = []
    for tau in (0.2, 0.1, 0.05):
        a = solve_exterior_scaled(m, tau, 1.0, phi, solver=solver).coords
        R = assemble_magnetic_dipole_remainder(m, tau)
        ratios.append(np.linalg.norm(R @ a) / np.linalg.norm(a))
    slopes = np.log2(np.array(ratios[:-1]) / np.array(ratios[1:]))
    ok = split["pass"] and np.all((slopes >= 1.8) & (slopes <= 2.2))
    assert criterion(8, ok, f"|R|/(tau^2 r) bounds {np.round(split['bounds'], 6).tolist()}, "
                            f"|R a|/|a| slopes {np.round(slopes, 3).tolist()}")


def test_criterion_9_pullback_first_order(criterion):
    sol = solve_layered_sphere(LayeredSphereSpec.vacuum(2.0, 1.0), VshExpansion.single(2, 2, 1, "a", radius=2.0))
    F = radial_blowup_map(0.2, 1.0, 2.0)
    rng = np.random.default_rng(2)
    d = rng.standard_normal((20, 3))
    y = d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(0.3, 1.8, 20)[:, None]
    res = [pullback_maxwell_residual(lambda x: sol.fields(x)[0], lambda x: sol.fields(x)[1], F, 1.0, y, h)
           for h in (1e-2, 5e-3, 2.5e-3)]
    rates = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    ok = np.all(np.abs(rates - 1) < 0.1)
    assert criterion(9, ok, f"residuals {np.array(res).round(5).tolist()}, rates {rates.round(3).tolist()}")


def test_criterion_10_check_suite(tmp_path, criterion):
    rep = cli.cmd_check(cli.load_config(None, out=str(tmp_path)))
    failed = [e["name"] for e in rep["checks"] if not e["pass"]]
    assert criterion(10, rep["all_pass"], f"{len(rep['checks'])} invariants, failed: {failed or 'none'}")
