import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import special

from nearcloak.geometry import sphere_quadrature
from nearcloak.vsh_mie import (
    LayeredSphereSpec,
    ResonanceError,
    VshExpansion,
    admittance_sphere,
    annulus_solution,
    is_em_eigenvalue,
    modal_admittance,
    n_modes,
    pec_sphere_scattering,
    plane_wave,
    plane_wave_trace,
    radiating_solution,
    riccati_derivative,
    solve_layered_sphere,
    spherical_bessel,
    tangential_basis,
    vsh_analyze,
    write_modal_csv,
)


def test_bessel_examples():
    assert abs(spherical_bessel(0, np.pi)) < 1e-14
    z = 0.1
    # the two-term series is off by z^5/840 ~ 1.2e-8; the three-term one by O(z^7)
    assert abs(spherical_bessel(1, z) - (z / 3 - z**3 / 30)) < 2e-8
    assert abs(spherical_bessel(1, z) - (z / 3 - z**3 / 30 + z**5 / 840)) < 1e-11
    x = 2.3
    for n in range(9):
        w = (spherical_bessel(n, x, "j") * spherical_bessel(n, x, "y", derivative=True)
             - spherical_bessel(n, x, "j", derivative=True) * spherical_bessel(n, x, "y"))
        assert_allclose(w, 1 / x**2, rtol=1e-10)


def test_bessel_against_scipy_complex_argument():
    z = 3.0 + 2.5j
    for n in range(6):
        assert_allclose(spherical_bessel(n, z, "j"), special.spherical_jn(n, z), rtol=1e-12)
        assert_allclose(spherical_bessel(n, z, "h1"),
                        special.spherical_jn(n, z) + 1j * special.spherical_yn(n, z), rtol=1e-12)


def test_riccati_derivative_finite_difference():
    h = 1e-6
    for n in (1, 3):
        fd = ((2.0 + h) * spherical_bessel(n, 2.0 + h) - (2.0 - h) * spherical_bessel(n, 2.0 - h)) / (2 * h)
        assert_allclose(riccati_derivative(n, 2.0, "j"), fd, rtol=1e-8)


def test_analyze_single_modes():
    q = sphere_quadrature(1.0, 12)
    g, _ = tangential_basis(1, 0, q.quad_nodes)
    e = vsh_analyze(g, q.quad_nodes, q.quad_weights, 4)
    assert_allclose(e.vector, VshExpansion.single(4, 1, 0, "a").vector, atol=1e-12)
    _, rot = tangential_basis(2, 1, q.quad_nodes)
    e = vsh_analyze(-rot, q.quad_nodes, q.quad_weights, 4)  # nu x grad Y = -(grad Y x nu)
    assert_allclose(e.vector, VshExpansion.single(4, 2, 1, "b", value=-1.0).vector, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.floats(0.5, 3.0))
def test_analyze_synthesize_roundtrip(seed, n_max, R):
    e = VshExpansion.random(n_max, np.random.default_rng(seed), radius=R)
    q = sphere_quadrature(R, n_max + 2)
    back = vsh_analyze(e.synthesize(q.quad_nodes), q.quad_nodes, q.quad_weights, n_max, R)
    assert_allclose(back.vector, e.vector, atol=1e-10 * np.abs(e.vector).max())


def test_analyze_rejects_normal_component():
    q = sphere_quadrature(1.0, 6)
    with pytest.raises(ValueError):
        vsh_analyze(q.normals.astype(complex), q.quad_nodes, q.quad_weights, 3)


def test_surface_divergence_closed_form():
    e = VshExpansion.single(3, 2, -1, "a", value=0.7, radius=2.0)
    q = sphere_quadrature(2.0, 8)
    # |Div u|^2 = n(n+1)/R^2 |u|^2 after integration, for u = a grad_S Y / R
    div = e.surface_divergence(q.quad_nodes)
    u = e.synthesize(q.quad_nodes)
    assert_allclose(np.sum(q.quad_weights * div * np.conj(div)),
                    6 / 4 * np.sum(q.quad_weights * np.einsum("qi,qi->q", u, u.conj())), rtol=1e-12)


def test_vacuum_spec_has_no_scattered_part():
    spec = LayeredSphereSpec((0.1, 0.2, 2.0), (1.0,) * 3, (1.0,) * 3, (0.0,) * 3, 1.0)
    assert_allclose(admittance_sphere(spec, 6).matrix,
                    admittance_sphere(LayeredSphereSpec.vacuum(2.0, 1.0), 6).matrix, rtol=1e-12, atol=1e-14)
    sol = solve_layered_sphere(spec, VshExpansion.single(3, 2, 0, "a", radius=2.0))
    for n, pol in sol.modes:
        assert_allclose(sol.modes[(n, pol)].coeffs[:, 1], 0.0, atol=1e-12)


def test_interface_continuity():
    spec = LayeredSphereSpec((0.05, 0.1, 2.0), (10.0, 1.0, 1.0), (1.0, 1.0, 1.0), (1.0, 100.0, 0.0), 1.0)
    rng = np.random.default_rng(0)
    sol = solve_layered_sphere(spec, VshExpansion.random(4, rng, radius=2.0))
    d = rng.standard_normal((20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    for r in (0.05, 0.1):
        Ei, Hi = sol.fields(d * r * (1 - 1e-9))
        Eo, Ho = sol.fields(d * r * (1 + 1e-9))
        tan = lambda v: np.cross(d, v)  # noqa: E731
        assert np.abs(tan(Ei) - tan(Eo)).max() < 1e-6 * np.abs(tan(Eo)).max()
        assert np.abs(tan(Hi) - tan(Ho)).max() < 1e-6 * np.abs(tan(Ho)).max()


def test_boundary_data_reproduced():
    rng = np.random.default_rng(1)
    psi = VshExpansion.random(4, rng, radius=2.0)
    spec = LayeredSphereSpec((0.1, 0.2, 2.0), (5.0, 1.0, 1.0), (1.0, 1.0, 1.0), (0.0, 25.0, 0.0), 1.0)
    sol = solve_layered_sphere(spec, psi)
    e, _ = sol.traces_at(2.0)
    assert_allclose(e.vector, psi.vector, rtol=1e-12, atol=1e-12)


def test_maxwell_in_layers():
    from nearcloak.calculus import fd_curl

    spec = LayeredSphereSpec((0.5, 1.0, 2.0), (4.0, 1.0, 1.0), (2.0, 1.0, 1.0), (0.5, 3.0, 0.0), 1.0)
    sol = solve_layered_sphere(spec, VshExpansion.single(2, 1, 1, "b", radius=2.0))
    for r, eps, mu, sig in ((0.3, 4.0, 2.0, 0.5), (1.5, 1.0, 1.0, 0.0)):
        x = r * np.array([[0.6, 0.0, 0.8], [0.0, 0.8, -0.6]])
        E, H = sol.fields(x)
        curlE = fd_curl(lambda p: sol.fields(p)[0], x, 1e-4)
        curlH = fd_curl(lambda p: sol.fields(p)[1], x, 1e-4)
        assert_allclose(curlE, 1j * mu * H, rtol=1e-6, atol=1e-7 * np.abs(H).max())
        assert_allclose(curlH, -1j * (eps + 1j * sig) * E, rtol=1e-6, atol=1e-7 * np.abs(E).max())


def test_shielding_by_conductive_layer():
    psi = VshExpansion.single(1, 1, 0, "a", radius=2.0)
    amps = []
    for g in (1.0, 10.0, 100.0, 1000.0):
        spec = LayeredSphereSpec((0.1, 0.2, 2.0), (1.0,) * 3, (1.0,) * 3, (0.0, g, 0.0), 1.0)
        sol = solve_layered_sphere(spec, psi)
        amps.append(np.abs(sol.modes[(1, "TE")].coeffs[0]).max())
    assert np.all(np.diff(amps) < 0)


def test_admittance_block_structure():
    spec = LayeredSphereSpec((0.1, 0.2, 2.0), (10.0, 1.0, 1.0), (1.0, 1.0, 1.0), (1.0, 25.0, 0.0), 1.0)
    L = admittance_sphere(spec, 5).matrix
    k = n_modes(5)
    assert np.all(L[:k, :k] == 0) and np.all(L[k:, k:] == 0)
    off = L[k:, :k]
    assert np.all(off[~np.eye(k, dtype=bool)] == 0)


def test_admittance_diff_decays_cubically():
    from nearcloak.admittance import WeightedNorm, admittance_diff_norm

    L0 = admittance_sphere(LayeredSphereSpec.vacuum(2.0, 1.0), 8)
    diffs = []
    rhos = (0.4, 0.2, 0.1, 0.05)
    for rho in rhos:
        spec = LayeredSphereSpec((rho / 2, rho, 2.0), (10.0, 1.0, 1.0), (1.0,) * 3, (1.0, rho**-2, 0.0), 1.0)
        diffs.append(admittance_diff_norm(admittance_sphere(spec, 8), L0, WeightedNorm(8)))
    slope = np.polyfit(np.log(rhos), np.log(diffs), 1)[0]
    assert 2.7 < slope < 3.3


def test_truncation_stability():
    from nearcloak.admittance import WeightedNorm, admittance_diff_norm

    spec = lambda n: LayeredSphereSpec((0.1, 0.2, 2.0), (10.0, 1.0, 1.0), (1.0,) * 3, (1.0, 25.0, 0.0), 1.0)  # noqa
    vals = []
    for n in (8, 12):
        L0 = admittance_sphere(LayeredSphereSpec.vacuum(2.0, 1.0), n)
        vals.append(admittance_diff_norm(admittance_sphere(spec(n), n), L0, WeightedNorm(n)))
    assert abs(vals[1] - vals[0]) < 0.01 * vals[0]


def test_eigenvalue_detection():
    chk = is_em_eigenvalue(1.0, 2.0)
    assert not chk.is_eigenvalue
    assert chk.distance > 1e-3
    x = 4.493409457909064  # first zero of j_1
    hit = is_em_eigenvalue(x / 2.0, 2.0)
    assert hit.is_eigenvalue and hit.mode == (1, "TE")
    assert not is_em_eigenvalue(x / 2.0 + 1e-5, 2.0).is_eigenvalue
    assert not is_em_eigenvalue(1e-3, 2.0).is_eigenvalue


def test_resonant_mode_raises():
    x = 4.493409457909064
    with pytest.raises(ResonanceError):
        modal_admittance(LayeredSphereSpec.vacuum(2.0, x / 2.0), 1, "TE")


def test_plane_wave_expansion():
    d, p = np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])
    e = plane_wave_trace(d, p, 1.0, 1.0, 12)
    q = sphere_quadrature(1.0, 20)
    E, _ = plane_wave(d, p, 1.0)(q.quad_nodes)
    assert_allclose(e.synthesize(q.quad_nodes), np.cross(q.normals, E), atol=1e-10)


def test_radiating_solution_reproduces_trace():
    rng = np.random.default_rng(3)
    e = VshExpansion.random(4, rng, radius=1.0)
    sol = radiating_solution(e, 1.0)
    et, _ = sol.traces_at(1.0)
    assert_allclose(et.vector, e.vector, rtol=1e-12, atol=1e-12)
    x = np.array([[10.0, 0, 0], [20.0, 0, 0], [40.0, 0, 0]])
    E, _ = sol.fields(x)
    mag = np.linalg.norm(E, axis=1)
    assert_allclose(mag[:-1] / mag[1:], 2.0, rtol=0.05)


def test_pec_sphere_tangential_field_vanishes():
    d, p = np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])
    sc = pec_sphere_scattering(d, p, 1.0, 1.0)
    q = sphere_quadrature(1.0, 16)
    Ei, _ = plane_wave(d, p, 1.0)(q.quad_nodes)
    Es, _ = sc.fields(q.quad_nodes)
    assert np.abs(np.cross(q.normals, Ei + Es)).max() < 1e-8


def test_annulus_solution_traces():
    rng = np.random.default_rng(4)
    outer = VshExpansion.random(3, rng, radius=2.0)
    inner = VshExpansion.random(3, rng, radius=0.3)
    sol = annulus_solution(outer, inner, 1.0, 0.3)
    assert_allclose(sol.traces_at(2.0)[0].vector, outer.vector, rtol=1e-11, atol=1e-11)
    assert_allclose(sol.traces_at(0.3)[0].vector, inner.vector, rtol=1e-11, atol=1e-11)


def test_modal_csv(tmp_path):
    spec = LayeredSphereSpec((0.1, 0.2, 2.0), (10.0, 1.0, 1.0), (1.0,) * 3, (1.0, 25.0, 0.0), 1.0)
    sol = solve_layered_sphere(spec, VshExpansion.single(2, 1, 0, "a", radius=2.0))
    write_modal_csv(sol, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "n,m,pol,layer,basis,coeff_re,coeff_im"
    assert len(lines) == 2 + 3 * 2
