import numpy as np
import pytest
from numpy.testing import assert_allclose

from nearcloak.bie import TangentialTrace, assemble_magnetic_dipole
from nearcloak.geometry import make_sphere_mesh, scale_mesh, sphere_quadrature
from nearcloak.scattering import (
    AnnulusBlocks,
    ConditioningError,
    DenseSolver,
    LemmaDrive,
    LemmaSolver,
    ScaledExteriorSolver,
    _iterate,
    silver_mueller_residual,
    slice_grid,
    solve_annulus,
    solve_exterior,
    solve_exterior_scaled,
    solve_lemma_crucial,
    write_field_slice,
)
from nearcloak.vsh_mie import (
    LayeredSphereSpec,
    VshExpansion,
    annulus_solution,
    pec_sphere_scattering,
    plane_wave,
    solve_layered_sphere,
)

pytestmark = pytest.mark.filterwarnings("ignore:evaluation point within")


@pytest.fixture(scope="module")
def mD():
    return make_sphere_mesh(1.0, 1, curved=True)


@pytest.fixture(scope="module")
def mO():
    return make_sphere_mesh(2.0, 1, curved=True)


def _rel_l2(mesh, u, v):
    w = mesh.quad_weights[:, None]
    return float(np.sqrt(np.sum(w * np.abs(u - v) ** 2) / np.sum(w * np.abs(v) ** 2)))


def _vsh_trace(mesh, n, fam, radius):
    e = VshExpansion.single(3, n, 0, fam, radius=radius)
    return e, TangentialTrace(mesh, e.synthesize(mesh.quad_nodes), div=e.surface_divergence(mesh.quad_nodes))


# ---------------------------------------------------------------- dense algebra

@pytest.mark.parametrize("order", ["C", "F"])
def test_dense_solver_solve_and_matvec(order):
    rng = np.random.default_rng(0)
    A = np.asarray(rng.standard_normal((40, 40)) + 1j * rng.standard_normal((40, 40)) + 8 * np.eye(40), order=order)
    S = DenseSolver(A)
    b = rng.standard_normal((40, 2)) + 0j
    assert_allclose(A @ S.solve(b), b, atol=1e-12)
    assert_allclose(S.matvec(b), A @ b, atol=1e-12)
    assert_allclose(S.matvec(b[:, 0]), A @ b[:, 0], atol=1e-12)
    exact = np.linalg.cond(A, 1)
    assert exact / 3 < S.cond < 3 * exact


def test_dense_solver_rejects_singular():
    A = np.ones((5, 5))
    with pytest.raises(ConditioningError):
        DenseSolver(A)
    with pytest.raises(ConditioningError) as exc:
        DenseSolver(np.diag([1.0, 1e-13]))
    assert exc.value.cond > 1e12


@pytest.mark.parametrize("scale", [0.05, 3.0])
def test_iterate_neumann_and_gmres_fallback(scale):
    rng = np.random.default_rng(1)
    n = 30
    L = np.eye(n) + 0.1 * rng.standard_normal((n, n))
    K = scale * rng.standard_normal((n, n)) / np.sqrt(n)
    P = rng.standard_normal((n, 2)) + 0j
    S = DenseSolver(L)
    x, res, it = _iterate(S.solve, lambda v: L @ v, lambda v: K @ v, P)
    assert res < 1e-10
    assert_allclose(x, np.linalg.solve(L + K, P), atol=1e-9)


# ---------------------------------------------------------------- exterior problem

def test_zero_data_gives_zero_density(mD):
    sol = solve_exterior(mD, 1.0, TangentialTrace(mD, np.zeros((mD.n_nodes, 3))))
    assert np.all(sol.densities["a"].values == 0)
    assert np.all(sol.E([[3.0, 0, 0]]) == 0)


def test_exterior_validation(mD, mO):
    phi = TangentialTrace(mD, np.zeros((mD.n_nodes, 3)))
    with pytest.raises(ValueError):
        solve_exterior(mD, 0.0, phi)
    with pytest.raises(ValueError):
        solve_exterior(mO, 1.0, phi)
    with pytest.raises(ValueError):
        solve_exterior(mD, 1.0, TangentialTrace(mD, mD.normals))


def test_exterior_reproduces_dipole_field(mD):
    omega, p = 1.0, np.array([0.3, -0.2, 1.0])

    def dipole(x):
        r = np.linalg.norm(x, axis=1)
        ph = (1j * omega * r - 1) * np.exp(1j * omega * r) / (4 * np.pi * r**3)
        return np.cross(ph[:, None] * x, p)

    sol = solve_exterior(mD, omega, TangentialTrace(mD, np.cross(mD.normals, dipole(mD.quad_nodes))))
    x = np.array([[3.0, 0.5, -1.0], [0.0, -4.0, 2.0], [2.5, 2.5, 2.5]])
    assert np.abs(sol.E(x) - dipole(x)).max() < 1e-2 * np.abs(dipole(x)).max()
    assert sol.meta["trace_residual"] < 1e-9
    sm = silver_mueller_residual(sol)
    assert np.all(np.diff(sm) < 0)


def test_pec_far_field_matches_mie(mD):
    d, p = np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])
    Ei, _ = plane_wave(d, p, 1.0)(mD.quad_nodes)
    sol = solve_exterior(mD, 1.0, TangentialTrace(mD, -np.cross(mD.normals, Ei)))
    q = sphere_quadrature(1.0, 12)
    ff = sol.far_field(q.quad_nodes)
    ref = pec_sphere_scattering(d, p, 1.0).far_field(q.quad_nodes)
    assert ff.shape == ref.shape
    assert _rel_l2(q, ff, ref) < 1e-2
    with pytest.raises(ValueError):
        silver_mueller_residual(type(sol)(sol.densities, 1.0, "annulus", sol.evaluator))


def test_scaled_solver_matches_direct_solve(mD):
    e = VshExpansion.single(2, 1, 0, "a")
    ps = TangentialTrace(mD, e.synthesize(mD.quad_nodes))
    solvers = (ScaledExteriorSolver(mD, 1.0, dense=True), ScaledExteriorSolver(mD, 1.0, dense=False))
    for tau in (0.2, 0.05):
        mt = scale_mesh(mD, tau)
        a = solve_exterior(mt, 1.0, TangentialTrace(mt, ps.values)).densities["a"].coords
        for s in solvers:
            x = solve_exterior_scaled(mD, tau, 1.0, ps, solver=s).coords
            assert np.linalg.norm(x - a) < 1e-8 * np.linalg.norm(a)
    with pytest.raises(ValueError):
        solvers[0].solve(1.5, 2 * ps.coords)


def test_scaled_density_tends_to_static_solution(mD):
    e = VshExpansion.single(2, 1, 0, "a")
    ps = TangentialTrace(mD, e.synthesize(mD.quad_nodes))
    A0 = assemble_magnetic_dipole(mD, 0.0).matrix + np.eye(2 * mD.n_nodes)
    a0 = np.linalg.solve(A0, 2 * ps.coords)
    s = ScaledExteriorSolver(mD, 1.0, dense=False)
    d = [np.linalg.norm(solve_exterior_scaled(mD, t, 1.0, ps, solver=s).coords - a0) for t in (0.2, 0.1, 0.05)]
    slopes = np.log2(np.array(d[:-1]) / np.array(d[1:]))
    assert np.all((slopes > 1.8) & (slopes < 2.2))


# ---------------------------------------------------------------- annulus

@pytest.mark.parametrize("fam", ["a", "b"])
def test_annulus_matches_vsh_oracle(mD, mO, fam):
    e, b = _vsh_trace(mO, 1, fam, 2.0)
    mt = scale_mesh(mD, 0.2)
    href = annulus_solution(e, None, 1.0, 0.2).traces_at(2.0)[1].synthesize(mO.quad_nodes)
    direct = solve_annulus(mO, mt, 1.0, b, method="direct")
    blocks = solve_annulus(mO, mt, 1.0, b, method="blocks")
    a1, a1b = direct.densities["a1"].values, blocks.densities["a1"].values
    assert np.abs(a1 - a1b).max() < 1e-10 * np.abs(a1).max()
    assert _rel_l2(mO, a1, href) < 2e-2
    with pytest.raises(ValueError):
        solve_annulus(mO, mt, 1.0, b, method="lsqr")
    with pytest.raises(ValueError):
        solve_annulus(mO, mt, 1.0, TangentialTrace(mO, b.values))


def test_block_forward_substitution_inverts_L():
    rng = np.random.default_rng(2)
    n1, n2 = 12, 8
    L11 = np.eye(n1) + 0.2 * rng.standard_normal((n1, n1))
    L22 = np.eye(n2) + 0.2 * rng.standard_normal((n2, n2))
    L21 = rng.standard_normal((n2, n1))
    R12, R22 = 0.05 * rng.standard_normal((n1, n2)), 0.05 * rng.standard_normal((n2, n2))
    blk = AnnulusBlocks(DenseSolver(L11), DenseSolver(L22), lambda x: L21 @ x, lambda x: R12 @ x,
                        lambda x: R22 @ x)
    x = rng.standard_normal((n1 + n2, 2)) + 0j
    assert_allclose(blk.solve_L(blk.apply_L(x)), x, atol=1e-12)
    full = np.block([[L11, -R12], [L21, L22 - R22]])
    sol, res, _ = blk.solve(x)
    assert res < 1e-10
    assert_allclose(full @ sol, x, atol=1e-10)


# ---------------------------------------------------------------- decomposition

def _pec_reference(psi, tau, mesh):
    pec = LayeredSphereSpec((tau, 2.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0), 1.0, pec_core=True)
    vac = LayeredSphereSpec.vacuum(2.0, 1.0)
    return (solve_layered_sphere(pec, psi).magnetic_trace()
            - solve_layered_sphere(vac, psi).magnetic_trace()).synthesize(mesh.quad_nodes)


def test_lemma_psi_drive_matches_oracle(mD, mO):
    psi = VshExpansion.single(3, 1, 0, "a", radius=2.0)
    runs = [LemmaSolver(mO, mD, 1.0, dense=d).run([0.2, 0.1], [LemmaDrive(None, psi, "psi")])
            for d in (True, False)]
    for rd, rm in zip(*runs):
        out = rd[0].output.values
        assert _rel_l2(mO, out, _pec_reference(psi, rd[0].tau, mO)) < 1e-2
        assert np.abs(out - rm[0].output.values).max() < 1e-9 * np.abs(out).max()
        assert rd[0].diagnostics["annulus_residual"] < 1e-10


def test_lemma_cancelling_data_give_zero(mD, mO):
    tau = 0.1
    psi = VshExpansion.single(3, 1, 0, "a", radius=2.0)
    mt = scale_mesh(mD, tau)
    E0, _ = solve_layered_sphere(LayeredSphereSpec.vacuum(2.0, 1.0), psi).fields(mt.quad_nodes)
    phi = TangentialTrace(mt, np.cross(mt.normals, E0))
    out, diag = solve_lemma_crucial(mO, mt, 1.0, tau, phi, psi)
    assert out.l2_norm() < 1e-14
    assert diag["inner_data_l2"] < 1e-14


def test_lemma_solver_needs_sphere_outer(mD):
    from nearcloak.geometry import make_mesh

    flat = make_mesh(mD.vertices * 2, mD.triangles)
    with pytest.raises(ValueError):
        LemmaSolver(flat, mD, 1.0)


# ---------------------------------------------------------------- dumps

def test_field_slice_csv(tmp_path):
    pts = slice_grid("xy", 2.0, 3)
    assert pts.shape == (9, 3) and np.all(pts[:, 2] == 0)
    E = np.ones((9, 3)) * (1 + 2j)
    write_field_slice(tmp_path / "s.csv", pts, E, -E)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "# nearcloak field slice v1"
    assert lines[1].split(",")[:4] == ["x", "y", "z", "Ex_re"]
    assert len(lines) == 11
    with pytest.raises(ValueError):
        slice_grid("ab")
