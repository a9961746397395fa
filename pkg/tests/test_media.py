import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from nearcloak.media import (
    ComposedMap,
    Core,
    DilationMap,
    DomainError,
    IdentityMap,
    InterfaceError,
    MediumValidationError,
    SymTensor3,
    build_physical_medium,
    build_virtual_medium,
    check_regularity,
    jacobian,
    layered_spec,
    medium_from_config,
    pull_back_field,
    pull_back_tensor,
    push_forward,
    pullback_maxwell_residual,
    radial_blowup_map,
)
from nearcloak.vsh_mie import LayeredSphereSpec, VshExpansion, solve_layered_sphere


def _dirs(n, seed=0):
    d = np.random.default_rng(seed).standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def test_map_fixes_outer_sphere():
    F = radial_blowup_map(0.3, 1.0, 2.0)
    x = 2.0 * _dirs(10)
    assert_allclose(F(x), x, rtol=1e-15)


@pytest.mark.parametrize("r, expected", [(0.5, 1.0), (1.25, 1.5), (0.25, 0.5)])
def test_map_radial_profile(r, expected):
    F = radial_blowup_map(0.5, 1.0, 2.0)
    x = r * _dirs(4)
    assert_allclose(np.linalg.norm(F(x), axis=1), expected, rtol=1e-14)


def test_map_inverse():
    F = radial_blowup_map(0.1, 1.0, 2.0)
    x = _dirs(30) * np.linspace(0.01, 1.99, 30)[:, None]
    assert_allclose(F.inverse(F(x)), x, rtol=1e-13)


def test_map_rejects_bad_rho():
    for rho in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(DomainError):
            radial_blowup_map(rho, 1.0, 2.0)


def test_interface_continuity():
    F = radial_blowup_map(0.2, 1.0, 2.0)
    d = _dirs(8)
    s = F.interface
    lo, hi = F(d * (s - 1e-13)), F(d * (s + 1e-13))
    assert np.abs(lo - hi).max() < 1e-11


def test_jacobian_dilation_branch():
    F = radial_blowup_map(0.25, 1.0, 2.0)
    J = jacobian(F, np.array([0.05, -0.1, 0.02]))
    assert_allclose(J, 4 * np.eye(3))


def test_jacobian_matches_finite_differences_on_outer_sphere():
    F = radial_blowup_map(0.2, 1.0, 2.0)
    h = 1e-6
    for x in 2.0 * _dirs(5, 3):
        J = jacobian(F, x)
        fd = np.stack([(F(x + h * e) - F(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
        assert_allclose(J, fd, rtol=1e-6, atol=1e-8)


def test_jacobian_interface_error():
    F = radial_blowup_map(0.2, 1.0, 2.0)
    with pytest.raises(InterfaceError):
        jacobian(F, np.array([0.2, 0.0, 0.0]))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.02, 0.9), st.floats(0.01, 1.99), st.integers(0, 1000))
def test_jacobian_orientation(rho, r, seed):
    F = radial_blowup_map(rho, 1.0, 2.0)
    if abs(r - F.interface) < 1e-6:
        return
    x = r * _dirs(1, seed)[0]
    assert np.linalg.det(jacobian(F, x)) > 0


def test_push_forward_identity_and_dilation():
    m = SymTensor3((2.0, 3.0, 4.0, 0.1, 0.2, 0.3))
    x = _dirs(5) * 0.7
    assert_allclose(push_forward(m, IdentityMap(), x), np.broadcast_to(m.matrix, (5, 3, 3)))
    rho = 0.1
    D = DilationMap(rho)
    assert_allclose(push_forward(1.0, D, x), np.broadcast_to(rho * np.eye(3), (5, 3, 3)), rtol=1e-14)
    assert_allclose(push_forward(2.0 * rho**-2, D, x), np.broadcast_to(2.0 / rho * np.eye(3), (5, 3, 3)),
                    rtol=1e-14)


def _spd(seed):
    A = np.random.default_rng(seed).standard_normal((3, 3))
    return A @ A.T + 0.1 * np.eye(3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.9))
def test_push_forward_symmetric_spd(seed, rho):
    F = radial_blowup_map(rho, 1.0, 2.0)
    m = _spd(seed)
    x = _dirs(6, seed) * np.array([0.3, 0.6, 0.9, 1.2, 1.5, 1.9])[:, None]
    out = push_forward(m, F, x)
    assert_allclose(out, np.swapaxes(out, 1, 2), atol=1e-15)
    assert np.all(np.linalg.eigvalsh(out) > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 0.9), st.floats(0.2, 3.0))
def test_push_forward_functorial(seed, rho, s):
    F, G = radial_blowup_map(rho, 1.0, 2.0), DilationMap(s)
    m = _spd(seed)
    x = _dirs(4, seed) * np.array([0.3, 0.8, 1.3, 1.8])[:, None]
    lhs = push_forward(m, ComposedMap(F, G), x)
    rhs = push_forward(lambda y: push_forward(m, G, y), F, x)
    assert_allclose(lhs, rhs, rtol=1e-10)


def test_pull_back_inverts_push_forward():
    F = radial_blowup_map(0.2, 1.0, 2.0)
    m = _spd(4)
    y = _dirs(6) * np.array([0.05, 0.1, 0.3, 0.9, 1.4, 1.9])[:, None]
    back = pull_back_tensor(lambda x: push_forward(m, F, x), F, y)
    assert_allclose(back, np.broadcast_to(m, back.shape), rtol=1e-12)


def test_pull_back_field_examples():
    E = lambda x: np.broadcast_to(np.array([1.0, -2.0, 0.5]), x.shape)  # noqa: E731
    y = _dirs(3) * 0.3
    assert_allclose(pull_back_field(E, IdentityMap(), y), E(y))
    assert_allclose(pull_back_field(E, DilationMap(0.25), y), 4 * E(y))


def test_pull_back_maxwell_first_order():
    sol = solve_layered_sphere(LayeredSphereSpec.vacuum(2.0, 1.0), VshExpansion.single(2, 2, 1, "a", radius=2.0))
    F = radial_blowup_map(0.2, 1.0, 2.0)
    y = _dirs(20, 1) * np.random.default_rng(2).uniform(0.3, 1.8, 20)[:, None]
    res = [pullback_maxwell_residual(lambda x: sol.fields(x)[0], lambda x: sol.fields(x)[1], F, 1.0, y, h)
           for h in (1e-2, 5e-3, 2.5e-3)]
    rates = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert_allclose(rates, 1.0, atol=0.1)


def test_physical_medium_layout():
    rho = 0.1
    mf = build_physical_medium(rho, core=Core(10.0, 1.0, 1.0))
    x = _dirs(6) * 1.5
    eps, mu, sigma = mf.evaluate(x)
    assert np.all(sigma == 0)
    eps, mu, sigma = mf.evaluate(_dirs(6) * 0.75)
    assert_allclose(sigma, np.broadcast_to(np.eye(3) / rho, sigma.shape), rtol=1e-13)
    assert_allclose(eps, np.broadcast_to(rho * np.eye(3), eps.shape), rtol=1e-13)


def test_physical_medium_near_identity_map():
    rho = 0.999
    mf = build_physical_medium(rho, gamma0=0.0)
    x = _dirs(10) * np.linspace(0.1, 1.95, 10)[:, None]
    x = x[np.abs(np.linalg.norm(x, axis=1) - 1.0) > 1e-3]
    eps, mu, _ = mf.evaluate(x)
    assert np.abs(eps - np.eye(3)).max() < 5 * (1 - rho)
    assert np.abs(mu - np.eye(3)).max() < 5 * (1 - rho)


def test_virtual_medium_layout():
    rho = 0.1
    mf = build_virtual_medium(rho)
    eps, mu, sigma = mf.evaluate(_dirs(4) * 1.0)
    assert_allclose(eps, np.broadcast_to(np.eye(3), eps.shape))
    assert np.all(sigma == 0)
    layer = _dirs(4) * 0.075
    eps, mu, sigma = mf.evaluate(layer)
    assert_allclose(mu, np.broadcast_to(np.eye(3), mu.shape))
    assert_allclose(sigma, np.broadcast_to(100 * np.eye(3), sigma.shape), rtol=1e-13)
    _, mu, _ = build_virtual_medium(rho, paper_mu_scaling=True).evaluate(layer)
    assert_allclose(mu, np.broadcast_to(0.01 * np.eye(3), mu.shape), rtol=1e-13)


def test_interface_evaluation_raises():
    mf = build_virtual_medium(0.2)
    with pytest.raises(InterfaceError):
        mf.evaluate(np.array([[0.2, 0.0, 0.0]]))


def test_core_validation_reports_point():
    with pytest.raises(MediumValidationError) as exc:
        build_virtual_medium(0.1, core=Core(-1.0))
    assert exc.value.point is not None


def test_regularity_reports():
    rep = check_regularity(build_virtual_medium(0.5, gamma0=0.0), _dirs(10) * 1.5)
    assert rep.eps == (1.0, 1.0) and rep.mu == (1.0, 1.0) and rep.sigma == (0.0, 0.0)
    assert rep.ok
    lows = []
    for rho in (0.2, 0.1, 0.05):
        rep = check_regularity(build_physical_medium(rho), _dirs(10) * 1.0001)
        lows.append(rep.eps[0])
    assert lows[0] > lows[1] > lows[2]
    rep = check_regularity(build_physical_medium(0.1), _dirs(5) * 0.7)
    assert_allclose(rep.sigma, (10.0, 10.0), rtol=1e-12)


def test_layered_spec_from_virtual_medium():
    spec = layered_spec(build_virtual_medium(0.2, core=Core(10.0, 2.0, 1.0)), 1.0)
    assert_allclose(spec.radii, (0.1, 0.2, 2.0))
    assert spec.sigma[1] == pytest.approx(25.0)
    with pytest.raises(MediumValidationError):
        layered_spec(build_physical_medium(0.2), 1.0)


def test_medium_config_parsing():
    cfg = medium_from_config({"rho": "0.05", "eps_a": "1 2 3 0 0 0", "paper_mu_scaling": "yes"})
    assert cfg.rho == 0.05 and cfg.paper_mu_scaling
    assert isinstance(cfg.core().eps, SymTensor3)
    with pytest.raises(MediumValidationError):
        medium_from_config({"paper_mu_scaling": "maybe"})
    with pytest.raises(MediumValidationError):
        medium_from_config({"eps_a": "1 2"})
