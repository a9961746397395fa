"""
Trace-space norms, the boundary duality pairing and energy checks.

The weighted norm is a spectral stand-in for the tangential trace space
``TH^{-1/2}_Div`` on a sphere: gradient-type VSH coefficients carry weight
``(1 + n(n+1))^{1/2}`` (their surface divergence is ``-n(n+1) Y``) and
rotated coefficients, which are divergence free, carry
``(1 + n(n+1))^{-1/2}``.  Norms are taken directly on coefficients, so the
single mode ``a_{1,0} = 1`` has norm ``3^{1/4}``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import sphere_product_grid
from .vsh_mie.harmonics import VshExpansion, mode_degrees, mode_list, n_modes
from .vsh_mie.layered import AdmittanceMatrix, LayeredSolution

__all__ = [
    "WeightedNorm",
    "thdiv_norm",
    "th_norm",
    "duality_pairing",
    "duality_pairing_vsh",
    "admittance_diff_norm",
    "EnergyBalance",
    "energy_identity",
    "energy_identity_residual",
    "layer_energy",
    "EPS_FLOOR",
]

EPS_FLOOR = 1e-14


@dataclass(frozen=True)
class WeightedNorm:
    """Diagonal weights of the discrete ``TH^{-1/2}_Div`` norm up to degree ``n_max``."""

    n_max: int

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")

    @property
    def w_a(self) -> np.ndarray:
        n = np.arange(1, self.n_max + 1)
        return np.sqrt(1.0 + n * (n + 1))

    @property
    def w_b(self) -> np.ndarray:
        return 1.0 / self.w_a

    @property
    def diagonal(self) -> np.ndarray:
        """Weight of every slot of a full ``[a, b]`` coefficient vector."""
        deg = mode_degrees(self.n_max)
        k = n_modes(self.n_max)
        return np.concatenate([self.w_a[deg[:k] - 1], self.w_b[deg[k:] - 1]])


def _padded(e: VshExpansion, n_max: int) -> np.ndarray:
    if e.n_max > n_max:
        raise ValueError(f"expansion degree {e.n_max} exceeds norm degree {n_max}")
    k, k_e = n_modes(n_max), n_modes(e.n_max)
    out = np.zeros(2 * k, complex)
    out[:k_e] = e.a
    out[k:k + k_e] = e.b
    return out


def thdiv_norm(e: VshExpansion, w: WeightedNorm) -> float:
    """``sqrt(sum w_a |a_nm|^2 + w_b |b_nm|^2)``."""
    v = _padded(e, w.n_max)
    return float(np.sqrt(np.sum(w.diagonal * np.abs(v) ** 2)))


def th_norm(e: VshExpansion) -> float:
    """Discrete ``TH^{-1/2}`` norm (no divergence control): both families weighted by ``w_b``."""
    w = WeightedNorm(e.n_max)
    wb = w.w_b[mode_degrees(e.n_max) - 1]
    return float(np.sqrt(np.sum(wb * np.abs(e.vector) ** 2)))


def duality_pairing(j, m, mesh) -> complex:
    """``B(j, m) = int j . (m x nu) ds`` by the mesh quadrature.

    ``mesh`` is anything with ``quad_nodes``, ``quad_weights`` and ``normals``
    (a :class:`~nearcloak.geometry.SurfaceMesh` or ``SphereQuadrature``);
    ``j`` and ``m`` are nodal values of shape ``(n_nodes, 3)``.
    """
    j = np.asarray(j)
    m = np.asarray(m)
    q = len(mesh.quad_weights)
    if j.shape != (q, 3) or m.shape != (q, 3):
        raise ValueError(f"traces must have shape ({q}, 3) to match the mesh")
    return complex(np.sum(mesh.quad_weights * np.einsum("qi,qi->q", j, np.cross(m, mesh.normals))))


def duality_pairing_vsh(j: VshExpansion, m: VshExpansion) -> complex:
    """Closed form of ``B`` for VSH expansions on a common sphere.

    The pairing is bilinear, so ``Y_n^m`` pairs with ``Y_n^{-m}`` through
    ``conj(Y_n^m) = (-1)^m Y_n^{-m}``; since ``(grad_S Y x nu) x nu = -grad_S Y``,
    ``B(j, m) = sum n(n+1) (-1)^m (b_j[n,m] a_m[n,-m] - a_j[n,m] b_m[n,-m])``.
    """
    if j.n_max != m.n_max:
        raise ValueError("expansions must share n_max")
    modes = mode_list(j.n_max)
    index = {nm: i for i, nm in enumerate(modes)}
    flip = np.array([index[(n, -mm)] for n, mm in modes])
    sign = np.array([(-1.0) ** (mm % 2) * n * (n + 1) for n, mm in modes])
    return complex(np.sum(sign * (j.b * m.a[flip] - j.a * m.b[flip])))


def admittance_diff_norm(la: AdmittanceMatrix, lb: AdmittanceMatrix, w: WeightedNorm | None = None) -> float:
    """Largest singular value of ``W^{1/2} (la - lb) W^{-1/2}``.

    With ``w=None`` the plain coefficient (l2) operator norm is returned.
    """
    if la.matrix.shape != lb.matrix.shape:
        raise ValueError("admittance matrices have different sizes")
    d = la.matrix - lb.matrix
    if w is not None:
        if w.n_max != la.n_max:
            raise ValueError("weight degree does not match the matrices")
        s = np.sqrt(w.diagonal)
        d = s[:, None] * d / s[None, :]
    if not np.any(d):
        return 0.0
    return float(np.linalg.norm(d, 2))


@dataclass
class EnergyBalance:
    """Both sides of the dissipation identity and their mismatch.

    ``lhs`` is ``int sigma |E|^2`` over the lossy layers, ``rhs`` is
    ``Re int (nu x conj E) . [nu x (nu x H)] ds`` on the outer sphere.
    ``flux_scale`` is ``int |nu x E| |nu x H| ds``, the size of the terms
    that cancel in ``rhs`` for lossless media.  ``refinement_change`` is the
    relative change of ``lhs`` when the radial rule is halved;
    ``under_resolved`` flags changes above 10%.
    """

    lhs: float
    rhs: float
    residual: float
    flux_scale: float
    refinement_change: float
    under_resolved: bool


def _volume_integral(sol: LayeredSolution, weight_of_layer, n_radial, n_theta):
    """``sum_i weight_i int_{layer i} |E|^2`` by radial Gauss x product rule."""
    spec = sol.spec
    dirs, wdir = sphere_product_grid(n_theta)
    x, wx = np.polynomial.legendre.leggauss(n_radial)
    total = 0.0
    r_lo = 0.0
    for i, r_hi in enumerate(spec.radii):
        wt = weight_of_layer(i)
        if wt != 0 and not (spec.pec_core and i == 0):
            r = 0.5 * (r_hi - r_lo) * (x + 1) + r_lo
            wr = 0.5 * (r_hi - r_lo) * wx * r**2
            pts = (r[:, None, None] * dirs[None]).reshape(-1, 3)
            E, _ = sol.fields(pts)
            e2 = np.sum(np.abs(E) ** 2, axis=1).reshape(n_radial, -1)
            total += wt * float(wr @ e2 @ wdir)
        r_lo = r_hi
    return total


def layer_energy(sol: LayeredSolution, layer: int, n_radial: int = 32) -> float:
    """``int |E|^2`` over one spherical layer."""
    n_theta = sol.boundary.n_max + 3
    return _volume_integral(sol, lambda i: 1.0 if i == layer else 0.0, n_radial, n_theta)


def _boundary_flux(sol: LayeredSolution, n_theta: int) -> float:
    R = sol.spec.outer_radius
    dirs, wdir = sphere_product_grid(n_theta)
    pts = R * dirs
    E, H = sol.fields(pts * (1 - 1e-14))
    nu = dirs
    nE = np.cross(nu, E)
    nnH = np.cross(nu, np.cross(nu, H))
    w = R**2 * wdir
    flux = float(np.real(np.sum(w * np.einsum("qi,qi->q", nE.conj(), nnH))))
    scale = float(np.sum(w * np.linalg.norm(nE, axis=1) * np.linalg.norm(nnH, axis=1)))
    return flux, scale


def energy_identity(sol: LayeredSolution, n_radial: int = 32) -> EnergyBalance:
    """Evaluate the dissipation identity for an oracle solution.

    Both integrals use product angular rules exact for the band limit of
    the boundary data; the radial Gauss rule is checked by halving.
    """
    sig = sol.spec.sigma
    n_theta = sol.boundary.n_max + 3
    lhs = _volume_integral(sol, lambda i: float(sig[i]), n_radial, n_theta)
    coarse = _volume_integral(sol, lambda i: float(sig[i]), max(n_radial // 2, 2), n_theta)
    rhs, flux_scale = _boundary_flux(sol, n_theta)
    scale = max(abs(lhs), abs(rhs), EPS_FLOOR)
    change = abs(lhs - coarse) / max(abs(lhs), EPS_FLOOR)
    bad = change > 0.1
    if bad:
        warnings.warn(f"volume quadrature under-resolved (relative change {change:.2e})", stacklevel=2)
    return EnergyBalance(lhs, rhs, abs(lhs - rhs) / scale, flux_scale, change, bool(bad))


def energy_identity_residual(sol: LayeredSolution, n_radial: int = 32) -> float:
    """``|lhs - rhs| / max(|lhs|, |rhs|, 1e-14)`` of :func:`energy_identity`."""
    return energy_identity(sol, n_radial).residual
