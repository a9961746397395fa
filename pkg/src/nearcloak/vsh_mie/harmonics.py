"""
Scalar and tangential vector spherical harmonics.

Tangential fields on a sphere of radius ``R`` are expanded as

    u = sum_{n,m} a_nm grad_S Y_n^m + b_nm (grad_S Y_n^m x nu)

with orthonormal complex ``Y_n^m`` (scipy convention, Condon-Shortley phase)
and ``grad_S = grad_Omega / R``.  Both families have
``int |grad_S Y|^2 ds = n(n+1)`` independently of ``R`` and are mutually
orthogonal, so analysis is a weighted quadrature projection.

Coefficient vectors are laid out as ``[a_(1,-1), a_(1,0), ..., a_(N,N),
b_(1,-1), ..., b_(N,N)]`` -- length ``2 N (N + 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import sph_harm_y

__all__ = [
    "mode_list",
    "n_modes",
    "mode_degrees",
    "cart_to_sph",
    "sph_harm",
    "angular_gradient",
    "VshExpansion",
    "tangential_basis",
    "vsh_synthesize",
    "vsh_analyze",
]

_POLE_EPS = 1e-9


def n_modes(n_max: int) -> int:
    """Number of (n, m) pairs with 1 <= n <= n_max."""
    return n_max * (n_max + 2)


def mode_list(n_max: int) -> list[tuple[int, int]]:
    return [(n, m) for n in range(1, n_max + 1) for m in range(-n, n + 1)]


def mode_degrees(n_max: int) -> np.ndarray:
    """Degree ``n`` of every slot in a full ``[a, b]`` coefficient vector."""
    deg = np.array([n for n, _ in mode_list(n_max)])
    return np.concatenate([deg, deg])


def cart_to_sph(points):
    """Return ``(r, theta, phi)`` with theta in [0, pi], phi in [0, 2 pi)."""
    p = np.asarray(points, dtype=float)
    r = np.linalg.norm(p, axis=-1)
    theta = np.arccos(np.clip(p[..., 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
    phi = np.mod(np.arctan2(p[..., 1], p[..., 0]), 2 * np.pi)
    return r, theta, phi


def _frames(theta, phi):
    st, ct, sp, cp = np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)
    rhat = np.stack([st * cp, st * sp, ct], axis=-1)
    that = np.stack([ct * cp, ct * sp, -st], axis=-1)
    phat = np.stack([-sp, cp, np.zeros_like(phi)], axis=-1)
    return rhat, that, phat


def sph_harm(n: int, m: int, points) -> np.ndarray:
    """Orthonormal ``Y_n^m`` at the directions of ``points``."""
    _, theta, phi = cart_to_sph(points)
    return sph_harm_y(n, m, theta, phi)


def angular_gradient(n: int, m: int, points):
    """``(Y, grad_Omega Y)`` at the directions of ``points``.

    ``grad_Omega`` is the gradient on the unit sphere, returned as Cartesian
    3-vectors.  Points within 1e-9 rad of the z-axis are nudged off it.
    """
    _, theta, phi = cart_to_sph(points)
    theta = np.clip(theta, _POLE_EPS, np.pi - _POLE_EPS)
    y, dy = sph_harm_y(n, m, theta, phi, diff_n=1)
    _, that, phat = _frames(theta, phi)
    grad = dy[..., 0, None] * that + (dy[..., 1] / np.sin(theta))[..., None] * phat
    return y, grad


@dataclass
class VshExpansion:
    """Tangential field on a sphere of radius ``radius`` in VSH coefficients."""

    n_max: int
    a: np.ndarray
    b: np.ndarray
    radius: float = 1.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=complex)
        self.b = np.asarray(self.b, dtype=complex)
        k = n_modes(self.n_max)
        if self.a.shape != (k,) or self.b.shape != (k,):
            raise ValueError(f"expected {k} coefficients per family for n_max={self.n_max}")

    @classmethod
    def zeros(cls, n_max, radius=1.0):
        k = n_modes(n_max)
        return cls(n_max, np.zeros(k, complex), np.zeros(k, complex), radius)

    @classmethod
    def from_vector(cls, vec, n_max, radius=1.0):
        k = n_modes(n_max)
        vec = np.asarray(vec)
        return cls(n_max, vec[:k], vec[k:], radius)

    @classmethod
    def single(cls, n_max, n, m, family="a", value=1.0, radius=1.0):
        e = cls.zeros(n_max, radius)
        idx = mode_list(n_max).index((n, m))
        getattr(e, family)[idx] = value
        return e

    @classmethod
    def random(cls, n_max, rng, radius=1.0, band=None):
        """Random coefficients; ``band`` keeps only degrees ``<= band``."""
        k = n_modes(n_max)
        v = rng.standard_normal(2 * k) + 1j * rng.standard_normal(2 * k)
        if band is not None:
            v[mode_degrees(n_max) > band] = 0
        return cls.from_vector(v, n_max, radius)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.a, self.b])

    def __mul__(self, s):
        return VshExpansion(self.n_max, self.a * s, self.b * s, self.radius)

    __rmul__ = __mul__

    def __add__(self, other):
        return VshExpansion(self.n_max, self.a + other.a, self.b + other.b, self.radius)

    def __sub__(self, other):
        return VshExpansion(self.n_max, self.a - other.a, self.b - other.b, self.radius)

    def synthesize(self, points) -> np.ndarray:
        return vsh_synthesize(self, points)

    def surface_divergence(self, points) -> np.ndarray:
        """``Div u = -sum n(n+1) a_nm Y_n^m / R^2`` (rotated part is divergence free)."""
        out = np.zeros(len(points), complex)
        for i, (n, m) in enumerate(mode_list(self.n_max)):
            if self.a[i] != 0:
                out += -n * (n + 1) * self.a[i] * sph_harm(n, m, points) / self.radius**2
        return out


def tangential_basis(n, m, points, radius=1.0):
    """``(grad_S Y, grad_S Y x nu)`` at points, using radial unit normals."""
    p = np.asarray(points, dtype=float)
    nu = p / np.linalg.norm(p, axis=-1, keepdims=True)
    _, g = angular_gradient(n, m, p)
    g = g / radius
    return g, np.cross(g, nu)


def vsh_synthesize(exp: VshExpansion, points) -> np.ndarray:
    """Evaluate the tangential field at points on (or radially projected to) the sphere."""
    p = np.asarray(points, dtype=float)
    out = np.zeros(p.shape, complex)
    for i, (n, m) in enumerate(mode_list(exp.n_max)):
        if exp.a[i] == 0 and exp.b[i] == 0:
            continue
        g, rot = tangential_basis(n, m, p, exp.radius)
        out += exp.a[i] * g + exp.b[i] * rot
    return out


def vsh_analyze(values, points, weights, n_max, radius=None, tangential_tol=1e-10) -> VshExpansion:
    """Project a tangential trace onto the VSH families by quadrature.

    Parameters
    ----------
    values : (q, 3) complex field at the quadrature points
    points : (q, 3) points on an origin-centred sphere
    weights : (q,) surface quadrature weights
    n_max : truncation degree
    radius : sphere radius (default: mean of ``|points|``)

    Raises
    ------
    ValueError
        If the field has a normal component above ``tangential_tol`` relative
        to its largest magnitude.
    """
    p = np.asarray(points, dtype=float)
    v = np.asarray(values, dtype=complex)
    w = np.asarray(weights, dtype=float)
    R = float(np.mean(np.linalg.norm(p, axis=1))) if radius is None else radius
    nu = p / np.linalg.norm(p, axis=1, keepdims=True)
    scale = max(np.abs(v).max(), 1e-300)
    if np.abs(np.einsum("qi,qi->q", v, nu)).max() > tangential_tol * scale:
        raise ValueError("trace is not tangential to the sphere")
    k = n_modes(n_max)
    a = np.zeros(k, complex)
    b = np.zeros(k, complex)
    wv = w[:, None] * v
    for i, (n, m) in enumerate(mode_list(n_max)):
        g, rot = tangential_basis(n, m, p, R)
        nn = n * (n + 1)
        a[i] = np.sum(wv * g.conj()) / nn
        b[i] = np.sum(wv * rot.conj()) / nn
    return VshExpansion(n_max, a, b, R)
