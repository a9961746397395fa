"""
Radiating and annulus solutions in vacuum from VSH trace data.

These extend the layered-ball oracle to the two geometries used by the
boundary-integral solvers: the exterior of a sphere (radiating fields, far
fields, PEC scattering) and a spherical shell with tangential-E data on
both spheres.  Conventions are those of :mod:`nearcloak.vsh_mie.layered`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import sphere_quadrature
from .harmonics import VshExpansion, angular_gradient, mode_list, vsh_analyze
from .layered import LayeredSphereSpec, ModeCoefficients, _state, mode_fields

__all__ = [
    "RadiatingSolution",
    "radiating_solution",
    "AnnulusSolution",
    "annulus_solution",
    "plane_wave",
    "plane_wave_trace",
    "pec_sphere_scattering",
]


def _vacuum(omega):
    return omega, omega / (1j * omega)  # k, eta with eps = mu = 1


@dataclass
class _ModeField:
    """One (n, m, pol) vacuum mode ``c_j j_n + c_y y_n`` with unit amplitude."""

    n: int
    m: int
    pol: str
    cj: complex
    cy: complex


class _VacuumModes:
    """Sum of vacuum modes; shared evaluation for radiating and annulus fields."""

    def __init__(self, omega, n_max, modes):
        self.omega = omega
        self.n_max = n_max
        self.modes = modes
        self._spec = LayeredSphereSpec.vacuum(1.0, omega)

    def fields(self, points):
        """``(E, H)`` at points (valid wherever the representation holds)."""
        p = np.asarray(points, dtype=float)
        E = np.zeros(p.shape, complex)
        H = np.zeros(p.shape, complex)
        for md in self.modes:
            mc = ModeCoefficients(md.n, md.pol, np.array([[md.cj, md.cy]]), 0j)
            e, h = mode_fields(self._spec, mc, md.m, p)
            E += e
            H += h
        return E, H

    def traces_at(self, r):
        """``(nu x E, nu x H)`` on the sphere of radius ``r``."""
        k, eta = _vacuum(self.omega)
        index = {nm: j for j, nm in enumerate(mode_list(self.n_max))}
        e_out = VshExpansion.zeros(self.n_max, r)
        h_out = VshExpansion.zeros(self.n_max, r)
        for md in self.modes:
            s = md.cj * _state(md.n, md.pol, k, eta, r, "j") + md.cy * _state(md.n, md.pol, k, eta, r, "y")
            j = index[(md.n, md.m)]
            if md.pol == "TE":
                e_out.a[j] += s[0] * r
                h_out.b[j] += s[1] * r
            else:
                e_out.b[j] += s[0] * r
                h_out.a[j] += s[1] * r
        return e_out, h_out


class RadiatingSolution(_VacuumModes):
    """Outgoing vacuum field outside a sphere of radius ``radius``."""

    def __init__(self, omega, n_max, modes, radius):
        super().__init__(omega, n_max, modes)
        self.radius = radius

    def far_field(self, directions):
        """``E_inf`` with ``E(x) ~ exp(i w r)/r E_inf(x_hat)``."""
        d = np.asarray(directions, dtype=float)
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        k = self.omega
        out = np.zeros(d.shape, complex)
        for md in self.modes:
            # radiating modes have cy = i cj (h1 = j + i y)
            c = md.cj
            _, G = angular_gradient(md.n, md.m, d)
            if md.pol == "TE":
                out += c * (-1j) ** (md.n + 1) / k * np.cross(G, d)
            else:
                out += c * (-1j) ** md.n / k * G
        return out


def radiating_solution(trace: VshExpansion, omega: float) -> RadiatingSolution:
    """Radiating vacuum field with ``nu x E = trace`` on the sphere ``|x| = trace.radius``."""
    if omega <= 0:
        raise ValueError("frequency must be positive")
    k, eta = _vacuum(omega)
    R = trace.radius
    modes = []
    for i, (n, m) in enumerate(mode_list(trace.n_max)):
        for pol, coef in (("TE", trace.a[i]), ("TM", trace.b[i])):
            if coef == 0:
                continue
            e = _state(n, pol, k, eta, R, "h1")[0] * R
            c = coef / e
            modes.append(_ModeField(n, m, pol, c, 1j * c))
    return RadiatingSolution(omega, trace.n_max, modes, R)


class AnnulusSolution(_VacuumModes):
    """Vacuum field in ``r_in < |x| < r_out``."""

    def __init__(self, omega, n_max, modes, r_in, r_out):
        super().__init__(omega, n_max, modes)
        self.r_in = r_in
        self.r_out = r_out


def annulus_solution(outer: VshExpansion, inner: VshExpansion | None, omega: float,
                     r_in: float) -> AnnulusSolution:
    """Vacuum shell field with ``nu x E`` prescribed on both spheres.

    ``inner=None`` is a perfectly conducting inner sphere (zero data).
    Each mode solves a column-scaled 2x2 system in ``(j_n, y_n)``.
    """
    k, eta = _vacuum(omega)
    r_out = outer.radius
    if not 0 < r_in < r_out:
        raise ValueError("need 0 < r_in < r_out")
    if inner is not None:
        if inner.n_max != outer.n_max:
            raise ValueError("inner and outer data must share n_max")
        if not np.isclose(inner.radius, r_in):
            raise ValueError("inner data radius does not match r_in")
    modes = []
    for i, (n, m) in enumerate(mode_list(outer.n_max)):
        for pol, fam in (("TE", "a"), ("TM", "b")):
            g_out = getattr(outer, fam)[i]
            g_in = 0 if inner is None else getattr(inner, fam)[i]
            if g_out == 0 and g_in == 0:
                continue
            A = np.array([
                [_state(n, pol, k, eta, r_in, kind)[0] * r_in for kind in ("j", "y")],
                [_state(n, pol, k, eta, r_out, kind)[0] * r_out for kind in ("j", "y")],
            ])
            s = np.abs(A).max(axis=0)
            c = np.linalg.solve(A / s, np.array([g_in, g_out], complex)) / s
            modes.append(_ModeField(n, m, pol, c[0], c[1]))
    return AnnulusSolution(omega, outer.n_max, modes, r_in, r_out)


def plane_wave(direction, polarization, omega):
    """Evaluator ``x -> (E, H)`` of ``E = p exp(i w d.x)``, ``H = d x E``."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    p = np.asarray(polarization, dtype=complex)
    if abs(np.dot(d, p)) > 1e-12:
        raise ValueError("polarisation must be orthogonal to the direction")

    def ev(x):
        ph = np.exp(1j * omega * (np.asarray(x) @ d))[:, None]
        E = ph * p
        return E, np.cross(d, E)

    return ev


def plane_wave_trace(direction, polarization, omega, radius, n_max) -> VshExpansion:
    """VSH coefficients of ``nu x E_inc`` on a sphere, by product-rule projection.

    The rule integrates exactly up to degree ``2 n_theta - 1``; with
    ``n_theta = n_max + w R + 20`` aliasing from the neglected degrees is
    below double precision for moderate ``w R``.
    """
    n_theta = int(n_max + omega * radius + 20)
    q = sphere_quadrature(radius, n_theta)
    E, _ = plane_wave(direction, polarization, omega)(q.quad_nodes)
    return vsh_analyze(np.cross(q.normals, E), q.quad_nodes, q.quad_weights, n_max, radius)


def pec_sphere_scattering(direction, polarization, omega, radius=1.0, n_max=None) -> RadiatingSolution:
    """Mie series for the field scattered by a perfectly conducting sphere."""
    if n_max is None:
        n_max = int(omega * radius + 4 * (omega * radius) ** (1 / 3) + 12)
    inc = plane_wave_trace(direction, polarization, omega, radius, n_max)
    return radiating_solution(inc * -1.0, omega)

