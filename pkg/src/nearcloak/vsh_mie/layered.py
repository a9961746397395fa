"""
Per-mode solution of Maxwell's equations in concentric isotropic layers.

Conventions: ``curl E = i w mu H`` and ``curl H = -i w (eps + i sigma/w) E``.
In a homogeneous layer with ``k = w sqrt(mu (eps + i sigma / w))``
(``Im k >= 0``) and ``eta = k / (i w mu)`` every (n, m) mode splits into

* TE: ``E = z(kr) (grad_Omega Y x r^)``, ``H = eta N_z``
* TM: ``E = N_z``, ``H = eta z(kr) (grad_Omega Y x r^)``

where ``N_z = r^ n(n+1) z/(kr) Y + [(kr z)'/(kr)] grad_Omega Y`` and ``z`` is
a combination of ``j_n`` and ``y_n``.  Each polarisation carries a
two-component state ``(e, h)`` -- the coefficients of the tangential traces
``nu x E`` and ``nu x H`` -- that is continuous across interfaces:

* TE: ``e = z``, ``h = -eta psi'(kr)/(kr)``  (e on grad_Omega Y, h on the rotated harmonic)
* TM: ``e = -psi'(kr)/(kr)``, ``h = eta z``  (e on the rotated harmonic, h on grad_Omega Y)

with ``psi(x) = x z(x)``.  The state is carried outward layer by layer with
column-scaled 2x2 solves, so the huge dynamic range of ``j_n``/``y_n`` at
small arguments never enters a matrix.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .harmonics import VshExpansion, angular_gradient, mode_list, n_modes
from .special import riccati_derivative, spherical_bessel

__all__ = [
    "ResonanceError",
    "LayeredSphereSpec",
    "ModeCoefficients",
    "LayeredSolution",
    "AdmittanceMatrix",
    "wavenumber",
    "mode_fields",
    "modal_admittance",
    "solve_layered_sphere",
    "admittance_sphere",
    "admittance_matrix_from_modes",
    "EigenCheck",
    "is_em_eigenvalue",
    "write_modal_csv",
]

POLS = ("TE", "TM")


class ResonanceError(ArithmeticError):
    """A modal system is singular to working precision."""

    def __init__(self, msg, n=None, pol=None):
        super().__init__(msg)
        self.n = n
        self.pol = pol


def wavenumber(eps, mu, sigma, omega):
    """Complex wavenumber with ``Im k >= 0`` (decay into lossy media)."""
    k = np.sqrt(complex(omega**2 * mu * (eps + 1j * sigma / omega)))
    return k if k.imag >= 0 else -k


@dataclass(frozen=True)
class LayeredSphereSpec:
    """Concentric isotropic layers filling a ball of radius ``radii[-1]``.

    ``radii[i]`` is the outer radius of layer ``i``.  With ``pec_core`` the
    innermost entry is a perfect conductor (tangential E vanishes on
    ``radii[0]``) and its material values are ignored.
    """

    radii: tuple
    eps: tuple
    mu: tuple
    sigma: tuple
    omega: float
    pec_core: bool = False

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        if np.any(np.diff(r) <= 0) or r[0] <= 0:
            raise ValueError("layer radii must be positive and strictly increasing")
        if not (len(self.eps) == len(self.mu) == len(self.sigma) == len(r)):
            raise ValueError("one (eps, mu, sigma) triple per layer is required")
        lo = 1 if self.pec_core else 0
        if min(self.eps[lo:]) <= 0 or min(self.mu[lo:]) <= 0 or min(self.sigma[lo:]) < 0:
            raise ValueError("need eps > 0, mu > 0, sigma >= 0 in every layer")
        if self.omega <= 0:
            raise ValueError("frequency must be positive")

    @classmethod
    def vacuum(cls, radius, omega):
        return cls((radius,), (1.0,), (1.0,), (0.0,), omega)

    @property
    def outer_radius(self) -> float:
        return float(self.radii[-1])

    @property
    def n_layers(self) -> int:
        return len(self.radii)

    def layer_k(self, i):
        return wavenumber(self.eps[i], self.mu[i], self.sigma[i], self.omega)

    def layer_eta(self, i):
        return self.layer_k(i) / (1j * self.omega * self.mu[i])

    def layer_of(self, r):
        """Layer index for radii ``r`` (interfaces belong to the inner layer)."""
        return np.searchsorted(np.asarray(self.radii), r, side="left").clip(0, self.n_layers - 1)


def _state(n, pol, k, eta, r, kind):
    """Trace state ``(e, h)`` of the single basis function ``kind`` at radius r."""
    x = k * r
    z = spherical_bessel(n, x, kind)
    dpsi = riccati_derivative(n, x, kind) / x
    if pol == "TE":
        return np.array([z, -eta * dpsi])
    return np.array([-dpsi, eta * z])


@dataclass
class ModeCoefficients:
    """Coefficients ``(c_j, c_y)`` per layer for one (n, polarisation).

    Normalised so that the outer trace coefficient ``e(R) = 1``;
    ``admittance`` is then ``h(R)``.
    """

    n: int
    pol: str
    coeffs: np.ndarray  # (n_layers, 2) complex
    admittance: complex


def modal_admittance(spec: LayeredSphereSpec, n: int, pol: str, tol: float = 1e-13) -> ModeCoefficients:
    """Solve one (n, polarisation) and return layer coefficients and ``h/e`` on the boundary."""
    L = spec.n_layers
    coeffs = np.zeros((L, 2), complex)
    if spec.pec_core:
        state = np.array([0.0, 1.0], complex)
        start = 1
        r_in = spec.radii[0]
    else:
        k0, eta0 = spec.layer_k(0), spec.layer_eta(0)
        s = _state(n, pol, k0, eta0, spec.radii[0], "j")
        nrm = np.linalg.norm(s)
        coeffs[0, 0] = 1.0 / nrm
        state = s / nrm
        start = 1
        r_in = spec.radii[0]
    amp = 1.0
    for i in range(start, L):
        k, eta = spec.layer_k(i), spec.layer_eta(i)
        r_out = spec.radii[i]
        bj = _state(n, pol, k, eta, r_in, "j")
        by = _state(n, pol, k, eta, r_in, "y")
        sj, sy = np.linalg.norm(bj), np.linalg.norm(by)
        c = np.linalg.solve(np.column_stack([bj / sj, by / sy]), state)
        cj, cy = c[0] / sj, c[1] / sy
        coeffs[i] = amp * np.array([cj, cy])
        s_out = cj * _state(n, pol, k, eta, r_out, "j") + cy * _state(n, pol, k, eta, r_out, "y")
        f = np.linalg.norm(s_out)
        state = s_out / f
        amp *= f
        r_in = r_out
    # the true boundary state is amp * state
    if abs(state[0]) < tol:
        raise ResonanceError(
            f"tangential-E trace vanishes for mode n={n} {pol} (|e|={abs(state[0]):.2e}); "
            "frequency is at or near an eigenvalue",
            n,
            pol,
        )
    e_R = amp * state[0]
    coeffs /= e_R
    return ModeCoefficients(n, pol, coeffs, complex(state[1] / state[0]))


def mode_fields(spec, mc: ModeCoefficients, m, points):
    """E and H of one normalised mode (unit ``e(R)``) at points, shape (q, 3)."""
    p = np.asarray(points, dtype=float)
    r = np.linalg.norm(p, axis=1)
    r_safe = np.maximum(r, 1e-12 * spec.outer_radius)
    rhat = p / r_safe[:, None]
    Y, G = angular_gradient(mc.n, m, p)
    Rt = np.cross(G, rhat)
    nn = mc.n * (mc.n + 1)
    E = np.zeros(p.shape, complex)
    H = np.zeros(p.shape, complex)
    lay = spec.layer_of(r)
    for i in np.unique(lay):
        sel = lay == i
        if spec.pec_core and i == 0:
            continue
        k, eta = spec.layer_k(i), spec.layer_eta(i)
        x = k * r_safe[sel]
        z = np.zeros(sel.sum(), complex)
        dpsi = np.zeros(sel.sum(), complex)
        for c, kind in zip(mc.coeffs[i], ("j", "y")):
            if c == 0:
                continue
            z += c * spherical_bessel(mc.n, x, kind)
            dpsi += c * riccati_derivative(mc.n, x, kind)
        M = z[:, None] * Rt[sel]
        N = (nn * z / x * Y[sel])[:, None] * rhat[sel] + (dpsi / x)[:, None] * G[sel]
        if mc.pol == "TE":
            E[sel], H[sel] = M, eta * N
        else:
            E[sel], H[sel] = N, eta * M
    return E, H


@dataclass
class LayeredSolution:
    """Fields of the layered ball for given tangential boundary data."""

    spec: LayeredSphereSpec
    boundary: VshExpansion
    modes: dict = field(default_factory=dict)  # (n, pol) -> ModeCoefficients

    def amplitudes(self):
        """Yield ``(n, m, pol, amplitude, ModeCoefficients)`` for nonzero boundary modes."""
        R = self.spec.outer_radius
        for i, (n, m) in enumerate(mode_list(self.boundary.n_max)):
            for pol, coef in (("TE", self.boundary.a[i]), ("TM", self.boundary.b[i])):
                if coef != 0:
                    yield n, m, pol, coef / R, self.modes[(n, pol)]

    def fields(self, points):
        """Return ``(E, H)`` at points inside the ball."""
        p = np.asarray(points, dtype=float)
        E = np.zeros(p.shape, complex)
        H = np.zeros(p.shape, complex)
        for n, m, pol, amp, mc in self.amplitudes():
            e, h = mode_fields(self.spec, mc, m, p)
            E += amp * e
            H += amp * h
        return E, H

    def magnetic_trace(self) -> VshExpansion:
        """``nu x H`` on the outer sphere as a VSH expansion."""
        out = VshExpansion.zeros(self.boundary.n_max, self.boundary.radius)
        for i, (n, m) in enumerate(mode_list(self.boundary.n_max)):
            out.b[i] = self.modes[(n, "TE")].admittance * self.boundary.a[i]
            out.a[i] = self.modes[(n, "TM")].admittance * self.boundary.b[i]
        return out

    def traces_at(self, r):
        """``(nu x E, nu x H)`` on the sphere of radius ``r`` as VSH expansions.

        On an interface the inner layer's representation is used; both
        traces are continuous there.
        """
        N = self.boundary.n_max
        e_out = VshExpansion.zeros(N, r)
        h_out = VshExpansion.zeros(N, r)
        i = int(self.spec.layer_of(np.array([r]))[0])
        if self.spec.pec_core and i == 0:
            return e_out, h_out
        k, eta = self.spec.layer_k(i), self.spec.layer_eta(i)
        index = {nm: j for j, nm in enumerate(mode_list(N))}
        for n, m, pol, amp, mc in self.amplitudes():
            cj, cy = mc.coeffs[i]
            s = cj * _state(n, pol, k, eta, r, "j") + cy * _state(n, pol, k, eta, r, "y")
            j = index[(n, m)]
            if pol == "TE":
                e_out.a[j] += amp * s[0] * r
                h_out.b[j] += amp * s[1] * r
            else:
                e_out.b[j] += amp * s[0] * r
                h_out.a[j] += amp * s[1] * r
        return e_out, h_out

    def layer_coefficients(self):
        """Rows ``(n, m, pol, layer, basis, coefficient)`` of the actual field amplitudes."""
        rows = []
        for n, m, pol, amp, mc in self.amplitudes():
            for layer, (cj, cy) in enumerate(mc.coeffs):
                rows.append((n, m, pol, layer, "j", amp * cj))
                rows.append((n, m, pol, layer, "y", amp * cy))
        return rows


def solve_layered_sphere(spec: LayeredSphereSpec, boundary_data: VshExpansion) -> LayeredSolution:
    """Fields in the layered ball with ``nu x E = boundary_data`` on the outer sphere.

    Raises
    ------
    ResonanceError
        If a mode carried by ``boundary_data`` is resonant.
    """
    if not np.isclose(boundary_data.radius, spec.outer_radius):
        raise ValueError("boundary data radius does not match the outer layer radius")
    sol = LayeredSolution(spec, boundary_data)
    for n in range(1, boundary_data.n_max + 1):
        for pol in POLS:
            sol.modes[(n, pol)] = modal_admittance(spec, n, pol)
    return sol


@dataclass
class AdmittanceMatrix:
    """Admittance map in the VSH coefficient basis.

    ``te[n-1]`` maps the grad-type coefficient of ``nu x E`` to the rotated
    coefficient of ``nu x H``; ``tm[n-1]`` maps rotated to grad-type.
    """

    n_max: int
    matrix: np.ndarray
    te: np.ndarray
    tm: np.ndarray

    def apply(self, e: VshExpansion) -> VshExpansion:
        return VshExpansion.from_vector(self.matrix @ e.vector, self.n_max, e.radius)

    def __sub__(self, other):
        return AdmittanceMatrix(self.n_max, self.matrix - other.matrix,
                                self.te - other.te, self.tm - other.tm)


def admittance_matrix_from_modes(te, tm) -> AdmittanceMatrix:
    te, tm = np.asarray(te, complex), np.asarray(tm, complex)
    n_max = len(te)
    k = n_modes(n_max)
    mat = np.zeros((2 * k, 2 * k), complex)
    for i, (n, _) in enumerate(mode_list(n_max)):
        mat[k + i, i] = te[n - 1]
        mat[i, k + i] = tm[n - 1]
    return AdmittanceMatrix(n_max, mat, te, tm)


def admittance_sphere(spec: LayeredSphereSpec, n_max: int = 12) -> AdmittanceMatrix:
    """Discrete admittance map ``nu x E -> nu x H`` on the outer sphere."""
    te = [modal_admittance(spec, n, "TE").admittance for n in range(1, n_max + 1)]
    tm = [modal_admittance(spec, n, "TM").admittance for n in range(1, n_max + 1)]
    return admittance_matrix_from_modes(te, tm)


@dataclass
class EigenCheck:
    is_eigenvalue: bool
    distance: float          # |omega - nearest eigenfrequency|
    nearest: float           # nearest interior eigenfrequency found
    mode: tuple              # (n, pol) of the nearest eigenfrequency
    determinants: dict       # (n, pol) -> modal determinant at omega


def _modal_det(n, pol, x):
    # TE resonances: j_n(x) = 0; TM resonances: (x j_n)'(x) = 0
    return spherical_bessel(n, x, "j") if pol == "TE" else riccati_derivative(n, x, "j")


def is_em_eigenvalue(omega: float, radius: float, tol: float = 1e-6, n_max: int = 12) -> EigenCheck:
    """Check ``omega`` against the interior Maxwell eigenfrequencies of a vacuum ball.

    Eigenfrequencies are the zeros of ``j_n(wR)`` (TE) and ``(x j_n)'`` at
    ``x = wR`` (TM) for ``n <= n_max``; they are bracketed on a fine grid and
    polished with Brent's method.
    """
    if omega <= 0:
        raise ValueError("frequency must be positive")
    x0 = omega * radius
    xs = np.linspace(1e-3, x0 + 2 * np.pi + 5.0, 4000)
    best = (np.inf, np.nan, None)
    dets = {}
    for n in range(1, n_max + 1):
        for pol in POLS:
            f = lambda x: float(np.real(_modal_det(n, pol, x)))  # noqa: E731
            dets[(n, pol)] = f(x0)
            vals = np.array([f(x) for x in xs])
            for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0):
                root = brentq(f, xs[i], xs[i + 1], xtol=1e-15)
                d = abs(x0 - root) / radius
                if d < best[0]:
                    best = (d, root / radius, (n, pol))
    return EigenCheck(bool(best[0] < tol), float(best[0]), float(best[1]), best[2], dets)


def write_modal_csv(sol: LayeredSolution, path) -> None:
    """Dump layer coefficients; columns n, m, pol, layer, basis, coeff_re, coeff_im."""
    with open(path, "w", newline="") as fh:
        fh.write("# nearcloak modal coefficients v1\n")
        w = csv.writer(fh)
        w.writerow(["n", "m", "pol", "layer", "basis", "coeff_re", "coeff_im"])
        for n, m, pol, layer, basis, c in sol.layer_coefficients():
            w.writerow([n, m, pol, layer, basis, repr(c.real), repr(c.imag)])
