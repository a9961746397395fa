"""
Blow-up maps, push-forward of material tensors and the cloak layouts.

A blow-up map ``F`` fixes the outer sphere ``|x| = R_Omega``, maps the shell
``rho R_D <= |x| <= R_Omega`` affinely (in ``r``) onto ``R_D <= |x| <= R_Omega``
and dilates the small ball ``|x| < rho R_D`` by ``1/rho``.  Media are pushed
forward as ``DF m DF^T / |det DF|`` evaluated at ``F^{-1}(x)``.

Material tensors are represented as *tensor functions*: callables that take
``(q, 3)`` points and return ``(q, 3, 3)`` real symmetric arrays.
:func:`as_tensor_function` turns scalars, 6-vectors (``xx, yy, zz, xy, xz,
yz``) and 3x3 matrices into constant tensor functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "InterfaceError",
    "MediumValidationError",
    "SymTensor3",
    "as_tensor_function",
    "BlowupMap",
    "IdentityMap",
    "DilationMap",
    "ComposedMap",
    "radial_blowup_map",
    "jacobian",
    "push_forward",
    "pull_back_tensor",
    "pull_back_field",
    "pullback_maxwell_residual",
    "Region",
    "MaterialField",
    "Core",
    "build_physical_medium",
    "build_virtual_medium",
    "RegularityReport",
    "check_regularity",
    "MediumConfig",
    "medium_from_config",
    "layered_spec",
    "INTERFACE_TOL",
]

# relative width (in units of the outer radius) of the band around interfaces
# inside which tensors and Jacobians are undefined
INTERFACE_TOL = 1e-9

TensorFunction = Callable[[np.ndarray], np.ndarray]


class DomainError(ValueError):
    """Point or parameter outside the admissible domain."""


class InterfaceError(DomainError):
    """Evaluation requested on (or within tolerance of) a material interface."""


class MediumValidationError(ValueError):
    """A material tensor violates its ellipticity or nonnegativity bound."""

    def __init__(self, msg, point=None):
        super().__init__(msg)
        self.point = point


_SYM_INDEX = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]


@dataclass(frozen=True)
class SymTensor3:
    """Real symmetric 3x3 tensor stored as ``(xx, yy, zz, xy, xz, yz)``."""

    entries: tuple

    def __post_init__(self):
        if len(self.entries) != 6:
            raise ValueError("a symmetric tensor has six independent entries")

    @classmethod
    def isotropic(cls, c: float) -> "SymTensor3":
        return cls((c, c, c, 0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, m, tol: float = 1e-12) -> "SymTensor3":
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("expected a 3x3 matrix")
        if np.abs(m - m.T).max() > tol * max(np.abs(m).max(), 1.0):
            raise ValueError("matrix is not symmetric")
        m = 0.5 * (m + m.T)
        return cls(tuple(float(m[i, j]) for i, j in _SYM_INDEX))

    @property
    def matrix(self) -> np.ndarray:
        m = np.zeros((3, 3))
        for v, (i, j) in zip(self.entries, _SYM_INDEX):
            m[i, j] = m[j, i] = v
        return m

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)


def as_tensor_function(value) -> TensorFunction:
    """Constant tensor function from a scalar, 6 entries, a 3x3 matrix or a SymTensor3.

    Callables are returned unchanged.
    """
    if callable(value):
        return value
    if isinstance(value, SymTensor3):
        mat = value.matrix
    else:
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            mat = float(arr) * np.eye(3)
        elif arr.shape == (6,):
            mat = SymTensor3(tuple(arr)).matrix
        elif arr.shape == (3, 3):
            mat = SymTensor3.from_matrix(arr).matrix
        else:
            raise ValueError(f"cannot interpret {value!r} as a material tensor")

    def const(points):
        q = np.atleast_2d(points).shape[0]
        return np.broadcast_to(mat, (q, 3, 3)).copy()

    const.constant = mat
    return const


def _as_points(x):
    p = np.asarray(x, dtype=float)
    single = p.ndim == 1
    return np.atleast_2d(p), single


class BlowupMap:
    """Orientation-preserving, piecewise smooth map of the computational domain."""

    def __call__(self, x):
        raise NotImplementedError

    def inverse(self, x):
        raise NotImplementedError

    def jacobian(self, x):
        raise NotImplementedError


class IdentityMap(BlowupMap):
    def __call__(self, x):
        return np.array(x, dtype=float)

    def inverse(self, x):
        return np.array(x, dtype=float)

    def jacobian(self, x):
        p, single = _as_points(x)
        J = np.broadcast_to(np.eye(3), (len(p), 3, 3)).copy()
        return J[0] if single else J


@dataclass(frozen=True)
class DilationMap(BlowupMap):
    """``y -> y / rho`` everywhere."""

    rho: float

    def __post_init__(self):
        if self.rho <= 0:
            raise DomainError("dilation factor must be positive")

    def __call__(self, x):
        return np.asarray(x, dtype=float) / self.rho

    def inverse(self, x):
        return np.asarray(x, dtype=float) * self.rho

    def jacobian(self, x):
        p, single = _as_points(x)
        J = np.broadcast_to(np.eye(3) / self.rho, (len(p), 3, 3)).copy()
        return J[0] if single else J


@dataclass(frozen=True)
class ComposedMap(BlowupMap):
    """``outer o inner``."""

    outer: BlowupMap
    inner: BlowupMap

    def __call__(self, x):
        return self.outer(self.inner(x))

    def inverse(self, x):
        return self.inner.inverse(self.outer.inverse(x))

    def jacobian(self, x):
        return self.outer.jacobian(self.inner(x)) @ self.inner.jacobian(x)


@dataclass(frozen=True)
class RadialBlowupMap(BlowupMap):
    """Radial blow-up of ``|x| < rho R_D`` onto ``|x| < R_D`` fixing ``|x| = R_Omega``."""

    rho: float
    inner_radius: float
    outer_radius: float

    @property
    def slope(self) -> float:
        """``dr'/dr`` on the shell branch."""
        R_D, R_O = self.inner_radius, self.outer_radius
        return (R_O - R_D) / (R_O - self.rho * R_D)

    @property
    def interface(self) -> float:
        return self.rho * self.inner_radius

    def _tol(self):
        return INTERFACE_TOL * self.outer_radius

    def _radius_map(self, r):
        return np.where(r >= self.interface,
                        self.inner_radius + (r - self.interface) * self.slope,
                        r / self.rho)

    def __call__(self, x):
        p, single = _as_points(x)
        r = np.linalg.norm(p, axis=1)
        rp = self._radius_map(r)
        out = p * np.divide(rp, r, out=np.full_like(r, 1 / self.rho), where=r > 0)[:, None]
        return out[0] if single else out

    def inverse(self, x):
        p, single = _as_points(x)
        r = np.linalg.norm(p, axis=1)
        if np.any(r > self.outer_radius + self._tol()):
            raise DomainError("point lies outside the outer sphere")
        rr = np.where(r >= self.inner_radius,
                      self.interface + (r - self.inner_radius) / self.slope,
                      r * self.rho)
        out = p * np.divide(rr, r, out=np.full_like(r, self.rho), where=r > 0)[:, None]
        return out[0] if single else out

    def jacobian(self, x):
        p, single = _as_points(x)
        r = np.linalg.norm(p, axis=1)
        if np.any(np.abs(r - self.interface) < self._tol()):
            raise InterfaceError(f"Jacobian undefined on |x| = {self.interface:g}")
        J = np.broadcast_to(np.eye(3) / self.rho, (len(p), 3, 3)).copy()
        shell = r > self.interface
        if np.any(shell):
            rs = r[shell]
            s = self._radius_map(rs) / rs
            xh = p[shell] / rs[:, None]
            J[shell] = s[:, None, None] * np.eye(3) + (self.slope - s)[:, None, None] * (
                xh[:, :, None] * xh[:, None, :])
        return J[0] if single else J


def radial_blowup_map(rho: float, R_D: float, R_Omega: float) -> RadialBlowupMap:
    """Radial blow-up map with affine radial profile on the shell branch."""
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    if not 0 < R_D < R_Omega:
        raise DomainError("need 0 < R_D < R_Omega")
    return RadialBlowupMap(float(rho), float(R_D), float(R_Omega))


def jacobian(fmap: BlowupMap, x) -> np.ndarray:
    """Analytic Jacobian ``DF(x)``; raises :class:`InterfaceError` on the kink."""
    return fmap.jacobian(x)


def push_forward(m, fmap: BlowupMap, x) -> np.ndarray:
    """``F_* m (x) = DF m DF^T / |det DF|`` at ``y = F^{-1}(x)``."""
    m = as_tensor_function(m)
    p, single = _as_points(x)
    y = np.atleast_2d(fmap.inverse(p))
    J = np.atleast_3d(fmap.jacobian(y)).reshape(-1, 3, 3)
    out = J @ m(y) @ np.swapaxes(J, 1, 2) / np.abs(np.linalg.det(J))[:, None, None]
    out = 0.5 * (out + np.swapaxes(out, 1, 2))
    return out[0] if single else out


def pull_back_tensor(m, fmap: BlowupMap, y) -> np.ndarray:
    """Inverse of :func:`push_forward`: ``|det DF| DF^{-1} m(F(y)) DF^{-T}`` at ``y``."""
    m = as_tensor_function(m)
    p, single = _as_points(y)
    J = np.atleast_3d(fmap.jacobian(p)).reshape(-1, 3, 3)
    Ji = np.linalg.inv(J)
    x = np.atleast_2d(fmap(p))
    out = np.abs(np.linalg.det(J))[:, None, None] * (Ji @ m(x) @ np.swapaxes(Ji, 1, 2))
    out = 0.5 * (out + np.swapaxes(out, 1, 2))
    return out[0] if single else out


def pull_back_field(E, fmap: BlowupMap, y) -> np.ndarray:
    """``DF(y)^T E(F(y))`` for a field function ``E`` of ``(q, 3)`` points."""
    p, single = _as_points(y)
    J = np.atleast_3d(fmap.jacobian(p)).reshape(-1, 3, 3)
    x = np.atleast_2d(fmap(p))
    out = np.einsum("qji,qj->qi", J, np.asarray(E(x)))
    return out[0] if single else out


def pullback_maxwell_residual(E, H, fmap: BlowupMap, omega: float, points, h: float,
                              eps=1.0, mu=1.0, scheme: str = "forward") -> float:
    """Finite-difference residual of Maxwell's equations for pulled-back fields.

    ``(E, H)`` solve ``curl E = i w mu H``, ``curl H = -i w eps E`` (no
    conductivity) in the image of ``fmap``.  The pulled-back pair
    ``DF^T E(F(y))``, ``DF^T H(F(y))`` is checked against the same system
    with pulled-back ``eps``, ``mu``; the result is the larger of the two
    relative residuals at ``points``.  Points and their stencils must avoid
    the kink of the map.
    """
    from .calculus import fd_curl

    y = np.atleast_2d(np.asarray(points, dtype=float))
    Ep = pull_back_field(E, fmap, y)
    Hp = pull_back_field(H, fmap, y)
    ep = pull_back_tensor(eps, fmap, y)
    mp = pull_back_tensor(mu, fmap, y)
    r1 = fd_curl(lambda q: pull_back_field(E, fmap, q), y, h, scheme) - 1j * omega * np.einsum("qij,qj->qi", mp, Hp)
    r2 = fd_curl(lambda q: pull_back_field(H, fmap, q), y, h, scheme) + 1j * omega * np.einsum("qij,qj->qi", ep, Ep)
    return max(np.linalg.norm(r1) / np.linalg.norm(mp @ Hp[..., None]) / omega,
               np.linalg.norm(r2) / np.linalg.norm(ep @ Ep[..., None]) / omega)


@dataclass(frozen=True)
class Region:
    """Spherical shell ``r_lo < |x| < r_hi`` carrying three tensor functions."""

    name: str
    r_lo: float
    r_hi: float
    eps: TensorFunction
    mu: TensorFunction
    sigma: TensorFunction

    def contains(self, points) -> np.ndarray:
        r = np.linalg.norm(np.atleast_2d(points), axis=1)
        return (r > self.r_lo) & (r < self.r_hi)


@dataclass(frozen=True)
class MaterialField:
    """Region-wise ``(eps, mu, sigma)`` on the ball of radius ``outer_radius``."""

    regions: tuple
    outer_radius: float
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def interfaces(self) -> list[float]:
        return sorted({reg.r_lo for reg in self.regions if reg.r_lo > 0})

    def region_index(self, points) -> np.ndarray:
        """Index of the containing region per point; raises on interfaces or outside."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(p, axis=1)
        tol = INTERFACE_TOL * self.outer_radius
        for s in self.interfaces:
            if np.any(np.abs(r - s) < tol):
                raise InterfaceError(f"material tensors are undefined on |x| = {s:g}")
        idx = np.full(len(p), -1)
        for i, reg in enumerate(self.regions):
            idx[reg.contains(p) & (idx < 0)] = i
        if np.any(idx < 0):
            raise DomainError("points outside the medium")
        return idx

    def evaluate(self, points):
        """``(eps, mu, sigma)`` arrays of shape ``(q, 3, 3)``."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        idx = self.region_index(p)
        out = [np.zeros((len(p), 3, 3)) for _ in range(3)]
        for i, reg in enumerate(self.regions):
            sel = idx == i
            if np.any(sel):
                for o, f in zip(out, (reg.eps, reg.mu, reg.sigma)):
                    o[sel] = f(p[sel])
        return tuple(out)

    def region(self, name) -> Region:
        for reg in self.regions:
            if reg.name == name:
                return reg
        raise KeyError(name)


@dataclass(frozen=True)
class Core:
    """Cloaked content ``(eps_a, mu_a, sigma_a)``; entries are anything accepted by :func:`as_tensor_function`."""

    eps: object = 1.0
    mu: object = 1.0
    sigma: object = 0.0

    def functions(self):
        return tuple(as_tensor_function(v) for v in (self.eps, self.mu, self.sigma))

    def isotropic_values(self):
        """``(eps, mu, sigma)`` as floats if all three are constant multiples of I, else None."""
        vals = []
        for f in self.functions():
            c = getattr(f, "constant", None)
            if c is None or not np.allclose(c, c[0, 0] * np.eye(3)):
                return None
            vals.append(float(c[0, 0]))
        return tuple(vals)


def _sample_ball(radius, n=6):
    """Deterministic sample points strictly inside a ball."""
    g = (np.arange(n) + 0.5) / n * 2 - 1
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    pts = pts[np.linalg.norm(pts, axis=1) < 0.95]
    return radius * pts


def _validate_core(core: Core, radius: float):
    eps, mu, sigma = core.functions()
    pts = _sample_ball(radius)
    for name, f, strict in (("eps", eps, True), ("mu", mu, True), ("sigma", sigma, False)):
        vals = f(pts)
        if np.abs(vals - np.swapaxes(vals, 1, 2)).max() > 1e-12 * max(np.abs(vals).max(), 1.0):
            raise MediumValidationError(f"core {name} is not symmetric")
        lam = np.linalg.eigvalsh(vals)
        bad = lam[:, 0] <= 0 if strict else lam[:, 0] < 0
        if np.any(bad):
            i = int(np.argmax(bad))
            kind = "positive definite" if strict else "nonnegative"
            raise MediumValidationError(
                f"core {name} is not {kind} at {pts[i].tolist()} (min eigenvalue {lam[i, 0]:.3g})",
                point=pts[i])


def _pushed(m, fmap):
    m = as_tensor_function(m)
    return lambda x: push_forward(m, fmap, x)


def _scaled(m, s):
    m = as_tensor_function(m)
    return lambda x: s * m(x)


def build_physical_medium(rho: float, alpha0: float = 1.0, beta0: float = 1.0, gamma0: float = 1.0,
                          core: Core = Core(), R_D: float = 1.0, R_Omega: float = 2.0) -> MaterialField:
    """Cloak shell, lossy layer and core obtained by pushing the virtual layout forward.

    Regions: ``R_D < |x| < R_Omega`` (``F_*`` of vacuum, no conductivity),
    ``R_D/2 < |x| < R_D`` (``F_*`` of ``(alpha0, beta0, gamma0 rho^-2)``) and
    ``|x| < R_D/2`` (``F_*`` of the core, evaluated at ``x rho``).
    """
    if min(alpha0, beta0) <= 0 or gamma0 < 0:
        raise MediumValidationError("need alpha0, beta0 > 0 and gamma0 >= 0")
    fmap = radial_blowup_map(rho, R_D, R_Omega)
    _validate_core(core, rho * R_D / 2)
    ce, cm, cs = core.functions()
    zero = as_tensor_function(0.0)
    regions = (
        Region("cloak", R_D, R_Omega, _pushed(1.0, fmap), _pushed(1.0, fmap), zero),
        Region("layer", R_D / 2, R_D, _pushed(alpha0, fmap), _pushed(beta0, fmap),
               _pushed(gamma0 * rho**-2, fmap)),
        Region("core", 0.0, R_D / 2, _pushed(ce, fmap), _pushed(cm, fmap), _pushed(cs, fmap)),
    )
    return MaterialField(regions, R_Omega, {"kind": "physical", "rho": rho, "map": fmap})


def build_virtual_medium(rho: float, alpha0: float = 1.0, beta0: float = 1.0, gamma0: float = 1.0,
                         core: Core = Core(), paper_mu_scaling: bool = False,
                         R_D: float = 1.0, R_Omega: float = 2.0) -> MaterialField:
    """Vacuum outside ``rho R_D``, lossy layer, and the untransformed core.

    The layer permeability is ``beta0`` by default, which is what the
    pull-back of the physical layer gives.  ``paper_mu_scaling=True`` uses
    ``beta0 rho^2`` instead.
    """
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    if min(alpha0, beta0) <= 0 or gamma0 < 0:
        raise MediumValidationError("need alpha0, beta0 > 0 and gamma0 >= 0")
    _validate_core(core, rho * R_D / 2)
    ce, cm, cs = core.functions()
    one, zero = as_tensor_function(1.0), as_tensor_function(0.0)
    mu_layer = beta0 * rho**2 if paper_mu_scaling else beta0
    regions = (
        Region("vacuum", rho * R_D, R_Omega, one, one, zero),
        Region("layer", rho * R_D / 2, rho * R_D, as_tensor_function(alpha0),
               as_tensor_function(mu_layer), as_tensor_function(gamma0 * rho**-2)),
        Region("core", 0.0, rho * R_D / 2, ce, cm, cs),
    )
    return MaterialField(regions, R_Omega, {"kind": "virtual", "rho": rho,
                                            "paper_mu_scaling": paper_mu_scaling})


def _iso_value(f, what, region):
    c = getattr(f, "constant", None)
    if c is None or not np.allclose(c, c[0, 0] * np.eye(3)):
        raise MediumValidationError(f"{what} in region {region!r} is not a constant isotropic tensor")
    return float(c[0, 0])


def layered_spec(mf: MaterialField, omega: float):
    """Concentric-layer description of a radially layered, piecewise isotropic medium.

    Each region must be a shell with constant isotropic tensors (the
    virtual layout with an isotropic core); the result feeds the sphere
    oracle in :mod:`nearcloak.vsh_mie`.
    """
    from .vsh_mie.layered import LayeredSphereSpec

    regs = sorted(mf.regions, key=lambda r: r.r_hi)
    if regs[0].r_lo != 0 or any(not np.isclose(a.r_hi, b.r_lo) for a, b in zip(regs, regs[1:])):
        raise MediumValidationError("regions do not tile the ball as concentric shells")
    vals = [(_iso_value(r.eps, "eps", r.name), _iso_value(r.mu, "mu", r.name),
             _iso_value(r.sigma, "sigma", r.name)) for r in regs]
    eps, mu, sigma = zip(*vals)
    return LayeredSphereSpec(tuple(r.r_hi for r in regs), eps, mu, sigma, omega)


@dataclass
class RegularityReport:
    """Extreme eigenvalues of each tensor over the samples, and bound violations."""

    eps: tuple
    mu: tuple
    sigma: tuple
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def check_regularity(mf: MaterialField, samples) -> RegularityReport:
    """Min/max eigenvalues of ``eps``, ``mu``, ``sigma`` over sample points.

    ``eps`` and ``mu`` must be positive definite and ``sigma`` positive
    semidefinite; violations are listed, not raised.
    """
    eps, mu, sigma = mf.evaluate(samples)
    out = {}
    violations = []
    for name, vals, strict in (("eps", eps, True), ("mu", mu, True), ("sigma", sigma, False)):
        lam = np.linalg.eigvalsh(vals)
        lo, hi = float(lam[:, 0].min()), float(lam[:, -1].max())
        out[name] = (lo, hi)
        if (strict and lo <= 0) or (not strict and lo < -1e-14 * max(hi, 1.0)):
            violations.append(f"{name}: minimum eigenvalue {lo:.3g}")
    return RegularityReport(out["eps"], out["mu"], out["sigma"], violations)


@dataclass(frozen=True)
class MediumConfig:
    """Medium section of a run configuration.

    Core entries are either one float (isotropic) or six floats
    ``xx yy zz xy xz yz`` (constant anisotropic).
    """

    R_D: float = 1.0
    R_Omega: float = 2.0
    rho: float = 0.1
    alpha0: float = 1.0
    beta0: float = 1.0
    gamma0: float = 1.0
    eps_a: Sequence[float] = (1.0,)
    mu_a: Sequence[float] = (1.0,)
    sigma_a: Sequence[float] = (0.0,)
    paper_mu_scaling: bool = False

    def core(self) -> Core:
        def conv(v):
            v = tuple(float(x) for x in v)
            if len(v) == 1:
                return v[0]
            if len(v) == 6:
                return SymTensor3(v)
            raise MediumValidationError("core tensors need 1 or 6 entries")
        return Core(conv(self.eps_a), conv(self.mu_a), conv(self.sigma_a))


def _floats(text):
    return tuple(float(t) for t in str(text).replace(",", " ").split())


def medium_from_config(section) -> MediumConfig:
    """Parse a mapping of strings (e.g. a configparser section) into a :class:`MediumConfig`."""
    d = MediumConfig()
    get = section.get
    flag = str(get("paper_mu_scaling", d.paper_mu_scaling)).strip().lower()
    if flag not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
        raise MediumValidationError(f"paper_mu_scaling must be a boolean, got {flag!r}")
    try:
        cfg = MediumConfig(
            R_D=float(get("R_D", d.R_D)),
            R_Omega=float(get("R_Omega", d.R_Omega)),
            rho=float(get("rho", d.rho)),
            alpha0=float(get("alpha0", d.alpha0)),
            beta0=float(get("beta0", d.beta0)),
            gamma0=float(get("gamma0", d.gamma0)),
            eps_a=_floats(get("eps_a", "1")),
            mu_a=_floats(get("mu_a", "1")),
            sigma_a=_floats(get("sigma_a", "0")),
            paper_mu_scaling=flag in ("true", "yes", "1", "on"),
        )
    except ValueError as exc:
        raise MediumValidationError(f"malformed medium entry: {exc}") from exc
    cfg.core()
    return cfg
