"""
Helmholtz kernels and Nystrom discretisations of Maxwell boundary operators.

Operators act on tangential densities sampled at the quadrature nodes of a
:class:`~nearcloak.geometry.SurfaceMesh`.  Each node carries two unknowns,
the components along the local tangent frame ``(t1, t2)``; unknowns are
ordered node-major (``2 i + c``).

The magnetic dipole operator is

    (M a)(x) = 2 int nu(x) x [grad_x G(x, y) x a(y)] ds_y,

with the factor 2 inside the definition, so the exterior trace of
``U = curl int a G`` is ``(a + M a) / 2``.  ``G = exp(i w r) / (4 pi r)``.

Singular and near-singular integrals use a local correction: on the
triangle containing the target and on every triangle sharing a vertex with
it, the density is interpolated from the triangle's own nodes and the
integral is evaluated with a Duffy-type polar rule centred at the target's
projection onto the (extended) triangle.  The plain node rule is used for
all other pairs.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .geometry import SurfaceMesh

__all__ = [
    "SingularityError",
    "MeshError",
    "KernelEval",
    "helmholtz_kernel",
    "KernelSplit",
    "kernel_split",
    "TangentialTrace",
    "BoundaryOperatorMatrix",
    "ElectricDipoleOperator",
    "assemble_magnetic_dipole",
    "assemble_magnetic_dipole_static",
    "assemble_magnetic_dipole_remainder",
    "assemble_cross_magnetic_dipole",
    "assemble_single_layer",
    "assemble_electric_dipole",
    "MagneticDipoleApply",
    "CrossMagneticApply",
    "eval_fields",
    "sphere_dipole_eigenvalues",
    "static_sigma_min",
    "eval_field_U",
    "eval_field_V",
    "far_field",
    "write_matrix",
    "read_matrix",
]


class SingularityError(ValueError):
    """Kernel evaluated at (numerically) coincident points."""


class MeshError(ValueError):
    """Mesh unusable for the requested operator."""


_COINCIDENT = 1e-14


# ---------------------------------------------------------------- kernels

@dataclass
class KernelEval:
    """Helmholtz kernel value and x-gradient at point pairs."""

    x: np.ndarray
    y: np.ndarray
    omega: float
    value: np.ndarray
    gradient_x: np.ndarray


def _phi(r, omega):
    """``grad_x G = phi(r) (x - y)``."""
    return (1j * omega * r - 1) * np.exp(1j * omega * r) / (4 * np.pi * r**3)


# f(z) = sum_{n>=2} (n-1) (iz)^n / n! split into real (even n) and imaginary
# (odd n) power series in z^2, highest degree first for Horner
_F_EVEN = np.array([(n - 1) * (-1) ** (n // 2) / math.factorial(n) for n in range(16, 1, -2)])
_F_ODD = np.array([(n - 1) * (-1) ** ((n - 1) // 2) / math.factorial(n) for n in range(15, 2, -2)])


def _phi_remainder(r, omega):
    """``phi(r; w) - phi(r; 0) = f(w r) / (4 pi r^3)``, ``f(z) = (i z - 1) e^{iz} + 1``.

    For ``|z| < 0.5`` the power series of ``f`` is summed (Horner in ``z^2``)
    to avoid cancellation; the result tends to ``w^2 / (8 pi r)``.
    """
    r = np.asarray(r, dtype=float)
    z = omega * r
    small = z < 0.5
    f = np.empty(z.shape, complex)
    zs = z[small]
    z2 = zs * zs
    re = np.zeros_like(zs)
    for c in _F_EVEN:
        re = re * z2 + c
    im = np.zeros_like(zs)
    for c in _F_ODD:
        im = im * z2 + c
    f[small] = z2 * (re + 1j * zs * im)
    zl = z[~small]
    f[~small] = (1j * zl - 1) * np.exp(1j * zl) + 1
    return f / (4 * np.pi * r**3)


def _phi_prime_over_r(r, omega):
    """``phi'(r) / r``; the Hessian of G is ``phi I + (phi'/r) d d^T``."""
    wr = omega * r
    return np.exp(1j * wr) * (3 - 3j * wr - wr**2) / (4 * np.pi * r**5)


def helmholtz_kernel(x, y, omega: float) -> KernelEval:
    """``G(x, y) = exp(i w |x-y|) / (4 pi |x-y|)`` and ``grad_x G``.

    Raises
    ------
    SingularityError
        If ``|x - y| < 1e-14``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = x - y
    r = np.linalg.norm(d, axis=-1)
    if np.any(r < _COINCIDENT):
        raise SingularityError("Helmholtz kernel evaluated at coincident points")
    g = np.exp(1j * omega * r) / (4 * np.pi * r)
    grad = _phi(r, omega)[..., None] * d
    return KernelEval(x, y, omega, g, grad)


@dataclass
class KernelSplit:
    """``exp(i tau w r) / (4 pi r) = static + constant + remainder``.

    ``remainder`` is the full addend ``tau^2 R(x', y')``.
    """

    static: np.ndarray
    constant: complex
    remainder: np.ndarray

    @property
    def total(self):
        return self.static + self.constant + self.remainder


def _expm1_minus_linear(z):
    """``exp(i z) - 1 - i z`` without cancellation for small ``|z|``."""
    z = np.asarray(z, dtype=complex)
    out = np.expm1(1j * z) - 1j * z
    small = np.abs(z) < 0.05
    if np.any(small):
        zs = z[small]
        term = np.ones_like(zs)
        acc = np.zeros_like(zs)
        for k in range(2, 14):
            term = term * (1j * zs) / (k if k > 2 else 2)
            if k == 2:
                term = (1j * zs) ** 2 / 2
            acc = acc + term
        out[small] = acc
    return out


def kernel_split(xp, yp, tau: float, omega: float) -> KernelSplit:
    """Split the scaled kernel ``tau G(tau x', tau y')`` on the reference surface.

    ``static = 1/(4 pi r)``, ``constant = i tau w / (4 pi)`` and
    ``remainder = (exp(i tau w r) - 1 - i tau w r) / (4 pi r)``, which is
    ``O(tau^2 r)`` and tends to ``-tau^2 w^2 r / (8 pi)``.
    """
    d = np.asarray(xp, dtype=float) - np.asarray(yp, dtype=float)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r < _COINCIDENT):
        raise SingularityError("kernel split evaluated at coincident points")
    static = 1.0 / (4 * np.pi * r)
    constant = 1j * tau * omega / (4 * np.pi)
    rem = _expm1_minus_linear(tau * omega * r) / (4 * np.pi * r)
    return KernelSplit(static, constant, rem)


# ---------------------------------------------------------------- traces

@dataclass
class TangentialTrace:
    """Complex tangential field at the quadrature nodes of a surface.

    ``div`` optionally carries nodal values of the surface divergence.
    """

    mesh: SurfaceMesh
    values: np.ndarray
    div: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.mesh.n_nodes, 3):
            raise ValueError(f"trace must have shape ({self.mesh.n_nodes}, 3)")
        if self.div is not None:
            self.div = np.asarray(self.div, dtype=complex)
            if self.div.shape != (self.mesh.n_nodes,):
                raise ValueError("divergence data must have one value per node")

    def check_tangential(self, tol: float = 1e-10):
        nrm = np.abs(np.einsum("qi,qi->q", self.values, self.mesh.normals))
        scale = max(np.abs(self.values).max(), 1e-300)
        if nrm.max() > tol * scale:
            raise ValueError(f"trace has a normal component ({nrm.max() / scale:.2e} relative)")
        return self

    @classmethod
    def from_coords(cls, mesh, coords, div=None):
        t1, t2 = mesh.tangent_frame()
        c = np.asarray(coords).reshape(-1, 2)
        return cls(mesh, c[:, :1] * t1 + c[:, 1:] * t2, div)

    @property
    def coords(self) -> np.ndarray:
        t1, t2 = self.mesh.tangent_frame()
        v = self.values
        return np.stack([np.einsum("qi,qi->q", v, t1), np.einsum("qi,qi->q", v, t2)], axis=1).ravel()

    def l2_norm(self) -> float:
        w = self.mesh.quad_weights
        return float(np.sqrt(np.sum(w * np.sum(np.abs(self.values) ** 2, axis=1))))

    def __add__(self, other):
        div = None if self.div is None or other.div is None else self.div + other.div
        return TangentialTrace(self.mesh, self.values + other.values, div)

    def __sub__(self, other):
        div = None if self.div is None or other.div is None else self.div - other.div
        return TangentialTrace(self.mesh, self.values - other.values, div)

    def __mul__(self, s):
        return TangentialTrace(self.mesh, self.values * s, None if self.div is None else self.div * s)

    __rmul__ = __mul__


def _coords_to_vectors(mesh, coords):
    t1, t2 = mesh.tangent_frame()
    c = np.asarray(coords).reshape(-1, 2)
    return c[:, :1] * t1 + c[:, 1:] * t2


def _vectors_to_coords(mesh, v):
    t1, t2 = mesh.tangent_frame()
    return np.stack([np.einsum("qi,qi->q", v, t1), np.einsum("qi,qi->q", v, t2)], axis=1).ravel()


# ---------------------------------------------------------------- operator containers

@dataclass
class BoundaryOperatorMatrix:
    """Dense Nystrom matrix between tangential unknowns of two meshes."""

    source: SurfaceMesh
    target: SurfaceMesh
    matrix: np.ndarray
    tag: str
    omega: float
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x

    def apply(self, trace: TangentialTrace) -> TangentialTrace:
        if trace.mesh is not self.source:
            raise ValueError("trace lives on a different mesh than the operator source")
        return TangentialTrace.from_coords(self.target, self.matrix @ trace.coords)


# ---------------------------------------------------------------- local quadrature

def _interp_matrix(rule):
    """Coefficients ``C`` with ``L_k(lam) = basis(lam) @ C[:, k]`` for the rule's nodes."""
    b = rule.bary
    if len(b) == 3:
        return np.linalg.inv(b), 1
    if len(b) == 6:
        return np.linalg.inv(_quad_basis(b)), 2
    if len(b) == 1:
        return np.ones((1, 1)), 0
    raise MeshError(f"local correction supports 1, 3 or 6 node rules, not {len(b)}")


def _quad_basis(lam):
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    return np.stack([l1 * l1, l2 * l2, l3 * l3, l1 * l2, l1 * l3, l2 * l3], axis=-1)


def _basis(lam, degree):
    if degree == 1:
        return lam
    if degree == 2:
        return _quad_basis(lam)
    return np.ones(lam.shape[:-1] + (1,))


def _vertex_rings(mesh: SurfaceMesh, depth: int = 1):
    """For each triangle the sorted triangles within ``depth`` vertex-neighbour steps."""
    key = ("rings", depth)
    if key not in mesh._cache:
        tris = mesh.triangles
        by_vertex = [[] for _ in range(len(mesh.vertices))]
        for t, (a, b, c) in enumerate(tris):
            by_vertex[a].append(t)
            by_vertex[b].append(t)
            by_vertex[c].append(t)
        one = [set(by_vertex[a] + by_vertex[b] + by_vertex[c]) for a, b, c in tris]
        rings = one
        for _ in range(depth - 1):
            rings = [set().union(*(one[u] for u in ring)) for ring in rings]
        mesh._cache[key] = [sorted(r) for r in rings]
    return mesh._cache[key]


def _near_pairs(mesh: SurfaceMesh, depth: int = 1):
    """Arrays ``(target_node, triangle)`` of all locally corrected pairs."""
    key = ("near_pairs", depth)
    if key not in mesh._cache:
        rings = _vertex_rings(mesh, depth)
        nper = len(mesh.rule.weights)
        ti, tt = [], []
        for t, ring in enumerate(rings):
            for loc in range(nper):
                i = t * nper + loc
                ti.extend([i] * len(ring))
                tt.extend(ring)
        mesh._cache[key] = (np.array(ti), np.array(tt))
    return mesh._cache[key]


def _duffy_reference(n):
    """Gauss-Legendre points on the unit square for the collapsed-apex map."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1)
    w = 0.5 * w
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    return u.ravel(), v.ravel(), (wu * wv).ravel()


def _target_bary(mesh, targets, tris):
    """Barycentric coordinates (possibly outside [0,1]) of each target's image on a triangle plane.

    Curved sphere meshes use the radial ray through the target (exactly the
    parametrisation's preimage); flat meshes use orthogonal projection.
    """
    v = mesh.vertices[mesh.triangles[tris]]  # (P, 3, 3)
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    fn = np.cross(e1, e2)
    fn /= np.linalg.norm(fn, axis=1)[:, None]
    x = targets
    if mesh.curved:
        d = np.einsum("pi,pi->p", fn, v[:, 0])
        xn = np.einsum("pi,pi->p", fn, x)
        p = x * (d / xn)[:, None]
    else:
        p = x - np.einsum("pi,pi->p", x - v[:, 0], fn)[:, None] * fn
    rel = p - v[:, 0]
    g11 = np.einsum("pi,pi->p", e1, e1)
    g12 = np.einsum("pi,pi->p", e1, e2)
    g22 = np.einsum("pi,pi->p", e2, e2)
    r1 = np.einsum("pi,pi->p", rel, e1)
    r2 = np.einsum("pi,pi->p", rel, e2)
    det = g11 * g22 - g12**2
    l2 = (g22 * r1 - g12 * r2) / det
    l3 = (g11 * r2 - g12 * r1) / det
    return np.stack([1 - l2 - l3, l2, l3], axis=1)


def _clamp_bary(mesh, lam, tris):
    """Closest point of each triangle to the (planar) points ``lam``, in barycentrics.

    Used for strongly singular (``1/r^2``) kernels: a signed split around
    an exterior image would put the singularity in every sub-triangle,
    where the polar rule no longer regularises it.  Weakly singular kernels
    keep the signed split, which cancels the ``1/r`` singularity exactly.
    """
    inside = np.all(lam >= 0, axis=1)
    if inside.all():
        return lam
    out = lam.copy()
    idx = np.flatnonzero(~inside)
    v = mesh.vertices[mesh.triangles[tris[idx]]]
    p = np.einsum("pa,pai->pi", lam[idx], v)
    best = np.full(len(idx), np.inf)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        e = v[:, b] - v[:, a]
        t = np.clip(np.einsum("pi,pi->p", p - v[:, a], e) / np.einsum("pi,pi->p", e, e), 0, 1)
        q = v[:, a] + t[:, None] * e
        d = np.linalg.norm(p - q, axis=1)
        better = d < best
        best[better] = d[better]
        cand = np.zeros((len(idx), 3))
        cand[:, a] = 1 - t
        cand[:, b] = t
        out[idx[better]] = cand[better]
    return out


def _local_rule(mesh, targets, tris, n_duffy, exact_bary=None, clamp=False):
    """Polar (Duffy) quadrature over triangles, centred at each target's image.

    With ``clamp`` the centre is moved to the closest point of the triangle.
    Returns points, weights (ds), normals and the interpolation basis
    values ``L_k`` at the points, each with a leading pair axis.
    """
    p0 = _target_bary(mesh, targets, tris)
    if clamp:
        p0 = _clamp_bary(mesh, p0, tris)
    if exact_bary is not None:
        own = ~np.isnan(exact_bary[:, 0])
        p0[own] = exact_bary[own]
    u, v, w = _duffy_reference(n_duffy)
    corners = np.eye(3)
    pts_b, wts = [], []
    for a, b in ((0, 1), (1, 2), (2, 0)):
        ea, eb = corners[a], corners[b]
        # lam = p0 + u [(ea - p0) + v (eb - ea)]
        lam = p0[:, None, :] + u[None, :, None] * ((ea - p0)[:, None, :] + v[None, :, None] * (eb - ea))
        # signed area of (p0, ea, eb) in the (lam2, lam3) chart, doubled
        da = ea - p0
        db = eb - p0
        det = da[:, 1] * db[:, 2] - da[:, 2] * db[:, 1]
        pts_b.append(lam)
        wts.append(det[:, None] * (u * w)[None, :])
    lam = np.concatenate(pts_b, axis=1)  # (P, Q, 3)
    wq = np.concatenate(wts, axis=1)     # (P, Q), integrates to 1 over the triangle
    y, jac, ny = mesh.map_bary(tris, lam)
    area = mesh.flat_areas[tris]
    wq = wq * jac * (2 * area)[:, None]
    C, deg = mesh._cache.setdefault("interp", _interp_matrix(mesh.rule))
    L = _basis(lam, deg) @ C
    return y, wq, ny, L, lam


def _triple(a, b):
    return np.einsum("...i,...i->...", a, b)


# kernels: k(x, nx, y, ny, u) returns the 3-vector contribution for density
# value u at y (u may be a vector (...,3) or, for scalar kernels, (...,))

def _k_magnetic(omega, phi=_phi):
    def k(x, nx, y, ny, u):
        d = x - y
        r = np.linalg.norm(d, axis=-1)
        ph = 2 * phi(r, omega)
        return ph[..., None] * (d * _triple(nx, u)[..., None] - u * _triple(nx, d)[..., None])
    return k


def _k_single(omega):
    def k(x, nx, y, ny, u):
        r = np.linalg.norm(x - y, axis=-1)
        return (np.exp(1j * omega * r) / (4 * np.pi * r))[..., None] * u
    return k


def _k_ed_vector(omega):
    """``nu_x x (w^2 G u)``."""
    def k(x, nx, y, ny, u):
        r = np.linalg.norm(x - y, axis=-1)
        g = omega**2 * np.exp(1j * omega * r) / (4 * np.pi * r)
        return g[..., None] * np.cross(nx, u)
    return k


def _k_ed_div(omega):
    """``nu_x x grad_x G f`` for scalar density ``f``."""
    def k(x, nx, y, ny, f):
        d = x - y
        r = np.linalg.norm(d, axis=-1)
        return (_phi(r, omega) * f)[..., None] * np.cross(nx, d)
    return k


def _k_ed_hessian(omega):
    """``nu_x x [w^2 G u + Hess_x G u]`` (off-surface targets only)."""
    def k(x, nx, y, ny, u):
        d = x - y
        r = np.linalg.norm(d, axis=-1)
        g = np.exp(1j * omega * r) / (4 * np.pi * r)
        hu = (omega**2 * g + _phi(r, omega))[..., None] * u + (
            _phi_prime_over_r(r, omega) * _triple(d, u))[..., None] * d
        return np.cross(nx, hu)
    return k


def _project_tangent(u, n):
    return u - _triple(u, n)[..., None] * n


def _assemble(target: SurfaceMesh, source: SurfaceMesh, kernel, scalar=False, project=True,
              local=True, row_sum_zero=False, n_duffy=8, block=192, depth=1,
              quadratic=False):
    """Dense Nystrom matrix with local corrections when ``target is source``.

    ``scalar`` densities have one unknown per source node.  ``project``
    projects the interpolated vector density onto the tangent plane at the
    integration point.  With ``row_sum_zero`` the diagonal is set so that
    each row annihilates constant (scalar) densities.
    """
    same = target is source and local
    xt, nt = target.quad_nodes, target.normals
    t1t, t2t = target.tangent_frame()
    ys, ns, ws = source.quad_nodes, source.normals, source.quad_weights
    nsrc = source.n_nodes
    ncol = nsrc if scalar else 2 * nsrc
    A = np.zeros((2 * target.n_nodes, ncol), complex)
    if scalar:
        dens = [np.broadcast_to(ws, (nsrc,))]
    else:
        t1s, t2s = source.tangent_frame()
        dens = [t1s * ws[:, None], t2s * ws[:, None]]
    with np.errstate(divide="ignore", invalid="ignore"):
        for lo in range(0, target.n_nodes, block):
            hi = min(lo + block, target.n_nodes)
            X = xt[lo:hi, None, :]
            NX = nt[lo:hi, None, :]
            for c, u in enumerate(dens):
                uu = u if scalar else u[None]
                val = kernel(X, NX, ys[None], ns[None], uu)
                if same:
                    idx = np.arange(lo, hi)
                    val[idx - lo, idx] = 0
                A[2 * lo:2 * hi:2, c::(1 if scalar else 2)] = _triple(val, t1t[lo:hi, None, :])
                A[2 * lo + 1:2 * hi:2, c::(1 if scalar else 2)] = _triple(val, t2t[lo:hi, None, :])
    if same:
        if quadratic:
            if not scalar:
                raise ValueError("quadratic interpolation is implemented for scalar densities")
            corr = _local_correction_scalar_quadratic(target, kernel, n_duffy, A, depth=depth).tocoo()
        else:
            corr = _local_correction(target, kernel, scalar, project, n_duffy, A, depth=depth).tocoo()
        A[corr.row, corr.col] += corr.data
    if row_sum_zero:
        if not scalar:
            raise ValueError("row_sum_zero applies to scalar densities only")
        rows = np.arange(target.n_nodes)
        for c in range(2):
            A[2 * rows + c, rows] = 0
            A[2 * rows + c, rows] = -A[2 * rows + c].sum(axis=1)
    return A


def _edge_neighbours(mesh: SurfaceMesh):
    """``(n_tri, 3)`` triangles across each edge (closed meshes)."""
    key = "edge_nbrs"
    if key not in mesh._cache:
        owner = {}
        nb = -np.ones((mesh.n_triangles, 3), int)
        for t, tri in enumerate(mesh.triangles):
            for e in range(3):
                a, b = sorted((tri[e], tri[(e + 1) % 3]))
                if (a, b) in owner:
                    u, ue = owner.pop((a, b))
                    nb[t, e] = u
                    nb[u, ue] = t
                else:
                    owner[(a, b)] = (t, e)
        if owner:
            raise MeshError("quadratic stencils need a closed mesh")
        mesh._cache[key] = nb
    return mesh._cache[key]


def _quadratic_stencils(mesh: SurfaceMesh):
    """Quadratic interpolants of nodal scalars on each triangle.

    The stencil is the triangle's own nodes followed by those of its three
    edge neighbours.  Coefficients of the basis ``l_a l_b`` are fitted by
    least squares, constrained to reproduce the own nodes exactly.
    Returns ``(stencil (n_tri, s), C (n_tri, 6, s))``.
    """
    key = "quad_stencil"
    if key not in mesh._cache:
        nper = len(mesh.rule.weights)
        if nper != 3:
            raise MeshError("quadratic stencils are built for three-node rules")
        nb = _edge_neighbours(mesh)
        own = np.arange(mesh.n_triangles)[:, None] * nper + np.arange(nper)
        stencil = np.concatenate([own] + [nb[:, e, None] * nper + np.arange(nper) for e in range(3)], axis=1)
        s = stencil.shape[1]
        T = np.repeat(np.arange(mesh.n_triangles), s)
        lam = _target_bary(mesh, mesh.quad_nodes[stencil.ravel()], T).reshape(-1, s, 3)
        lam[:, :nper] = mesh.rule.bary
        B = _quad_basis(lam)  # (n_tri, s, 6)
        Bo, Br = B[:, :nper], B[:, nper:]
        n_t = mesh.n_triangles
        kkt = np.zeros((n_t, 6 + nper, 6 + nper))
        kkt[:, :6, :6] = 2 * np.einsum("tsa,tsb->tab", Br, Br)
        kkt[:, :6, 6:] = np.transpose(Bo, (0, 2, 1))
        kkt[:, 6:, :6] = Bo
        rhs = np.zeros((n_t, 6 + nper, s))
        rhs[:, :6, nper:] = 2 * np.transpose(Br, (0, 2, 1))
        rhs[:, 6:, :nper] = np.eye(nper)
        C = np.linalg.solve(kkt, rhs)[:, :6]
        mesh._cache[key] = (stencil, C)
    return mesh._cache[key]


def _local_correction_scalar_quadratic(mesh, kernel, n_duffy, naive, chunk=1500, depth=1):
    """Local correction for scalar densities with quadratic stencil interpolation."""
    ti, tt = _near_pairs(mesh, depth)
    nper = len(mesh.rule.weights)
    stencil, C = _quadratic_stencils(mesh)
    t1, t2 = mesh.tangent_frame()
    rows, cols, vals = [], [], []
    for lo in range(0, len(ti), chunk):
        i = ti[lo:lo + chunk]
        T = tt[lo:lo + chunk]
        own = (i // nper) == T
        exact = np.full((len(i), 3), np.nan)
        exact[own] = mesh.rule.bary[i[own] % nper]
        y, wq, ny, _, lam = _local_rule(mesh, mesh.quad_nodes[i], T, n_duffy, exact, clamp=True)
        val = kernel(mesh.quad_nodes[i][:, None, :], mesh.normals[i][:, None, :], y, ny, wq)
        W = np.einsum("pqb,pbs->pqs", _quad_basis(lam), C[T])
        acc = np.einsum("pqc,pqs->psc", val, W)  # (P, s, 3)
        j = stencil[T]
        for comp, tf in enumerate((t1, t2)):
            v = np.einsum("psc,pc->ps", acc, tf[i])
            r = np.broadcast_to((2 * i + comp)[:, None], j.shape)
            rows.append(r.ravel())
            cols.append(j.ravel())
            vals.append(v.ravel())
            # remove the plain node rule on the triangle's own nodes
            jo = j[:, :nper]
            nv = np.where(jo == i[:, None], 0, naive[np.broadcast_to((2 * i + comp)[:, None], jo.shape), jo])
            rows.append(r[:, :nper].ravel())
            cols.append(jo.ravel())
            vals.append(-nv.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sparse.csr_matrix((vals, (rows, cols)), shape=naive.shape)


def _local_correction(mesh, kernel, scalar, project, n_duffy, naive, chunk=1500, depth=1):
    """Sparse matrix ``accurate - naive`` over all locally corrected pairs."""
    ti, tt = _near_pairs(mesh, depth)
    nper = len(mesh.rule.weights)
    t1, t2 = mesh.tangent_frame()
    rows, cols, vals = [], [], []
    for lo in range(0, len(ti), chunk):
        i = ti[lo:lo + chunk]
        T = tt[lo:lo + chunk]
        own = (i // nper) == T
        exact = np.full((len(i), 3), np.nan)
        exact[own] = mesh.rule.bary[i[own] % nper]
        y, wq, ny, L, lam = _local_rule(mesh, mesh.quad_nodes[i], T, n_duffy, exact)
        X = mesh.quad_nodes[i][:, None, :]
        NX = mesh.normals[i][:, None, :]
        for k in range(nper):
            j = T * nper + k
            if scalar:
                ins = [wq * L[..., k]]
            else:
                us = []
                for tf in (t1, t2):
                    u = np.broadcast_to(tf[j][:, None, :], y.shape)
                    if project:
                        u = _project_tangent(u, ny)
                    us.append(u * (wq * L[..., k])[..., None])
                ins = us
            for c, u in enumerate(ins):
                val = kernel(X, NX, y, ny, u).sum(axis=1)  # (P, 3)
                col = j if scalar else 2 * j + c
                for comp, tf in enumerate((t1, t2)):
                    acc = _triple(val, tf[i])
                    acc = acc - naive[2 * i + comp, col] * (j != i)
                    rows.append(2 * i + comp)
                    cols.append(col)
                    vals.append(acc)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    shape = naive.shape
    return sparse.csr_matrix((vals, (rows, cols)), shape=shape)


# ---------------------------------------------------------------- public assembly

def _check_mesh(mesh: SurfaceMesh):
    if np.any(mesh.flat_areas < 1e-14):
        raise MeshError("mesh has degenerate triangles (area < 1e-14)")


def _pair_geometry(xt, src, lo, hi, same):
    """Distances and ``phi`` scaffolding for a target row block against all source nodes."""
    d = xt[:, None, :] - src.quad_nodes[None]
    r = np.linalg.norm(d, axis=-1)
    if same:
        r[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
    return r


def _m_rows(target, source, omega, lo, hi, same, phi=_phi):
    """Plain-rule rows ``2 lo .. 2 hi`` of ``M`` in tangent coordinates (BLAS form)."""
    xt = target.quad_nodes[lo:hi]
    nt = target.normals[lo:hi]
    t1t, t2t = (t[lo:hi] for t in target.tangent_frame())
    ys = source.quad_nodes
    s1, s2 = source.tangent_frame()
    r = _pair_geometry(xt, source, lo, hi, same)
    with np.errstate(invalid="ignore"):
        ph = 2 * phi(r, omega) * source.quad_weights[None]
    if same:
        ph[np.arange(hi - lo), np.arange(lo, hi)] = 0
    nd = np.einsum("bi,bi->b", nt, xt)[:, None] - nt @ ys.T
    out = np.empty((2 * (hi - lo), 2 * source.n_nodes), complex)
    for c, tc in enumerate((t1t, t2t)):
        td = np.einsum("bi,bi->b", tc, xt)[:, None] - tc @ ys.T
        for k, ts in enumerate((s1, s2)):
            out[c::2, k::2] = ph * (td * (nt @ ts.T) - (tc @ ts.T) * nd)
    return out


def _m_kernel_rows(target, source, omega, lo, hi, same, phi=_phi):
    """Weighted scalar kernels ``(ph, q)`` of the plain-rule ``M`` for target rows ``lo:hi``."""
    xt = target.quad_nodes[lo:hi]
    nt = target.normals[lo:hi]
    r = _pair_geometry(xt, source, lo, hi, same)
    with np.errstate(invalid="ignore"):
        ph = 2 * phi(r, omega) * source.quad_weights[None]
    if same:
        ph[np.arange(hi - lo), np.arange(lo, hi)] = 0
    q = ph * (np.einsum("bi,bi->b", nt, xt)[:, None] - nt @ source.quad_nodes.T)
    return ph, q


def _m_apply_kernel(target, source, lo, hi, ph, q, dens):
    xt = target.quad_nodes[lo:hi]
    nt = target.normals[lo:hi]
    ys = source.quad_nodes
    out = np.empty((len(dens), hi - lo, 3), complex)
    for k, a in enumerate(dens):
        w = ph * (nt @ a.T)
        out[k] = xt * w.sum(axis=1)[:, None] - w @ ys - q @ a
    return out


def _m_apply_rows(target, source, omega, lo, hi, same, dens, phi=_phi):
    """Plain-rule ``M`` applied to densities ``dens`` (K, S, 3); returns (K, hi-lo, 3) vectors."""
    ph, q = _m_kernel_rows(target, source, omega, lo, hi, same, phi)
    return _m_apply_kernel(target, source, lo, hi, ph, q, dens)


class _RowBlocks:
    """Plain-rule ``M`` row blocks, optionally kept in memory between products."""

    def __init__(self, target, source, omega, block, same, phi, cache):
        self.target, self.source, self.omega = target, source, omega
        self.same, self.phi, self.cache = same, phi, cache
        self.ranges = [(lo, min(lo + block, target.n_nodes)) for lo in range(0, target.n_nodes, block)]
        self._store = {}

    def apply(self, dens):
        out = np.empty((len(dens), self.target.n_nodes, 3), complex)
        for lo, hi in self.ranges:
            kq = self._store.get(lo)
            if kq is None:
                kq = _m_kernel_rows(self.target, self.source, self.omega, lo, hi, self.same, self.phi)
                if self.cache:
                    self._store[lo] = kq
            out[:, lo:hi] = _m_apply_kernel(self.target, self.source, lo, hi, *kq, dens)
        return out

    def release(self):
        self._store.clear()


def assemble_magnetic_dipole(mesh: SurfaceMesh, omega: float, n_duffy: int = 8,
                             block: int = 256) -> BoundaryOperatorMatrix:
    """Nystrom matrix of ``M`` on ``mesh`` (``omega = 0`` gives the static operator)."""
    _check_mesh(mesh)
    if omega < 0:
        raise ValueError("frequency must be nonnegative")
    A = np.empty((2 * mesh.n_nodes, 2 * mesh.n_nodes), complex)
    for lo in range(0, mesh.n_nodes, block):
        hi = min(lo + block, mesh.n_nodes)
        A[2 * lo:2 * hi] = _m_rows(mesh, mesh, omega, lo, hi, True)
    corr = _local_correction(mesh, _k_magnetic(omega), False, True, n_duffy, A).tocoo()
    A[corr.row, corr.col] += corr.data
    return BoundaryOperatorMatrix(mesh, mesh, A, "M0" if omega == 0 else "M", omega)


def assemble_magnetic_dipole_remainder(mesh: SurfaceMesh, omega: float, n_duffy: int = 8,
                                       block: int = 256) -> BoundaryOperatorMatrix:
    """``M(w) - M(0)`` with the same quadrature as :func:`assemble_magnetic_dipole`.

    The kernel difference is evaluated without cancellation, so for small
    ``w`` (equivalently a small scaled surface) the result is accurate to
    relative precision rather than to ``eps / w^2``.
    """
    _check_mesh(mesh)
    A = np.empty((2 * mesh.n_nodes, 2 * mesh.n_nodes), complex)
    for lo in range(0, mesh.n_nodes, block):
        hi = min(lo + block, mesh.n_nodes)
        A[2 * lo:2 * hi] = _m_rows(mesh, mesh, omega, lo, hi, True, phi=_phi_remainder)
    corr = _local_correction(mesh, _k_magnetic(omega, _phi_remainder), False, True, n_duffy, A).tocoo()
    A[corr.row, corr.col] += corr.data
    return BoundaryOperatorMatrix(mesh, mesh, A, "M-M0", omega)


def assemble_magnetic_dipole_static(mesh: SurfaceMesh, n_duffy: int = 8) -> BoundaryOperatorMatrix:
    return assemble_magnetic_dipole(mesh, 0.0, n_duffy)


def assemble_cross_magnetic_dipole(target: SurfaceMesh, source: SurfaceMesh, omega: float,
                                   block: int = 256) -> BoundaryOperatorMatrix:
    """``M`` with density on ``source`` and target normals of ``target`` (disjoint surfaces)."""
    A = np.empty((2 * target.n_nodes, 2 * source.n_nodes), complex)
    for lo in range(0, target.n_nodes, block):
        hi = min(lo + block, target.n_nodes)
        A[2 * lo:2 * hi] = _m_rows(target, source, omega, lo, hi, False)
    return BoundaryOperatorMatrix(source, target, A, "M-cross", omega)


class CrossMagneticApply:
    """Matrix-free ``M`` between disjoint surfaces, for several densities at once.

    With ``cache=True`` the scalar kernel blocks (two complex arrays of
    the full operator size) are kept after the first product.
    """

    def __init__(self, target: SurfaceMesh, source: SurfaceMesh, omega: float, block: int = 256,
                 cache: bool = False):
        self.target, self.source, self.omega, self.block = target, source, omega, block
        self._rows = _RowBlocks(target, source, omega, block, False, _phi, cache)

    def release(self):
        """Drop cached kernel blocks."""
        self._rows.release()

    def __call__(self, coords) -> np.ndarray:
        """``coords`` of shape (2 S,) or (2 S, K); returns target coordinates."""
        X = np.asarray(coords)
        single = X.ndim == 1
        X = X.reshape(len(X), -1)
        dens = np.stack([_coords_to_vectors(self.source, X[:, k]) for k in range(X.shape[1])])
        out = self._rows.apply(dens)
        res = np.stack([_vectors_to_coords(self.target, v) for v in out], axis=1)
        return res[:, 0] if single else res


def assemble_single_layer(mesh: SurfaceMesh, omega: float, target: SurfaceMesh | None = None,
                          n_duffy: int = 8) -> BoundaryOperatorMatrix:
    """``a -> int G a ds``, output projected onto the target tangent frame."""
    _check_mesh(mesh)
    tgt = mesh if target is None else target
    A = _assemble(tgt, mesh, _k_single(omega), project=False, n_duffy=n_duffy)
    return BoundaryOperatorMatrix(mesh, tgt, A, "S", omega)


@dataclass
class ElectricDipoleOperator:
    """``b -> -(1/(i w)) nu x curl curl int b G ds`` from ``source`` to ``target``.

    On-surface (``target is source``) the operator is split as
    ``nu x [w^2 S b + grad S(Div b)]`` and needs nodal ``Div b``; the
    tangential gradient of the single layer is regularised by subtracting
    the target value of ``Div b``, which is exact on spheres only.
    Off-surface the Hessian form ``w^2 G b + Hess_x G b`` is used and no
    divergence data are needed.
    """

    source: SurfaceMesh
    target: SurfaceMesh
    omega: float
    vector_part: np.ndarray
    div_part: np.ndarray | None

    @property
    def on_surface(self) -> bool:
        return self.div_part is not None

    def __call__(self, b: TangentialTrace) -> TangentialTrace:
        if b.mesh is not self.source:
            raise ValueError("density lives on a different mesh")
        out = self.vector_part @ b.coords
        if self.on_surface:
            if b.div is None:
                raise ValueError("on-surface electric dipole needs surface-divergence data")
            out = out + self.div_part @ b.div
        return TangentialTrace.from_coords(self.target, -out / (1j * self.omega))


def assemble_electric_dipole(target: SurfaceMesh, source: SurfaceMesh, omega: float,
                             n_duffy: int = 8) -> ElectricDipoleOperator:
    """Electric dipole operator; see :class:`ElectricDipoleOperator`."""
    if omega <= 0:
        raise ValueError("electric dipole operator needs omega > 0")
    _check_mesh(source)
    if target is source:
        if source.nominal_radius is None or not source.curved:
            raise MeshError("on-surface electric dipole is implemented for curved sphere meshes only")
        vec = _assemble(source, source, _k_ed_vector(omega), project=False, n_duffy=n_duffy)
        div = _assemble(source, source, _k_ed_div(omega), scalar=True, row_sum_zero=True,
                        n_duffy=n_duffy, quadratic=True)
        return ElectricDipoleOperator(source, target, omega, vec, div)
    vec = _assemble(target, source, _k_ed_hessian(omega), local=False)
    return ElectricDipoleOperator(source, target, omega, vec, None)


class MagneticDipoleApply:
    """Matrix-free ``M`` on large meshes.

    Plain-rule row blocks are recomputed on every product; only the sparse
    local correction is stored.  With ``remainder=True`` the operator is
    ``M(w) - M(0)``, evaluated as in :func:`assemble_magnetic_dipole_remainder`.
    ``cache=True`` keeps the plain-rule kernel blocks after the first product.
    """

    def __init__(self, mesh: SurfaceMesh, omega: float, n_duffy: int = 8, block: int = 256,
                 remainder: bool = False, cache: bool = False):
        _check_mesh(mesh)
        self.mesh = mesh
        self.omega = omega
        self.block = block
        self.n = 2 * mesh.n_nodes
        self.shape = (self.n, self.n)
        self._phi = _phi_remainder if remainder else _phi
        kern = _k_magnetic(omega, self._phi)
        self.correction = _local_correction(mesh, kern, False, True, n_duffy, _NaiveLookup(mesh, kern))
        self._rows = _RowBlocks(mesh, mesh, omega, block, True, self._phi, cache)

    def release(self):
        """Drop cached kernel blocks."""
        self._rows.release()

    def matmat(self, X):
        X = np.asarray(X)
        single = X.ndim == 1
        X2 = X.reshape(self.n, -1)
        dens = np.stack([_coords_to_vectors(self.mesh, X2[:, k]) for k in range(X2.shape[1])])
        out = self._rows.apply(dens)
        res = np.stack([_vectors_to_coords(self.mesh, v) for v in out], axis=1) + self.correction @ X2
        return res[:, 0] if single else res

    __call__ = matmat

    def rmatmat(self, X):
        """Conjugate-transpose product."""
        X = np.asarray(X).reshape(self.n, -1)
        out = np.zeros(X.shape, complex)
        for lo in range(0, self.mesh.n_nodes, self.block):
            hi = min(lo + self.block, self.mesh.n_nodes)
            rows = _m_rows(self.mesh, self.mesh, self.omega, lo, hi, True, self._phi)
            out += rows.conj().T @ X[2 * lo:2 * hi]
        return out + self.correction.conj().T @ X


class _NaiveLookup:
    """Index-able stand-in for the plain-rule matrix at arbitrary (row, col) pairs."""

    def __init__(self, mesh, kernel):
        self.mesh, self.kernel = mesh, kernel
        self.shape = (2 * mesh.n_nodes, 2 * mesh.n_nodes)

    def __getitem__(self, key):
        rows, cols = key
        m = self.mesh
        i, comp = rows // 2, rows % 2
        j, c = cols // 2, cols % 2
        t1, t2 = m.tangent_frame()
        tsrc = np.where(c[..., None] == 0, t1[j], t2[j]) * m.quad_weights[j][..., None]
        ttgt = np.where(comp[..., None] == 0, t1[i], t2[i])
        with np.errstate(divide="ignore", invalid="ignore"):
            val = self.kernel(m.quad_nodes[i], m.normals[i], m.quad_nodes[j], m.normals[j], tsrc)
        return np.where(i == j, 0, _triple(val, ttgt))


# ---------------------------------------------------------------- sphere oracle

def sphere_dipole_eigenvalues(n, x):
    """Eigenvalues of ``M`` on a sphere for VSH densities of degree ``n``, ``x = w R``.

    Returns ``(lambda_grad, lambda_rot)`` for gradient-type and rotated
    densities: ``lambda_rot = -i x [j_n(x) xi_n'(x) + h_n(x) psi_n'(x)]``
    (``psi = x j_n``, ``xi = x h_n``) and ``lambda_grad = -lambda_rot``.
    At ``x = 0`` they are ``+-1/(2n+1)``.
    """
    from .vsh_mie.special import riccati_derivative, spherical_bessel

    if x == 0:
        return 1.0 / (2 * n + 1), -1.0 / (2 * n + 1)
    j = spherical_bessel(n, x, "j")
    h = spherical_bessel(n, x, "h1")
    lam_rot = -1j * x * (j * riccati_derivative(n, x, "h1") + h * riccati_derivative(n, x, "j"))
    return -lam_rot, lam_rot


def static_sigma_min(mesh: SurfaceMesh, method: str = "auto", n_max: int = 4, n_duffy: int = 8,
                     tol: float = 1e-10, maxiter: int = 200) -> dict:
    """Smallest singular value of ``I + M(0)`` in the discrete ``L^2`` norm.

    The matrix is measured as ``W^{1/2} (I + M0) W^{-1/2}`` with ``W`` the
    quadrature weights, so singular values approximate those of the
    continuous operator on ``L^2`` tangential fields.

    ``method='dense'`` assembles the matrix and runs block inverse
    iteration on ``A^H A`` (four vectors, so the threefold cluster of the
    lowest sphere modes is captured at once).  ``method='ritz'`` is
    matrix-free: ``A`` is applied to the VSH fields of degree
    ``<= n_max`` (sphere meshes only) and the smallest singular value of
    the projected map is returned.  The Ritz value bounds the true minimum
    from above.  ``'auto'`` picks dense up to 4000 nodes.
    """
    d = np.repeat(np.sqrt(mesh.quad_weights), 2)
    if method == "auto":
        method = "dense" if mesh.n_nodes <= 4000 else "ritz"
    if method == "dense":
        from scipy.linalg import lu_factor, lu_solve

        A = assemble_magnetic_dipole(mesh, 0.0, n_duffy).matrix
        A[np.diag_indices_from(A)] += 1
        A *= d[:, None]
        A /= d[None, :]
        lu = lu_factor(A, overwrite_a=True, check_finite=False)
        del A
        X = np.random.default_rng(0).standard_normal((len(d), 4)) + 0j
        X, _ = np.linalg.qr(X)
        prev = np.inf
        for it in range(1, maxiter + 1):
            # X spans right singular vectors v; |A^-H v| = 1 / sigma
            Z = lu_solve(lu, X, trans=2, check_finite=False)
            sig = 1.0 / np.linalg.svd(Z, compute_uv=False)[0]
            if abs(sig - prev) < tol * sig:
                break
            prev = sig
            X, _ = np.linalg.qr(lu_solve(lu, Z, check_finite=False))
        return {"sigma": float(sig), "method": "dense", "iterations": it, "n_nodes": mesh.n_nodes}
    if method != "ritz":
        raise ValueError(f"unknown method {method!r}")
    if mesh.nominal_radius is None:
        raise MeshError("the Ritz estimate needs a sphere mesh")
    from .vsh_mie.harmonics import mode_list, tangential_basis

    cols = []
    for n, m in mode_list(n_max):
        g, rot = tangential_basis(n, m, mesh.quad_nodes, mesh.nominal_radius)
        cols += [_vectors_to_coords(mesh, g), _vectors_to_coords(mesh, rot)]
    V = np.stack(cols, axis=1)
    AV = MagneticDipoleApply(mesh, 0.0, n_duffy).matmat(V) + V
    Q, R = np.linalg.qr(d[:, None] * V)
    B = np.linalg.solve(R.T, (d[:, None] * AV).T).T   # W^1/2 A V R^-1
    s = np.linalg.svd(B, compute_uv=False)
    return {"sigma": float(s[-1]), "method": "ritz", "subspace": V.shape[1], "n_nodes": mesh.n_nodes}


# ---------------------------------------------------------------- field evaluation

def _near_surface_check(mesh, x, factor=2.0):
    from scipy.spatial import cKDTree

    tree = mesh._cache.get("kdtree")
    if tree is None:
        tree = mesh._cache.setdefault("kdtree", cKDTree(mesh.quad_nodes))
    d, _ = tree.query(x)
    h = mesh.h
    if np.any(d < factor * h):
        warnings.warn("evaluation point within two mesh sizes of the surface; "
                      "plain quadrature may be inaccurate", stacklevel=3)


def _density_vectors(a):
    if isinstance(a, TangentialTrace):
        return a.mesh, a.values[None]
    dens = list(a)
    if not dens or not all(isinstance(d, TangentialTrace) for d in dens):
        raise TypeError("density must be a TangentialTrace or a sequence of them")
    mesh = dens[0].mesh
    if any(d.mesh is not mesh for d in dens):
        raise ValueError("densities live on different meshes")
    return mesh, np.stack([d.values for d in dens])


def _eval_uv(a, x, omega, want_u, want_v, block, check=True):
    mesh, av = _density_vectors(a)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if check:
        _near_surface_check(mesh, x)
    ys = mesh.quad_nodes
    wa = av * mesh.quad_weights[None, :, None]            # (K, S, 3)
    ycross = np.cross(ys[None], wa)                       # y x a
    ydot = np.einsum("si,ksi->ks", ys, wa)                # y . a
    U = np.zeros((len(wa),) + x.shape, complex) if want_u else None
    V = np.zeros((len(wa),) + x.shape, complex) if want_v else None
    for lo in range(0, len(x), block):
        xb = x[lo:lo + block]
        r = np.linalg.norm(xb[:, None, :] - ys[None], axis=-1)
        ph = _phi(r, omega)
        if want_v:
            g = omega**2 * np.exp(1j * omega * r) / (4 * np.pi * r) + ph
            pp = _phi_prime_over_r(r, omega)
        for k in range(len(wa)):
            if want_u:
                # sum phi (x - y) x a = x x (Phi a) - Phi (y x a)
                U[k, lo:lo + block] = np.cross(xb, ph @ wa[k]) - ph @ ycross[k]
            if want_v:
                q = pp * (xb @ wa[k].T - ydot[k][None])     # phi'/r (d . a)
                V[k, lo:lo + block] = g @ wa[k] + xb * q.sum(axis=1)[:, None] - q @ ys
    if want_v:
        V /= 1j * omega
    single = isinstance(a, TangentialTrace)
    pick = (lambda F: F[0]) if single else (lambda F: F)
    return (pick(U) if want_u else None), (pick(V) if want_v else None)


def eval_field_U(a, x, omega: float, block: int = 512) -> np.ndarray:
    """``U(x) = curl_x int G(x, y) a(y) ds_y`` at off-surface points.

    ``a`` is a :class:`TangentialTrace` or a sequence of traces on one mesh
    (the result then has a leading density axis).
    """
    return _eval_uv(a, x, omega, True, False, block)[0]


def eval_field_V(a, x, omega: float, block: int = 512) -> np.ndarray:
    """``V = (1/(i w)) curl U = (1/(i w)) [w^2 int G a + int Hess_x G a]``."""
    return _eval_uv(a, x, omega, False, True, block)[1]


def eval_fields(a, x, omega: float, block: int = 512, check: bool = True):
    """``(U, V)`` in one pass."""
    return _eval_uv(a, x, omega, True, True, block, check)


def far_field(a, directions, omega: float) -> np.ndarray:
    """Far-field pattern ``U(x) ~ e^{i w r}/r E_inf(x_hat)`` of ``U = curl int a G``.

    ``E_inf(x_hat) = (i w / 4 pi) x_hat x int a(y) exp(-i w x_hat . y) ds_y``.
    """
    mesh, av = _density_vectors(a)
    dh = np.atleast_2d(np.asarray(directions, dtype=float))
    dh = dh / np.linalg.norm(dh, axis=1)[:, None]
    ph = np.exp(-1j * omega * dh @ mesh.quad_nodes.T) * mesh.quad_weights[None]
    out = 1j * omega / (4 * np.pi) * np.cross(dh, ph @ av)
    return out[0] if isinstance(a, TangentialTrace) else out


# ---------------------------------------------------------------- binary dump

_MAGIC = b"NCMAT1\0\0"


def write_matrix(path, matrix) -> None:
    """Little-endian dump: 8-byte magic, int64 rows, int64 cols, row-major complex128."""
    A = np.ascontiguousarray(matrix, dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qq", *A.shape))
        fh.write(A.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("not a matrix dump")
        rows, cols = struct.unpack("<qq", fh.read(16))
        return np.frombuffer(fh.read(), dtype="<c16").reshape(rows, cols).copy()
