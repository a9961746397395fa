"""
Triangulated closed surfaces with per-triangle Gauss quadrature.

Every solver in the package works on a :class:`SurfaceMesh`: a flat
triangulation plus collocation/quadrature nodes, positive weights and unit
outward normals at those nodes.  Icosahedral spheres are the only family
used for quantitative runs; arbitrary closed meshes can be read from OFF
files for plumbing.

Sphere meshes come in two flavours.  ``curved=False`` keeps the flat
triangles (surface area converges as O(h^2)).  ``curved=True`` pushes every
quadrature node radially onto the sphere and rescales the weights by the
exact Jacobian of the radial projection, so integrals are taken over the
true sphere.  The boundary-integral solvers use the curved variant.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "SurfaceMesh",
    "TriangleRule",
    "GAUSS3",
    "GAUSS1",
    "triangle_rule",
    "make_sphere_mesh",
    "make_mesh",
    "scale_mesh",
    "integrate_scalar",
    "read_off",
    "write_off",
    "edge_counts",
    "sphere_product_grid",
    "SphereQuadrature",
    "sphere_quadrature",
]

# nodes above this count are refused; a dense 2N x 2N complex operator on
# more nodes would not fit in a desk-scale memory budget anyway
MAX_NODES = 200_000


@dataclass(frozen=True)
class TriangleRule:
    """Quadrature rule on the reference triangle in barycentric form.

    ``bary`` has shape (q, 3); ``weights`` sum to one (fractions of the
    triangle area).
    """

    name: str
    bary: np.ndarray
    weights: np.ndarray
    degree: int


def _sym_rule(name, degree, orbits):
    bary, weights = [], []
    for kind, w, *abc in orbits:
        if kind == "c":
            pts = [(1 / 3, 1 / 3, 1 / 3)]
        elif kind == "3":
            a, b = abc
            pts = [(a, b, b), (b, a, b), (b, b, a)]
        else:
            a, b, c = abc
            pts = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
        bary.extend(pts)
        weights.extend([w] * len(pts))
    return TriangleRule(name, np.array(bary), np.array(weights), degree)


GAUSS1 = _sym_rule("gauss1", 1, [("c", 1.0)])
GAUSS3 = _sym_rule("gauss3", 2, [("3", 1 / 3, 2 / 3, 1 / 6)])
GAUSS6 = _sym_rule(
    "gauss6",
    4,
    [
        ("3", 0.223381589678011, 0.108103018168070, 0.445948490915965),
        ("3", 0.109951743655322, 0.816847572980459, 0.091576213509771),
    ],
)
GAUSS7 = _sym_rule(
    "gauss7",
    5,
    [
        ("c", 0.225),
        ("3", 0.132394152788506, 0.059715871789770, 0.470142064105115),
        ("3", 0.125939180544827, 0.797426985353087, 0.101286507323456),
    ],
)
GAUSS12 = _sym_rule(
    "gauss12",
    6,
    [
        ("3", 0.116786275726379, 0.501426509658179, 0.249286745170910),
        ("3", 0.050844906370207, 0.873821971016996, 0.063089014491502),
        ("6", 0.082851075618374, 0.053145049844817, 0.310352451033784, 0.636502499121399),
    ],
)

_RULES = {r.name: r for r in (GAUSS1, GAUSS3, GAUSS6, GAUSS7, GAUSS12)}


def triangle_rule(name: str) -> TriangleRule:
    try:
        return _RULES[name]
    except KeyError:
        raise ValueError(f"unknown triangle rule {name!r}; choose from {sorted(_RULES)}") from None


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Closed triangulated surface with quadrature data.

    Attributes
    ----------
    vertices : (nv, 3) float array
    triangles : (nt, 3) int array, counter-clockwise seen from outside
    quad_nodes : (nq, 3) float array, ``nq = nt * rule size``
    quad_weights : (nq,) positive float array (area units)
    normals : (nq, 3) unit outward normals at the quad nodes
    nominal_radius : radius for origin-centred sphere meshes, else ``None``
    rule : per-triangle quadrature rule
    curved : whether nodes/weights live on the exact sphere
    """

    vertices: np.ndarray
    triangles: np.ndarray
    quad_nodes: np.ndarray
    quad_weights: np.ndarray
    normals: np.ndarray
    nominal_radius: float | None = None
    rule: TriangleRule = GAUSS3
    curved: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.quad_nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def node_triangle(self) -> np.ndarray:
        """Triangle index owning each quadrature node."""
        return np.repeat(np.arange(self.n_triangles), len(self.rule.weights))

    @property
    def area(self) -> float:
        return float(self.quad_weights.sum())

    @property
    def flat_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    @property
    def h(self) -> float:
        """Longest edge length."""
        v = self.vertices[self.triangles]
        e = np.concatenate([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]])
        return float(np.linalg.norm(e, axis=1).max())

    def tangent_frame(self) -> tuple[np.ndarray, np.ndarray]:
        """Orthonormal tangent vectors (t1, t2) with t1 x t2 = normal."""
        if "frame" not in self._cache:
            n = self.normals
            # pick the coordinate axis least aligned with the normal
            ref = np.zeros_like(n)
            ref[np.arange(len(n)), np.argmin(np.abs(n), axis=1)] = 1.0
            t1 = np.cross(ref, n)
            t1 /= np.linalg.norm(t1, axis=1)[:, None]
            t2 = np.cross(n, t1)
            self._cache["frame"] = (t1, t2)
        return self._cache["frame"]

    def map_bary(self, tri: np.ndarray, bary: np.ndarray):
        """Map barycentric points on triangles to the surface.

        Parameters
        ----------
        tri : (k,) triangle indices
        bary : (k, q, 3) or (q, 3) barycentric coordinates

        Returns
        -------
        points : (k, q, 3)
        jac : (k, q) surface area element relative to the flat triangle area
            element (1 for flat meshes)
        normals : (k, q, 3)
        """
        tri = np.asarray(tri)
        v = self.vertices[self.triangles[tri]]  # (k, 3, 3)
        bary = np.broadcast_to(bary, (len(tri),) + np.shape(bary)[-2:])
        p = np.einsum("kqa,kai->kqi", bary, v)
        fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        fn /= np.linalg.norm(fn, axis=1)[:, None]
        if not self.curved:
            jac = np.ones(p.shape[:2])
            nrm = np.broadcast_to(fn[:, None, :], p.shape).copy()
            return p, jac, nrm
        R = self.nominal_radius
        d = np.einsum("ki,ki->k", fn, v[:, 0])
        plen = np.linalg.norm(p, axis=2)
        pts = R * p / plen[..., None]
        jac = R**2 * d[:, None] / plen**3
        return pts, jac, pts / R


def _icosahedron():
    t = (1 + 5**0.5) / 2
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return verts / np.linalg.norm(verts, axis=1)[:, None], faces


def _subdivide(verts, faces):
    verts = list(verts)
    cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = verts[i] + verts[j]
            verts.append(m / np.linalg.norm(m))
            cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.array(verts), np.array(out)


def make_mesh(vertices, triangles, rule: str | TriangleRule = "gauss3",
              nominal_radius: float | None = None, curved: bool = False) -> SurfaceMesh:
    """Build a :class:`SurfaceMesh` from raw arrays.

    ``curved=True`` is only meaningful for origin-centred sphere meshes and
    requires ``nominal_radius``.
    """
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=int)
    if triangles.min() < 0 or triangles.max() >= len(vertices):
        raise ValueError("triangle vertex index out of range")
    rule = triangle_rule(rule) if isinstance(rule, str) else rule
    if len(triangles) * len(rule.weights) > MAX_NODES:
        raise MemoryError(
            f"mesh would carry {len(triangles) * len(rule.weights)} quadrature nodes "
            f"(budget {MAX_NODES})"
        )
    if curved and nominal_radius is None:
        raise ValueError("curved meshes need a nominal radius")
    v = vertices[triangles]
    cr = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    areas = 0.5 * np.linalg.norm(cr, axis=1)
    if np.any(areas < 1e-14):
        raise ValueError(f"degenerate triangle(s): {np.flatnonzero(areas < 1e-14)[:5]}")
    mesh = SurfaceMesh(vertices, triangles, np.empty((0, 3)), np.empty(0), np.empty((0, 3)),
                       nominal_radius, rule, curved)
    pts, jac, nrm = mesh.map_bary(np.arange(len(triangles)), rule.bary)
    w = areas[:, None] * rule.weights[None, :] * jac
    return SurfaceMesh(
        vertices,
        triangles,
        pts.reshape(-1, 3),
        w.reshape(-1),
        nrm.reshape(-1, 3),
        nominal_radius,
        rule,
        curved,
    )


def make_sphere_mesh(radius: float, refinement: int, curved: bool = False,
                     rule: str = "gauss3") -> SurfaceMesh:
    """Icosahedral sphere of ``20 * 4**refinement`` triangles centred at 0.

    Examples
    --------
    >>> m = make_sphere_mesh(1.0, 0)
    >>> len(m.vertices), len(m.triangles)
    (12, 20)
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if refinement < 0:
        raise ValueError("refinement must be >= 0")
    nq = 20 * 4**refinement * len(triangle_rule(rule).weights)
    if nq > MAX_NODES:
        raise MemoryError(f"refinement {refinement} gives {nq} nodes (budget {MAX_NODES})")
    verts, faces = _icosahedron()
    for _ in range(refinement):
        verts, faces = _subdivide(verts, faces)
    return make_mesh(radius * verts, faces, rule, nominal_radius=float(radius), curved=curved)


def scale_mesh(mesh: SurfaceMesh, rho: float) -> SurfaceMesh:
    """Dilate a mesh about the origin: ``D -> rho * D``."""
    if rho <= 0:
        raise ValueError("scale factor must be positive")
    return SurfaceMesh(
        mesh.vertices * rho,
        mesh.triangles,
        mesh.quad_nodes * rho,
        mesh.quad_weights * rho**2,
        mesh.normals,
        None if mesh.nominal_radius is None else mesh.nominal_radius * rho,
        mesh.rule,
        mesh.curved,
    )


def integrate_scalar(mesh: SurfaceMesh, f: Callable[[np.ndarray], np.ndarray] | np.ndarray):
    """Quadrature sum ``sum_k w_k f(x_k)``; ``f`` may be nodal values."""
    vals = f(mesh.quad_nodes) if callable(f) else np.asarray(f)
    return np.tensordot(mesh.quad_weights, vals, axes=(0, 0))


def edge_counts(triangles: np.ndarray) -> dict[tuple[int, int], int]:
    """Number of triangles sharing each undirected edge."""
    counts: dict[tuple[int, int], int] = {}
    for a, b, c in np.asarray(triangles):
        for i, j in ((a, b), (b, c), (c, a)):
            key = (min(i, j), max(i, j))
            counts[key] = counts.get(key, 0) + 1
    return counts


def read_off(path, rule: str = "gauss3") -> SurfaceMesh:
    """Read a triangle mesh in OFF text format."""
    with open(path) as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise ValueError(f"{path}: missing OFF header")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    verts = np.array(tokens[pos:pos + 3 * nv], dtype=float).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        k = int(tokens[pos])
        if k != 3:
            raise ValueError(f"{path}: only triangular faces are supported")
        faces.append([int(t) for t in tokens[pos + 1:pos + 4]])
        pos += 4
    return make_mesh(verts, np.array(faces), rule)


def write_off(mesh: SurfaceMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(mesh.vertices)} {len(mesh.triangles)} 0\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")


def sphere_product_grid(n_theta: int, n_phi: int | None = None):
    """Gauss-Legendre x uniform product rule on the unit sphere.

    Exact for spherical polynomials of degree < min(2 * n_theta, n_phi).

    Returns
    -------
    points : (n_theta * n_phi, 3) unit vectors
    weights : (n_theta * n_phi,) summing to 4 pi
    """
    n_phi = 2 * n_theta if n_phi is None else n_phi
    x, w = np.polynomial.legendre.leggauss(n_theta)
    phi = 2 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st = np.sqrt(1 - ct**2)
    pts = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    wts = np.repeat(w, n_phi) * (2 * np.pi / n_phi)
    return pts, wts


@dataclass(frozen=True)
class SphereQuadrature:
    """Quadrature nodes on an origin-centred sphere, without a triangulation.

    Duck-types the ``quad_nodes`` / ``quad_weights`` / ``normals`` part of
    :class:`SurfaceMesh` so that spectral checks can run on exact product
    rules instead of triangle rules.
    """

    quad_nodes: np.ndarray
    quad_weights: np.ndarray
    normals: np.ndarray
    nominal_radius: float

    @property
    def n_nodes(self) -> int:
        return len(self.quad_nodes)


def sphere_quadrature(radius: float, n_theta: int, n_phi: int | None = None) -> SphereQuadrature:
    """Product rule on the sphere of the given radius (see :func:`sphere_product_grid`)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts, wts = sphere_product_grid(n_theta, n_phi)
    return SphereQuadrature(radius * pts, radius**2 * wts, pts, float(radius))
