"""
Exterior, annulus and decomposition solvers built on the Nystrom operators.

Field conventions: ``U = curl int a G`` plays the role of ``E`` and
``V = (1/(i w)) curl U`` that of ``H``, so ``curl U = i w V`` and
``curl V = -i w U`` away from the densities.

* Exterior problem on a small surface ``dD_tau``: ``(I + M) a = 2 phi``
  gives the radiating field with ``nu x U = phi``.  In reference variables
  ``x = tau x'`` the matrix is ``I + M0 + R(tau)`` with ``R = O(tau^2)``.
* Annulus problem between ``dOmega`` and ``dD_tau`` with ``nu x U~ = b`` on
  the outer and ``0`` on the inner surface.  From the Stratton-Chu formula

      V~ = -U[a1] + U[a2] - V[b],    U~ = V[a1] - V[a2] - U[b],

  with ``a1 = nu x V~`` on ``dOmega`` and ``a2 = nu x V~`` on ``dD_tau``
  solving the block system ``(L - R) a = 2 P``::

      L = [[I + M_Omega, 0], [M_(Omega->D), I - M0_D]],
      R = [[M_(D->Omega), 0], [0, M_D - M0_D]],
      P = (ED_Omega b, -nu x V[b] on dD_tau).

* The decomposition solver chains both: the vacuum field ``E0`` with
  ``nu x E0 = psi`` on ``dOmega`` is subtracted from ``phi`` on ``dD_tau``,
  the exterior problem is solved, and the annulus correction removes the
  outer trace of ``U``.  The output is ``nu x (V - V~)`` on ``dOmega``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgWarning, blas, lapack, lu_factor, lu_solve
from scipy.sparse.linalg import LinearOperator, gmres

from .admittance import WeightedNorm, thdiv_norm
from .bie import (
    CrossMagneticApply,
    MagneticDipoleApply,
    TangentialTrace,
    assemble_cross_magnetic_dipole,
    assemble_electric_dipole,
    assemble_magnetic_dipole,
    assemble_magnetic_dipole_remainder,
    eval_fields,
    far_field,
)
from .geometry import SurfaceMesh, scale_mesh
from .vsh_mie import LayeredSphereSpec, VshExpansion, solve_layered_sphere, vsh_analyze

__all__ = [
    "ConditioningError",
    "SolverError",
    "DenseSolver",
    "ScatterSolution",
    "solve_exterior",
    "solve_exterior_scaled",
    "ScaledExteriorSolver",
    "AnnulusBlocks",
    "annulus_rhs",
    "solve_annulus",
    "LemmaDrive",
    "LemmaResult",
    "LemmaSolver",
    "solve_lemma_crucial",
    "silver_mueller_residual",
    "slice_grid",
    "write_field_slice",
]

COND_LIMIT = 1e12
RESIDUAL_TOL = 1e-10


class ConditioningError(ArithmeticError):
    """System too ill-conditioned: resonance, or the small surface is not small enough."""

    def __init__(self, msg, cond=None):
        super().__init__(msg)
        self.cond = cond


class SolverError(ArithmeticError):
    """Linear solve did not reach the residual tolerance."""


# ---------------------------------------------------------------- dense algebra

class DenseSolver:
    """LU factorisation with a 1-norm condition estimate.

    C-ordered input is factorised through its transpose so that
    ``overwrite=True`` never copies.  ``matvec`` reproduces ``A x`` from the
    factors, so true residuals can be checked after the matrix is gone.
    """

    def __init__(self, A: np.ndarray, overwrite: bool = False, cond_limit: float = COND_LIMIT):
        A = np.asarray(A, dtype=complex)
        if not overwrite:
            A = A.copy()
        self.trans = not A.flags.f_contiguous
        F = A.T if self.trans else A
        anorm = max(float(np.abs(F[:, lo:lo + 512]).sum(axis=0).max()) for lo in range(0, F.shape[1], 512))
        with warnings.catch_warnings():
            # exact singularity is reported through the condition estimate below
            warnings.simplefilter("ignore", LinAlgWarning)
            self.lu, self.piv = lu_factor(F, overwrite_a=True, check_finite=False)
        self.n = self.lu.shape[0]
        if anorm == 0:
            self.cond = np.inf
        else:
            rcond, _ = lapack.zgecon(self.lu, anorm)
            self.cond = np.inf if rcond == 0 else 1.0 / rcond
        if not self.cond < cond_limit:
            raise ConditioningError(f"condition estimate {self.cond:.3e} exceeds {cond_limit:.0e}",
                                    self.cond)

    def solve(self, b):
        return lu_solve((self.lu, self.piv), b, trans=1 if self.trans else 0, check_finite=False)

    def _swap(self, y, order):
        for i in order:
            p = self.piv[i]
            if p != i:
                y[[i, p]] = y[[p, i]]

    def matvec(self, x):
        x = np.asarray(x, dtype=complex)
        single = x.ndim == 1
        y = np.array(x.reshape(self.n, -1), order="F")
        if self.trans:
            # A = (P L U)^T = U^T L^T P^T
            self._swap(y, range(self.n))
            y = blas.ztrmm(1.0, self.lu, y, lower=1, trans_a=1, diag=1)
            y = blas.ztrmm(1.0, self.lu, y, lower=0, trans_a=1, diag=0)
        else:
            y = blas.ztrmm(1.0, self.lu, y, lower=0, diag=0)
            y = blas.ztrmm(1.0, self.lu, y, lower=1, diag=1)
            self._swap(y, range(self.n - 1, -1, -1))
        return y[:, 0] if single else y


def _rel(r, b):
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(r) / nb) if nb > 0 else float(np.linalg.norm(r))


def _iterate(L_solve, L_apply, K_apply, P, tol=1e-12, maxiter=60):
    """Solve ``(L + K) x = P`` by the Neumann series ``x <- L^{-1} (P - K x)``.

    Falls back to GMRES on ``I + L^{-1} K`` (column by column) when the
    series stalls.  Returns ``(x, relative residual, iterations)``.
    """
    P = np.asarray(P, dtype=complex)
    single = P.ndim == 1
    P = P.reshape(len(P), -1)
    x = L_solve(P)
    Kx = K_apply(x)
    it = 0
    res = np.inf
    step = np.inf
    for it in range(1, maxiter + 1):
        x_new = L_solve(P - Kx)
        Kx_new = K_apply(x_new)
        # L x_new = P - K x, so the residual of x_new is K (x_new - x)
        res = max(_rel(Kx_new[:, k] - Kx[:, k], P[:, k]) for k in range(P.shape[1]))
        new_step = np.linalg.norm(x_new - x)
        x, Kx = x_new, Kx_new
        if res < tol:
            break
        if it > 3 and new_step > 0.9 * step:
            break  # not contracting: hand over to GMRES
        step = new_step
    if res < tol:
        r = L_apply(x) + Kx - P
        res = max(_rel(r[:, k], P[:, k]) for k in range(P.shape[1]))
    if res >= tol:
        n = len(P)
        op = LinearOperator((n, n), matvec=lambda v: v + L_solve(K_apply(v[:, None]))[:, 0],
                            dtype=complex)
        cols = []
        for k in range(P.shape[1]):
            rhs = L_solve(P[:, k:k + 1])[:, 0]
            xk, _ = gmres(op, rhs, x0=x[:, k], rtol=tol * 1e-2, atol=0.0, restart=60, maxiter=20)
            cols.append(xk)
        x = np.stack(cols, axis=1)
        r = L_apply(x) + K_apply(x) - P
        res = max(_rel(r[:, k], P[:, k]) for k in range(P.shape[1]))
    return (x[:, 0] if single else x), res, it


# ---------------------------------------------------------------- solutions

@dataclass
class ScatterSolution:
    """Densities plus field evaluators for a solved boundary problem.

    ``fields(points)`` returns ``(E, H)``; ``meta`` carries ``omega``,
    ``tau``, residual norms and, where relevant, the condition estimate.
    """

    densities: dict
    omega: float
    kind: str
    evaluator: Callable = field(repr=False)
    meta: dict = field(default_factory=dict)

    def fields(self, points):
        return self.evaluator(np.atleast_2d(np.asarray(points, dtype=float)))

    def E(self, points):
        return self.fields(points)[0]

    def H(self, points):
        return self.fields(points)[1]

    def far_field(self, directions):
        """``E_inf`` of a radiating (exterior) solution."""
        if self.kind != "exterior":
            raise ValueError("far field is defined for exterior solutions only")
        return far_field(self.densities["a"], directions, self.omega)


def _exterior_evaluator(a: TangentialTrace, omega):
    def ev(x):
        return eval_fields(a, x, omega)
    return ev


def _check_trace(phi: TangentialTrace, mesh: SurfaceMesh):
    if phi.mesh is not mesh:
        raise ValueError("boundary data live on a different mesh")
    phi.check_tangential(1e-8)


def solve_exterior(mesh_inner: SurfaceMesh, omega: float, phi: TangentialTrace,
                   n_duffy: int = 8) -> ScatterSolution:
    """Radiating field outside ``mesh_inner`` with ``nu x U = phi`` there.

    Solves ``(I + M) a = 2 phi`` by dense LU.

    Raises
    ------
    ConditioningError
        Condition estimate above ``1e12``.
    SolverError
        Relative residual above ``1e-10``.
    """
    _check_trace(phi, mesh_inner)
    if omega <= 0:
        raise ValueError("frequency must be positive")
    A = assemble_magnetic_dipole(mesh_inner, omega, n_duffy).matrix
    A[np.diag_indices_from(A)] += 1
    S = DenseSolver(A, overwrite=True)
    rhs = 2 * phi.coords
    a = S.solve(rhs)
    res = _rel(S.matvec(a) - rhs, rhs)
    if res > RESIDUAL_TOL:
        raise SolverError(f"exterior solve residual {res:.2e}")
    at = TangentialTrace.from_coords(mesh_inner, a)
    meta = {"omega": omega, "cond": S.cond, "residual": res,
            "trace_residual": _rel(0.5 * S.matvec(a) - phi.coords, phi.coords),
            "surface": "inner", "n_unknowns": len(a)}
    return ScatterSolution({"a": at}, omega, "exterior", _exterior_evaluator(at, omega), meta)


class ScaledExteriorSolver:
    """``(I + M0_D + R(tau)) a~ = 2 phi(tau .)`` on the reference surface ``dD``.

    The static factor ``I + M0_D`` is factorised once; each ``tau`` adds the
    remainder ``R = M_D(tau w) - M0_D`` (kernel evaluated without
    cancellation).  ``dense=True`` assembles ``R`` and solves by LU;
    otherwise ``R`` is applied matrix-free and the Neumann series in
    ``(I + M0)^{-1} R = O(tau^2)`` is iterated.
    """

    def __init__(self, mesh_D: SurfaceMesh, omega: float, n_duffy: int = 8, dense: bool | None = None,
                 static_matrix: np.ndarray | None = None):
        self.mesh = mesh_D
        self.omega = omega
        self.n_duffy = n_duffy
        self.dense = mesh_D.n_nodes <= 2000 if dense is None else dense
        A0 = static_matrix if static_matrix is not None else assemble_magnetic_dipole(mesh_D, 0.0, n_duffy).matrix
        if self.dense:
            self.M0 = A0.copy()
        A0[np.diag_indices_from(A0)] += 1
        self.static = DenseSolver(A0, overwrite=True)
        self._rem = {}

    def remainder(self, tau):
        key = float(tau)
        if key not in self._rem:
            w = tau * self.omega
            if self.dense:
                self._rem[key] = assemble_magnetic_dipole_remainder(self.mesh, w, self.n_duffy).matrix
            else:
                self._rem[key] = MagneticDipoleApply(self.mesh, w, self.n_duffy, remainder=True, cache=True)
        return self._rem[key]

    def _apply_R(self, tau):
        R = self.remainder(tau)
        return (lambda x: R @ x) if self.dense else R

    def solve(self, tau: float, rhs):
        """Solve with right-hand side ``rhs = 2 phi(tau .)`` in coordinates (n,) or (n, K)."""
        if not 0 < tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        R = self.remainder(tau)
        if self.dense:
            A = self.M0 + R
            A[np.diag_indices_from(A)] += 1
            S = DenseSolver(A, overwrite=True)
            x = S.solve(rhs)
            r = S.matvec(x) - rhs
            res = max(_rel(c, b) for c, b in zip(np.atleast_2d(r.T), np.atleast_2d(np.asarray(rhs).T)))
            info = {"cond": S.cond, "residual": res, "iterations": 0}
        else:
            x, res, it = _iterate(self.static.solve, self.static.matvec, R, rhs)
            info = {"cond_static": self.static.cond, "residual": res, "iterations": it}
        if res > RESIDUAL_TOL:
            raise SolverError(f"scaled exterior solve residual {res:.2e}")
        return x, info

    def release(self, tau):
        self._rem.pop(float(tau), None)


def solve_exterior_scaled(mesh_D: SurfaceMesh, tau: float, omega: float,
                          phi_scaled: TangentialTrace, n_duffy: int = 8,
                          solver: ScaledExteriorSolver | None = None) -> TangentialTrace:
    """Reference-surface density ``a~(x') = a(tau x')`` of the exterior problem on ``tau dD``."""
    _check_trace(phi_scaled, mesh_D)
    solver = solver or ScaledExteriorSolver(mesh_D, omega, n_duffy)
    x, _ = solver.solve(tau, 2 * phi_scaled.coords)
    return TangentialTrace.from_coords(mesh_D, x)


# ---------------------------------------------------------------- annulus

class AnnulusBlocks:
    """Blocks of ``(L - R) a = P`` for the annulus problem.

    ``L11``/``L22`` are :class:`DenseSolver` factorisations of
    ``I + M_Omega`` and ``I - M0_D``; ``L21``, ``R12`` and ``R22`` are
    callables on coordinate arrays ``(n,)`` or ``(n, K)``.
    """

    def __init__(self, L11: DenseSolver, L22: DenseSolver, L21, R12, R22):
        self.L11, self.L22 = L11, L22
        self.L21, self.R12, self.R22 = L21, R12, R22
        self.n1, self.n2 = L11.n, L22.n

    def _split(self, x):
        return x[:self.n1], x[self.n1:]

    def apply_L(self, x):
        x1, x2 = self._split(x)
        return np.concatenate([self.L11.matvec(x1), self.L21(x1) + self.L22.matvec(x2)])

    def apply_R(self, x):
        x1, x2 = self._split(x)
        return np.concatenate([self.R12(x2), self.R22(x2)])

    def solve_L(self, P):
        """Block forward substitution: ``L^{-1} = [[L11^-1, 0], [-L22^-1 L21 L11^-1, L22^-1]]``."""
        P1, P2 = self._split(P)
        x1 = self.L11.solve(P1)
        x2 = self.L22.solve(P2 - self.L21(x1))
        return np.concatenate([x1, x2])

    def solve(self, P, tol=1e-12):
        """``(L - R)^{-1} P`` by the Neumann series in ``L^{-1} R``."""
        return _iterate(self.solve_L, self.apply_L, lambda x: -self.apply_R(x), P, tol)


def annulus_rhs(mesh_outer: SurfaceMesh, mesh_inner: SurfaceMesh, omega: float,
                b: TangentialTrace, ed=None):
    """``(P1, P2)`` in coordinates: electric dipole operator of ``b`` on both surfaces.

    ``b`` needs surface-divergence data for the on-surface part.  ``ed`` is
    an already assembled on-surface operator for ``mesh_outer``.
    """
    ed = ed or assemble_electric_dipole(mesh_outer, mesh_outer, omega)
    P1 = ed(b).coords
    _, V = eval_fields(b, mesh_inner.quad_nodes, omega)
    P2 = TangentialTrace(mesh_inner, -np.cross(mesh_inner.normals, V)).coords
    return P1, P2


def _annulus_evaluator(a1, a2, b, omega):
    def ev(x):
        U1, V1 = eval_fields(a1, x, omega)
        U2, V2 = eval_fields(a2, x, omega)
        Ub, Vb = eval_fields(b, x, omega)
        return V1 - V2 - Ub, -U1 + U2 - Vb
    return ev


def _trace_from_solution(sol: ScatterSolution, mesh: SurfaceMesh, omega):
    U, V = sol.fields(mesh.quad_nodes)
    nu = mesh.normals
    return (TangentialTrace(mesh, np.cross(nu, U), div=-1j * omega * np.einsum("qi,qi->q", nu, V)),
            TangentialTrace(mesh, np.cross(nu, V)))


def solve_annulus(mesh_outer: SurfaceMesh, mesh_inner: SurfaceMesh, omega: float,
                  outer_data: TangentialTrace | None = None,
                  psi_source_solution: ScatterSolution | None = None,
                  method: str = "direct") -> ScatterSolution:
    """Field in the shell with ``nu x U~ = outer_data`` outside and ``0`` inside.

    ``outer_data`` must carry its surface divergence, or is taken from
    ``psi_source_solution`` (``nu x U`` and ``Div = -i w nu . V`` on
    ``mesh_outer``).  ``method`` is ``"direct"`` (one dense LU of the whole
    block matrix) or ``"blocks"`` (factorised diagonal blocks and the
    Neumann series in ``L^{-1} R``).
    """
    if outer_data is None:
        if psi_source_solution is None:
            raise ValueError("need outer data or a source solution")
        outer_data, _ = _trace_from_solution(psi_source_solution, mesh_outer, omega)
    if outer_data.mesh is not mesh_outer:
        raise ValueError("outer data live on a different mesh")
    if outer_data.div is None:
        if psi_source_solution is None:
            raise ValueError("outer data need surface-divergence values")
        outer_data = TangentialTrace(mesh_outer, outer_data.values,
                                     _trace_from_solution(psi_source_solution, mesh_outer, omega)[0].div)
    n1, n2 = 2 * mesh_outer.n_nodes, 2 * mesh_inner.n_nodes
    P1, P2 = annulus_rhs(mesh_outer, mesh_inner, omega, outer_data)
    P = 2 * np.concatenate([P1, P2])
    M11 = assemble_magnetic_dipole(mesh_outer, omega).matrix
    M12 = assemble_cross_magnetic_dipole(mesh_outer, mesh_inner, omega).matrix
    M21 = assemble_cross_magnetic_dipole(mesh_inner, mesh_outer, omega).matrix
    M22 = assemble_magnetic_dipole(mesh_inner, omega).matrix
    meta = {"omega": omega, "method": method}
    if method == "direct":
        A = np.block([[np.eye(n1) + M11, -M12], [M21, np.eye(n2) - M22]])
        S = DenseSolver(A, overwrite=False)
        a = S.solve(P)
        meta.update(cond=S.cond, residual=_rel(A @ a - P, P))
    elif method == "blocks":
        M0 = assemble_magnetic_dipole(mesh_inner, 0.0).matrix
        blocks = AnnulusBlocks(DenseSolver(np.eye(n1) + M11), DenseSolver(np.eye(n2) - M0),
                               lambda x: M21 @ x, lambda x: M12 @ x, lambda x: (M22 - M0) @ x)
        a, res, it = blocks.solve(P)
        meta.update(residual=res, iterations=it)
    else:
        raise ValueError(f"unknown method {method!r}")
    if meta["residual"] > RESIDUAL_TOL:
        raise SolverError(f"annulus solve residual {meta['residual']:.2e}")
    a1 = TangentialTrace.from_coords(mesh_outer, a[:n1])
    a2 = TangentialTrace.from_coords(mesh_inner, a[n1:])
    return ScatterSolution({"a1": a1, "a2": a2, "b": outer_data}, omega, "annulus",
                           _annulus_evaluator(a1, a2, outer_data, omega), meta)


# ---------------------------------------------------------------- decomposition

@dataclass
class LemmaDrive:
    """Boundary data of one decomposition solve.

    ``phi_scaled`` holds nodal values of ``x' -> phi(tau x')`` on the
    reference inner surface (``None`` for zero); ``psi`` is the outer
    tangential electric trace as a VSH expansion (``None`` for zero).
    """

    phi_scaled: np.ndarray | None = None
    psi: VshExpansion | None = None
    label: str = ""


@dataclass
class LemmaResult:
    tau: float
    drive: LemmaDrive
    output: TangentialTrace
    diagnostics: dict


class LemmaSolver:
    """Decomposition solves ``nu x (H_tau - H0)`` for several ``tau`` and drives.

    The work is organised in phases so that at most three dense ``2N x 2N``
    arrays are alive at once:

    1. ``I + M0_D`` factorised; exterior densities for every ``(tau, drive)``
       by the Neumann series in the remainder.
    2. On-surface electric dipole operator on ``dOmega`` applied to all
       outer traces ``b = nu x U``.
    3. ``I + M_Omega`` and ``I - M0_D`` factorised; annulus block systems
       solved with matrix-free cross operators and remainder.
    """

    def __init__(self, mesh_outer: SurfaceMesh, mesh_D: SurfaceMesh, omega: float,
                 n_duffy: int = 8, n_max: int = 8, dense: bool | None = None):
        if mesh_outer.nominal_radius is None:
            raise ValueError("the outer surface must be a sphere mesh (vacuum field by VSH series)")
        self.outer = mesh_outer
        self.mesh_D = mesh_D
        self.omega = omega
        self.n_duffy = n_duffy
        self.n_max = n_max
        self.dense = mesh_D.n_nodes <= 2000 if dense is None else dense

    def _vacuum_trace(self, psi: VshExpansion, mesh: SurfaceMesh):
        R = self.outer.nominal_radius
        if not np.isclose(psi.radius, R):
            raise ValueError("psi radius does not match the outer sphere")
        sol = solve_layered_sphere(LayeredSphereSpec.vacuum(R, self.omega), psi)
        E0, _ = sol.fields(mesh.quad_nodes)
        return np.cross(mesh.normals, E0)

    def run(self, taus, drives) -> list[list[LemmaResult]]:
        """Results indexed ``[tau][drive]``."""
        taus = [float(t) for t in taus]
        drives = list(drives)
        w = self.omega
        outer, D = self.outer, self.mesh_D
        nu_o = outer.normals
        K = len(drives)
        # phase 1: exterior problems
        A0 = assemble_magnetic_dipole(D, 0.0, self.n_duffy).matrix
        inner_static = np.eye(len(A0)) - A0
        ext = ScaledExteriorSolver(D, w, self.n_duffy, self.dense, static_matrix=A0)
        del A0
        stage = []
        for tau in taus:
            mesh_tau = scale_mesh(D, tau)
            data = np.zeros((K, D.n_nodes, 3), complex)
            for k, dr in enumerate(drives):
                if dr.phi_scaled is not None:
                    data[k] += dr.phi_scaled
                if dr.psi is not None:
                    data[k] -= self._vacuum_trace(dr.psi, mesh_tau)
            rhs = 2 * np.stack([TangentialTrace(D, d).coords for d in data], axis=1)
            nz = np.linalg.norm(rhs, axis=0) > 0
            x = np.zeros_like(rhs)
            info = {"residual": 0.0, "iterations": 0}
            if nz.any():
                x[:, nz], info = ext.solve(tau, rhs[:, nz])
            if not self.dense:
                ext.remainder(tau).release()
            dens = [TangentialTrace.from_coords(mesh_tau, x[:, k]) for k in range(K)]
            U, V = eval_fields(dens, outer.quad_nodes, w)
            b = [TangentialTrace(outer, np.cross(nu_o, U[k]), div=-1j * w * np.einsum("qi,qi->q", nu_o, V[k]))
                 for k in range(K)]
            c = np.stack([TangentialTrace(outer, np.cross(nu_o, V[k])).coords for k in range(K)], axis=1)
            _, Vb = eval_fields(b, mesh_tau.quad_nodes, w)
            P2 = np.stack([TangentialTrace(mesh_tau, -np.cross(mesh_tau.normals, Vb[k])).coords
                           for k in range(K)], axis=1)
            stage.append({"tau": tau, "mesh": mesh_tau, "a": dens, "b": b, "c": c, "P2": P2,
                          "exterior": info, "data_norm": [TangentialTrace(D, d).l2_norm() for d in data]})
        static_cond = ext.static.cond
        rem = {t: ext.remainder(t) for t in taus}
        del ext
        # phase 2: on-surface electric dipole operator on the outer surface
        ed = assemble_electric_dipole(outer, outer, w, self.n_duffy)
        for st in stage:
            st["P1"] = np.stack([ed(bk).coords for bk in st["b"]], axis=1)
        del ed
        # phase 3: annulus block systems
        M11 = assemble_magnetic_dipole(outer, w, self.n_duffy).matrix
        M11[np.diag_indices_from(M11)] += 1
        L11 = DenseSolver(M11, overwrite=True)
        del M11
        L22 = DenseSolver(inner_static, overwrite=True)
        del inner_static
        results = []
        for st in stage:
            tau, mesh_tau = st["tau"], st["mesh"]
            R = rem[tau]
            R22 = (lambda x, R=R: R @ x) if self.dense else R
            cross = (CrossMagneticApply(mesh_tau, outer, w, cache=True),
                     CrossMagneticApply(outer, mesh_tau, w, cache=True))
            blocks = AnnulusBlocks(L11, L22, *cross, R22)
            P = 2 * np.concatenate([st["P1"], st["P2"]])
            nz = np.linalg.norm(P, axis=0) > 0
            a = np.zeros_like(P)
            res, it = 0.0, 0
            if nz.any():
                a[:, nz], res, it = blocks.solve(P[:, nz])
            for op in cross + ((R,) if not self.dense else ()):
                op.release()
            del rem[tau]
            if res > RESIDUAL_TOL:
                raise SolverError(f"annulus block solve residual {res:.2e} at tau={tau}")
            n1 = blocks.n1
            # identity check: for radiating fields P1 = (1/2) M c - (1/2) c = (1/2) L11 c - c
            ident = 0.5 * L11.matvec(st["c"]) - st["c"]
            row = []
            for k, dr in enumerate(drives):
                out = TangentialTrace.from_coords(outer, st["c"][:, k] - a[:n1, k])
                diag = {
                    "tau": tau,
                    "exterior_residual": st["exterior"]["residual"],
                    "exterior_iterations": st["exterior"]["iterations"],
                    "static_cond": static_cond,
                    "annulus_residual": res,
                    "annulus_iterations": it,
                    "inner_data_l2": st["data_norm"][k],
                    "outer_trace_l2": st["b"][k].l2_norm(),
                    "rhs_identity_mismatch": _rel(st["P1"][:, k] - ident[:, k], ident[:, k]),
                    "output_l2": out.l2_norm(),
                    "output_thdiv": self.output_norm(out),
                    "densities": (st["a"][k], TangentialTrace.from_coords(outer, a[:n1, k]),
                                  TangentialTrace.from_coords(mesh_tau, a[n1:, k])),
                }
                row.append(LemmaResult(tau, dr, out, diag))
            results.append(row)
        return results

    def output_norm(self, trace: TangentialTrace) -> float:
        """Weighted ``TH^{-1/2}_Div`` norm of an outer trace (VSH projection up to ``n_max``)."""
        e = vsh_analyze(trace.values, trace.mesh.quad_nodes, trace.mesh.quad_weights, self.n_max,
                        self.outer.nominal_radius, tangential_tol=1e-6)
        return thdiv_norm(e, WeightedNorm(self.n_max))


def solve_lemma_crucial(mesh_outer: SurfaceMesh, mesh_inner: SurfaceMesh, omega: float, tau: float,
                        phi: TangentialTrace | None, psi) -> tuple[TangentialTrace, dict]:
    """``nu x (H_tau - H0)`` on ``dOmega`` for data ``phi`` on ``dD_tau`` and ``psi`` on ``dOmega``.

    ``mesh_inner`` is ``dD_tau``; ``psi`` is a :class:`VshExpansion` or a
    trace on ``mesh_outer`` (projected onto VSH up to degree 8).
    """
    mesh_D = scale_mesh(mesh_inner, 1.0 / tau)
    phi_vals = None
    if phi is not None:
        if phi.mesh is not mesh_inner:
            raise ValueError("phi lives on a different mesh")
        phi_vals = phi.values
    if psi is not None and not isinstance(psi, VshExpansion):
        if psi.mesh is not mesh_outer:
            raise ValueError("psi lives on a different mesh")
        psi = vsh_analyze(psi.values, mesh_outer.quad_nodes, mesh_outer.quad_weights, 8,
                          mesh_outer.nominal_radius, tangential_tol=1e-6)
    solver = LemmaSolver(mesh_outer, mesh_D, omega)
    res = solver.run([tau], [LemmaDrive(phi_vals, psi)])[0][0]
    return res.output, res.diagnostics


# ---------------------------------------------------------------- diagnostics and dumps

def silver_mueller_residual(sol: ScatterSolution, radii=(10.0, 20.0, 40.0), n_dir: int = 26):
    """``max_x |x| |(curl U) x x_hat - i w U|`` on spheres of the given radii.

    Uses ``curl U = i w V``.  Directions are a fixed Fibonacci set.
    """
    if sol.kind != "exterior":
        raise ValueError("radiation condition applies to exterior solutions")
    i = np.arange(n_dir) + 0.5
    z = 1 - 2 * i / n_dir
    ph = np.pi * (1 + 5**0.5) * i
    d = np.stack([np.sqrt(1 - z**2) * np.cos(ph), np.sqrt(1 - z**2) * np.sin(ph), z], axis=1)
    w = sol.omega
    out = []
    for r in radii:
        U, V = sol.fields(r * d)
        res = np.cross(1j * w * V, d) - 1j * w * U
        out.append(float(r * np.linalg.norm(res, axis=1).max()))
    return np.array(out)


def slice_grid(plane: str = "xz", extent: float = 3.0, n: int = 41, offset: float = 0.0):
    """Regular ``n x n`` grid on a coordinate plane, flattened to (n^2, 3)."""
    axes = {"xy": (0, 1, 2), "xz": (0, 2, 1), "yz": (1, 2, 0)}
    if plane not in axes:
        raise ValueError(f"plane must be one of {sorted(axes)}")
    i, j, k = axes[plane]
    s = np.linspace(-extent, extent, n)
    A, B = np.meshgrid(s, s, indexing="ij")
    p = np.zeros((n * n, 3))
    p[:, i], p[:, j], p[:, k] = A.ravel(), B.ravel(), offset
    return p


def write_field_slice(path, points, E, H) -> None:
    """CSV of points and complex field values (real/imaginary columns)."""
    cols = ["x", "y", "z"] + [f"{f}{c}_{part}" for f in "EH" for c in "xyz" for part in ("re", "im")]
    with open(path, "w", newline="") as fh:
        fh.write("# nearcloak field slice v1\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for p, e, h in zip(points, E, H):
            vals = [f"{v:.10e}" for v in p]
            for F in (e, h):
                for comp in F:
                    vals += [f"{comp.real:.10e}", f"{comp.imag:.10e}"]
            w.writerow(vals)
