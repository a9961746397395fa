"""
Config-driven command line harness.

Every subcommand reads an INI file (``--config``), writes the fully resolved
configuration next to its outputs and emits data only (CSV / JSON).

Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 resonance (``omega`` at an interior eigenfrequency, or a boundary
integral system above the conditioning threshold).

Configuration sections and defaults::

    [run]      omega = 1.0, n_max = 12, refinement = 3, seed = 0,
               rhos = 0.4 0.2 0.1 0.05, taus = 0.2 0.1 0.05
    [medium]   R_D = 1, R_Omega = 2, rho = 0.1, alpha0 = beta0 = gamma0 = 1,
               eps_a = 1, mu_a = 1, sigma_a = 0, paper_mu_scaling = false
    [grid]     eps_a = 0.1 1 10 100, mu_a = 1, sigma_a = 0 1 100
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import admittance as adm
from .media import (
    Core,
    DomainError,
    MediumValidationError,
    build_physical_medium,
    build_virtual_medium,
    check_regularity,
    layered_spec,
    medium_from_config,
)
from .vsh_mie import (
    LayeredSphereSpec,
    ResonanceError,
    VshExpansion,
    admittance_sphere,
    annulus_solution,
    is_em_eigenvalue,
    pec_sphere_scattering,
    plane_wave,
    solve_layered_sphere,
)

__all__ = [
    "SweepConfig",
    "SlopeFit",
    "fit_slope",
    "load_config",
    "virtual_admittance",
    "cmd_medium",
    "cmd_mie_admittance",
    "cmd_sweep_rho",
    "cmd_stress",
    "scan_resonant_cores",
    "stress_uniformity",
    "cmd_props33_34",
    "cmd_exterior",
    "cmd_annulus",
    "cmd_check",
    "main",
]

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_RESONANCE = 0, 1, 2, 3
R2_FLAG = 0.98
ZERO_DIFF = 1e-12


class ResonantFrequency(ArithmeticError):
    """``omega`` is (numerically) an interior eigenfrequency of ``Omega``."""


# ---------------------------------------------------------------- configuration

def _floats(text):
    return [float(t) for t in str(text).replace(",", " ").split()]


@dataclass
class SweepConfig:
    """Resolved run configuration; see the module docstring for the INI layout."""

    R_D: float = 1.0
    R_Omega: float = 2.0
    omega: float = 1.0
    rhos: list = field(default_factory=lambda: [0.4, 0.2, 0.1, 0.05])
    taus: list = field(default_factory=lambda: [0.2, 0.1, 0.05])
    rho: float = 0.1
    alpha0: float = 1.0
    beta0: float = 1.0
    gamma0: float = 1.0
    paper_mu_scaling: bool = False
    core: tuple = (1.0, 1.0, 0.0)
    eps_grid: list = field(default_factory=lambda: [0.1, 1.0, 10.0, 100.0])
    mu_grid: list = field(default_factory=lambda: [1.0])
    sigma_grid: list = field(default_factory=lambda: [0.0, 1.0, 100.0])
    n_max: int = 12
    refinement: int = 3
    seed: int = 0
    out: str = "out"
    threads: int = 1

    def __post_init__(self):
        r = np.asarray(self.rhos, dtype=float)
        if len(r) == 0 or np.any(r <= 0) or np.any(r >= 1) or np.any(np.diff(r) >= 0):
            raise MediumValidationError("rhos must lie in (0, 1) and be strictly decreasing")
        t = np.asarray(self.taus, dtype=float)
        if len(t) == 0 or np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) >= 0):
            raise MediumValidationError("taus must lie in (0, 1) and be strictly decreasing")
        if not self.eps_grid or not self.mu_grid or not self.sigma_grid:
            raise MediumValidationError("the core grid must not be empty")
        if self.omega <= 0 or self.n_max < 1 or self.refinement < 0:
            raise MediumValidationError("need omega > 0, n_max >= 1, refinement >= 0")
        if not 0 < self.R_D < self.R_Omega:
            raise MediumValidationError("need 0 < R_D < R_Omega")

    @property
    def grid(self) -> list[tuple[float, float, float]]:
        return [(e, m, s) for e in self.eps_grid for m in self.mu_grid for s in self.sigma_grid]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        j = lambda v: " ".join(repr(float(x)) for x in v)  # noqa: E731
        cp["run"] = {"omega": repr(self.omega), "n_max": str(self.n_max),
                     "refinement": str(self.refinement), "seed": str(self.seed),
                     "rhos": j(self.rhos), "taus": j(self.taus), "threads": str(self.threads)}
        cp["medium"] = {"R_D": repr(self.R_D), "R_Omega": repr(self.R_Omega), "rho": repr(self.rho),
                        "alpha0": repr(self.alpha0), "beta0": repr(self.beta0),
                        "gamma0": repr(self.gamma0), "eps_a": repr(self.core[0]),
                        "mu_a": repr(self.core[1]), "sigma_a": repr(self.core[2]),
                        "paper_mu_scaling": str(self.paper_mu_scaling).lower()}
        cp["grid"] = {"eps_a": j(self.eps_grid), "mu_a": j(self.mu_grid), "sigma_a": j(self.sigma_grid)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def load_config(path=None, **overrides) -> SweepConfig:
    """Read an INI file (``None`` for all defaults) and apply keyword overrides."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if path is not None:
        if not cp.read(path):
            raise MediumValidationError(f"cannot read config file {path}")
    for sec in ("run", "medium", "grid"):
        if not cp.has_section(sec):
            cp.add_section(sec)
    unknown = set(cp.sections()) - {"run", "medium", "grid"}
    if unknown:
        raise MediumValidationError(f"unknown config sections: {sorted(unknown)}")
    d = SweepConfig()
    run, grid = cp["run"], cp["grid"]
    try:
        med = medium_from_config(cp["medium"])
        core = tuple(float(v[0]) if len(v) == 1 else np.nan for v in (med.eps_a, med.mu_a, med.sigma_a))
        if any(np.isnan(core)):
            raise MediumValidationError("the harness uses isotropic cores (one value per entry)")
        kw = dict(
            R_D=med.R_D, R_Omega=med.R_Omega, rho=med.rho, alpha0=med.alpha0, beta0=med.beta0,
            gamma0=med.gamma0, paper_mu_scaling=med.paper_mu_scaling, core=core,
            omega=float(run.get("omega", d.omega)),
            rhos=_floats(run.get("rhos", " ".join(map(str, d.rhos)))),
            taus=_floats(run.get("taus", " ".join(map(str, d.taus)))),
            n_max=int(run.get("n_max", d.n_max)),
            refinement=int(run.get("refinement", d.refinement)),
            seed=int(run.get("seed", d.seed)),
            threads=int(run.get("threads", d.threads)),
            eps_grid=_floats(grid.get("eps_a", " ".join(map(str, d.eps_grid)))),
            mu_grid=_floats(grid.get("mu_a", " ".join(map(str, d.mu_grid)))),
            sigma_grid=_floats(grid.get("sigma_a", " ".join(map(str, d.sigma_grid)))),
        )
    except ValueError as exc:
        if isinstance(exc, MediumValidationError):
            raise
        raise MediumValidationError(f"malformed config entry: {exc}") from exc
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return SweepConfig(**kw)


# ---------------------------------------------------------------- fits and output

@dataclass
class SlopeFit:
    """Least-squares line through ``(log x, log y)``."""

    slope: float
    intercept: float
    r2: float
    residuals: list
    flagged: bool


def fit_slope(x, y) -> SlopeFit:
    """Fit ``log y = slope log x + c``; fits with ``R^2 < 0.98`` are flagged."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if len(lx) < 2:
        raise ValueError("need at least two points for a slope")
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (s, c), *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = ly - (s * lx + c)
    tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - float(np.sum(res**2) / tot) if tot > 0 else 1.0
    return SlopeFit(float(s), float(c), r2, [float(v) for v in res], bool(r2 < R2_FLAG))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12e}"
    return str(v)


def _write_csv(path: Path, schema: str, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# nearcloak {schema} v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _outdir(cfg: SweepConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    (p / "resolved_config.ini").write_text(cfg.to_ini())
    return p


def _require_regular_frequency(cfg: SweepConfig):
    chk = is_em_eigenvalue(cfg.omega, cfg.R_Omega)
    if chk.is_eigenvalue:
        raise ResonantFrequency(
            f"omega={cfg.omega} is within {chk.distance:.2e} of the eigenfrequency "
            f"{chk.nearest:.12g} (n={chk.mode[0]}, {chk.mode[1]})")
    return chk


def _map(cfg: SweepConfig, fn, items):
    """Ordered map over a thread pool of ``cfg.threads`` workers."""
    if cfg.threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(cfg.threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------- oracle admittances

def virtual_admittance(cfg: SweepConfig, rho: float, core, gamma0: float | None = None,
                       n_max: int | None = None):
    """Admittance map of the virtual layout (equal to the physical one on ``dOmega``)."""
    g = cfg.gamma0 if gamma0 is None else gamma0
    mf = build_virtual_medium(rho, cfg.alpha0, cfg.beta0, g, Core(*core),
                              cfg.paper_mu_scaling, cfg.R_D, cfg.R_Omega)
    return admittance_sphere(layered_spec(mf, cfg.omega), n_max or cfg.n_max)


def vacuum_admittance(cfg: SweepConfig, n_max: int | None = None):
    return admittance_sphere(LayeredSphereSpec.vacuum(cfg.R_Omega, cfg.omega), n_max or cfg.n_max)


def sweep_rho(cfg: SweepConfig, gamma0: float | None = None, cores=None):
    """Rows ``(core, rho, weighted diff, l2 diff)`` and per-core fits.

    A core whose differences are at roundoff level (below ``1e-12`` times
    the largest vacuum admittance entry) gets no slope fit.
    """
    cores = cfg.grid if cores is None else cores
    lam0 = vacuum_admittance(cfg)
    w = adm.WeightedNorm(cfg.n_max)
    floor = ZERO_DIFF * max(1.0, float(np.abs(lam0.matrix).max()))

    def one(core):
        out = []
        for rho in cfg.rhos:
            lam = virtual_admittance(cfg, rho, core, gamma0)
            out.append((rho, adm.admittance_diff_norm(lam, lam0, w), adm.admittance_diff_norm(lam, lam0)))
        return out

    per_core = _map(cfg, one, cores)
    rows, fits = [], []
    for core, vals in zip(cores, per_core):
        for rho, dw, d2 in vals:
            rows.append((core, rho, dw, d2))
        diffs = np.array([v[1] for v in vals])
        # differences at roundoff level carry no rate: the fit is skipped
        fit = fit_slope([v[0] for v in vals], diffs) if np.all(diffs > floor) else None
        c_hat = float(np.max(diffs / np.asarray(cfg.rhos) ** 3))
        fits.append({"core": core, "fit": fit, "C_hat": c_hat})
    return rows, fits


def scan_resonant_cores(cfg: SweepConfig, gamma0: float = 0.0, eps_range=(1.0, 1e4), n_scan: int = 161,
                        n_max: int = 4) -> list[float]:
    """Core permittivities at local maxima of ``C_hat`` over a log-spaced ``eps_a`` scan.

    The scan uses lossless cores (``mu_a = 1``, ``sigma_a = 0``) and a
    truncation of ``n_max`` modes; each local maximum is polished by a
    bounded scalar search in ``log eps_a``.
    """
    from scipy.optimize import minimize_scalar

    small = replace(cfg, n_max=n_max, threads=1)

    def c_hat(le):
        return sweep_rho(small, gamma0=gamma0, cores=[(float(np.exp(le)), 1.0, 0.0)])[1][0]["C_hat"]

    le = np.linspace(np.log(eps_range[0]), np.log(eps_range[1]), n_scan)
    c = np.array(_map(cfg, c_hat, le))
    peaks = [k for k in range(1, n_scan - 1) if c[k] > c[k - 1] and c[k] >= c[k + 1]]
    out = []
    for k in peaks:
        r = minimize_scalar(lambda x: -c_hat(x), bounds=(le[k - 1], le[k + 1]), method="bounded",
                            options={"xatol": 1e-10})
        out.append(float(np.exp(r.x)))
    return out


def stress_uniformity(cfg: SweepConfig, slope_floor: float = 2.5, factor: float = 100.0, **scan) -> dict:
    """Compare the lossy layer (``gamma0`` of ``cfg``) with no layer on an extended core grid.

    The grid is the configured one plus the near-resonant cores found by
    :func:`scan_resonant_cores` without the layer.  A core "busts" a
    configuration when its slope is below ``slope_floor`` or its ``C_hat``
    is at least ``factor`` times the baseline (largest ``C_hat`` over the
    configured grid with the layer).
    """
    _, base_fits = sweep_rho(cfg)
    baseline = max(f["C_hat"] for f in base_fits)
    resonant = scan_resonant_cores(cfg, **scan)
    cores = cfg.grid + [(e, 1.0, 0.0) for e in resonant]
    report = {"baseline_C_hat": baseline, "resonant_eps": resonant, "slope_floor": slope_floor,
              "factor": factor}
    for name, g in (("without_layer", 0.0), ("with_layer", cfg.gamma0)):
        _, fits = sweep_rho(cfg, gamma0=g, cores=cores)
        entries = []
        for f in fits:
            slope = None if f["fit"] is None else f["fit"].slope
            busted = (slope is not None and slope < slope_floor) or f["C_hat"] >= factor * baseline
            entries.append({"core": list(f["core"]), "slope": slope, "C_hat": f["C_hat"],
                            "C_ratio": f["C_hat"] / baseline, "busted": bool(busted)})
        report[name] = {"gamma0": g, "cores": entries, "any_busted": any(e["busted"] for e in entries)}
    return report


# ---------------------------------------------------------------- commands

def cmd_medium(cfg: SweepConfig) -> dict:
    """Regularity report and layer table of the physical and virtual media at ``rho``."""
    out = _outdir(cfg)
    rng = np.random.default_rng(cfg.seed)
    pts = rng.uniform(-1, 1, (4000, 3))
    pts = pts[np.linalg.norm(pts, axis=1) < 1] * cfg.R_Omega
    r = np.linalg.norm(pts, axis=1)
    phys = build_physical_medium(cfg.rho, cfg.alpha0, cfg.beta0, cfg.gamma0, Core(*cfg.core),
                                 cfg.R_D, cfg.R_Omega)
    virt = build_virtual_medium(cfg.rho, cfg.alpha0, cfg.beta0, cfg.gamma0, Core(*cfg.core),
                                cfg.paper_mu_scaling, cfg.R_D, cfg.R_Omega)
    report = {}
    for name, mf in (("physical", phys), ("virtual", virt)):
        keep = np.ones(len(pts), bool)
        for s in mf.interfaces:
            keep &= np.abs(r - s) > 1e-6 * cfg.R_Omega
        reg = check_regularity(mf, pts[keep])
        report[name] = {"eps": reg.eps, "mu": reg.mu, "sigma": reg.sigma, "violations": reg.violations,
                        "interfaces": mf.interfaces}
    spec = layered_spec(virt, cfg.omega)
    report["layers"] = {"radii": spec.radii, "eps": spec.eps, "mu": spec.mu, "sigma": spec.sigma}
    _write_json(out / "medium.json", report)
    return report


def cmd_mie_admittance(cfg: SweepConfig) -> list:
    """Per-mode admittances of the virtual layout at ``rho`` and of vacuum."""
    out = _outdir(cfg)
    _require_regular_frequency(cfg)
    lam = virtual_admittance(cfg, cfg.rho, cfg.core)
    lam0 = vacuum_admittance(cfg)
    rows = []
    for n in range(1, cfg.n_max + 1):
        for pol, a, a0 in (("TE", lam.te[n - 1], lam0.te[n - 1]), ("TM", lam.tm[n - 1], lam0.tm[n - 1])):
            rows.append((n, pol, a.real, a.imag, a0.real, a0.imag, abs(a - a0)))
    _write_csv(out / "mie_admittance.csv", "mie-admittance",
               ["n", "pol", "lambda_re", "lambda_im", "lambda0_re", "lambda0_im", "abs_diff"], rows)
    return rows


def cmd_sweep_rho(cfg: SweepConfig) -> dict:
    """Admittance differences over ``rho`` and the core grid, with slope fits."""
    out = _outdir(cfg)
    _require_regular_frequency(cfg)
    rows, fits = sweep_rho(cfg)
    _write_csv(out / "sweep_rho.csv", "sweep-rho",
               ["eps_a", "mu_a", "sigma_a", "rho", "diff_thdiv", "diff_l2", "diff_over_rho3"],
               [(*c, rho, dw, d2, dw / rho**3) for c, rho, dw, d2 in rows])
    report = _fit_report(fits, "rho")
    _write_json(out / "sweep_rho_fit.json", report)
    return report


def _fit_report(fits, var):
    entries = []
    for f in fits:
        fit = f["fit"]
        entries.append({
            "core": list(f["core"]) if not isinstance(f["core"], str) else f["core"],
            "slope": None if fit is None else fit.slope,
            "r2": None if fit is None else fit.r2,
            "residuals": None if fit is None else fit.residuals,
            "flagged": None if fit is None else fit.flagged,
            "skipped": fit is None,
            "C_hat": f.get("C_hat"),
        })
    c = [e["C_hat"] for e in entries if e["C_hat"] is not None and e["C_hat"] > 0]
    return {"variable": var, "fits": entries, "C_hat_max": max(c) if c else 0.0,
            "C_hat_spread": (max(c) / min(c)) if c else None}


def lemma_drives(cfg: SweepConfig, mesh_D):
    """The two drives used for the exterior sweeps: ``psi`` alone and ``phi`` alone.

    ``psi`` is the degree-1 gradient-type mode on ``dOmega``; ``phi(tau .)``
    is the degree-1 gradient-type mode on the reference sphere, scaled to
    unit ``L^2`` norm there.
    """
    from .scattering import LemmaDrive

    psi = VshExpansion.single(1, 1, 0, "a", radius=cfg.R_Omega)
    phi = VshExpansion.single(1, 1, 0, "a", radius=cfg.R_D).synthesize(mesh_D.quad_nodes)
    phi = phi / np.sqrt(np.sum(mesh_D.quad_weights * np.sum(np.abs(phi) ** 2, axis=1)))
    return [LemmaDrive(None, psi, "psi"), LemmaDrive(phi, None, "phi")]


def cmd_props33_34(cfg: SweepConfig, mesh_outer=None, mesh_D=None) -> dict:
    """``psi``- and ``phi``-driven decomposition sweeps over ``tau`` with slope fits."""
    from .geometry import make_sphere_mesh
    from .scattering import LemmaSolver

    out = _outdir(cfg)
    _require_regular_frequency(cfg)
    mo = mesh_outer or make_sphere_mesh(cfg.R_Omega, cfg.refinement, curved=True)
    mD = mesh_D or make_sphere_mesh(cfg.R_D, cfg.refinement, curved=True)
    drives = lemma_drives(cfg, mD)
    res = LemmaSolver(mo, mD, cfg.omega, n_max=min(cfg.n_max, 8)).run(cfg.taus, drives)
    rows = []
    for row in res:
        for r in row:
            g = r.diagnostics
            rows.append((r.tau, r.drive.label, g["output_thdiv"], g["output_l2"], g["inner_data_l2"],
                         g["exterior_residual"], g["annulus_residual"], g["rhs_identity_mismatch"]))
    _write_csv(out / "props.csv", "props",
               ["tau", "drive", "norm_thdiv", "norm_l2", "inner_data_l2", "exterior_residual",
                "annulus_residual", "rhs_identity_mismatch"], rows)
    fits = []
    for label in [d.label for d in drives]:
        t = [r[0] for r in rows if r[1] == label]
        v = [r[2] for r in rows if r[1] == label]
        fit = fit_slope(t, v) if all(x > 0 for x in v) else None
        fits.append({"core": label, "fit": fit, "C_hat": None})
    report = _fit_report(fits, "tau")
    _write_json(out / "props_fit.json", report)
    return report


def cmd_exterior(cfg: SweepConfig) -> dict:
    """Plane wave on a perfectly conducting ``dD``: far field against the Mie series."""
    from .geometry import make_sphere_mesh, sphere_quadrature
    from .scattering import silver_mueller_residual, slice_grid, solve_exterior, write_field_slice
    from .bie import TangentialTrace

    out = _outdir(cfg)
    m = make_sphere_mesh(cfg.R_D, cfg.refinement, curved=True)
    d, p = np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])
    Ei, _ = plane_wave(d, p, cfg.omega)(m.quad_nodes)
    sol = solve_exterior(m, cfg.omega, TangentialTrace(m, -np.cross(m.normals, Ei)))
    q = sphere_quadrature(1.0, 16)
    ff = sol.far_field(q.quad_nodes)
    ref = pec_sphere_scattering(d, p, cfg.omega, cfg.R_D).far_field(q.quad_nodes)
    w = q.quad_weights[:, None]
    err = float(np.sqrt(np.sum(w * np.abs(ff - ref) ** 2) / np.sum(w * np.abs(ref) ** 2)))
    rows = [(*x, *(v for c in f for v in (c.real, c.imag)), *(v for c in g for v in (c.real, c.imag)))
            for x, f, g in zip(q.quad_nodes, ff, ref)]
    _write_csv(out / "exterior_far_field.csv", "exterior-far-field",
               ["dx", "dy", "dz", "Fx_re", "Fx_im", "Fy_re", "Fy_im", "Fz_re", "Fz_im",
                "Mie_x_re", "Mie_x_im", "Mie_y_re", "Mie_y_im", "Mie_z_re", "Mie_z_im"], rows)
    pts = slice_grid("xz", 3 * cfg.R_D, 31)
    keep = np.linalg.norm(pts, axis=1) > 1.3 * cfg.R_D
    E, H = sol.fields(pts[keep])
    write_field_slice(out / "exterior_slice.csv", pts[keep], E, H)
    report = {"far_field_rel_l2": err, "cond": sol.meta["cond"], "residual": sol.meta["residual"],
              "silver_mueller": silver_mueller_residual(sol).tolist(), "n_nodes": m.n_nodes}
    _write_json(out / "exterior.json", report)
    return report


def cmd_annulus(cfg: SweepConfig) -> dict:
    """Single-mode shell problem (perfectly conducting ``dD_rho``) against the VSH oracle."""
    from .bie import TangentialTrace
    from .geometry import make_sphere_mesh, scale_mesh
    from .scattering import slice_grid, solve_annulus, write_field_slice

    out = _outdir(cfg)
    _require_regular_frequency(cfg)
    mo = make_sphere_mesh(cfg.R_Omega, cfg.refinement, curved=True)
    mi = scale_mesh(make_sphere_mesh(cfg.R_D, cfg.refinement, curved=True), cfg.rho)
    report = {}
    for fam in ("a", "b"):
        e = VshExpansion.single(2, 1, 0, fam, radius=cfg.R_Omega)
        b = TangentialTrace(mo, e.synthesize(mo.quad_nodes), div=e.surface_divergence(mo.quad_nodes))
        sol = solve_annulus(mo, mi, cfg.omega, b, method="blocks")
        href = annulus_solution(e, None, cfg.omega, cfg.rho * cfg.R_D).traces_at(cfg.R_Omega)[1]
        href = href.synthesize(mo.quad_nodes)
        w = mo.quad_weights[:, None]
        a1 = sol.densities["a1"].values
        err = float(np.sqrt(np.sum(w * np.abs(a1 - href) ** 2) / np.sum(w * np.abs(href) ** 2)))
        report[fam] = {"trace_rel_l2": err, "residual": sol.meta["residual"],
                       "iterations": sol.meta["iterations"]}
        pts = slice_grid("xz", cfg.R_Omega, 31)
        rr = np.linalg.norm(pts, axis=1)
        keep = (rr > cfg.rho * cfg.R_D + 0.15) & (rr < 0.85 * cfg.R_Omega)
        E, H = sol.fields(pts[keep])
        write_field_slice(out / f"annulus_slice_{fam}.csv", pts[keep], E, H)
    _write_json(out / "annulus.json", report)
    return report


# ---------------------------------------------------------------- invariant suite

def _entry(name, value, threshold, ok, **extra):
    return {"name": name, "value": value, "threshold": threshold, "pass": bool(ok), **extra}


def check_pairing(weights_scale=None, n_theta: int = 12) -> dict:
    """Skewness of the quadrature pairing and its closed-form value on the unit sphere.

    ``weights_scale`` multiplies the quadrature weights (negative control).
    """
    from .geometry import sphere_quadrature
    from .vsh_mie import tangential_basis

    q = sphere_quadrature(1.0, n_theta)
    if weights_scale is not None:
        q = replace(q, quad_weights=q.quad_weights * weights_scale)
    rng = np.random.default_rng(0)
    j = VshExpansion.random(3, rng).synthesize(q.quad_nodes)
    m = VshExpansion.random(3, rng).synthesize(q.quad_nodes)
    skew = abs(adm.duality_pairing(j, m, q) + adm.duality_pairing(m, j, q))
    g, rot = tangential_basis(1, 0, q.quad_nodes)
    val = adm.duality_pairing(g, np.cross(q.normals, g), q)
    # grad Y . ((nu x grad Y) x nu) = |grad Y|^2 integrates to n(n+1) = 2
    mismatch = abs(val - 2.0)
    v = max(skew, mismatch)
    return _entry("pairing_skewness", v, 1e-10, v < 1e-10, skew=skew, closed_form_mismatch=mismatch)


def check_norm_axioms(seed=0) -> dict:
    rng = np.random.default_rng(seed)
    w = adm.WeightedNorm(6)
    worst = 0.0
    for _ in range(20):
        e, f = VshExpansion.random(6, rng), VshExpansion.random(6, rng)
        lam = complex(rng.standard_normal(), rng.standard_normal())
        ne, nf = adm.thdiv_norm(e, w), adm.thdiv_norm(f, w)
        worst = max(worst, abs(adm.thdiv_norm(e * lam, w) - abs(lam) * ne) / ne,
                    max(adm.thdiv_norm(e + f, w) - ne - nf, 0.0) / (ne + nf))
    zero = adm.thdiv_norm(VshExpansion.zeros(6), w)
    v = max(worst, zero)
    return _entry("norm_axioms", v, 1e-12, v < 1e-12)


def check_energy_identity(cfg: SweepConfig) -> dict:
    worst = 0.0
    rng = np.random.default_rng(cfg.seed)
    for rho in (0.2, 0.1):
        mf = build_virtual_medium(rho, cfg.alpha0, cfg.beta0, 1.0, Core(*cfg.core), cfg.paper_mu_scaling,
                                  cfg.R_D, cfg.R_Omega)
        spec = layered_spec(mf, cfg.omega)
        for psi in (VshExpansion.single(4, 1, 0, "a", radius=cfg.R_Omega),
                    VshExpansion.random(4, rng, radius=cfg.R_Omega)):
            worst = max(worst, adm.energy_identity_residual(solve_layered_sphere(spec, psi), n_radial=48))
    return _entry("energy_identity", worst, 1e-6, worst < 1e-6)


def check_kernel_split() -> dict:
    from .bie import kernel_split

    rng = np.random.default_rng(1)
    x = rng.standard_normal((400, 3))
    y = rng.standard_normal((400, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    r = np.linalg.norm(x - y, axis=1)
    bounds = []
    for tau in (0.1, 0.05, 0.025):
        ks = kernel_split(x, y, tau, 1.0)
        bounds.append(float(np.max(np.abs(ks.remainder) / tau**2 / r)))
    spread = max(bounds) / min(bounds)
    return _entry("kernel_split_uniform", spread, 1.1, spread < 1.1, bounds=bounds)


def check_mesh_convergence(omega=1.0) -> dict:
    from .bie import assemble_magnetic_dipole, sphere_dipole_eigenvalues
    from .geometry import make_sphere_mesh

    lam = sphere_dipole_eigenvalues(1, omega)[1]
    errs = []
    for ref in (0, 1):
        m = make_sphere_mesh(1.0, ref, curved=True)
        M = assemble_magnetic_dipole(m, omega)
        g = VshExpansion.single(1, 1, 0, "b").synthesize(m.quad_nodes)
        from .bie import TangentialTrace
        Mg = M.apply(TangentialTrace(m, g)).values
        errs.append(float(np.sqrt(np.sum(m.quad_weights[:, None] * np.abs(Mg - lam * g) ** 2)
                                  / np.sum(m.quad_weights[:, None] * np.abs(lam * g) ** 2))))
    ratio = errs[0] / errs[1]
    return _entry("mesh_convergence", ratio, 2.0, ratio > 2.0, errors=errs)


def check_trace_and_radiation(omega=1.0) -> list:
    from .bie import TangentialTrace
    from .geometry import make_sphere_mesh
    from .scattering import silver_mueller_residual, solve_exterior

    m = make_sphere_mesh(1.0, 1, curved=True)
    p = np.array([0.3, -0.2, 1.0])

    def dipole(x):  # U = curl(p G(x)) = grad G x p
        r = np.linalg.norm(x, axis=1)
        ph = (1j * omega * r - 1) * np.exp(1j * omega * r) / (4 * np.pi * r**3)
        return np.cross(ph[:, None] * x, p)

    sol = solve_exterior(m, omega, TangentialTrace(m, np.cross(m.normals, dipole(m.quad_nodes))))
    x = np.array([[3.0, 0.5, -1.0], [0.0, -4.0, 2.0], [2.5, 2.5, 2.5]])
    field_err = float(np.abs(sol.E(x) - dipole(x)).max() / np.abs(dipole(x)).max())
    sm = silver_mueller_residual(sol)
    return [
        _entry("trace_consistency", sol.meta["trace_residual"], 1e-9, sol.meta["trace_residual"] < 1e-9,
               solve_residual=sol.meta["residual"], dipole_field_error=field_err),
        _entry("dipole_field", field_err, 1e-2, field_err < 1e-2),
        _entry("radiation_decay", sm.tolist(), "decreasing", bool(np.all(np.diff(sm) < 0))),
    ]


def check_bie_mie(omega=1.0, refinement=1) -> dict:
    from .bie import TangentialTrace
    from .geometry import make_sphere_mesh, sphere_quadrature
    from .scattering import solve_exterior

    m = make_sphere_mesh(1.0, refinement, curved=True)
    d, p = np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])
    Ei, _ = plane_wave(d, p, omega)(m.quad_nodes)
    sol = solve_exterior(m, omega, TangentialTrace(m, -np.cross(m.normals, Ei)))
    q = sphere_quadrature(1.0, 16)
    ff = sol.far_field(q.quad_nodes)
    ref = pec_sphere_scattering(d, p, omega).far_field(q.quad_nodes)
    w = q.quad_weights[:, None]
    err = float(np.sqrt(np.sum(w * np.abs(ff - ref) ** 2) / np.sum(w * np.abs(ref) ** 2)))
    return _entry("bie_mie_far_field", err, 1e-2, err < 1e-2, refinement=refinement)


def check_determinism(cfg: SweepConfig) -> dict:
    small = SweepConfig(**{**asdict(cfg), "eps_grid": [10.0], "mu_grid": [1.0], "sigma_grid": [1.0],
                           "n_max": 4, "threads": 1})
    texts = []
    for _ in range(2):
        rows, _ = sweep_rho(small)
        buf = io.StringIO()
        w = csv.writer(buf)
        for c, rho, dw, d2 in rows:
            w.writerow([_fmt(v) for v in (*c, rho, dw, d2)])
        texts.append(buf.getvalue())
    return _entry("determinism", texts[0] == texts[1], True, texts[0] == texts[1])


def check_eigenvalue(cfg: SweepConfig) -> dict:
    chk = is_em_eigenvalue(cfg.omega, cfg.R_Omega)
    return _entry("omega_not_eigenvalue", chk.distance, 1e-6, not chk.is_eigenvalue,
                  nearest=chk.nearest, mode=list(chk.mode) if chk.mode else None)


def run_checks(cfg: SweepConfig, weights_scale=None) -> dict:
    """All invariants as report entries; never raises on a failed check."""
    entries = []

    def guarded(name, fn):
        try:
            r = fn()
            entries.extend(r if isinstance(r, list) else [r])
        except Exception as exc:  # failures are report entries
            entries.append(_entry(name, None, None, False, error=f"{type(exc).__name__}: {exc}"))

    guarded("omega_not_eigenvalue", lambda: check_eigenvalue(cfg))
    guarded("pairing_skewness", lambda: check_pairing(weights_scale))
    guarded("norm_axioms", lambda: check_norm_axioms(cfg.seed))
    guarded("energy_identity", lambda: check_energy_identity(cfg))
    guarded("kernel_split_uniform", check_kernel_split)
    guarded("mesh_convergence", lambda: check_mesh_convergence(cfg.omega))
    guarded("trace_consistency", lambda: check_trace_and_radiation(cfg.omega))
    guarded("bie_mie_far_field", lambda: check_bie_mie(cfg.omega))
    guarded("determinism", lambda: check_determinism(cfg))
    return {"checks": entries, "all_pass": all(e["pass"] for e in entries)}


def cmd_stress(cfg: SweepConfig) -> dict:
    """Uniformity stress: near-resonant cores with and without the lossy layer."""
    out = _outdir(cfg)
    _require_regular_frequency(cfg)
    report = stress_uniformity(cfg)
    rows = [(name, *e["core"], e["slope"] if e["slope"] is not None else "nan", e["C_hat"], e["C_ratio"],
             int(e["busted"]))
            for name in ("without_layer", "with_layer") for e in report[name]["cores"]]
    _write_csv(out / "stress.csv", "stress", ["layout", "eps_a", "mu_a", "sigma_a", "slope", "C_hat",
                                              "C_ratio", "busted"], rows)
    _write_json(out / "stress.json", report)
    return report


def cmd_check(cfg: SweepConfig, weights_scale=None) -> dict:
    """Invariant suite; writes ``check.json`` with value, threshold and verdict per check."""
    out = _outdir(cfg)
    report = run_checks(cfg, weights_scale)
    _write_json(out / "check.json", report)
    return report


# ---------------------------------------------------------------- entry point

COMMANDS = {
    "medium": cmd_medium,
    "mie-admittance": cmd_mie_admittance,
    "sweep-rho": cmd_sweep_rho,
    "stress": cmd_stress,
    "props": cmd_props33_34,
    "exterior": cmd_exterior,
    "annulus": cmd_annulus,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI configuration file")
    common.add_argument("--out", metavar="DIR", help="output directory (default: out)")
    common.add_argument("--threads", type=int, metavar="N", help="worker threads for sweep points")
    common.add_argument("--refinement", type=int, metavar="K", help="sphere mesh refinement level")
    p = argparse.ArgumentParser(prog="nearcloak", description=__doc__.splitlines()[1])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or "").strip().partition("\n")[0])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, out=args.out, threads=args.threads, refinement=args.refinement)
        result = COMMANDS[args.command](cfg)
    except (ResonantFrequency, ResonanceError) as exc:
        print(f"resonance: {exc}", file=sys.stderr)
        return EXIT_RESONANCE
    except (MediumValidationError, DomainError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ArithmeticError as exc:
        from .scattering import ConditioningError

        if isinstance(exc, ConditioningError):
            print(f"resonance: {exc}", file=sys.stderr)
            return EXIT_RESONANCE
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.command == "check":
        for e in result["checks"]:
            print(f"{'PASS' if e['pass'] else 'FAIL'}  {e['name']}: {e['value']}")
        return EXIT_OK if result["all_pass"] else EXIT_NUMERIC
    for e in result.get("fits", []) if isinstance(result, dict) else []:
        flag = "  (R^2 < 0.98)" if e.get("flagged") else ""
        print(f"{e['core']}: slope {e['slope']}{flag}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
