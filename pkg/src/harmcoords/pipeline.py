"""Run configuration, the staged pipeline, the epsilon sweep and the refinement study."""
from __future__ import annotations

import contextlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .errors import ConfigError, HarmError, ResolutionError
from .fem import AssembledForm, DiscreteField, VolumeQuadrature, boundary_flux, solve_dirichlet
from .harmonic import (assemble_gram_deficit, certify_diffeomorphism, max_principle, pushforward_metric,
                       solve_coordinates, solve_radius_field, volume_defect, write_coordinates_csv)
from .identities import (check_bochner_identity, check_conformal_identities, check_energy_identity,
                         check_inequality_ledger, check_refined_bochner, mean_convexity)
from .mesh import estimated_tets, generate_ball_mesh, load_mesh, mesh_summary
from .metric import FAMILIES, boundary_geometry, make_metric
from .norms import (HypothesisReport, TraceNormContext, estimate_sobolev_constant, h_half_norm, riemann_l2,
                    theta_deviation_h_half)
from .uniformize import certify_uniformization, gauss_equation_check, uniformize

SCHEMA_VERSION = 1
STAGES = ("config", "mesh", "metric", "hypothesis", "uniformize", "radius", "coordinates", "gram",
          "certificate", "pushforward", "identities", "inequalities")


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    """Everything a run needs; loaded from YAML or JSON with flag overrides."""

    gen_h: float | None = 0.15
    mesh: str | None = None
    radius: float = 1.0
    family: str = "flat"
    eps: float = 0.0
    amplitude: float = 1.0
    support: float = 2.0
    tol: float = 1e-10
    seed: int = 42
    eps_list: list = field(default_factory=lambda: [0.0025, 0.005, 0.01, 0.02, 0.04])
    levels: int = 3
    level_factor: float = math.sqrt(2.0)
    max_tets: int = 150_000
    jobs: int = 1
    out: str | None = None
    csv: str | None = None
    flip_coordinate: int | None = None
    sobolev_restarts: int = 5
    sobolev_iterations: int = 30
    random_fields: int = 10
    radius_field: bool = True
    ledger: bool = True

    def validate(self):
        if self.mesh is None and self.gen_h is None:
            raise ConfigError("either mesh or gen_h is required")
        if self.gen_h is not None and self.mesh is None and not 0.0 < self.gen_h < 1.0:
            raise ConfigError(f"gen_h must lie in (0, 1), got {self.gen_h}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        for name in ("eps", "radius", "amplitude", "support", "tol", "level_factor"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not np.isfinite(v):
                raise ConfigError(f"{name} must be a finite number")
        if self.eps < 0:
            raise ConfigError(f"eps must be >= 0, got {self.eps}")
        if self.radius <= 0 or self.tol <= 0 or self.level_factor <= 1.0:
            raise ConfigError("radius and tol must be positive and level_factor > 1")
        if self.flip_coordinate is not None and self.flip_coordinate not in (0, 1, 2):
            raise ConfigError("flip_coordinate must be 0, 1 or 2")
        for name in ("jobs", "levels", "max_tets", "sobolev_restarts", "sobolev_iterations", "random_fields"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if any((not isinstance(e, (int, float))) or e < 0 for e in self.eps_list):
            raise ConfigError("eps_list entries must be numbers >= 0")
        return self

    @classmethod
    def from_mapping(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data).validate()

    @classmethod
    def from_file(cls, path):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} does not parse: {exc}") from exc
        return cls.from_mapping(data)

    def override(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return replace(self, **kw).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- report helpers

def _clean(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to None, arrays dropped."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items() if not isinstance(v, (np.ndarray, DiscreteField))}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return _clean(obj.to_dict())
    return str(obj)


def versions():
    return {"harmcoords": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def load_schema():
    return json.loads(resources.files("harmcoords").joinpath("report.schema.json").read_text(encoding="utf-8"))


def validate_report(report):
    import jsonschema
    jsonschema.validate(report, load_schema())
    return report


def dumps(report):
    return json.dumps(report, indent=2, sort_keys=False, allow_nan=False) + "\n"


class _Timer:
    """Accumulates wall time per stage name."""

    def __init__(self):
        self.t = {}

    @contextlib.contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.t[name] = self.t.get(name, 0.0) + time.perf_counter() - t0


def _split_form(h1: AssembledForm, kind) -> AssembledForm:
    """Energy-only form from an assembled energy + mass form, sharing the quadrature."""
    return AssembledForm(h1.space, kind, (h1.matrix - h1.mass).tocsr(), h1.mass, h1.ncomp, h1.quad)


# ---------------------------------------------------------------- pipeline

@dataclass(eq=False)
class PipelineState:
    """In-memory products of a run, kept for tests and sweeps."""

    mesh: object = None
    metric: object = None
    bg: object = None
    quad: object = None
    ctx: object = None
    cm: object = None
    radius: object = None
    atlas: object = None
    gram: object = None
    certificate: object = None


def build_mesh_from(config: RunConfig):
    if config.mesh is not None:
        return load_mesh(config.mesh)
    n = estimated_tets(config.gen_h, config.radius)
    if n > config.max_tets:
        raise ResolutionError(f"h={config.gen_h} needs about {n} tets, above max_tets={config.max_tets}")
    return generate_ball_mesh(config.gen_h, radius=config.radius)


def run_pipeline(config: RunConfig, keep_state=False):
    """Execute every stage and return the report dict (and the state when asked).

    A stage error stops the run; the report then names the failing stage and
    carries the sections produced so far.
    """
    timer = _Timer()
    report = {"schema": SCHEMA_VERSION, "config": config.to_dict(), "versions": versions(), "status": "ok",
              "failed_stage": None, "error_stage": None, "error": None, "verdict": None}
    st = PipelineState()
    stage = "config"
    t_start = time.perf_counter()
    try:
        config.validate()
        stage = "mesh"
        with timer("mesh"):
            st.mesh = build_mesh_from(config)
            report["mesh"] = mesh_summary(st.mesh)
        h = st.mesh.h
        stage = "metric"
        with timer("metric"):
            st.metric = make_metric(config.family, config.eps, config.amplitude, config.support,
                                    probe_radius=max(config.radius, float(np.linalg.norm(st.mesh.vertices, axis=1).max())))
            st.bg = boundary_geometry(st.metric, st.mesh.boundary, st.mesh)
            st.quad = VolumeQuadrature(st.mesh, st.metric)
            st.ctx = TraceNormContext(st.quad, st.bg, tol=config.tol)
            report["mean_convexity"] = mean_convexity(st.bg)
        stage = "hypothesis"
        with timer("hypothesis"):
            tr = st.ctx.trace(2)
            normals = tr.from_surface_vertices(st.bg.vertex_normals)
            n_half = h_half_norm(st.ctx, normals, kind="vector", order=2, name="H1/2(dSigma) N")
            eps_R = riemann_l2(st.quad).value
            eps_th = theta_deviation_h_half(st.ctx).value
            st.ctx.drop("tensor2", 1)
            csob = estimate_sobolev_constant(st.quad, st.bg, restarts=config.sobolev_restarts,
                                             iterations=config.sobolev_iterations, seed=config.seed)
            csob.extra.clear()
            hyp = HypothesisReport.build(st.quad.volume, st.bg.area, csob.value, n_half.value, eps_R, eps_th)
            report["hypothesis"] = hyp.to_dict()
        stage = "uniformize"
        with timer("uniformize"):
            st.cm = uniformize(st.mesh.boundary, st.bg)
            cert = certify_uniformization(st.cm, st.bg, st.ctx, eps_scale=eps_R + eps_th)
            gauss = gauss_equation_check(st.bg, st.ctx)
            cert["gauss_L2"] = gauss["L2"].value
            cert["gauss_H-1/2"] = gauss["H-1/2"].value
            report["uniformization"] = cert
        identities = []
        if config.radius_field:
            stage = "radius"
            with timer("radius"):
                conn = _split_form(st.ctx.form("vector", 2), "connection-energy")
                st.radius = solve_radius_field(st.ctx.space(2), st.quad, st.bg, tr, tol=config.tol, form=conn)
                st.radius.report["normal_h_half"] = n_half.value
                st.radius.report["extension_bound"] = 2.0 * n_half.value + 10.0 * h * h * hyp.Lambda
                st.radius.report["extension_holds"] = bool(st.radius.report["grad_X_L2"]
                                                            <= st.radius.report["extension_bound"])
                report["radius_field"] = st.radius.report
                vd = volume_defect(st.quad, st.bg, st.radius, hyp.Lambda)
                report["volume_defect"] = vd
                identities.append(check_energy_identity(conn, st.radius.X, st.radius.flux,
                                                        name="energy identity X"))
        st.ctx.drop("vector", 2)
        stage = "coordinates"
        with timer("coordinates"):
            dirichlet = _split_form(st.ctx.form("scalar", 2), "dirichlet-energy")
            st.atlas = solve_coordinates(st.ctx.space(2), st.quad, tr, st.cm, tol=config.tol, form=dirichlet)
            for a in range(3):
                identities.append(check_energy_identity(dirichlet, st.atlas.component(a), st.atlas.flux_residual[:, a],
                                                        name=f"energy identity x{a + 1}"))
            if config.flip_coordinate is not None:
                st.atlas = st.atlas.flip(config.flip_coordinate)
            st.atlas.evaluate(st.quad)
            report["coordinates"] = max_principle(st.atlas, st.quad)
            if config.csv:
                write_coordinates_csv(st.atlas, config.csv)
        stage = "gram"
        with timer("gram"):
            st.gram = assemble_gram_deficit(st.atlas, st.quad)
            report["gram_deficit"] = st.gram.report
        stage = "certificate"
        with timer("certificate"):
            st.certificate = certify_diffeomorphism(st.atlas, st.gram, st.quad)
            report["certificate"] = st.certificate.to_dict()
            report["verdict"] = st.certificate.verdict
        stage = "pushforward"
        with timer("pushforward"):
            if st.certificate.min_gram_eigenvalue > 0:
                report["pushforward"] = pushforward_metric(st.atlas, st.gram, st.quad)
            else:
                report["pushforward"] = None
        stage = "identities"
        with timer("identities"):
            identities.append(check_bochner_identity(st.atlas.component(0), st.quad, st.bg, tr, st.atlas.flux[:, 0],
                                                     name="Bochner formula x1"))
            refined = check_refined_bochner(st.atlas, st.cm, st.quad, st.bg, tr, st.gram)
            identities.append(refined)
            identities.extend(check_conformal_identities(st.atlas, st.cm, st.bg, tr, st.metric))
            report["identities"] = [r.to_dict() for r in identities]
        stage = "inequalities"
        if config.ledger:
            with timer("inequalities"):
                ledger = check_inequality_ledger(quad=st.quad, bg=st.bg, ctx=st.ctx, radius=st.radius, atlas=st.atlas,
                                                 gram=st.gram, uniform_cert=report["uniformization"], refined=refined,
                                                 hypothesis=hyp, volume=report.get("volume_defect"), eps=config.eps,
                                                 seed=config.seed, n_random=config.random_fields)
                report["inequalities"] = [r.to_dict() for r in ledger]
        else:
            report["inequalities"] = []
    except HarmError as exc:
        report["status"] = "stage-error"
        report["failed_stage"] = stage
        report["error_stage"] = getattr(exc, "stage", None)
        report["error"] = f"{type(exc).__name__}: {exc}"
    timer.t["total"] = time.perf_counter() - t_start
    report["timings"] = timer.t
    report = _clean(report)
    return (report, st) if keep_state else report


def exit_code(report):
    if report.get("status") != "ok":
        return 4 if report.get("failed_stage") == "config" else 3
    return 0 if report.get("verdict") == "certified" else 2


# ---------------------------------------------------------------- sweeps

def loglog_fit(x, y):
    """Least-squares slope, intercept and R^2 of log y against log x."""
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    A = np.column_stack([x, np.ones_like(x)])
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ np.array([slope, icpt])
    ss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(((y - pred) ** 2).sum()) / ss if ss > 0 else 1.0
    return {"slope": float(slope), "intercept": float(icpt), "r2": float(r2)}


def check_eps_list(eps):
    eps = [float(e) for e in eps]
    if len(eps) < 4:
        raise ConfigError("an epsilon sweep needs at least 4 values")
    if any(b <= a for a, b in zip(eps, eps[1:])):
        raise ConfigError("epsilon list must be strictly increasing without duplicates")
    pos = [e for e in eps if e > 0]
    if len(pos) < 2 or pos[-1] / pos[0] < 10.0 - 1e-12:
        raise ConfigError("epsilon list must span at least one decade")
    return eps


def sweep_row(report):
    """The quantities the sweep tracks, pulled out of one pipeline report."""
    row = {"eps": report["config"]["eps"], "status": report["status"], "verdict": report.get("verdict")}
    if report["status"] != "ok":
        row["error"] = report["error"]
        return row
    hyp, gd, pf = report["hypothesis"], report["gram_deficit"], report.get("pushforward") or {}
    ref = next(r for r in report["identities"] if r["name"] == "refined Bochner identity")
    row.update({
        "riemann_L2": hyp["eps_R"],
        "theta_h_half": hyp["eps_theta"],
        "dev_Linf": pf.get("dev_Linf"),
        "dev_H1": pf.get("dev_H1"),
        "dev_Linf_plus_H1": (pf["dev_Linf"] + pf["dev_H1"]) if pf else None,
        "B_Linf": gd["B_Linf"],
        "B_H1": gd["B_H1"],
        "B_Linf_plus_H1": gd["B_Linf"] + gd["B_H1"],
        "refined_lhs": ref["left"],
        "sqrt_refined_lhs": math.sqrt(max(ref["left"], 0.0)),
        "refined_rel_residual": ref["rel_residual"],
        "phi_minus_one_sup": report["uniformization"]["phi_minus_one_sup"],
    })
    return row


SWEEP_FITS = ("dev_Linf_plus_H1", "B_Linf_plus_H1", "sqrt_refined_lhs", "riemann_L2", "theta_h_half",
              "phi_minus_one_sup")


def _sweep_one(cfg_dict):
    cfg = RunConfig(**cfg_dict)
    return run_pipeline(cfg)


def epsilon_sweep(config: RunConfig, eps=None):
    """Pipeline runs over an increasing epsilon list with log-log fits of the tracked norms."""
    eps = check_eps_list(config.eps_list if eps is None else eps)
    base = config.override(radius_field=False, ledger=False)
    cfgs = [asdict(replace(base, eps=e, out=None, csv=None)) for e in eps]
    t0 = time.perf_counter()
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as ex:
            reports = list(ex.map(_sweep_one, cfgs))
    else:
        reports = [_sweep_one(c) for c in cfgs]
    rows = [sweep_row(r) for r in reports]
    fits = {}
    good = [r for r in rows if r["status"] == "ok" and r["eps"] > 0]
    for key in SWEEP_FITS:
        pts = [(r["eps"], r[key]) for r in good if r.get(key) is not None and r[key] > 0]
        if len(pts) >= 2:
            fits[key] = loglog_fit(*zip(*pts))
    pts = [(r["riemann_L2"], r["dev_Linf_plus_H1"]) for r in good
           if r.get("dev_Linf_plus_H1") and r["riemann_L2"] > 0]
    if len(pts) >= 2:
        fits["dev_vs_riemann"] = loglog_fit(*zip(*pts))
    out = {"schema": SCHEMA_VERSION, "kind": "epsilon-sweep", "config": config.to_dict(), "versions": versions(),
           "eps": eps, "rows": rows, "fits": fits, "timings": {"total": time.perf_counter() - t0}}
    return _clean(out)


def _cubic(x):
    """Harmonic cubic x^3 - 3 x y^2 + z and its gradient."""
    u = x[..., 0] ** 3 - 3.0 * x[..., 0] * x[..., 1] ** 2 + x[..., 2]
    du = np.stack([3.0 * x[..., 0] ** 2 - 3.0 * x[..., 1] ** 2, -6.0 * x[..., 0] * x[..., 1],
                   np.ones_like(x[..., 0])], axis=-1)
    return u, du


def flat_cubic_error(mesh, tol=1e-10):
    """H1 seminorm error of the order-2 Dirichlet solve of a harmonic cubic on the flat ball."""
    from .fem import FemSpace, assemble
    m = make_metric("flat")
    space = FemSpace(mesh, 2)
    quad = VolumeQuadrature(mesh, m)
    form = assemble(space, m, "dirichlet-energy", quad=quad)
    u_ex, _ = _cubic(space.nodes())
    u = solve_dirichlet(form, u_ex[space.boundary_dofs], tol=tol)
    _, du_ex = _cubic(quad.x)
    e = u.grads(quad) - du_ex
    return float(np.sqrt(quad.integrate((e * e).sum(-1))))


def orders(h, r):
    h, r = np.asarray(h, float), np.asarray(r, float)
    ok = (r[:-1] > 0) & (r[1:] > 0)
    step = np.full(len(h) - 1, np.nan)
    step[ok] = np.log(r[:-1][ok] / r[1:][ok]) / np.log(h[:-1][ok] / h[1:][ok])
    fit = loglog_fit(h, r)["slope"] if np.all(r > 0) and len(h) >= 2 else float("nan")
    return [float(s) for s in step], float(fit)


def convergence_study(config: RunConfig, h0=None):
    """Observed orders of the discretization-class quantities over refinement levels."""
    if config.levels < 3:
        raise ConfigError("a convergence study needs at least 3 levels")
    h0 = config.gen_h if h0 is None else h0
    if h0 is None:
        raise ConfigError("convergence study needs gen_h")
    hs = [h0 / config.level_factor**k for k in range(config.levels)]
    rows, notes = [], []
    t0 = time.perf_counter()
    for hk in hs:
        n = estimated_tets(hk, config.radius)
        if n > config.max_tets:
            notes.append(f"level h={hk:.4g} skipped: about {n} tets exceeds max_tets={config.max_tets}")
            continue
        mesh = generate_ball_mesh(hk, radius=config.radius)
        row = {"h_target": hk, "h": mesh.h, "tets": mesh.n_tets}
        row["flat_cubic_H1_error"] = flat_cubic_error(mesh, config.tol)
        flat_bg = boundary_geometry(make_metric("flat"), mesh.boundary, mesh)
        row["flat_volume_defect"] = abs(flat_bg.area - 3.0 * float(mesh.volumes.sum()))
        row["flat_gauss_L2"] = gauss_equation_check(flat_bg)["L2"].value
        cfg = replace(config, gen_h=hk, radius_field=False, ledger=False, out=None, csv=None)
        rep = run_pipeline(cfg)
        if rep["status"] != "ok":
            row["error"] = rep["error"]
        else:
            ids = {r["name"]: r for r in rep["identities"]}
            row["bochner_residual"] = ids["Bochner formula x1"]["abs_residual"]
            row["refined_bochner_abs"] = ids["refined Bochner identity"]["abs_residual"]
            row["refined_bochner_rel"] = ids["refined Bochner identity"]["rel_residual"]
            row["conformal_metric_residual"] = ids["pulled-back round metric"]["abs_residual"]
            row["conformal_factor_residual"] = rep["uniformization"]["conformal_factor_residual"]
            row["gauss_L2"] = rep["uniformization"]["gauss_L2"]
        rows.append(row)
    table = {}
    done = [r for r in rows if "error" not in r]
    if len(done) >= 2:
        h = [r["h"] for r in done]
        for key in ("flat_cubic_H1_error", "flat_volume_defect", "flat_gauss_L2", "bochner_residual",
                    "refined_bochner_abs", "refined_bochner_rel", "conformal_metric_residual",
                    "conformal_factor_residual", "gauss_L2"):
            step, fit = orders(h, [r[key] for r in done])
            table[key] = {"step_orders": step, "fitted_order": fit}
    out = {"schema": SCHEMA_VERSION, "kind": "convergence-study", "config": config.to_dict(), "versions": versions(),
           "levels": rows, "orders": table, "notes": notes, "timings": {"total": time.perf_counter() - t0}}
    return _clean(out)


# ---------------------------------------------------------------- golden comparison

def compare_reports(a, b, rel=1e-9, abs_floor=1e-12, path="", skip=("timings", "versions")):
    """List of mismatches between two reports: structure exactly, numbers to a relative tolerance."""
    bad = []
    if isinstance(a, dict) and isinstance(b, dict):
        if set(a) != set(b):
            bad.append(f"{path}: keys differ {sorted(set(a) ^ set(b))}")
        for k in sorted(set(a) & set(b)):
            if k in skip:
                continue
            bad += compare_reports(a[k], b[k], rel, abs_floor, f"{path}/{k}", skip)
    elif isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            bad.append(f"{path}: length {len(a)} != {len(b)}")
        for i, (x, y) in enumerate(zip(a, b)):
            bad += compare_reports(x, y, rel, abs_floor, f"{path}[{i}]", skip)
    elif isinstance(a, bool) or isinstance(b, bool) or isinstance(a, str) or a is None or b is None:
        if a != b:
            bad.append(f"{path}: {a!r} != {b!r}")
    elif isinstance(a, (int, float)) and isinstance(b, (int, float)):
        if abs(a - b) > max(rel * max(abs(a), abs(b)), abs_floor):
            bad.append(f"{path}: {a!r} != {b!r}")
    elif a != b:
        bad.append(f"{path}: {a!r} != {b!r}")
    return bad
