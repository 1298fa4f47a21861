"""Experiment driver: gamma sweeps, log-log slope fits and reports."""
import copy
import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, is_dataclass, replace

import numpy as np

from . import __version__
from .dtn import build_x_subspace, dtn_defect, dtn_matrix, sobolev_norm, spectral_basis
from .exchange import (MultiTrace, ScatterContext, apply_scattering, claeys_solve, cross_partition,
                       disc_partition, exchange_defect, load_partition, partition_bases,
                       partition_from_dict, robin_traces, strip_bump, strip_indicator,
                       trace_error, two_domain_context, two_domain_pi)
from .geometry import (GradingPolicy, build_mesh, corner_info, curve_from_dict, ellipse, gradient_ratio,
                       unit_square)
from .oracles import sector_steklov

SCHEMA_VERSION = 1
KINDS = ("exchange_rate", "dtn_rate", "scattering_rate", "counterexample", "spectrum", "solve")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    geometry: dict = None            # curve dict; for "solve" a partition dict or {"builtin": ...}
    sweep: list = field(default_factory=list)
    M: float = 4.0
    a: float = 0.5
    s: float = -0.5
    seed: int = 0
    mesh: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def validate(self):
        if self.experiment not in KINDS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {KINDS}")
        g = list(self.sweep)
        if self.experiment != "solve":
            if any(x <= 0 for x in g):
                raise ConfigError("sweep values must be positive")
            if any(b >= a for a, b in zip(g, g[1:])):
                raise ConfigError("sweep must be strictly decreasing")
            need = 3 if self.experiment == "spectrum" else 4
            if len(g) < need:
                raise ConfigError(f"{self.experiment} needs at least {need} sweep points")
        if not -0.5 <= self.s <= 0.5:
            raise ConfigError("s must lie in [-1/2, 1/2]")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("schema", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        if "experiment" not in d:
            raise ConfigError("config needs an 'experiment' field")
        return cls(**d).validate()

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path):
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return ExperimentConfig.from_dict(d)


@dataclass
class RateReport:
    experiment: str
    gammas: list
    defects: list
    fitted_slope: float = float("nan")
    fit_residual: float = float("nan")
    dropped_endpoints: int = 0
    constants: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)     # extra per-gamma columns
    checks: dict = field(default_factory=dict)     # named pass/fail results
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(bool(v) for v in self.checks.values())

    def to_dict(self):
        # live objects in metadata (e.g. the solver result) are not part of the report
        meta = {k: v for k, v in self.metadata.items() if not is_dataclass(v)}
        d = asdict(replace(self, metadata={}))
        d["metadata"] = copy.deepcopy(meta)
        d["passed"] = self.passed
        return d


def fit_slope(gammas, values, drop=1):
    """Least-squares slope of log10(values) against log10(gammas) after
    dropping the `drop` largest gammas; returns (slope, rms residual)."""
    g = np.asarray(gammas, dtype=float)
    v = np.asarray(values, dtype=float)
    if np.any(v <= 0) or np.any(g <= 0):
        raise ValueError("slope fit needs positive data")
    keep = np.argsort(-g)[drop:]
    if len(keep) < 3:
        raise ValueError("need at least 3 points after dropping endpoints")
    x, y = np.log10(g[keep]), np.log10(v[keep])
    coef, res, *_ = np.polyfit(x, y, 1, full=True)
    resid = float(np.sqrt(res[0] / len(x))) if len(res) else 0.0
    return float(coef[0]), resid


def fitted_constant(gammas, values, slope):
    g = np.asarray(gammas, dtype=float)
    return float(np.max(np.asarray(values) / g ** slope))


# -- meshes -------------------------------------------------------------------------


def mesh_for(spec, gamma, mesh_cfg=None):
    """Panel length min(panel_max, panel_gamma * gamma); dyadic grading on polygons."""
    c = {"panel_max": 0.25, "panel_gamma": 8.0, "cutoff_gamma": 0.25}
    c.update(mesh_cfg or {})
    if "n" in c:
        h = None
    else:
        h = min(c["panel_max"], c["panel_gamma"] * gamma)
    if spec.is_polygon:
        grading = GradingPolicy("dyadic", gamma, c.get("cutoff") or c["cutoff_gamma"] * gamma, h)
    else:
        grading = GradingPolicy("uniform", panel_length=h)
    return build_mesh(spec, c.get("n", 256), grading)


def _spec(cfg, default):
    return curve_from_dict(cfg.geometry) if cfg.geometry else default


def smooth_pair(mesh):
    x, y = mesh.nodes.T
    return np.cos(np.pi * x) + y, x * y + 0.5


# -- experiments ---------------------------------------------------------------------


def _rate_checks(rep, cfg, lo, hi=None):
    slope = rep.fitted_slope
    ok = slope >= cfg.params.get("min_slope", lo)
    if hi is not None:
        ok = ok and slope <= cfg.params.get("max_slope", hi)
    rep.checks["slope"] = bool(ok)


def run_exchange_rate(cfg):
    """||(Pi - Pi0) phi||_s / ||phi||_s over the sweep (two-domain setting)."""
    spec = _spec(cfg, ellipse(1.0, 0.6))
    rng = np.random.default_rng(cfg.seed)
    mode = cfg.params.get("phi", "xm" if spec.is_polygon else "smooth")
    coef = None
    vals = []
    for g in cfg.sweep:
        mesh = mesh_for(spec, g, cfg.mesh)
        Pi = two_domain_pi(mesh, g)
        bases = partition_bases(Pi.partition, g)
        if mode == "smooth":
            phi = MultiTrace(smooth_pair(mesh))
            M = None
        else:
            X = build_x_subspace(mesh, g, cfg.M)
            if coef is None:
                coef = rng.standard_normal((X.dim, 2))
            phi = MultiTrace((X.basis @ coef[:, 0], X.basis @ coef[:, 1]))
            M = cfg.M
        vals.append(exchange_defect(phi, cfg.s, Pi, bases, M=M))
    rep = _finish("exchange_rate", cfg, vals)
    if mode == "smooth":
        _rate_checks(rep, cfg, 0.85, 1.15)
    else:
        _rate_checks(rep, cfg, 0.4)
    return rep


def run_dtn_rate(cfg):
    """||(T - I) h||_{-1/2} / ||h||_{-1/2} for h in X_gamma(M), plus the corner eigenmode."""
    spec = _spec(cfg, ellipse(1.0, 0.6))
    rng = np.random.default_rng(cfg.seed)
    which = cfg.params.get("h", "random")
    coef = None
    vals, corner = [], []
    for g in cfg.sweep:
        mesh = mesh_for(spec, g, cfg.mesh)
        T = dtn_matrix(mesh, "interior", g)
        basis = spectral_basis(mesh, g)
        X = build_x_subspace(mesh, g, cfg.M)
        if which == "first":
            h = X.basis[:, 0]
        else:
            if coef is None:
                coef = rng.standard_normal(X.dim)
            h = X.basis @ coef
        vals.append(dtn_defect(h, T, basis, M=cfg.M))
        if spec.is_polygon:
            h1 = basis.modes[:, 0]
            corner.append(dtn_defect(h1, T, basis, override=True))
    rep = _finish("dtn_rate", cfg, vals)
    bound = 0.4 if not spec.is_polygon else 0.25
    _rate_checks(rep, cfg, bound)
    if spec.is_polygon:
        lam_star = sector_steklov(_min_angle(mesh), **cfg.params.get("sector", {}))
        rep.series["corner_mode_defect"] = corner
        rep.constants["corner_lower_bound"] = (1 - lam_star) / 2
        rep.checks["corner_mode_bounded_below"] = bool(min(corner) >= (1 - lam_star) / 2)
    return rep


def run_scattering_rate(cfg):
    """||S0(tau_minus,0) - S_gamma(tau_minus,gamma)||_{-1/2} / ||tau_D||_{-1/2}."""
    spec = _spec(cfg, ellipse(1.0, 0.6))
    rng = np.random.default_rng(cfg.seed)
    coef = None
    vals = []
    for g in cfg.sweep:
        mesh = mesh_for(spec, g, cfg.mesh)
        T = dtn_matrix(mesh, "interior", g)
        basis = spectral_basis(mesh, g)
        X = build_x_subspace(mesh, g, cfg.M)
        if coef is None:
            coef = rng.standard_normal(X.dim)
        tau_d = X.basis @ coef
        tau_n = (T @ tau_d) / g
        ctx = two_domain_context(T)
        local = ScatterContext(T, g, 1.0)
        diff = apply_scattering((tau_d, tau_n), local, "local") - apply_scattering((tau_d, tau_n), ctx)
        vals.append(sobolev_norm(diff, -0.5, basis) / sobolev_norm(tau_d, -0.5, basis))
    rep = _finish("scattering_rate", cfg, vals)
    _rate_checks(rep, cfg, 0.4)
    return rep


def _min_angle(mesh):
    angles = [a for _, a in corner_info(mesh.pieces) if abs(a - np.pi) > 1e-9]
    return min(angles)


def counterexample_study(gammas, c_star=0.25, s=-0.5, mesh_cfg=None, bump_width=None, spec=None):
    """Defect ratios of the near-vertex indicator and of smooth bumps on the square.

    The indicator sits on the side leaving the vertex (0, 0) upward, over a
    length c_star * gamma * sqrt(2) (the part of that side inside the strip
    x1 in (-c_star gamma, 0), with x1 the coordinate across the bisector).
    Two bumps are reported: one of the same (gamma-dependent) width and one
    of the same width as the indicator at the largest gamma, kept fixed.
    """
    spec = spec or unit_square()
    vertex, side_dir = (0.0, 0.0), (0.0, 1.0)
    w_fixed = bump_width or c_star * max(gammas) * np.sqrt(2)
    out = {"indicator": [], "bump_scaled": [], "bump_fixed": [], "indicator_gradient_ratio": []}
    for g in gammas:
        width = c_star * g * np.sqrt(2)
        mesh = mesh_for(spec, g, mesh_cfg)
        Pi = two_domain_pi(mesh, g)
        bases = partition_bases(Pi.partition, g)
        zero = np.zeros(mesh.n)
        f = strip_indicator(mesh, vertex, side_dir, width)
        out["indicator"].append(exchange_defect(MultiTrace((f, zero)), s, Pi, bases))
        out["indicator_gradient_ratio"].append(gradient_ratio(mesh, f))
        b = strip_bump(mesh, vertex, side_dir, width, center=width / 2)
        out["bump_scaled"].append(exchange_defect(MultiTrace((b, zero)), s, Pi, bases))
        b = strip_bump(mesh, vertex, side_dir, w_fixed, center=w_fixed / 2)
        out["bump_fixed"].append(exchange_defect(MultiTrace((b, zero)), s, Pi, bases))
    return out


def run_counterexample(cfg):
    spec = _spec(cfg, unit_square())
    c_star = cfg.params.get("c_star", 0.25)
    data = counterexample_study(cfg.sweep, c_star, cfg.s, cfg.mesh, spec=spec)
    rep = _finish("counterexample", cfg, data["indicator"])
    drop = cfg.params.get("drop", 1)
    slope_b, res_b = fit_slope(cfg.sweep, data["bump_fixed"], drop)
    slope_bs, _ = fit_slope(cfg.sweep, data["bump_scaled"], drop)
    rep.series.update(data)
    rep.constants.update({"bump_fixed_slope": slope_b, "bump_fixed_fit_residual": res_b,
                          "bump_scaled_slope": slope_bs})
    rep.checks["indicator_non_decay"] = bool(abs(rep.fitted_slope) <= cfg.params.get("max_abs_slope", 0.15))
    rep.checks["bump_decay"] = bool(slope_b >= cfg.params.get("bump_min_slope", 0.25))
    return rep


def cluster_size(mesh):
    return sum(1 for _, a in corner_info(mesh.pieces) if a < np.pi - 1e-9)


def run_spectrum(cfg):
    """Lowest Steklov eigenvalues over the sweep; corner clusters on polygons."""
    spec = _spec(cfg, unit_square())
    lows, rest_min, bounds = [], [], []
    for g in cfg.sweep:
        mesh = mesh_for(spec, g, cfg.mesh)
        lam = spectral_basis(mesh, g).lambdas
        k = cluster_size(mesh) if spec.is_polygon else 0
        lows.append(float(np.mean(lam[:k])) if k else float(lam[0]))
        rest_min.append(float(lam[k]))
        bounds.append(1 - 5 * g ** (2 / 3))
    rep = RateReport("spectrum", list(cfg.sweep), lows, metadata=_meta(cfg))
    rep.series.update({"rest_min": rest_min, "rest_bound": bounds})
    if spec.is_polygon:
        g = np.asarray(cfg.sweep)
        A = np.stack([np.ones_like(g), g ** (2 / 3)], 1)
        (limit, C), *_ = np.linalg.lstsq(A, np.asarray(lows), rcond=None)
        lam_star = sector_steklov(_min_angle(mesh), **cfg.params.get("sector", {}))
        rep.constants.update({"extrapolated_limit": float(limit), "rate_constant": float(C),
                              "sector_oracle": lam_star,
                              "relative_gap": float(abs(limit - lam_star) / lam_star)})
        rep.checks["limit_in_unit_interval"] = bool(0 < limit < 1)
        rep.checks["matches_sector_oracle"] = bool(abs(limit - lam_star) <= 0.01 * lam_star)
        rep.checks["rest_above_bound"] = bool(all(r >= b for r, b in zip(rest_min, bounds)))
    else:
        C = max((1 - l) / g for l, g in zip(lows, cfg.sweep))
        rep.constants["C_lower"] = float(C)
        rep.checks["min_above_0.8"] = bool(min(lows) >= 0.8)
    return rep


def run_solve(cfg):
    g = cfg.sweep[0] if cfg.sweep else cfg.params.get("gamma", 0.1)
    geo = cfg.geometry or {"builtin": "disc"}
    if "builtin" in geo:
        part = disc_partition(n=geo.get("n", 256)) if geo["builtin"] == "disc" else cross_partition(g)
    elif "path" in geo:
        part = load_partition(geo["path"])
    else:
        part = partition_from_dict(geo)
    p = cfg.params
    rhs = (p.get("points", [[0.3, 0.2], [1.5, -0.4]]), p.get("charges", [1.0, 2.0]))
    res = claeys_solve(part, g, rhs, relax=p.get("relax", 0.5), tol=p.get("tol", 1e-10),
                       max_iter=p.get("max_iter", 200), omega=p.get("omega", 1.0), mu=p.get("mu", 1.0))
    err = trace_error(res, part, g, rhs)
    hist = res.history
    ratios = [b / a for a, b in zip(hist[:-1], hist[1:]) if a > 0]
    rep = RateReport("solve", [g], [err], metadata=_meta(cfg))
    rep.series["residual_history"] = hist
    rep.constants.update({"iterations": res.iterations, "trace_error": err,
                          "isometry_defect": res.isometry_defect,
                          "max_ratio_after_5": max(ratios[5:]) if len(ratios) > 5 else float("nan")})
    rep.checks["converged"] = bool(res.converged)
    rep.checks["trace_error"] = bool(err <= p.get("error_tol", 1e-6))
    if len(ratios) > 5:
        rep.checks["geometric_decay"] = bool(max(ratios[5:]) <= p.get("max_ratio", 0.9))
    rep.metadata["solve_result"] = res
    return rep


RUNNERS = {"exchange_rate": run_exchange_rate, "dtn_rate": run_dtn_rate,
           "scattering_rate": run_scattering_rate, "counterexample": run_counterexample,
           "spectrum": run_spectrum, "solve": run_solve}


def _meta(cfg):
    return {"config_hash": cfg.digest(), "version": __version__, "seed": cfg.seed}


def _finish(kind, cfg, vals):
    drop = cfg.params.get("drop", 1)
    slope, res = fit_slope(cfg.sweep, vals, drop)
    rep = RateReport(kind, list(cfg.sweep), [float(v) for v in vals], slope, res, drop,
                     metadata=_meta(cfg))
    rep.constants["C"] = fitted_constant(cfg.sweep, vals, slope)
    return rep


def run_experiment(config):
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    cfg.validate()
    return RUNNERS[cfg.experiment](cfg)


# -- output ---------------------------------------------------------------------------


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def report_dict(report, config=None):
    d = {"schema": SCHEMA_VERSION, "version": __version__}
    if config is not None:
        d["config"] = config.to_dict()
        d["config_hash"] = config.digest()
    d["report"] = _clean(report.to_dict())
    return d


def emit_report(report, out_dir, fmt="json", config=None, stem=None):
    """Write <stem>.json (full report) or <stem>.csv (one row per gamma)."""
    os.makedirs(out_dir, exist_ok=True)
    stem = stem or report.experiment
    if fmt == "json":
        path = os.path.join(out_dir, stem + ".json")
        with open(path, "w") as f:
            json.dump(report_dict(report, config), f, indent=2, sort_keys=True)
            f.write("\n")
        return path
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    path = os.path.join(out_dir, stem + ".csv")
    cols = [k for k, v in report.series.items()
            if isinstance(v, (list, tuple)) and len(v) == len(report.gammas)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["gamma", "defect"] + cols)
        for i, g in enumerate(report.gammas):
            w.writerow([repr(float(g)), repr(float(report.defects[i]))] + [repr(float(report.series[c][i])) for c in cols])
    return path


def read_csv_report(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return {k: [float(r[k]) for r in rows] for k in rows[0]} if rows else {}


def compare_snapshot(report, baseline, rtol=1e-8):
    """Names and indices of defect values deviating from a stored JSON baseline."""
    if isinstance(baseline, (str, os.PathLike)):
        with open(baseline) as f:
            baseline = json.load(f)
    ref = baseline["report"] if "report" in baseline else baseline
    bad = []
    for key in ("gammas", "defects"):
        a, b = np.asarray(getattr(report, key), float), np.asarray(ref[key], float)
        if a.shape != b.shape:
            bad.append((key, "shape"))
            continue
        for i in np.nonzero(np.abs(a - b) > rtol * np.abs(b))[0]:
            bad.append((key, int(i)))
    return bad
