"""Command-line interface: ingestion, configuration, commands and outputs.

Usage::

    funcqr fit       --config run.toml --out results/
    funcqr predict   --config run.toml --out results/
    funcqr bootstrap --config run.toml --out results/ [--replicates]
    funcqr compare   --config run.toml --out results/
    funcqr simulate  --config sim.toml --out data/

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

import argparse
import csv
import datetime
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .design import VARIANTS, ClusterRecord, assemble_design, LongitudinalDataset, ModelSpec
from .fdbasis import SplineBasisSpec, make_basis
from .fitter import (
    FitError,
    FitResult,
    SmoothingParams,
    compare_models,
    fit_dataset,
    select_smoothing,
)
from .fpca import FpcaResult, FunctionalSample, fpca_smooth, project_new
from .infer import TargetSpec, bootstrap_summary, evaluate_target, model_based_se
from .simgen import SimScenario, generate

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("funcqr")

FORMAT_VERSION = 1
LAMBDA_KEYS = ("lambda_alpha", "lambda_beta_s", "lambda_beta_t", "lambda_u")


class ConfigError(ValueError):
    pass


# -- number formatting -------------------------------------------------------


def fmt(x):
    """17 significant digits: enough for an exact float round trip."""
    if isinstance(x, (str, bool)):
        return str(x)
    return format(float(x), ".17g")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path, obj):
    # json writes floats with repr, which round-trips exactly
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# -- ingestion ---------------------------------------------------------------


@dataclass
class ResponseTable:
    """Responses in file order, with clusters in order of first appearance."""

    cluster_ids: list
    obs_ids: list
    t: np.ndarray
    y: np.ndarray


def _read_rows(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    with open(path, newline="") as fh:
        sample = fh.read(4096)
        fh.seek(0)
        try:
            dialect = csv.Sniffer().sniff(sample, delimiters=",;\t")
        except csv.Error:
            dialect = csv.excel
        rows = [r for r in csv.reader(fh, dialect) if r and any(c.strip() for c in r)]
    if not rows:
        raise ConfigError(f"{path}: empty file")
    return [c.strip() for c in rows[0]], [[c.strip() for c in r] for r in rows[1:]]


def _number(text, what):
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{what}: {text!r} is not a number") from None
    if not np.isfinite(v):
        raise ConfigError(f"{what}: {text!r} is not finite")
    return v


def read_responses(path):
    header, rows = _read_rows(path)
    if header != ["cluster_id", "obs_id", "t", "y"]:
        raise ConfigError(f"{path}: header must be cluster_id,obs_id,t,y; got {','.join(header)}")
    cids, oids, t, y = [], [], [], []
    for k, r in enumerate(rows, start=2):
        if len(r) != 4:
            raise ConfigError(f"{path}: line {k} has {len(r)} fields, expected 4")
        cids.append(r[0])
        oids.append(r[1])
        t.append(_number(r[2], f"obs {r[1]!r} t"))
        y.append(_number(r[3], f"obs {r[1]!r} y"))
    if len(set(oids)) != len(oids):
        dup = next(o for o in oids if oids.count(o) > 1)
        raise ConfigError(f"{path}: duplicate obs_id {dup!r}")
    return ResponseTable(cids, oids, np.array(t), np.array(y))


def read_curves(path):
    """Curves file -> (grid, values with NaN for missing, obs_ids)."""
    header, rows = _read_rows(path)
    if len(header) < 3 or header[0] != "obs_id":
        raise ConfigError(f"{path}: header must be obs_id,<s_1>,<s_2>,...")
    try:
        grid = np.array([float(h) for h in header[1:]])
    except ValueError:
        raise ConfigError(f"{path}: grid header entries must be numbers") from None
    if not np.all(np.isfinite(grid)) or np.any(np.diff(grid) <= 0):
        raise ConfigError(f"{path}: grid header must be strictly increasing")
    ids, values = [], np.full((len(rows), grid.size), np.nan)
    for k, r in enumerate(rows):
        if len(r) > grid.size + 1:
            raise ConfigError(f"{path}: curve {r[0]!r} has too many fields")
        ids.append(r[0])
        for j, cell in enumerate(r[1:]):
            if cell != "":
                values[k, j] = _number(cell, f"curve {r[0]!r}")
    if len(set(ids)) != len(ids):
        dup = next(o for o in ids if ids.count(o) > 1)
        raise ConfigError(f"{path}: duplicate obs_id {dup!r}")
    return grid, values, ids


def ingest(responses_path, curves_path):
    """Join responses and curves on obs_id.

    Returns ``(sample, table)``: a :class:`FunctionalSample` whose rows follow
    the response rows, and the response table (the dataset skeleton).
    """
    table = read_responses(responses_path)
    grid, values, ids = read_curves(curves_path)
    where = {o: k for k, o in enumerate(ids)}
    missing = [o for o in table.obs_ids if o not in where]
    if missing:
        raise ConfigError(f"obs_id {missing[0]!r} has no matching curve row")
    rows = values[[where[o] for o in table.obs_ids]]
    empty = ~np.isfinite(rows).any(axis=1)
    if empty.any():
        raise ConfigError(f"curve for obs_id {table.obs_ids[int(np.argmax(empty))]!r} has no observed values")
    try:
        sample = FunctionalSample(grid, rows, list(table.obs_ids))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return sample, table


def build_dataset(table, curves, grid, t_domain=None):
    """Group the response table into clusters; ``curves`` rows follow the table."""
    order, members = [], {}
    for k, c in enumerate(table.cluster_ids):
        if c not in members:
            order.append(c)
            members[c] = []
        members[c].append(k)
    clusters, perm = [], []
    for c in order:
        rows = members[c]
        clusters.append(ClusterRecord(c, table.y[rows], table.t[rows], np.arange(len(perm), len(perm) + len(rows))))
        perm.extend(rows)
    return LongitudinalDataset(
        clusters,
        grid,
        np.asarray(curves)[perm],
        t_domain=t_domain,
        obs_ids=[table.obs_ids[k] for k in perm],
    )


def write_dataset(dataset, responses_path, curves_path, obs_ids=None):
    """Write a dataset in the ingest format (one curve row per response row)."""
    ids = obs_ids or dataset.obs_ids
    if ids is None:
        ids = [f"o{k}" for k in range(dataset.curves.shape[0])]
    rows = []
    for c in dataset.clusters:
        for y, t, r in zip(c.y, c.t, c.curve_rows):
            rows.append((c.cluster_id, ids[r], t, y))
    write_csv(responses_path, ["cluster_id", "obs_id", "t", "y"], rows)
    write_curve_file(curves_path, dataset.grid, dataset.curves[dataset.curve_index], [ids[r] for r in dataset.curve_index])


def write_curve_file(path, grid, values, ids):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["obs_id"] + [fmt(s) for s in grid])
        for i, row in zip(ids, np.atleast_2d(values)):
            w.writerow([i] + ["" if not np.isfinite(v) else fmt(v) for v in row])


# -- configuration -----------------------------------------------------------


@dataclass
class RunConfig:
    tau: float = 0.5
    variant: str = "surface"
    L: int = 10
    D: int = 10
    basis_t: str = "cubic_bspline"
    basis_s: str = "cubic_bspline"
    penalty_order: int = 2
    pve: float = 0.99
    smooth_curves: bool = True
    lambda_alpha: float | None = None
    lambda_beta_s: float | None = None
    lambda_beta_t: float | None = None
    lambda_u: float | None = None
    lambda_grid: list | None = None
    cv_folds: int = 5
    bandwidth: float | None = None
    B_bias: int = 100
    B_sd: int = 100
    alpha: float = 0.05
    seed: int = 0
    t_min: float | None = None
    t_max: float | None = None
    responses: str | None = None
    curves: str | None = None
    targets: str | None = None
    target: str = "difference"
    curve_a: str | None = None
    curve_b: str | None = None
    curve: str | None = None
    t_points: list | None = None
    n_t_points: int = 21
    fit_file: str | None = None
    variants: list = field(default_factory=lambda: list(VARIANTS))
    # simulation
    sim_n_clusters: int = 30
    sim_n_per_cluster: int = 8
    sim_n_grid: int = 50
    sim_alpha: str = "log"
    sim_beta: str = "surface"
    sim_sigma_u: float = 0.5
    sim_error: str = "skewed"
    sim_error_scale: float = 1.0
    sim_noise_sd: float = 0.0
    base_dir: str = "."

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"variants: unknown variant {v!r}")
        if not 0 < self.pve < 1:
            raise ConfigError("pve must lie in (0, 1)")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        if min(self.B_bias, self.B_sd) < 2:
            raise ConfigError("B_bias and B_sd must be >= 2")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError("bandwidth must be > 0")
        if self.target not in ("difference", "linear_predictor"):
            raise ConfigError("target must be difference or linear_predictor")
        given = [getattr(self, k) is not None for k in LAMBDA_KEYS]
        if any(given) and not all(given):
            raise ConfigError("give all four fixed lambdas or none")
        if any(given) and min(getattr(self, k) for k in LAMBDA_KEYS) < 0:
            raise ConfigError("fixed lambdas must be >= 0")

    @classmethod
    def load(cls, path=None, **overrides):
        raw = {}
        base = "."
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            with open(p, "rb") as fh:
                try:
                    raw = tomllib.load(fh)
                except tomllib.TOMLDecodeError as exc:
                    raise ConfigError(f"{p}: {exc}") from None
            base = str(p.resolve().parent)
        nested = [k for k, v in raw.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"config must be flat key = value pairs; found table {nested[0]!r}")
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        raw["base_dir"] = base
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def path(self, key):
        value = getattr(self, key)
        if value is None:
            raise ConfigError(f"config key {key!r} is required for this command")
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def model_spec(self):
        try:
            return ModelSpec(
                self.tau,
                self.variant,
                SplineBasisSpec(self.basis_t, self.L),
                SplineBasisSpec(self.basis_s, self.D),
                self.penalty_order,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def fixed_smoothing(self):
        if self.lambda_alpha is None:
            return None
        return SmoothingParams(*(float(getattr(self, k)) for k in LAMBDA_KEYS))

    def grid(self):
        if self.lambda_grid is None:
            return None
        g = np.asarray(self.lambda_grid, dtype=float)
        if g.ndim != 1 or g.size < 1 or np.any(g < 0):
            raise ConfigError("lambda_grid must be a list of nonnegative numbers")
        return {"lambda_u": g, "lambda_beta_s": g, "lambda_t": g}

    def echo(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "base_dir"}


# -- pipeline pieces ---------------------------------------------------------


def load_data(cfg):
    """Ingest, optionally FPCA-smooth, and build the dataset."""
    sample, table = ingest(cfg.path("responses"), cfg.path("curves"))
    fpca = None
    curves = sample.values
    if cfg.smooth_curves:
        fpca = fpca_smooth(sample, cfg.pve)
        curves = fpca.smoothed
    t_domain = None
    if cfg.t_min is not None or cfg.t_max is not None:
        lo = float(table.t.min()) if cfg.t_min is None else float(cfg.t_min)
        hi = float(table.t.max()) if cfg.t_max is None else float(cfg.t_max)
        t_domain = (lo, hi)
    dataset = build_dataset(table, curves, sample.grid, t_domain)
    return dataset, fpca


def fit_to_dict(fit, spec, cfg, fpca=None):
    return {
        "format_version": FORMAT_VERSION,
        "metadata": {"timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(), "versions": _versions()},
        "config": cfg.echo() if cfg is not None else {},
        "model": {
            "tau": fit.tau,
            "variant": fit.variant,
            "penalty_order": fit.penalty_order,
            "spec": spec.to_dict(),
            "basis_t": fit.basis_t.to_dict(),
            "basis_s": fit.basis_s.to_dict(),
            "grid": fit.grid,
        },
        "fit": {
            "a": fit.a,
            "delta": fit.delta,
            "u": fit.u,
            "cluster_ids": fit.cluster_ids,
            "smoothing": fit.smoothing.as_dict(),
            "h": fit.h,
            "Vp": fit.Vp,
            "edf_ab": fit.edf_ab,
            "edf_u": fit.edf_u,
            "loglik": fit.loglik,
            "aic": fit.aic,
            "converged": fit.converged,
            "iterations": fit.iterations,
            "objective": fit.objective,
            "scale": fit.scale,
        },
        "fpca": None
        if fpca is None
        else {
            "grid": fpca.grid,
            "weights": fpca.weights,
            "mean": fpca.mean,
            "eigenfunctions": fpca.eigenfunctions,
            "eigenvalues": fpca.eigenvalues,
            "noise_variance": fpca.noise_variance,
            "pve_achieved": fpca.pve_achieved,
        },
    }


def _versions():
    import scipy

    return {"funcqr": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def _basis_from(d):
    return make_basis(SplineBasisSpec(d["kind"], int(d["num_basis"]), d["lo"], d["hi"]))


def _array(v, shape=None):
    a = np.array([np.nan if x is None else x for x in np.ravel(v)] if v is not None else [], dtype=float)
    if shape is not None:
        a = a.reshape(shape)
    return a


def fit_from_dict(d):
    """Rebuild ``(FitResult, ModelSpec, FpcaResult or None)`` from fit.json."""
    if d.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"fit file format_version {d.get('format_version')!r}; this build reads {FORMAT_VERSION}")
    m, f = d["model"], d["fit"]
    s = m["spec"]
    spec = ModelSpec(
        s["tau"],
        s["variant"],
        SplineBasisSpec(s["basis_t"]["kind"], s["basis_t"]["num_basis"]),
        SplineBasisSpec(s["basis_s"]["kind"], s["basis_s"]["num_basis"]),
        s["penalty_order"],
    )
    q = len(f["a"]) + len(f["delta"])
    fit = FitResult(
        a=_array(f["a"]),
        delta=_array(f["delta"]),
        u=_array(f["u"]),
        smoothing=SmoothingParams(**f["smoothing"]),
        h=f["h"],
        Vp=_array(f["Vp"], (q, q)),
        edf_ab=np.nan if f["edf_ab"] is None else f["edf_ab"],
        edf_u=np.nan if f["edf_u"] is None else f["edf_u"],
        loglik=f["loglik"],
        aic=f["aic"],
        converged=f["converged"],
        iterations=f["iterations"],
        tau=m["tau"],
        variant=m["variant"],
        basis_t=_basis_from(m["basis_t"]),
        basis_s=_basis_from(m["basis_s"]),
        grid=_array(m["grid"]),
        penalty_order=m["penalty_order"],
        objective=f["objective"],
        scale=f["scale"],
        cluster_ids=list(f["cluster_ids"]),
    )
    fpca = None
    if d.get("fpca"):
        p = d["fpca"]
        h = len(p["grid"])
        fpca = FpcaResult(
            grid=_array(p["grid"]),
            weights=_array(p["weights"]),
            mean=_array(p["mean"]),
            eigenfunctions=_array(p["eigenfunctions"], (h, len(p["eigenvalues"]))),
            eigenvalues=_array(p["eigenvalues"]),
            noise_variance=p["noise_variance"],
            scores=np.zeros((0, len(p["eigenvalues"]))),
            smoothed=np.zeros((0, h)),
            pve_achieved=p["pve_achieved"],
        )
    return fit, spec, fpca


def load_fit(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"fit file not found: {path}")
    with open(path) as fh:
        return fit_from_dict(json.load(fh))


def _fit_path(cfg, out):
    return cfg.path("fit_file") if cfg.fit_file is not None else Path(out) / "fit.json"


def t_points(cfg, fit):
    if cfg.t_points is not None:
        t = np.asarray(cfg.t_points, dtype=float)
    else:
        if cfg.n_t_points < 1:
            raise ConfigError("n_t_points must be >= 1")
        t = np.linspace(fit.basis_t.lo, fit.basis_t.hi, cfg.n_t_points)
    bt = fit.basis_t
    tol = 1e-10 * (bt.hi - bt.lo)
    if t.size == 0 or t.min() < bt.lo - tol or t.max() > bt.hi + tol:
        raise ConfigError(f"t_points must lie in the fitted t domain [{bt.lo}, {bt.hi}]")
    return t


def load_targets(cfg, fit, fpca):
    """Target curves by id, on the fit grid, smoothed like the training curves."""
    grid, values, ids = read_curves(cfg.path("targets"))
    if grid.shape != fit.grid.shape or not np.allclose(grid, fit.grid, rtol=0, atol=1e-12):
        raise ConfigError("target curves are not on the training grid")
    if fpca is not None:
        _, values = project_new(fpca, values)
    elif not np.all(np.isfinite(values)):
        bad = ids[int(np.argmax(~np.isfinite(values).all(axis=1)))]
        raise ConfigError(f"target curve {bad!r} has missing values and the fit has no FPCA to fill them")
    return dict(zip(ids, values)), ids


def make_target(cfg, fit, fpca):
    curves, _ = load_targets(cfg, fit, fpca)
    t = t_points(cfg, fit)

    def pick(key):
        name = getattr(cfg, key)
        if name is None:
            raise ConfigError(f"config key {key!r} is required for a {cfg.target} target")
        if name not in curves:
            raise ConfigError(f"{key}: no target curve with id {name!r}")
        return curves[name]

    if cfg.target == "difference":
        return TargetSpec.difference(pick("curve_a"), pick("curve_b"), t)
    return TargetSpec.linear_predictor(pick("curve"), t)


def _threads(n):
    if n is None:
        return 1
    if n == 0:
        return os.cpu_count() or 1
    return n


# -- commands ----------------------------------------------------------------


def cmd_fit(cfg, out, threads=1):
    dataset, fpca = load_data(cfg)
    spec = cfg.model_spec()
    smoothing = cfg.fixed_smoothing()
    if smoothing is None:
        design = assemble_design(dataset, spec)
        smoothing = select_smoothing(
            design, dataset.y, spec, grid=cfg.grid(), folds=cfg.cv_folds, h=cfg.bandwidth, seed=cfg.seed, threads=threads
        )
    fit, _ = fit_dataset(dataset, spec, smoothing, h=cfg.bandwidth)
    path = Path(out) / "fit.json"
    write_json(path, fit_to_dict(fit, spec, cfg, fpca))
    log.info("wrote %s (aic %.4g, converged %s)", path, fit.aic, fit.converged)
    return fit


def cmd_predict(cfg, out, threads=1):
    fit, _, fpca = load_fit(_fit_path(cfg, out))
    curves, ids = load_targets(cfg, fit, fpca)
    t = t_points(cfg, fit)
    rows = []
    for cid in ids:
        target = TargetSpec.linear_predictor(curves[cid], t)
        est = evaluate_target(fit, target)
        se = model_based_se(fit, target)
        rows.extend((cid, ti, e, s) for ti, e, s in zip(t, est, se))
    write_csv(Path(out) / "predictions.csv", ["curve_id", "t", "estimate", "model_se"], rows)
    return rows


def cmd_bootstrap(cfg, out, threads=1, replicates=False):
    fit, spec, fpca = load_fit(_fit_path(cfg, out))
    dataset, _ = load_data(cfg)
    if [c.cluster_id for c in dataset.clusters] != list(fit.cluster_ids):
        raise ConfigError("fit file does not belong to the configured data (cluster ids differ)")
    target = make_target(cfg, fit, fpca)
    s = bootstrap_summary(dataset, fit, spec, target, cfg.B_bias, cfg.B_sd, cfg.alpha, cfg.seed, threads)
    out = Path(out)
    write_csv(
        out / "bootstrap.csv",
        ["t", "estimate", "bias", "sd", "ci_lo", "ci_hi"],
        zip(s.t_points, s.estimate, s.bias, s.sd, s.ci_lo, s.ci_hi),
    )
    if replicates:
        rows = [("bias", b, *r) for b, r in enumerate(s.replicates_bias)]
        rows += [("sd", b, *r) for b, r in enumerate(s.replicates_sd)]
        write_csv(out / "bootstrap_replicates.csv", ["scheme", "replicate"] + [f"t={fmt(t)}" for t in s.t_points], rows)
        plot_bands(s, out / "bootstrap.svg", target.kind)
    return s


def plot_bands(summary, path, kind="difference"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "funcqr", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        t = summary.t_points
        ax.fill_between(t, summary.ci_lo, summary.ci_hi, color="0.85", label=f"{100 * (1 - summary.alpha):g}% band")
        ax.plot(t, summary.estimate, color="0.5", ls="--", label="estimate")
        ax.plot(t, summary.adjusted, color="k", label="bias adjusted")
        if kind == "difference":
            ax.axhline(0.0, color="0.3", lw=0.6)
        ax.set_xlabel("t")
        ax.set_ylabel("quantile difference" if kind == "difference" else "quantile")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def cmd_compare(cfg, out, threads=1):
    dataset, _ = load_data(cfg)
    base = cfg.model_spec()
    specs = [ModelSpec(base.tau, v, base.basis_t, base.basis_s, base.penalty_order) for v in cfg.variants]
    rows = compare_models(dataset, specs, grid=cfg.grid(), folds=cfg.cv_folds, h=cfg.bandwidth, seed=cfg.seed, threads=threads)
    header = ["variant", "tau", "status", "aic", "loglik", "scale", "edf_ab", "edf_u", "converged", *LAMBDA_KEYS, "min_aic"]
    with open(Path(out) / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r["variant"], fmt(r["tau"]), r["status"]] + [_cell(r.get(k)) for k in header[3:]])
    return rows


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, float) and not np.isfinite(v):
        return ""
    return fmt(v)


def cmd_simulate(cfg, out, threads=1):
    try:
        scenario = SimScenario(
            n_clusters=cfg.sim_n_clusters,
            n_per_cluster=cfg.sim_n_per_cluster if np.ndim(cfg.sim_n_per_cluster) == 0 else tuple(cfg.sim_n_per_cluster),
            n_grid=cfg.sim_n_grid,
            t_range=(1.0 if cfg.t_min is None else cfg.t_min, 21.0 if cfg.t_max is None else cfg.t_max),
            alpha=cfg.sim_alpha,
            beta=cfg.sim_beta,
            sigma_u=cfg.sim_sigma_u,
            error=cfg.sim_error,
            error_scale=cfg.sim_error_scale,
            noise_sd=cfg.sim_noise_sd,
            tau=cfg.tau,
            seed=cfg.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    dataset, truth = generate(scenario)
    out = Path(out)
    write_dataset(dataset, out / "responses.csv", out / "curves.csv")
    x_a, x_b = truth.pair_curves()
    write_curve_file(out / "targets.csv", dataset.grid, np.vstack([x_a, x_b]), ["A", "B"])
    lo, hi = scenario.t_range
    t = np.asarray(cfg.t_points, dtype=float) if cfg.t_points is not None else np.linspace(lo, hi, cfg.n_t_points)
    write_json(
        out / "truth.json",
        {
            "scenario": {k: getattr(scenario, k) for k in scenario.__dataclass_fields__},
            "u": truth.u,
            "pair": {"A": truth.pair[0], "B": truth.pair[1]},
            "t": t,
            "difference": truth.difference(t),
            "quantile_A": truth.quantile_at(t, truth.pair[0])[:, 0],
            "quantile_B": truth.quantile_at(t, truth.pair[1])[:, 0],
        },
    )
    return dataset, truth


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "bootstrap": cmd_bootstrap,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="funcqr", description="Functional quantile regression for longitudinal data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat TOML config file")
        s.add_argument("--out", default=".", help="output directory (default: .)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--threads", type=int, default=1, help="worker threads, 0 = all cores")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "bootstrap":
            s.add_argument("--replicates", action="store_true", help="also write replicate CSV and SVG plot")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 0:
            raise ConfigError("--threads must be >= 0")
        cfg = RunConfig.load(args.config, seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        kwargs = {"replicates": args.replicates} if args.command == "bootstrap" else {}
        COMMANDS[args.command](cfg, out, threads=_threads(args.threads), **kwargs)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FitError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
