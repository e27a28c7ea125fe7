"""End-to-end pipeline: one JSON config drives simulation, reconstruction,
fitting and analysis, emitting plot-ready long-format CSV tables.

The shipped defaults reproduce the reference experiment: two twin beams of
roughly six photon pairs each behind three strips of 4410 macropixels with
22% / 20.7% efficiency and 0.22 dark counts per frame.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import io
from .detector_model import (
    DetectionMatrix,
    DetectorConfig,
    Histogram3D,
    conditional_histogram,
    detection_matrix,
    forward_histogram,
    postselect_on_counts,
    sample_histogram,
)
from .errors import EmptyPostselectionError, InputError, TwinpostError
from .field_model import (
    CompositeFieldParams,
    JointDist,
    ModeField,
    compose_noisy_3d,
    intensity_moments,
    truncate_mass,
)
from .nonclassicality import (
    CW,
    MW,
    HybridCriterion,
    OrderingContext,
    covariance_delta,
    fano,
    hybrid_L,
    local_criterion_maps,
    ncd,
    ncd_local_map,
    noise_reduction_plus,
)
from .quasidist import quasi_distribution
from .reconstruction import (
    EmSettings,
    em_reconstruct_2d,
    em_reconstruct_3d,
    empirical_intensity_moments,
    gaussian_fit_step1,
    gaussian_fit_step2,
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DetectorSpec:
    eta: float
    pixels: int
    dark_mean: float
    ideal: bool = False

    def config(self) -> DetectorConfig:
        return DetectorConfig(self.eta, self.pixels, self.dark_mean)


@dataclass(frozen=True)
class PipelineConfig:
    field: CompositeFieldParams
    det_s: DetectorSpec
    det_i1: DetectorSpec
    det_i2: DetectorSpec
    trials: int = 1_200_000
    seed: int | None = 20260809
    tail_budget: float = 1e-8
    em_max_iterations: int = 100_000
    em_tol: float = 1e-9
    em_grid: int | None = None
    cs_range: tuple[int, int] = (0, 10)
    ns_range: tuple[int, int] = (0, 25)
    quasi_s: float = -0.15
    quasi_step: float = 0.05
    quasi_extent: float | None = 30.0
    probability_floor: float = 0.01
    slice_keep_mass: float = 0.9999
    em3d: bool = False

    def to_dict(self) -> dict:
        def mf(m: ModeField):
            return {"modes": m.modes, "mean_per_mode": m.mean_per_mode}

        return {
            "schema_version": SCHEMA_VERSION,
            "field": {
                "twb1": mf(self.field.twb1),
                "twb2": mf(self.field.twb2),
                "noise_s": mf(self.field.noise_s),
                "noise_i1": mf(self.field.noise_i1),
                "noise_i2": mf(self.field.noise_i2),
            },
            "detectors": {
                "signal": asdict(self.det_s),
                "idler1": asdict(self.det_i1),
                "idler2": asdict(self.det_i2),
            },
            "simulation": {
                "trials": self.trials,
                "seed": self.seed,
                "tail_budget": self.tail_budget,
            },
            "reconstruction": {
                "em_max_iterations": self.em_max_iterations,
                "em_tol": self.em_tol,
                "em_grid": self.em_grid,
            },
            "analysis": {
                "cs_range": list(self.cs_range),
                "ns_range": list(self.ns_range),
                "quasi_s": self.quasi_s,
                "quasi_step": self.quasi_step,
                "quasi_extent": self.quasi_extent,
                "probability_floor": self.probability_floor,
                "slice_keep_mass": self.slice_keep_mass,
                "em3d": self.em3d,
            },
        }

    def hash(self) -> str:
        return io.config_hash(self.to_dict())


def default_config() -> PipelineConfig:
    return PipelineConfig(
        field=CompositeFieldParams(
            twb1=ModeField(58.0, 0.106),
            twb2=ModeField(51.0, 0.117),
            noise_s=ModeField(0.011, 10.0),
            noise_i1=ModeField(0.007, 10.0),
            noise_i2=ModeField(0.0005, 39.0),
        ),
        det_s=DetectorSpec(0.22, 4410, 0.22),
        det_i1=DetectorSpec(0.207, 4410, 0.22),
        det_i2=DetectorSpec(0.207, 4410, 0.22),
    )


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise InputError(f"config: missing '{key}' in {where}")
    return d[key]


def _mode_field(d: dict, where: str) -> ModeField:
    try:
        return ModeField(float(_need(d, "modes", where)), float(_need(d, "mean_per_mode", where)))
    except (TypeError, ValueError) as exc:
        raise InputError(f"config: invalid field block {where}: {exc}") from exc


def _detector(d: dict, where: str) -> DetectorSpec:
    try:
        spec = DetectorSpec(
            float(_need(d, "eta", where)),
            int(_need(d, "pixels", where)),
            float(d.get("dark_mean", 0.0)),
            bool(d.get("ideal", False)),
        )
        spec.config()  # validates ranges
        return spec
    except (TypeError, ValueError) as exc:
        raise InputError(f"config: invalid detector block {where}: {exc}") from exc


def config_from_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise InputError("config: top level must be a JSON object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise InputError(f"config: unsupported schema_version {version}")
    fblock = _need(doc, "field", "top level")
    dblock = _need(doc, "detectors", "top level")
    sim = doc.get("simulation", {})
    rec = doc.get("reconstruction", {})
    ana = doc.get("analysis", {})
    base = default_config()
    trials = int(sim.get("trials", 0))
    seed = sim.get("seed")
    if trials > 0 and seed is None:
        raise InputError("config: simulation.seed is required when trials > 0")
    cs = ana.get("cs_range", list(base.cs_range))
    ns = ana.get("ns_range", list(base.ns_range))
    if len(cs) != 2 or cs[0] > cs[1] or cs[0] < 0:
        raise InputError(f"config: invalid analysis.cs_range {cs}")
    if len(ns) != 2 or ns[0] > ns[1] or ns[0] < 0:
        raise InputError(f"config: invalid analysis.ns_range {ns}")
    return PipelineConfig(
        field=CompositeFieldParams(
            twb1=_mode_field(_need(fblock, "twb1", "field"), "field.twb1"),
            twb2=_mode_field(_need(fblock, "twb2", "field"), "field.twb2"),
            noise_s=_mode_field(_need(fblock, "noise_s", "field"), "field.noise_s"),
            noise_i1=_mode_field(_need(fblock, "noise_i1", "field"), "field.noise_i1"),
            noise_i2=_mode_field(_need(fblock, "noise_i2", "field"), "field.noise_i2"),
        ),
        det_s=_detector(_need(dblock, "signal", "detectors"), "detectors.signal"),
        det_i1=_detector(_need(dblock, "idler1", "detectors"), "detectors.idler1"),
        det_i2=_detector(_need(dblock, "idler2", "detectors"), "detectors.idler2"),
        trials=trials,
        seed=None if seed is None else int(seed),
        tail_budget=float(sim.get("tail_budget", base.tail_budget)),
        em_max_iterations=int(rec.get("em_max_iterations", base.em_max_iterations)),
        em_tol=float(rec.get("em_tol", base.em_tol)),
        em_grid=rec.get("em_grid"),
        cs_range=(int(cs[0]), int(cs[1])),
        ns_range=(int(ns[0]), int(ns[1])),
        quasi_s=float(ana.get("quasi_s", base.quasi_s)),
        quasi_step=float(ana.get("quasi_step", base.quasi_step)),
        quasi_extent=ana.get("quasi_extent", base.quasi_extent),
        probability_floor=float(ana.get("probability_floor", base.probability_floor)),
        slice_keep_mass=float(ana.get("slice_keep_mass", base.slice_keep_mass)),
        em3d=bool(ana.get("em3d", base.em3d)),
    )


def load_config(path) -> PipelineConfig:
    return config_from_dict(io.read_config_file(path))


# ---------------------------------------------------------------------------
# shared model assembly


def build_distribution(cfg: PipelineConfig) -> JointDist:
    return compose_noisy_3d(cfg.field, tail_budget=cfg.tail_budget)


def _count_bound(spec: DetectorSpec, marginal: np.ndarray) -> int:
    """Photocount grid bound from the photon marginal: mean response plus a
    ten-sigma-and-slack margin, so truncated count mass is negligible."""
    n_top = len(marginal) - 1
    if spec.ideal:
        return n_top
    n = np.arange(len(marginal))
    mean_n = float(n @ marginal) / max(marginal.sum(), 1e-300)
    var_n = float(((n - mean_n) ** 2) @ marginal) / max(marginal.sum(), 1e-300)
    mean_c = spec.eta * mean_n + spec.dark_mean
    var_c = spec.eta**2 * var_n + mean_n * spec.eta * (1 - spec.eta) + spec.dark_mean
    bound = mean_c + 10.0 * math.sqrt(var_c + 1.0) + 10
    return int(min(spec.pixels, math.ceil(bound)))


def detector_matrix_for(spec: DetectorSpec, c_max: int, n_max: int) -> DetectionMatrix:
    if spec.ideal:
        return DetectionMatrix.identity(n_max)
    return detection_matrix(spec.config(), c_max, n_max)


def _provenance(cfg: PipelineConfig, **extra) -> dict:
    meta = {"config_hash": cfg.hash()}
    meta.update(extra)
    return meta


# ---------------------------------------------------------------------------
# commands


def run_simulate(cfg: PipelineConfig, out_dir, seed_override: int | None = None) -> list[Path]:
    """Exact forward histogram, plus a seeded Monte Carlo histogram when the
    config asks for trials."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = build_distribution(cfg)
    shapes = p.values.shape
    specs = (cfg.det_s, cfg.det_i1, cfg.det_i2)
    marginals = [p.marginal(i).values for i in range(3)]
    c_bounds = [_count_bound(spec, marg) for spec, marg in zip(specs, marginals)]
    mats = [
        detector_matrix_for(spec, cb, sh - 1)
        for spec, cb, sh in zip(specs, c_bounds, shapes)
    ]
    exact = forward_histogram(p, *mats)
    seed = cfg.seed if seed_override is None else seed_override
    meta = _provenance(
        cfg,
        seed=seed,
        detectors={
            "signal": asdict(cfg.det_s),
            "idler1": asdict(cfg.det_i1),
            "idler2": asdict(cfg.det_i2),
        },
    )
    paths = [out / "exact_histogram.csv"]
    io.write_histogram(paths[0], exact, {**meta, "route": "exact"})
    if cfg.trials > 0:
        sampled = sample_histogram(
            p,
            None if cfg.det_s.ideal else cfg.det_s.config(),
            None if cfg.det_i1.ideal else cfg.det_i1.config(),
            None if cfg.det_i2.ideal else cfg.det_i2.config(),
            cfg.trials,
            seed,
            c_max=tuple(c_bounds),
        )
        paths.append(out / "sampled_histogram.csv")
        io.write_histogram(paths[1], sampled, {**meta, "route": "sampled"})
    return paths


def _em_settings(cfg: PipelineConfig) -> EmSettings:
    return EmSettings(max_iterations=cfg.em_max_iterations, tol=cfg.em_tol)


def _em_photon_grid(cfg: PipelineConfig, spec: DetectorSpec, c_len: int) -> int:
    if cfg.em_grid:
        return int(cfg.em_grid)
    if spec.ideal:
        return c_len - 1
    return int(math.ceil((c_len + 4.0) / max(spec.eta, 0.05)))


def run_reconstruct(cfg: PipelineConfig, hist_path, out_dir, slice_spec=None) -> list[Path]:
    """Maximum-likelihood inversion of a measured histogram: 3D by default,
    2D conditional when ``--slice c_s=K`` is given."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f, meta_in = io.read_histogram(hist_path)
    settings = _em_settings(cfg)
    meta = _provenance(cfg, source=str(hist_path), em_tol=cfg.em_tol)
    if slice_spec is not None:
        axis, value = slice_spec
        if axis != "c_s":
            raise InputError("reconstruction slices are selected by c_s=<int>")
        f_ii = conditional_histogram(f, value)
        mats = [
            detector_matrix_for(spec, f_ii.values.shape[i] - 1,
                                _em_photon_grid(cfg, spec, f_ii.values.shape[i]))
            for i, spec in enumerate((cfg.det_i1, cfg.det_i2))
        ]
        res = em_reconstruct_2d(f_ii, *mats, settings)
        path = out / f"reconstructed_cs{value}.csv"
        io.write_dist2d(path, res.dist, {
            **meta,
            "slice": {"c_s": value},
            "iterations": res.iterations,
            "converged": res.converged,
        })
        return [path]
    mats = [
        detector_matrix_for(spec, f.values.shape[i] - 1,
                            _em_photon_grid(cfg, spec, f.values.shape[i]))
        for i, spec in enumerate((cfg.det_s, cfg.det_i1, cfg.det_i2))
    ]
    res = em_reconstruct_3d(f, *mats, settings)
    path = out / "reconstructed_3d.csv"
    io.write_dist3d(path, res.dist, {
        **meta,
        "iterations": res.iterations,
        "converged": res.converged,
    })
    return [path]


def run_fit(cfg: PipelineConfig, hist_path, out_dir) -> list[Path]:
    """Two-step Gaussian fit of a histogram; writes the full moment set,
    per-component mode parameters, efficiencies and the fit declination."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f, _ = io.read_histogram(hist_path)
    if asdict(cfg.det_i1) != asdict(cfg.det_i2):
        raise InputError("the Gaussian fit assumes identical idler detectors")
    step1 = gaussian_fit_step1(f, cfg.det_s.config(), cfg.det_i1.config())
    moments = empirical_intensity_moments(f, 2)
    result = gaussian_fit_step2(step1, moments, f, cfg.det_s.config(), cfg.det_i1.config())
    payload = {
        "eta_s": result.eta_s,
        "eta_i": result.eta_i,
        "free_parameter": result.free_parameter,
        "declination": result.declination,
        "moments": result.moments,
        "residuals": result.residuals,
        "components": {
            name: {"modes": mf.modes, "mean_per_mode": mf.mean_per_mode,
                   "mean_photons": mf.mean_photons}
            for name, mf in (
                ("twb1", result.params.twb1),
                ("twb2", result.params.twb2),
                ("noise_s", result.params.noise_s),
                ("noise_i1", result.params.noise_i1),
                ("noise_i2", result.params.noise_i2),
            )
        },
        "step1": {
            "eta_s": step1.eta_s,
            "eta_i": step1.eta_i,
            "declination": step1.declination,
        },
        "provenance": _provenance(cfg, source=str(hist_path)),
    }
    path = out / "gaussian_fit.json"
    io.write_json(path, payload)
    return [path]


# ---------------------------------------------------------------------------
# analysis


def _pair_stats(dist: JointDist) -> dict:
    rep = {}
    rep["mean_i1"] = float(
        np.arange(dist.values.shape[0]) @ dist.values.sum(axis=1) / dist.values.sum()
    )
    rep["fano_i1"] = fano(dist.marginal(0))
    rep["r_plus"] = noise_reduction_plus(dist)
    rep["cov_delta"] = covariance_delta(dist)
    return rep


def _tau_pair(dist: JointDist, ctx: OrderingContext) -> dict:
    mom = intensity_moments(dist, 2)
    return {
        "tau_cw": ncd(mom, CW, ctx).tau,
        "tau_mw": ncd(mom, MW, ctx).tau,
    }


FIG_HEADER = [
    "slice", "route", "mean_i1", "fano_i1", "r_plus", "cov_delta", "tau_cw", "tau_mw",
]


def run_analyze(cfg: PipelineConfig, hist_path, out_dir, slice_spec=None) -> list[Path]:
    """Postselection sweeps and, for a selected slice, the location-resolved
    criterion maps and intensity quasi-distribution.

    Produces ``fig_counts_sweep.csv`` (per postselecting photocount: raw
    histogram statistics and, when EM routes are enabled, the reconstructed
    photon statistics) and ``fig_ideal_sweep.csv`` (per postselecting photon
    number on the exact model).  Empty slices yield NA rows.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f, _ = io.read_histogram(hist_path)
    ctx = OrderingContext()
    meta = _provenance(cfg, source=str(hist_path))
    written = []

    em_set = _em_settings(cfg)
    rows = []
    for c_s in range(cfg.cs_range[0], cfg.cs_range[1] + 1):
        for route in ("counts", "ml"):
            try:
                if c_s >= f.values.shape[0]:
                    raise EmptyPostselectionError(f"slice {c_s} beyond histogram")
                f_ii = conditional_histogram(f, c_s)
                if route == "counts":
                    dist = f_ii
                else:
                    mats = [
                        detector_matrix_for(
                            spec,
                            f_ii.values.shape[i] - 1,
                            _em_photon_grid(cfg, spec, f_ii.values.shape[i]),
                        )
                        for i, spec in enumerate((cfg.det_i1, cfg.det_i2))
                    ]
                    dist = em_reconstruct_2d(f_ii, *mats, em_set).dist
                stats = _pair_stats(dist)
                taus = _tau_pair(dist, ctx)
                rows.append([c_s, route, stats["mean_i1"], stats["fano_i1"],
                             stats["r_plus"], stats["cov_delta"],
                             taus["tau_cw"], taus["tau_mw"]])
            except (EmptyPostselectionError, TwinpostError):
                rows.append([c_s, route, None, None, None, None, None, None])
    path = out / "fig_counts_sweep.csv"
    io.write_table_csv(path, FIG_HEADER, rows, {**meta, "sweep": "c_s"})
    written.append(path)

    p = build_distribution(cfg)
    ident = DetectionMatrix.identity(p.values.shape[0] - 1)
    rows = []
    for n_s in range(cfg.ns_range[0], cfg.ns_range[1] + 1):
        try:
            dist, _prob = postselect_on_counts(p, ident, n_s)
            dist = truncate_mass(dist, cfg.slice_keep_mass)
            stats = _pair_stats(dist)
            taus = _tau_pair(dist, ctx)
            rows.append([n_s, "model", stats["mean_i1"], stats["fano_i1"],
                         stats["r_plus"], stats["cov_delta"],
                         taus["tau_cw"], taus["tau_mw"]])
        except (EmptyPostselectionError, TwinpostError):
            rows.append([n_s, "model", None, None, None, None, None, None])
    path = out / "fig_ideal_sweep.csv"
    io.write_table_csv(path, FIG_HEADER, rows, {**meta, "sweep": "n_s"})
    written.append(path)

    if slice_spec is not None:
        written.extend(_analyze_slice(cfg, f, p, slice_spec, out, meta))
    return written


def _analyze_slice(cfg, f, p, slice_spec, out, meta):
    axis, value = slice_spec
    if axis == "c_s":
        f_ii = conditional_histogram(f, value)
        mats = [
            detector_matrix_for(
                spec,
                f_ii.values.shape[i] - 1,
                _em_photon_grid(cfg, spec, f_ii.values.shape[i]),
            )
            for i, spec in enumerate((cfg.det_i1, cfg.det_i2))
        ]
        dist = em_reconstruct_2d(f_ii, *mats, _em_settings(cfg)).dist
        tag = f"cs{value}"
    elif axis == "n_s":
        ident = DetectionMatrix.identity(p.values.shape[0] - 1)
        dist, _ = postselect_on_counts(p, ident, value)
        tag = f"ns{value}"
    else:
        raise InputError(f"unknown slice axis {axis!r}")
    dist = truncate_mass(dist, cfg.slice_keep_mass)
    written = []
    smeta = {**meta, "slice": {axis: value}}

    extent = cfg.quasi_extent
    q = quasi_distribution(
        dist,
        cfg.quasi_s,
        step=cfg.quasi_step,
        extent=None if extent is None else (float(extent), float(extent)),
    )
    path = out / f"quasi_{tag}.csv"
    io.write_quasigrid(path, q, smeta)
    written.append(path)

    ctx = OrderingContext()
    mom = intensity_moments(dist, 2)
    crit_rows = []
    for crit in (CW, MW):
        rep = ncd(mom, crit, ctx)
        crit_rows.append({
            "criterion": crit.label(),
            "indices": crit.indices(),
            "value": crit.evaluate(mom),
            "tau": rep.tau,
            "s_th": rep.s_threshold,
            "saturated": rep.saturated,
        })
    path = out / f"criteria_{tag}.csv"
    io.write_criteria_csv(path, crit_rows, smeta)
    written.append(path)

    for family in ("ccs", "matrix"):
        values = {
            K: r.value
            for K, r in local_criterion_maps(dist, family, cfg.probability_floor).items()
        }
        taus = ncd_local_map(dist, family, cfg.probability_floor)
        rows = [
            [k1, k2, values[(k1, k2)], taus[(k1, k2)].tau, taus[(k1, k2)].s_threshold,
             taus[(k1, k2)].saturated]
            for (k1, k2) in sorted(values)
        ]
        path = out / f"local_map_{family}_{tag}.csv"
        io.write_table_csv(
            path, ["n_i1", "n_i2", "value", "tau", "s_th", "saturated"], rows, smeta
        )
        written.append(path)

    hmap = hybrid_L(dist)
    rows = []
    for n1, rep in sorted(hmap.items()):
        if np.isnan(rep.value):
            rows.append([n1, None, None, None, None])
            continue
        dep = ncd(dist, HybridCriterion(n1), ctx)
        rows.append([n1, rep.value, dep.tau, dep.s_threshold, dep.saturated])
    path = out / f"hybrid_{tag}.csv"
    io.write_table_csv(path, ["n_i1", "value", "tau", "s_th", "saturated"], rows, smeta)
    written.append(path)
    return written
