"""Inversion of the detection process.

Two complementary routes:

* expectation-maximization (multiplicative maximum-likelihood) deconvolution
  of 2D and 3D photocount histograms into photon-number distributions;
* a physics-constrained Gaussian fit that models the data as two twin beams
  plus three thermal noise fields seen through the pixel detector response,
  determined in two steps (combined-field fit, then a one-parameter split of
  the combined moments into per-beam components).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detector_model import (
    DetectionMatrix,
    DetectorConfig,
    Histogram3D,
    detection_matrix,
)
from .errors import (
    DegenerateModelError,
    FitError,
    InfeasibleIntervalError,
    InsufficientStatisticsError,
    ParameterError,
    ShapeError,
)
from .field_model import (
    PHOTONS,
    CompositeFieldParams,
    JointDist,
    ModeField,
    MomentSet,
    compose_noisy_3d,
    mandel_rice_pmf,
    moments_photon_to_intensity,
    photon_moments,
    stirling_first,
)

__all__ = [
    "EmSettings",
    "EmResult",
    "em_reconstruct_3d",
    "em_reconstruct_2d",
    "empirical_intensity_moments",
    "combine_idler_moments",
    "central_moment",
    "declination",
    "GaussianFitSettings",
    "Step1Result",
    "GaussianFitResult",
    "gaussian_fit_step1",
    "gaussian_fit_step2",
]


# ---------------------------------------------------------------------------
# expectation maximization


@dataclass(frozen=True)
class EmSettings:
    """Stopping rule and initialization for the EM iteration.

    ``tol`` bounds the max-abs change of the distribution per iteration;
    ``init`` is "uniform" or "seeded" (the latter requires ``init_dist``).
    """

    max_iterations: int = 100_000
    tol: float = 1e-9
    init: str = "uniform"
    init_dist: np.ndarray | None = None
    track_loglik: bool = True

    def __post_init__(self):
        if self.tol <= 0:
            raise ParameterError("EM tolerance must be positive")
        if self.max_iterations < 1:
            raise ParameterError("EM needs at least one iteration")
        if self.init not in ("uniform", "seeded"):
            raise ParameterError(f"unknown init policy {self.init!r}")
        if self.init == "seeded" and self.init_dist is None:
            raise ParameterError("seeded init requires init_dist")


@dataclass(frozen=True)
class EmResult:
    dist: JointDist
    iterations: int
    converged: bool
    final_change: float
    loglik: np.ndarray | None = None


def _em_run(f_vals, mats, settings):
    """Shared EM core for any arity: multiplicative updates with the detector
    matrices, monotone in the Poisson log-likelihood."""
    ndim = f_vals.ndim
    letters_c = "abc"[:ndim]
    letters_n = "sij"[:ndim]
    pair = ",".join(f"{c}{n}" for c, n in zip(letters_c, letters_n))
    fwd = f"{pair},{letters_n}->{letters_c}"
    bwd = f"{pair},{letters_c}->{letters_n}"
    shape_n = tuple(m.shape[1] for m in mats)
    if settings.init == "seeded":
        p = np.asarray(settings.init_dist, dtype=float).copy()
        if p.shape != shape_n:
            raise ShapeError(f"seed shape {p.shape} does not match model grid {shape_n}")
    else:
        p = np.full(shape_n, 1.0 / np.prod(shape_n))
    total_f = f_vals.sum()
    p *= total_f / p.sum()
    fwd_path = np.einsum_path(fwd, *mats, p, optimize="optimal")[0]
    bwd_path = np.einsum_path(bwd, *mats, f_vals, optimize="optimal")[0]
    has_data = f_vals > 0
    loglik = [] if settings.track_loglik else None
    converged = False
    change = np.inf
    it = 0
    for it in range(1, settings.max_iterations + 1):
        denom = np.einsum(fwd, *mats, p, optimize=fwd_path)
        if np.any(denom[has_data] <= 0.0):
            c_bad = tuple(int(x[0]) for x in np.nonzero(has_data & (denom <= 0.0)))
            raise DegenerateModelError(
                f"detector model assigns zero probability to observed cell {c_bad}"
            )
        if loglik is not None:
            loglik.append(float(np.sum(f_vals[has_data] * np.log(denom[has_data]))))
        ratio = np.zeros_like(f_vals)
        ratio[has_data] = f_vals[has_data] / denom[has_data]
        p_new = p * np.einsum(bwd, *mats, ratio, optimize=bwd_path)
        change = float(np.max(np.abs(p_new - p)))
        p = p_new
        if change < settings.tol:
            converged = True
            break
    return p, it, converged, change, (np.asarray(loglik) if loglik is not None else None)


def em_reconstruct_3d(
    f: Histogram3D,
    det_s: DetectionMatrix,
    det_i1: DetectionMatrix,
    det_i2: DetectionMatrix,
    settings: EmSettings = EmSettings(),
) -> EmResult:
    """Maximum-likelihood photon-number distribution behind a 3D photocount
    histogram.

    Runs the multiplicative EM update; each iterate stays non-negative and
    keeps the total mass of ``f`` exactly, and the Poisson log-likelihood is
    non-decreasing.  Returns the first iterate whose max-abs change is below
    the tolerance, or the last iterate with ``converged=False``.
    """
    mats = []
    for mat, c_len in zip((det_s, det_i1, det_i2), f.values.shape):
        if mat.c_max + 1 < c_len:
            raise ShapeError(
                f"detection matrix covers c <= {mat.c_max}, histogram needs {c_len - 1}"
            )
        mats.append(mat.values[:c_len, :])
    p, it, conv, change, ll = _em_run(f.values, mats, settings)
    return EmResult(JointDist(p, PHOTONS), it, conv, change, ll)


def em_reconstruct_2d(
    f_ii: JointDist,
    det_i1: DetectionMatrix,
    det_i2: DetectionMatrix,
    settings: EmSettings = EmSettings(),
) -> EmResult:
    """2D variant of :func:`em_reconstruct_3d` for conditional idler
    histograms."""
    if f_ii.ndim != 2:
        raise ShapeError("conditional histogram must be 2D")
    mats = []
    for mat, c_len in zip((det_i1, det_i2), f_ii.values.shape):
        if mat.c_max + 1 < c_len:
            raise ShapeError(
                f"detection matrix covers c <= {mat.c_max}, histogram needs {c_len - 1}"
            )
        mats.append(mat.values[:c_len, :])
    p, it, conv, change, ll = _em_run(f_ii.values, mats, settings)
    return EmResult(JointDist(p, PHOTONS), it, conv, change, ll)


# ---------------------------------------------------------------------------
# moments from data


def empirical_intensity_moments(f: Histogram3D, max_order: int) -> MomentSet:
    """Detected intensity moments of a photocount histogram: photocount
    moments by direct summation, converted per axis with signed Stirling
    numbers of the first kind."""
    dist = JointDist(f.values / f.values.sum(), axis_kind="photocounts")
    return moments_photon_to_intensity(photon_moments(dist, max_order))


def central_moment(m: MomentSet, key: tuple[int, ...]) -> float:
    """Mixed central moment from a raw-moment grid (binomial expansion)."""
    means = [m.moment(tuple(1 if a == ax else 0 for a in range(m.naxes))) for ax in range(m.naxes)]
    total = 0.0
    ranges = [range(k + 1) for k in key]
    for j in np.ndindex(*[k + 1 for k in key]):
        coef = 1.0
        for ka, ja, mu in zip(key, j, means):
            coef *= math.comb(ka, ja) * (-mu) ** (ka - ja)
        total += coef * m.moment(j)
    del ranges
    return float(total)


def combine_idler_moments(m: MomentSet) -> MomentSet:
    """Collapse the two idler axes of a 3-axis detected-moment grid into one
    combined idler axis (orders up to 2 per axis).

    The combined mean is the sum of the idler means, the combined variance
    picks up twice the idler-idler covariance, and the signal covariance is
    the sum of the two signal-idler covariances.
    """
    if m.naxes != 3:
        raise ParameterError("expected moments over (signal, idler1, idler2)")
    ms = m.moment((1, 0, 0))
    vs = central_moment(m, (2, 0, 0))
    m1, m2 = m.moment((0, 1, 0)), m.moment((0, 0, 1))
    v1, v2 = central_moment(m, (0, 2, 0)), central_moment(m, (0, 0, 2))
    c12 = central_moment(m, (0, 1, 1))
    cs1 = central_moment(m, (1, 1, 0))
    cs2 = central_moment(m, (1, 0, 1))
    mi = m1 + m2
    vi = v1 + 2.0 * c12 + v2
    csi = cs1 + cs2
    table = np.zeros((3, 3))
    table[0, 0] = 1.0
    table[1, 0] = ms
    table[0, 1] = mi
    table[2, 0] = vs + ms * ms
    table[0, 2] = vi + mi * mi
    table[1, 1] = csi + ms * mi
    # third-order entries are not defined by the pairwise identities; mark by
    # leaving them zero and restricting the grid to order 2
    return MomentSet(table, m.ordering, m.s)


def declination(f_th: Histogram3D | np.ndarray, f: Histogram3D | np.ndarray) -> float:
    """Root of the summed squared differences of two histograms on one grid."""
    a = f_th.values if hasattr(f_th, "values") else np.asarray(f_th, dtype=float)
    b = f.values if hasattr(f, "values") else np.asarray(f, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"histogram shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


# ---------------------------------------------------------------------------
# two-step Gaussian fit


@dataclass(frozen=True)
class GaussianFitSettings:
    eta_bounds: tuple[float, float] = (0.02, 0.99)
    eta_quantum: float = 1e-4
    max_fit_evals: int = 600
    scan_points: int = 13
    grid_fallback: int = 64
    golden_rel_tol: float = 1e-4
    model_tail_budget: float = 1e-7
    poisson_mode_cap: float = 1e9


@dataclass(frozen=True)
class Step1Result:
    """Combined-field fit: efficiencies plus the intensity moments of the
    combined paired field and the signal/combined-idler noise."""

    eta_s: float
    eta_i: float
    w_paired: float
    var_paired: float
    w_noise_s: float
    var_noise_s: float
    w_noise_i: float
    var_noise_i: float
    declination: float
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GaussianFitResult:
    params: CompositeFieldParams
    eta_s: float
    eta_i: float
    free_parameter: float
    declination: float
    moments: dict
    residuals: dict
    diagnostics: dict = field(default_factory=dict)


def _dark_corrected(raw: dict, d: float, pixels: int) -> dict:
    """Remove the independent dark-count field from detected mean/variance.

    Dark counts contribute ``d`` to the detected intensity mean and
    ``-d^2/pixels`` to its variance (binomial statistics); covariances between
    different strips are untouched.
    """
    out = dict(raw)
    out["mean"] = raw["mean"] - d
    out["var"] = raw["var"] + d * d / pixels
    return out


def _mode_field_from_intensity(w: float, var: float, cap: float) -> ModeField | None:
    """A7-style conversion with a Poissonian cap for vanishing variance."""
    if w <= 1e-12:
        return None
    var = max(var, w * w / cap)
    return ModeField(modes=w * w / var, mean_per_mode=var / w)


def _model_marginal(paired: ModeField | None, noise: ModeField | None, length: int):
    out = np.zeros(length)
    out[0] = 1.0
    for comp in (paired, noise):
        if comp is not None:
            out = np.convolve(out, mandel_rice_pmf(np.arange(length), comp))[:length]
    return out


def _conv_axis(vals: np.ndarray, pmf: np.ndarray, axis: int) -> np.ndarray:
    size = vals.shape[axis]
    toe = np.zeros((size, size))
    for j in range(size):
        toe[j:, j] = pmf[: size - j]
    moved = np.moveaxis(vals, axis, 0)
    return np.moveaxis(np.tensordot(toe, moved, axes=(1, 0)), 0, axis)


def _combined_model_2d(paired, noise_s, noise_i, n_s_max, n_i_max):
    """Joint (signal, combined idler) distribution of the step-1 model."""
    diag_len = min(n_s_max, n_i_max) + 1
    vals = np.zeros((n_s_max + 1, n_i_max + 1))
    if paired is None:
        vals[0, 0] = 1.0
    else:
        mr = mandel_rice_pmf(np.arange(diag_len), paired)
        vals[np.arange(diag_len), np.arange(diag_len)] = mr
    if noise_s is not None:
        vals = _conv_axis(vals, mandel_rice_pmf(np.arange(n_s_max + 1), noise_s), 0)
    if noise_i is not None:
        vals = _conv_axis(vals, mandel_rice_pmf(np.arange(n_i_max + 1), noise_i), 1)
    return vals


def _collapse_idlers(f: Histogram3D) -> np.ndarray:
    sh = f.values.shape
    out = np.zeros((sh[0], sh[1] + sh[2] - 1))
    i1 = np.arange(sh[1])[:, None]
    i2 = np.arange(sh[2])[None, :]
    tot = np.broadcast_to(i1 + i2, sh[1:]).ravel()
    for cs in range(sh[0]):
        np.add.at(out[cs], tot, f.values[cs].ravel())
    return out


def _step1_split(eta_s, eta_i, u, emp):
    """Moment bookkeeping of the combined model for given efficiencies and a
    paired-variance value u; returns None when infeasible."""
    kappa = emp["cov_si"] / (eta_s * eta_i)
    if kappa < 0:
        kappa = 0.0
        u = 0.0
    w_p = kappa - u
    w_ns = emp["mean_s"] / eta_s - w_p
    w_ni = emp["mean_i"] / eta_i - w_p
    var_ns = emp["var_s"] / eta_s**2 - u
    var_ni = emp["var_i"] / eta_i**2 - u
    vals = (u, w_p, w_ns, w_ni, var_ns, var_ni)
    if any(v < -1e-12 for v in vals):
        return None
    return dict(
        w_paired=max(w_p, 0.0),
        var_paired=max(u, 0.0),
        w_noise_s=max(w_ns, 0.0),
        var_noise_s=max(var_ns, 0.0),
        w_noise_i=max(w_ni, 0.0),
        var_noise_i=max(var_ni, 0.0),
    )


def gaussian_fit_step1(
    f: Histogram3D,
    det_s: DetectorConfig,
    det_i: DetectorConfig,
    settings: GaussianFitSettings = GaussianFitSettings(),
) -> Step1Result:
    """Fit the combined signal / combined-idler twin-beam model.

    The first and second detected intensity moments of the model are pinned
    to their (dark-corrected) empirical values, which leaves the two
    efficiencies and the split of the combined idler variance between pairing
    and noise free; those three numbers are chosen to minimize the
    declination of the collapsed 2D histogram.  ``det_s.eta`` / ``det_i.eta``
    only seed the search; pixel counts and dark means are taken as known
    hardware facts (the combined idler strip has twice the pixels and twice
    the dark mean of one strip).
    """
    mom3 = empirical_intensity_moments(f, 2)
    comb = combine_idler_moments(mom3)
    sig = _dark_corrected(
        {"mean": comb.moment((1, 0)), "var": central_moment(comb, (2, 0))},
        det_s.dark_mean,
        det_s.pixels,
    )
    idl = _dark_corrected(
        {"mean": comb.moment((0, 1)), "var": central_moment(comb, (0, 2))},
        2.0 * det_i.dark_mean,
        2 * det_i.pixels,
    )
    if sig["var"] <= 0 or idl["var"] <= 0:
        raise InsufficientStatisticsError(
            "empirical intensity variance is not positive; more trials needed"
        )
    emp = dict(
        mean_s=sig["mean"],
        var_s=sig["var"],
        mean_i=idl["mean"],
        var_i=idl["var"],
        cov_si=central_moment(comb, (1, 1)),
    )
    f2 = _collapse_idlers(f)
    f2_mass = f2.sum()
    c_s_len, c_i_len = f2.shape

    lo, hi = settings.eta_bounds
    eta_s0 = min(max(det_s.eta, lo), hi)
    eta_i0 = min(max(det_i.eta, lo), hi)

    # data-driven photon grid, fixed across the fit so detector matrices cache;
    # sized from the marginal quantiles of an initial moment-matched model so
    # that heavy thermal noise tails are covered
    split0 = _step1_split(eta_s0, eta_i0, 0.1 * max(emp["cov_si"], 0.0) / (eta_s0 * eta_i0), emp)
    if split0 is None:
        split0 = _step1_split(eta_s0, eta_i0, 0.0, emp)
    if split0 is None:
        raise InsufficientStatisticsError("empirical moments admit no physical model")
    n_s_max = _grid_from_model(
        _mode_field_from_intensity(split0["w_paired"], split0["var_paired"], settings.poisson_mode_cap),
        _mode_field_from_intensity(split0["w_noise_s"], split0["var_noise_s"], settings.poisson_mode_cap),
        settings.model_tail_budget,
        c_s_len,
        eta_s0,
    )
    n_i_max = _grid_from_model(
        _mode_field_from_intensity(split0["w_paired"], split0["var_paired"], settings.poisson_mode_cap),
        _mode_field_from_intensity(split0["w_noise_i"], split0["var_noise_i"], settings.poisson_mode_cap),
        settings.model_tail_budget,
        c_i_len,
        eta_i0,
    )

    cfg_i_comb = DetectorConfig(eta_i0, 2 * det_i.pixels, 2.0 * det_i.dark_mean)
    evals = {"count": 0}

    def objective(theta):
        eta_s = _quantize(theta[0], settings.eta_quantum, settings.eta_bounds)
        eta_i = _quantize(theta[1], settings.eta_quantum, settings.eta_bounds)
        split = _step1_split(eta_s, eta_i, theta[2], emp)
        if split is None:
            return 1e6 + abs(theta[2])
        evals["count"] += 1
        paired = _mode_field_from_intensity(
            split["w_paired"], split["var_paired"], settings.poisson_mode_cap
        )
        noise_s = _mode_field_from_intensity(
            split["w_noise_s"], split["var_noise_s"], settings.poisson_mode_cap
        )
        noise_i = _mode_field_from_intensity(
            split["w_noise_i"], split["var_noise_i"], settings.poisson_mode_cap
        )
        model = _combined_model_2d(paired, noise_s, noise_i, n_s_max, n_i_max)
        t_s = detection_matrix(
            DetectorConfig(eta_s, det_s.pixels, det_s.dark_mean),
            c_s_len - 1, n_s_max, method="occupancy",
        )
        t_i = detection_matrix(
            DetectorConfig(eta_i, cfg_i_comb.pixels, cfg_i_comb.dark_mean),
            c_i_len - 1, n_i_max, method="occupancy",
        )
        f2_th = t_s.values @ model @ t_i.values.T
        return float(np.sqrt(np.sum((f2_th * f2_mass - f2) ** 2)))

    # moment-based initialization: a coarse scan over the pairing share
    kappa0 = emp["cov_si"] / (eta_s0 * eta_i0)
    starts = []
    for share in (0.02, 0.05, 0.1, 0.2, 0.4):
        u0 = max(min(share * max(kappa0, 1e-9), emp["var_s"] / eta_s0**2 * 0.98), 1e-9)
        starts.append((objective((eta_s0, eta_i0, u0)), u0))
    starts.sort()
    u_init = starts[0][1]

    from scipy.optimize import minimize

    u_cap = max(emp["var_i"] / (lo * lo), 1.0)
    res = minimize(
        objective,
        x0=np.array([eta_s0, eta_i0, u_init]),
        method="Nelder-Mead",
        bounds=[(lo, hi), (lo, hi), (0.0, u_cap)],
        options={
            "maxfev": settings.max_fit_evals,
            "xatol": 2e-5,
            "fatol": 1e-12,
        },
    )
    eta_s = _quantize(res.x[0], settings.eta_quantum, settings.eta_bounds)
    eta_i = _quantize(res.x[1], settings.eta_quantum, settings.eta_bounds)
    split = _step1_split(eta_s, eta_i, res.x[2], emp)
    if split is None:
        raise FitError("combined-field fit converged to an infeasible point",
                       diagnostics={"x": list(res.x)})
    return Step1Result(
        eta_s=eta_s,
        eta_i=eta_i,
        declination=float(res.fun),
        diagnostics={
            "nfev": int(res.nfev),
            "model_evals": evals["count"],
            "converged": bool(res.success),
            "empirical": emp,
            "grid": (n_s_max, n_i_max),
        },
        **split,
    )


def _quantize(x, quantum, bounds):
    lo, hi = bounds
    return float(np.clip(np.round(x / quantum) * quantum, lo, hi))


def _grid_from_model(paired, noise, budget, c_len, eta):
    length = 256
    while True:
        marg = _model_marginal(paired, noise, length)
        csum = np.cumsum(marg)
        if csum[-1] >= 1.0 - budget or length > 100_000:
            break
        length *= 2
    quant = int(np.searchsorted(csum, 1.0 - budget))
    from_counts = (c_len + 4.0) / max(eta, 0.05)
    return int(np.ceil(max(quant * 1.15 + 8, from_counts)))


def gaussian_fit_step2(
    step1: Step1Result,
    moments: MomentSet,
    f: Histogram3D,
    det_s: DetectorConfig,
    det_i: DetectorConfig,
    settings: GaussianFitSettings = GaussianFitSettings(),
) -> GaussianFitResult:
    """Split the combined-field moments into per-beam components.

    All ten linear relations among the per-beam intensity moments leave one
    free number; the paired variance of beam 1 is scanned over its admissible
    interval, every remaining moment follows from the chain of relations, and
    the candidate whose forward histogram is closest to the data (declination)
    wins.  Candidates yielding any negative mode count or occupation are
    rejected.  ``moments`` must be the detected intensity moments of ``f`` up
    to order 2 per axis.
    """
    if moments.naxes != 3:
        raise ParameterError("need 3-axis detected moments")
    eta_s, eta_i = step1.eta_s, step1.eta_i
    d_i, n_pix_i = det_i.dark_mean, det_i.pixels
    emp = {}
    for j, axis in ((1, 1), (2, 2)):
        one = tuple(1 if a == axis else 0 for a in range(3))
        two = tuple(2 if a == axis else 0 for a in range(3))
        cov = tuple((1 if a == axis else 0) + (1 if a == 0 else 0) for a in range(3))
        corr = _dark_corrected(
            {"mean": moments.moment(one), "var": central_moment(moments, two)},
            d_i,
            n_pix_i,
        )
        emp[f"mean_i{j}"] = corr["mean"]
        emp[f"var_i{j}"] = corr["var"]
        emp[f"cov_s{j}"] = central_moment(moments, cov)
    if emp["var_i1"] <= 0 or emp["var_i2"] <= 0:
        raise InsufficientStatisticsError("negative empirical idler intensity variance")

    kappa1 = emp["cov_s1"] / (eta_s * eta_i)
    kappa2 = emp["cov_s2"] / (eta_s * eta_i)
    upper = min(emp["var_i1"] / eta_i**2, kappa1)
    if upper <= 0:
        raise InfeasibleIntervalError(
            f"admissible interval for the free paired variance is empty (upper bound {upper:.3e})"
        )

    w_ns, var_ns = step1.w_noise_s, step1.var_noise_s

    def chain(t):
        w_p1 = kappa1 - t
        w_p2 = step1.w_paired - w_p1
        var_p2 = kappa2 - w_p2
        moms = {
            "w_p1": w_p1,
            "var_p1": t,
            "w_p2": w_p2,
            "var_p2": var_p2,
            "w_ni1": emp["mean_i1"] / eta_i - w_p1,
            "var_ni1": emp["var_i1"] / eta_i**2 - t,
            "w_ni2": emp["mean_i2"] / eta_i - w_p2,
            "var_ni2": emp["var_i2"] / eta_i**2 - var_p2,
            "w_ns": w_ns,
            "var_ns": var_ns,
        }
        return moms

    def params_of(moms):
        def mf(w, var):
            field_ = _mode_field_from_intensity(w, var, settings.poisson_mode_cap)
            # zero-mass components become vanishing thermal fields
            return field_ if field_ is not None else ModeField(1.0, 0.0)

        if min(moms.values()) < -1e-10:
            return None
        if moms["w_p1"] > 0 and moms["var_p1"] <= 0:
            return None
        if moms["w_p2"] > 0 and moms["var_p2"] <= 0:
            return None
        return CompositeFieldParams(
            twb1=mf(moms["w_p1"], moms["var_p1"]),
            twb2=mf(moms["w_p2"], moms["var_p2"]),
            noise_s=mf(moms["w_ns"], moms["var_ns"]),
            noise_i1=mf(moms["w_ni1"], moms["var_ni1"]),
            noise_i2=mf(moms["w_ni2"], moms["var_ni2"]),
        )

    c_lens = f.values.shape
    f_mass = f.values.sum()
    probe = params_of(chain(min(0.5 * upper, upper * 0.99)))
    if probe is None:
        probe_cuts = None
    else:
        from .field_model import auto_cutoffs

        probe_cuts = tuple(
            int(np.ceil(1.25 * c + 8))
            for c in auto_cutoffs(probe, settings.model_tail_budget)
        )

    t_s = t_i = None

    def model_hist(params, cuts):
        nonlocal t_s, t_i
        p = compose_noisy_3d(params, cuts, tail_budget=1.0)
        if t_s is None or t_s.n_max + 1 < p.values.shape[0]:
            t_s = detection_matrix(
                DetectorConfig(eta_s, det_s.pixels, det_s.dark_mean),
                c_lens[0] - 1,
                p.values.shape[0] - 1,
                method="occupancy",
            )
        if t_i is None or t_i.n_max + 1 < max(p.values.shape[1], p.values.shape[2]):
            t_i = detection_matrix(
                DetectorConfig(eta_i, det_i.pixels, det_i.dark_mean),
                max(c_lens[1], c_lens[2]) - 1,
                max(p.values.shape[1], p.values.shape[2]) - 1,
                method="occupancy",
            )
        ts = t_s.values[: c_lens[0], : p.values.shape[0]]
        t1 = t_i.values[: c_lens[1], : p.values.shape[1]]
        t2 = t_i.values[: c_lens[2], : p.values.shape[2]]
        return np.einsum("as,bi,cj,sij->abc", ts, t1, t2, p.values, optimize=True)

    cache = {}

    def objective(t):
        key = round(float(t), 12)
        if key in cache:
            return cache[key]
        moms = chain(t)
        params = params_of(moms)
        if params is None or probe_cuts is None:
            val = 1e6
        else:
            f_th = model_hist(params, probe_cuts)
            val = float(np.sqrt(np.sum((f_th * f_mass - f.values) ** 2)))
        cache[key] = val
        return val

    eps = 1e-4 * upper
    grid = np.linspace(eps, upper - eps, settings.scan_points)
    vals = np.array([objective(t) for t in grid])
    order = np.argsort(vals)
    interior_minima = [
        k for k in range(1, len(grid) - 1) if vals[k] <= vals[k - 1] and vals[k] <= vals[k + 1]
    ]
    multimodal = len(interior_minima) > 1
    if multimodal:
        grid = np.linspace(eps, upper - eps, settings.grid_fallback)
        vals = np.array([objective(t) for t in grid])
        order = np.argsort(vals)
    k = int(order[0])
    lo_t = grid[max(k - 1, 0)]
    hi_t = grid[min(k + 1, len(grid) - 1)]
    t_best = _golden_section(objective, lo_t, hi_t, settings.golden_rel_tol * upper)

    moms = chain(t_best)
    params = params_of(moms)
    if params is None:
        raise FitError("free-parameter scan found no physical split",
                       diagnostics={"interval": (0.0, upper)})
    best_d = objective(t_best)
    residuals = _relation_residuals(moms, emp, step1, eta_s, eta_i)
    return GaussianFitResult(
        params=params,
        eta_s=eta_s,
        eta_i=eta_i,
        free_parameter=float(t_best),
        declination=float(best_d),
        moments=moms,
        residuals=residuals,
        diagnostics={
            "interval": (0.0, float(upper)),
            "multimodal_scan": bool(multimodal),
            "model_cutoffs": probe_cuts,
            "evaluations": len(cache),
        },
    )


def _golden_section(fn, lo, hi, tol):
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def _relation_residuals(moms, emp, step1, eta_s, eta_i):
    """The ten linear relations; seven are enforced by the chain, the last
    three follow when the combined moments are internally consistent."""
    return {
        "mean_i1": moms["w_p1"] + moms["w_ni1"] - emp["mean_i1"] / eta_i,
        "mean_i2": moms["w_p2"] + moms["w_ni2"] - emp["mean_i2"] / eta_i,
        "var_i1": moms["var_p1"] + moms["var_ni1"] - emp["var_i1"] / eta_i**2,
        "var_i2": moms["var_p2"] + moms["var_ni2"] - emp["var_i2"] / eta_i**2,
        "cov_s1": moms["w_p1"] + moms["var_p1"] - emp["cov_s1"] / (eta_s * eta_i),
        "cov_s2": moms["w_p2"] + moms["var_p2"] - emp["cov_s2"] / (eta_s * eta_i),
        "paired_mean_sum": moms["w_p1"] + moms["w_p2"] - step1.w_paired,
        "noise_mean_sum": moms["w_ni1"] + moms["w_ni2"] - step1.w_noise_i,
        "paired_var_sum": moms["var_p1"] + moms["var_p2"] - step1.var_paired,
        "noise_var_sum": moms["var_ni1"] + moms["var_ni2"] - step1.var_noise_i,
    }
