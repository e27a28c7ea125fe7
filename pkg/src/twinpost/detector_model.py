"""Photon-number-resolving detector model.

A detector is a strip of N independent binary pixels: an impinging photon is
registered with efficiency eta on a uniformly random pixel, every pixel can
additionally fire on a dark event with probability d/N per frame, and the
photocount c is the number of lit pixels.  The closed form for the response
matrix T(c, n) is an alternating binomial sum whose catastrophic cancellation
(condition numbers beyond 1e50 at realistic c) is handled by evaluating in
adaptive-precision arithmetic with per-entry significance certification.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from mpmath import mp, mpf, binomial

from .errors import (
    EmptyPostselectionError,
    ParameterError,
    PrecisionError,
    ShapeError,
)
from .field_model import PHOTOCOUNTS, PHOTONS, JointDist

WORKERS_ENV = "TWINPOST_WORKERS"
_SAMPLE_CHUNK = 65536


@dataclass(frozen=True)
class DetectorConfig:
    """Hardware parameters of one detection strip.

    eta: detection efficiency in (0, 1]; pixels: number of active
    (macro)pixels; dark_mean: mean dark counts per frame over the whole strip
    (per-pixel rate dark_mean / pixels).
    """

    eta: float
    pixels: int
    dark_mean: float = 0.0

    def __post_init__(self):
        # eta = 0 is admitted as the degenerate dark-count-only detector
        if not (0.0 <= self.eta <= 1.0):
            raise ParameterError(f"efficiency must be in [0, 1], got {self.eta}")
        if int(self.pixels) != self.pixels or self.pixels < 1:
            raise ParameterError(f"pixel count must be a positive integer, got {self.pixels}")
        object.__setattr__(self, "pixels", int(self.pixels))
        if self.dark_mean < 0:
            raise ParameterError(f"dark count mean must be non-negative, got {self.dark_mean}")
        if self.dark_per_pixel >= 1.0:
            raise ParameterError("per-pixel dark probability must be below 1")

    @property
    def dark_per_pixel(self) -> float:
        return self.dark_mean / self.pixels


@dataclass(frozen=True)
class DetectionMatrix:
    """Dense response matrix ``values[c, n]`` = P(c photocounts | n photons).

    ``config`` is None for the exact identity response (the "ideal detector"
    mode used for postselection studies, distinct from eta = 1 hardware which
    still suffers pixel collisions).
    """

    values: np.ndarray
    config: DetectorConfig | None = None

    @property
    def c_max(self) -> int:
        return self.values.shape[0] - 1

    @property
    def n_max(self) -> int:
        return self.values.shape[1] - 1

    @property
    def is_identity(self) -> bool:
        return self.config is None

    @classmethod
    def identity(cls, n_max: int) -> "DetectionMatrix":
        return cls(np.eye(n_max + 1), config=None)

    def column_sums(self) -> np.ndarray:
        return self.values.sum(axis=0)


def _required_dps(config: DetectorConfig, c: int, n_max: int) -> int:
    """Digits so the alternating sum's rounding noise stays below ~1e-20 of
    the largest term."""
    N = config.pixels
    if c == 0:
        return 30
    log_binom = (
        float(np.sum(np.log10(np.arange(N - c + 1, N + 1))))
        - float(np.sum(np.log10(np.arange(1, c + 1))))
    )
    return int(np.ceil(log_binom + 0.302 * c + 25))


def _detection_column(config: DetectorConfig, c: int, n_max: int, dps: int):
    """One row of the response (fixed photocount c, all n) plus the log10 of
    the largest term encountered per n, for significance certification."""
    N = config.pixels
    with mp.workdps(dps):
        eta = mpf(config.eta)
        dpp = mpf(config.dark_mean) / N
        one_m_d = 1 - dpp
        pref = binomial(N, c) * one_m_d**N * (-1) ** c
        coef = [binomial(c, l) * (-1) ** l / one_m_d**l for l in range(c + 1)]
        # (1-eta)^n (1 + l eta / (N (1-eta)))^n, written free of the eta=1 pole
        base = [1 - eta + mpf(l) * eta / N for l in range(c + 1)]
        pw = [mpf(1)] * (c + 1)
        out = np.empty(n_max + 1)
        logmax = np.empty(n_max + 1)
        for n in range(n_max + 1):
            acc = mpf(0)
            mx = mpf(0)
            for l in range(c + 1):
                term = coef[l] * pw[l]
                acc += term
                a = abs(term)
                if a > mx:
                    mx = a
                pw[l] *= base[l]
            out[n] = float(pref * acc)
            logmax[n] = float(mp.log10(abs(pref) * mx)) if mx > 0 else -400.0
    return out, logmax


@lru_cache(maxsize=128)
def _detection_values(eta: float, pixels: int, dark_mean: float, c_max: int, n_max: int):
    config = DetectorConfig(eta, pixels, dark_mean)
    vals = np.zeros((c_max + 1, n_max + 1))
    for c in range(c_max + 1):
        dps = _required_dps(config, c, n_max)
        col, logmax = _detection_column(config, c, n_max, dps)
        # certify: entries smaller than the rounding noise of the largest term
        # are recomputed with enough digits to resolve anything above 1e-280
        noise = 10.0 ** (logmax - dps + 2)
        bad = np.abs(col) < 1e3 * noise
        if np.any(bad):
            dps2 = int(np.max(logmax[bad])) + 310
            col2, logmax2 = _detection_column(config, c, n_max, dps2)
            noise2 = 10.0 ** (logmax2 - dps2 + 2)
            col[bad] = col2[bad]
            noise[bad] = noise2[bad]
        still = np.abs(col) < 1e3 * noise
        negligible = still & (np.abs(col) < 1e-270)
        unresolved = still & ~negligible
        col[negligible] = 0.0
        if np.any(unresolved):
            n_bad = int(np.argmax(unresolved))
            raise PrecisionError(
                f"detection matrix entry (c={c}, n={n_bad}) cannot be resolved "
                f"above its cancellation noise"
            )
        vals[c] = col
    if vals.min() < 0:
        # certified entries can still round to tiny negatives at the noise floor
        floor = vals.min()
        if floor < -1e-18:
            c, n = np.unravel_index(np.argmin(vals), vals.shape)
            raise PrecisionError(f"negative response probability at (c={c}, n={n}): {floor}")
        vals = np.clip(vals, 0.0, None)
    vals.flags.writeable = False
    return vals


@lru_cache(maxsize=128)
def _occupancy_values(eta: float, pixels: int, dark_mean: float, c_max: int, n_max: int):
    """Stable float rearrangement of the same response model: binomial
    thinning, then the distinct-pixels occupancy recurrence, then binomial
    dark counts on the remaining pixels.  All-positive arithmetic; agrees
    with the alternating-sum evaluation to within rounding."""
    from scipy.stats import binom as _binom

    N, D = pixels, dark_mean / pixels
    k = np.arange(n_max + 1)
    m_top = min(n_max, N)
    # occ[k, m]: k detected photons occupy m distinct pixels (m <= N)
    occ = np.zeros((n_max + 1, m_top + 1))
    occ[0, 0] = 1.0
    m = np.arange(m_top + 1, dtype=float)
    stay = m / N
    fresh = (N - m[:-1]) / N
    for kk in range(n_max):
        nxt = occ[kk] * stay
        nxt[1:] += occ[kk, :-1] * fresh
        occ[kk + 1] = nxt
    thin = _binom.pmf(k[:, None], k[None, :], eta)  # thin[k, n]
    pm = occ.T @ thin  # pm[m, n]
    cc = np.arange(c_max + 1)
    dark = _binom.pmf(cc[None, :] - m[:, None], N - m[:, None], D)  # dark[m, c]
    vals = dark.T @ pm
    np.clip(vals, 0.0, None, out=vals)
    vals.flags.writeable = False
    return vals


def detection_matrix(
    config: DetectorConfig, c_max: int, n_max: int, method: str = "alternating"
) -> DetectionMatrix:
    """Response matrix of one strip for photocounts up to ``c_max`` and photon
    numbers up to ``n_max``.

    The default evaluates the closed-form alternating binomial sum in
    adaptive extended precision; entries whose cancellation cannot be
    resolved even after escalation raise PrecisionError naming the entry.
    ``method="occupancy"`` selects the algebraically equivalent all-positive
    rearrangement (ordinary float arithmetic, much faster), used by the
    model-fitting loops.  Results are cached per configuration.
    """
    if c_max > config.pixels:
        raise ParameterError(f"photocount bound {c_max} exceeds pixel count {config.pixels}")
    if c_max < 0 or n_max < 0:
        raise ParameterError("matrix bounds must be non-negative")
    if method == "alternating":
        vals = _detection_values(
            config.eta, config.pixels, config.dark_mean, int(c_max), int(n_max)
        )
    elif method == "occupancy":
        vals = _occupancy_values(
            config.eta, config.pixels, config.dark_mean, int(c_max), int(n_max)
        )
    else:
        raise ParameterError(f"unknown detection-matrix method {method!r}")
    return DetectionMatrix(vals, config)


# ---------------------------------------------------------------------------
# forward model


@dataclass(frozen=True)
class Histogram3D:
    """Relative photocount frequencies f(c_s, c_i1, c_i2).

    ``trial_count`` is 0 for exact (contraction-derived) histograms and the
    number of measurement repetitions for sampled ones.
    """

    values: np.ndarray
    trial_count: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 3:
            raise ShapeError("photocount histograms are 3D")
        if vals.size and vals.min() < 0:
            raise ParameterError("frequencies must be non-negative")

    def total(self) -> float:
        return float(self.values.sum())


def _check_coverage(p: JointDist, mats: tuple[DetectionMatrix, ...]) -> None:
    for axis, mat in enumerate(mats):
        if mat.n_max + 1 < p.values.shape[axis]:
            raise ShapeError(
                f"detection matrix on axis {axis} covers n <= {mat.n_max} but the "
                f"distribution extends to {p.values.shape[axis] - 1}"
            )


def forward_histogram(
    p: JointDist,
    det_s: DetectionMatrix,
    det_i1: DetectionMatrix,
    det_i2: DetectionMatrix,
) -> Histogram3D:
    """Exact photocount histogram: the triple contraction of the photon
    distribution with the three detector responses."""
    if p.ndim != 3:
        raise ShapeError("forward model needs a 3D photon distribution")
    mats = (det_s, det_i1, det_i2)
    _check_coverage(p, mats)
    ts, t1, t2 = (m.values[:, : p.values.shape[i]] for i, m in enumerate(mats))
    vals = np.einsum("as,bi,cj,sij->abc", ts, t1, t2, p.values, optimize=True)
    return Histogram3D(vals, trial_count=0)


def postselect_on_counts(
    p: JointDist, det_s: DetectionMatrix, c_s: int
) -> tuple[JointDist, float]:
    """Idler-pair state conditioned on ``c_s`` signal photocounts.

    Returns the renormalized 2D distribution and the postselection success
    probability (the normalizer).
    """
    if p.ndim != 3:
        raise ShapeError("postselection acts on a 3D distribution")
    if not (0 <= c_s <= det_s.c_max):
        raise ParameterError(f"photocount {c_s} outside detector range 0..{det_s.c_max}")
    if det_s.n_max + 1 < p.values.shape[0]:
        raise ShapeError("signal detection matrix does not cover the distribution")
    w = det_s.values[c_s, : p.values.shape[0]]
    sliced = np.tensordot(w, p.values, axes=(0, 0))
    prob = float(sliced.sum())
    if prob <= 0.0:
        raise EmptyPostselectionError(f"no probability mass at c_s = {c_s}")
    return JointDist(sliced / prob, PHOTONS, tail_mass=p.tail_mass), prob


def conditional_histogram(f: Histogram3D, c_s: int) -> JointDist:
    """Normalized idler photocount histogram in the slice c_s."""
    if not (0 <= c_s < f.values.shape[0]):
        raise ParameterError(f"slice {c_s} outside histogram range")
    sl = f.values[c_s]
    mass = float(sl.sum())
    if mass <= 0.0:
        raise EmptyPostselectionError(f"histogram slice c_s = {c_s} has zero mass")
    return JointDist(sl / mass, PHOTOCOUNTS)


# ---------------------------------------------------------------------------
# Monte Carlo sampling


def _sample_counts(rng, photons: np.ndarray, config: DetectorConfig) -> np.ndarray:
    """Photocounts for one strip: binomial thinning, uniform pixel occupancy
    (sequential distinct-pixel process) and a dark-count union."""
    N = config.pixels
    detected = rng.binomial(photons, config.eta)
    occupied = np.zeros(photons.shape[0], dtype=np.int64)
    k_max = int(detected.max(initial=0))
    for step in range(k_max):
        active = detected > step
        if not np.any(active):
            break
        fresh = rng.random(int(active.sum())) < (N - occupied[active]) / N
        occupied[active] += fresh
    dark = rng.binomial(N - occupied, config.dark_per_pixel)
    return occupied + dark


def _sample_chunk(args):
    (flat_p, shape, seed_entropy, chunk_index, n_trials, configs, c_shape) = args
    rng = np.random.default_rng(np.random.SeedSequence(seed_entropy).spawn(chunk_index + 1)[-1])
    draws = rng.choice(flat_p.size, size=n_trials, p=flat_p)
    ns, n1, n2 = np.unravel_index(draws, shape)
    counts = np.zeros(c_shape, dtype=np.int64)
    cs = _sample_counts(rng, ns, configs[0])
    c1 = _sample_counts(rng, n1, configs[1])
    c2 = _sample_counts(rng, n2, configs[2])
    keep = (cs < c_shape[0]) & (c1 < c_shape[1]) & (c2 < c_shape[2])
    np.add.at(counts, (cs[keep], c1[keep], c2[keep]), 1)
    return counts


def sample_histogram(
    p: JointDist,
    det_s: DetectorConfig,
    det_i1: DetectorConfig,
    det_i2: DetectorConfig,
    trials: int,
    seed: int,
    c_max: tuple[int, int, int] | None = None,
) -> Histogram3D:
    """Monte Carlo photocount histogram of ``trials`` frames.

    Photon triples are drawn from ``p``, each beam is detected by per-photon
    Bernoulli thinning onto uniformly chosen pixels, and independent per-pixel
    dark events are merged in (a pixel lit by both counts once).  Sampling is
    chunked with per-chunk child generators derived from ``seed``, so the
    result is reproducible bit for bit and independent of how chunks are
    distributed over workers (TWINPOST_WORKERS processes, default 1).
    """
    if trials < 1:
        raise ParameterError("trials must be at least 1")
    if p.ndim != 3:
        raise ShapeError("sampler needs a 3D photon distribution")
    configs = (det_s, det_i1, det_i2)
    if c_max is None:
        means = [
            cfg.eta * (p.values.shape[i] - 1) + cfg.dark_mean for i, cfg in enumerate(configs)
        ]
        c_max = tuple(
            min(cfg.pixels, int(np.ceil(m + 10.0 * np.sqrt(m + 1.0) + 10)))
            for m, cfg in zip(means, configs)
        )
    c_shape = tuple(c + 1 for c in c_max)
    flat = np.clip(p.values.ravel(), 0.0, None)
    flat = flat / flat.sum()
    chunks = [
        (flat, p.values.shape, seed, i, min(_SAMPLE_CHUNK, trials - i * _SAMPLE_CHUNK), configs, c_shape)
        for i in range((trials + _SAMPLE_CHUNK - 1) // _SAMPLE_CHUNK)
    ]
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_sample_chunk, chunks))
    else:
        parts = [_sample_chunk(c) for c in chunks]
    counts = np.sum(parts, axis=0)
    return Histogram3D(counts / float(trials), trial_count=int(trials))
