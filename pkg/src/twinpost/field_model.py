"""Multimode Gaussian field model for a pair of twin beams with thermal noise.

The generative model is built entirely at the photon-number level: each twin
beam contributes perfectly photon-number-correlated signal/idler pairs drawn
from a multimode thermal (Mandel-Rice) law, the two signal arms are detected
jointly, and three independent multimode thermal noise fields are convolved
onto the signal and the two idler axes.  All distributions are dense truncated
tensors with an explicit tail-mass accounting.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from .errors import (
    IncompleteMomentsError,
    ParameterError,
    TruncationError,
    TruncationWarning,
)

PHOTONS = "photons"
PHOTOCOUNTS = "photocounts"

#: default per-construction budget for probability mass lost to truncation
DEFAULT_TAIL_BUDGET = 1e-10


@dataclass(frozen=True)
class ModeField:
    """A multimode thermal field component.

    Parameters
    ----------
    modes : float
        Number of modes. Positive, not necessarily an integer (fits of faint
        noise fields routinely return fractional mode counts such as 0.011).
    mean_per_mode : float
        Mean photons (or photon pairs) per mode. Non-negative.
    """

    modes: float
    mean_per_mode: float

    def __post_init__(self):
        if not (self.modes > 0) or not np.isfinite(self.modes):
            raise ParameterError(f"mode count must be positive, got {self.modes}")
        if not (self.mean_per_mode >= 0) or not np.isfinite(self.mean_per_mode):
            raise ParameterError(
                f"mean photons per mode must be non-negative, got {self.mean_per_mode}"
            )

    @property
    def mean_photons(self) -> float:
        return self.modes * self.mean_per_mode

    @property
    def intensity_variance(self) -> float:
        """Variance of the integrated intensity, modes * mean_per_mode**2."""
        return self.modes * self.mean_per_mode**2


@dataclass(frozen=True)
class CompositeFieldParams:
    """Two twin-beam components plus three independent noise components."""

    twb1: ModeField
    twb2: ModeField
    noise_s: ModeField
    noise_i1: ModeField
    noise_i2: ModeField

    def signal_mean(self) -> float:
        return self.twb1.mean_photons + self.twb2.mean_photons + self.noise_s.mean_photons

    def idler_means(self) -> tuple[float, float]:
        return (
            self.twb1.mean_photons + self.noise_i1.mean_photons,
            self.twb2.mean_photons + self.noise_i2.mean_photons,
        )


@dataclass(frozen=True)
class JointDist:
    """Truncated photon-number (or photocount) distribution on a dense grid.

    ``values[n1, ..., nd]`` is the probability of the joint outcome; axes are
    ordered (signal, idler 1, idler 2) for 3D and (idler 1, idler 2) for 2D
    objects.  ``tail_mass`` estimates the probability lost to truncation, so
    ``values.sum()`` is within ``tail_mass`` of one for freshly built
    distributions.  ``signed=True`` marks quasi-probability content that is
    allowed to go negative (ordering-transformed distributions).
    """

    values: np.ndarray
    axis_kind: str = PHOTONS
    tail_mass: float = 0.0
    signed: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if self.axis_kind not in (PHOTONS, PHOTOCOUNTS):
            raise ParameterError(f"unknown axis kind {self.axis_kind!r}")
        if vals.ndim not in (1, 2, 3):
            raise ParameterError("distributions must have 1, 2 or 3 axes")
        if not self.signed and vals.size and float(vals.min()) < -1e-12:
            raise ParameterError("probabilities must be non-negative")

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def cutoffs(self) -> tuple[int, ...]:
        return tuple(s - 1 for s in self.values.shape)

    def total(self) -> float:
        return float(self.values.sum())

    def marginal(self, axis: int) -> "JointDist":
        keep = tuple(a for a in range(self.ndim) if a != axis)
        vals = self.values.sum(axis=keep) if keep else self.values
        return JointDist(vals, self.axis_kind, self.tail_mass, self.signed)

    def normalized(self) -> "JointDist":
        tot = self.total()
        if tot <= 0:
            raise ParameterError("cannot normalize a zero-mass distribution")
        return replace(self, values=self.values / tot)


# The single JointDist class covers every arity used by the toolkit; these
# aliases keep call-site annotations readable.
JointDist3D = JointDist
JointDist2D = JointDist


@dataclass(frozen=True)
class MomentSet:
    """Dense grid of mixed moments up to a fixed order per axis.

    ``table[k1, ..., kd]`` holds the raw moment of multi-index (k1, ..., kd).
    ``ordering`` is ``"photon"`` for plain photon-number moments and
    ``"intensity"`` for (normally ordered / s-ordered) intensity moments; the
    ordering parameter ``s`` is only meaningful for the latter, with s=1 the
    normally ordered case.
    """

    table: np.ndarray
    ordering: str
    s: float = 1.0

    def __post_init__(self):
        tab = np.asarray(self.table, dtype=float)
        object.__setattr__(self, "table", tab)
        if self.ordering not in ("photon", "intensity"):
            raise ParameterError(f"unknown moment ordering {self.ordering!r}")
        zero = tab[(0,) * tab.ndim]
        if abs(zero - 1.0) > 1e-6:
            raise ParameterError(f"zeroth moment must be 1, got {zero}")

    @property
    def naxes(self) -> int:
        return self.table.ndim

    @property
    def max_order(self) -> int:
        return self.table.shape[0] - 1

    def moment(self, key) -> float:
        key = tuple(int(k) for k in np.atleast_1d(key))
        if len(key) != self.naxes:
            raise IncompleteMomentsError(f"moment index {key} has wrong arity")
        if any(k < 0 for k in key) or any(
            k >= s for k, s in zip(key, self.table.shape)
        ):
            raise IncompleteMomentsError(
                f"moment {key} not present (orders up to {self.cut_str()})"
            )
        return float(self.table[key])

    def __getitem__(self, key) -> float:
        return self.moment(key)

    def cut_str(self) -> str:
        return "x".join(str(s - 1) for s in self.table.shape)


# ---------------------------------------------------------------------------
# elementary distributions


def mandel_rice_pmf(n, field: ModeField):
    """Multimode thermal photon-number law for ``n`` photons in the field.

    Evaluated in log space so that large ``n``, large mode counts and
    fractional mode counts are all safe.  Accepts scalars or arrays.
    """
    n_arr = np.asarray(n)
    if np.any(n_arr < 0) or not np.issubdtype(n_arr.dtype, np.number):
        raise ParameterError("photon number must be a non-negative integer")
    m, b = field.modes, field.mean_per_mode
    if b == 0.0:
        out = np.where(n_arr == 0, 1.0, 0.0)
        return float(out) if np.isscalar(n) else out
    nf = n_arr.astype(float)
    logp = (
        gammaln(nf + m)
        - gammaln(nf + 1.0)
        - gammaln(m)
        + nf * np.log(b)
        - (nf + m) * np.log1p(b)
    )
    out = np.exp(logp)
    return float(out) if np.isscalar(n) else out


def twb_joint_pmf(n_s, n_i, field: ModeField) -> float:
    """Joint signal/idler law of one ideal twin beam: perfectly correlated
    photon numbers with a Mandel-Rice marginal."""
    if n_s < 0 or n_i < 0:
        raise ParameterError("photon numbers must be non-negative")
    if n_s != n_i:
        return 0.0
    return float(mandel_rice_pmf(n_s, field))


def _mr_vector(field: ModeField, length: int) -> np.ndarray:
    return mandel_rice_pmf(np.arange(length), field)


def _quantile_cutoff(pmf: np.ndarray, budget: float) -> int:
    """Smallest n whose cumulative mass reaches 1 - budget."""
    csum = np.cumsum(pmf)
    idx = int(np.searchsorted(csum, 1.0 - budget))
    return min(idx, len(pmf) - 1)


def _component_cutoff(f: ModeField, budget: float, hard_cap: int = 200_000) -> int:
    if f.mean_per_mode == 0:
        return 0
    length = 256
    while length <= hard_cap:
        pmf = _mr_vector(f, length)
        if pmf.sum() >= 1.0 - budget:
            return _quantile_cutoff(pmf, budget)
        length *= 2
    raise TruncationError(
        f"cannot reach tail budget {budget} below {hard_cap} photons for {f}"
    )


def auto_cutoffs(
    params: CompositeFieldParams, budget: float = DEFAULT_TAIL_BUDGET
) -> tuple[int, int, int]:
    """Per-axis truncation bounds from the exact 1D marginals.

    Each axis cutoff is the smallest photon number whose cumulative marginal
    mass reaches ``1 - budget/6`` so that the assembled 3D tensor keeps its
    total truncation loss below ``budget``.
    """
    per_axis = budget / 6.0
    parts = [params.twb1, params.twb2, params.noise_s, params.noise_i1, params.noise_i2]
    length = 2 + max(_component_cutoff(f, per_axis / 4.0) for f in parts)
    v_p1, v_p2, v_ns, v_n1, v_n2 = (_mr_vector(f, length) for f in parts)
    marg_i1 = np.convolve(v_p1, v_n1)[:length]
    marg_i2 = np.convolve(v_p2, v_n2)[:length]
    marg_s = np.convolve(np.convolve(v_p1, v_p2)[:length], v_ns)[:length]
    return (
        _quantile_cutoff(marg_s, per_axis),
        _quantile_cutoff(marg_i1, per_axis),
        _quantile_cutoff(marg_i2, per_axis),
    )


def paired_3d(
    twb1: ModeField,
    twb2: ModeField,
    cutoffs: tuple[int, int, int],
    tail_budget: float = DEFAULT_TAIL_BUDGET,
) -> JointDist:
    """Joint distribution of two ideal twin beams sharing one signal arm.

    The support satisfies ``n_s = n_i1 + n_i2`` exactly: the signal axis
    carries the convolution of the two per-beam pair numbers.
    """
    cut_s, cut_1, cut_2 = (int(c) for c in cutoffs)
    vals = np.zeros((cut_s + 1, cut_1 + 1, cut_2 + 1))
    a1 = _mr_vector(twb1, cut_1 + 1)
    a2 = _mr_vector(twb2, cut_2 + 1)
    outer = np.outer(a1, a2)
    i1 = np.arange(cut_1 + 1)[:, None]
    i2 = np.arange(cut_2 + 1)[None, :]
    tot = i1 + i2
    mask = tot <= cut_s
    vals[tot[mask], np.broadcast_to(i1, tot.shape)[mask], np.broadcast_to(i2, tot.shape)[mask]] = outer[mask]
    dist = JointDist(vals, PHOTONS, tail_mass=max(0.0, 1.0 - float(vals.sum())))
    _check_tail(dist, tail_budget, (twb1, twb2))
    return dist


def _noise_toeplitz(noise: ModeField, size: int) -> np.ndarray:
    """Lower-triangular convolution matrix T[n, l] = pmf(n - l)."""
    pmf = _mr_vector(noise, size)
    out = np.zeros((size, size))
    for j in range(size):
        out[j:, j] = pmf[: size - j]
    return out


def compose_noisy_3d(
    params: CompositeFieldParams,
    cutoffs: tuple[int, int, int] | None = None,
    tail_budget: float = DEFAULT_TAIL_BUDGET,
) -> JointDist:
    """Full three-beam distribution: paired part convolved with independent
    thermal noise along each axis."""
    if cutoffs is None:
        cutoffs = auto_cutoffs(params, tail_budget)
    paired = paired_3d(params.twb1, params.twb2, cutoffs, tail_budget=1.0)
    vals = paired.values
    for axis, noise in ((0, params.noise_s), (1, params.noise_i1), (2, params.noise_i2)):
        if noise.mean_per_mode == 0:
            continue
        conv = _noise_toeplitz(noise, vals.shape[axis])
        vals = np.tensordot(conv, np.moveaxis(vals, axis, 0), axes=(1, 0))
        vals = np.moveaxis(vals, 0, axis)
    dist = JointDist(vals, PHOTONS, tail_mass=max(0.0, 1.0 - float(vals.sum())))
    _check_tail(dist, tail_budget, params)
    return dist


def _check_tail(dist: JointDist, budget: float, source) -> None:
    if dist.tail_mass > budget:
        suggestion = tuple(int(np.ceil(1.5 * (c + 8))) for c in dist.cutoffs)
        raise TruncationError(
            f"truncated mass {dist.tail_mass:.3e} exceeds budget {budget:.1e} "
            f"for {source}; retry with cutoffs >= {suggestion}",
            suggested_cutoffs=suggestion,
        )


def truncate_mass(dist: JointDist, keep: float = 1.0 - 1e-6) -> JointDist:
    """Trim trailing grid slices while keeping at least ``keep`` of the mass.

    Axes are shortened greedily from the high-photon end; useful before
    handing heavy-tailed conditionals to moment or quasi-distribution code.
    """
    vals = dist.values
    total = vals.sum()
    allowance = max(0.0, total - keep * total) if total > 0 else 0.0
    lost = 0.0
    shape = list(vals.shape)
    for axis in range(vals.ndim):
        other = tuple(a for a in range(vals.ndim) if a != axis)
        marg = vals.sum(axis=other) if other else vals
        tail = np.cumsum(marg[::-1])[::-1]
        hi = shape[axis]
        while hi > 1 and lost + tail[hi - 1] <= allowance * (1.0 + 1e-12):
            lost += marg[hi - 1]
            hi -= 1
        if hi < shape[axis]:
            vals = np.take(vals, np.arange(hi), axis=axis)
            shape[axis] = hi
    return JointDist(
        np.ascontiguousarray(vals),
        dist.axis_kind,
        tail_mass=dist.tail_mass + float(lost),
        signed=dist.signed,
    )


# ---------------------------------------------------------------------------
# ideal postselected reference state


def postselection_weights(n_s: int, twb1: ModeField, twb2: ModeField) -> np.ndarray:
    """Weights induced by conditioning two independent twin beams on a total
    of ``n_s`` pairs: w_k = p1(k) p2(n_s - k) / sum."""
    k = np.arange(n_s + 1)
    w = mandel_rice_pmf(k, twb1) * mandel_rice_pmf(n_s - k, twb2)
    tot = w.sum()
    if tot <= 0:
        raise ParameterError(f"conditioning on {n_s} total pairs has zero probability")
    return w / tot


def ideal_postselected_state(n_s: int, weights=None) -> JointDist:
    """Two-beam state left after an ideal postselection on ``n_s`` signal
    photons: an incoherent mixture of (k, n_s - k) photon-number pairs.

    ``weights`` gives the mixture coefficients (length ``n_s + 1``, summing to
    one).  The default conditions two identical single-mode twin beams, which
    yields the uniform mixture.
    """
    n_s = int(n_s)
    if n_s < 0:
        raise ParameterError("postselection photon number must be non-negative")
    if weights is None:
        weights = np.full(n_s + 1, 1.0 / (n_s + 1))
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n_s + 1,):
        raise ParameterError(
            f"need {n_s + 1} weights for postselection on {n_s} photons, "
            f"got shape {weights.shape}"
        )
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ParameterError("weights must be non-negative and sum to 1")
    vals = np.zeros((n_s + 1, n_s + 1))
    idx = np.arange(n_s + 1)
    vals[idx, n_s - idx] = weights
    return JointDist(vals, PHOTONS, tail_mass=0.0)


# ---------------------------------------------------------------------------
# moments and transforms


@lru_cache(maxsize=None)
def stirling_first(kmax: int) -> np.ndarray:
    """Signed Stirling numbers of the first kind, s[n, k] for n, k <= kmax."""
    s = np.zeros((kmax + 1, kmax + 1))
    s[0, 0] = 1.0
    for n in range(kmax):
        for k in range(kmax + 1):
            s[n + 1, k] = (s[n, k - 1] if k > 0 else 0.0) - n * s[n, k]
    s.flags.writeable = False
    return s


@lru_cache(maxsize=None)
def stirling_second(kmax: int) -> np.ndarray:
    """Stirling numbers of the second kind, S[n, k] for n, k <= kmax."""
    s = np.zeros((kmax + 1, kmax + 1))
    s[0, 0] = 1.0
    for n in range(kmax):
        for k in range(kmax + 1):
            s[n + 1, k] = (s[n, k - 1] if k > 0 else 0.0) + k * s[n, k]
    s.flags.writeable = False
    return s


def photon_moments(dist: JointDist, max_order: int, warn_tol: float = 1e-6) -> MomentSet:
    """All mixed photon-number (or photocount) moments with every per-axis
    order up to ``max_order``, by direct summation over the grid."""
    if max_order < 0:
        raise ParameterError("max_order must be non-negative")
    vals = dist.values / dist.values.sum() if not dist.signed else dist.values
    bias = dist.tail_mass * max(dist.cutoffs) ** max_order
    if bias > warn_tol:
        warnings.warn(
            f"truncated tail mass {dist.tail_mass:.2e} may bias order-"
            f"{max_order} moments by up to {bias:.2e}",
            TruncationWarning,
            stacklevel=2,
        )
    powers = []
    for axis in range(vals.ndim):
        n = np.arange(vals.shape[axis], dtype=float)
        powers.append(np.vstack([n**k for k in range(max_order + 1)]))
    letters = "nml"[: vals.ndim]
    outs = "abc"[: vals.ndim]
    spec = ",".join(f"{o}{l}" for o, l in zip(outs, letters)) + f",{letters}->{outs}"
    table = np.einsum(spec, *powers, vals, optimize=True)
    ordering = "photon"
    return MomentSet(table, ordering)


def _axiswise(table: np.ndarray, mat: np.ndarray) -> np.ndarray:
    out = table
    for axis in range(table.ndim):
        out = np.tensordot(mat, np.moveaxis(out, axis, 0), axes=(1, 0))
        out = np.moveaxis(out, 0, axis)
    return out


def moments_photon_to_intensity(m: MomentSet) -> MomentSet:
    """Normally ordered (intensity) moments from photon-number moments via
    signed Stirling numbers of the first kind, applied per axis."""
    if m.ordering != "photon":
        raise ParameterError("input must carry photon-number moments")
    s1 = stirling_first(m.max_order)
    return MomentSet(_axiswise(m.table, s1), "intensity", s=1.0)


def moments_intensity_to_photon(m: MomentSet) -> MomentSet:
    """Inverse transform using Stirling numbers of the second kind."""
    if m.ordering != "intensity":
        raise ParameterError("input must carry intensity moments")
    s2 = stirling_second(m.max_order)
    return MomentSet(_axiswise(m.table, s2), "photon")


def intensity_moments(dist: JointDist, max_order: int) -> MomentSet:
    """Convenience: photon moments of ``dist`` Stirling-transformed to
    normally ordered intensity moments."""
    return moments_photon_to_intensity(photon_moments(dist, max_order))


def thermal_params_from_moments(mean: float, var: float) -> ModeField:
    """Mode count and per-mode occupation of a multimode thermal field from
    its first two intensity moments."""
    if not (mean > 0) or not (var > 0):
        raise ParameterError(
            f"intensity mean and variance must be positive, got {mean}, {var}"
        )
    return ModeField(modes=mean * mean / var, mean_per_mode=var / mean)
