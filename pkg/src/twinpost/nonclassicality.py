"""Nonclassicality statistics, criterion families and depth quantification.

Criteria come in three flavours: inequalities in normally ordered intensity
moments (Cauchy-Schwarz and matrix families plus two named special cases),
their probability-based counterparts obtained through the photodetection
mapping ``<W^K> <- K! p(K) / p(0,0)``, and a hybrid form mixing conditional
probabilities with intensity moments.  Every criterion is non-negative for
classical (mixture-of-coherent) fields, so a negative value certifies
nonclassicality.

The nonclassicality depth of a criterion is the amount of effective thermal
noise, parametrized by the operator ordering s, that the field tolerates
before the criterion loses its negativity: tau = (1 - s_th) / 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from math import comb, lgamma

import numpy as np

from .errors import (
    DegenerateDistributionError,
    IncompleteMomentsError,
    MappingUndefinedError,
    ParameterError,
)
from .field_model import (
    JointDist,
    MomentSet,
    intensity_moments,
    moments_photon_to_intensity,
    photon_moments,
    thermal_params_from_moments,
)

__all__ = [
    "OrderingContext",
    "CriterionReport",
    "NcdReport",
    "MomentCriterion",
    "ProbabilityCriterion",
    "HybridCriterion",
    "CW",
    "MW",
    "covariance_delta",
    "noise_reduction_plus",
    "fano",
    "ccs_criterion",
    "matrix_criterion",
    "probability_criteria",
    "local_criterion_maps",
    "hybrid_L",
    "ordering_transform_moments",
    "ncd",
    "ncd_local_map",
]


@dataclass(frozen=True)
class OrderingContext:
    """Per-beam effective mode counts entering the ordering transforms.

    The default of one effective mode per beam matches the plain-Laguerre
    intensity kernel used by the quasi-distribution route, so moment-based
    and distribution-based depths are mutually consistent.  Effective mode
    counts of a fitted composite field are available via
    :meth:`from_marginal_moments`.
    """

    modes_i1: float = 1.0
    modes_i2: float = 1.0

    def __post_init__(self):
        if not (self.modes_i1 > 0 and self.modes_i2 > 0):
            raise ParameterError("mode counts must be positive")

    @classmethod
    def from_marginal_moments(cls, mom: MomentSet) -> "OrderingContext":
        """Mode counts from the intensity mean/variance of each marginal."""
        m1, m2 = mom.moment((1, 0)), mom.moment((0, 1))
        v1 = mom.moment((2, 0)) - m1 * m1
        v2 = mom.moment((0, 2)) - m2 * m2
        return cls(
            thermal_params_from_moments(m1, v1).modes,
            thermal_params_from_moments(m2, v2).modes,
        )


@dataclass(frozen=True)
class CriterionReport:
    name: str
    indices: tuple | None
    value: float
    nonclassical: bool
    boundary: float = 0.0
    uncertainty: float | None = None


@dataclass(frozen=True)
class NcdReport:
    name: str
    indices: tuple | None
    s_threshold: float
    tau: float
    saturated: bool
    multiple_crossings: bool = False


# ---------------------------------------------------------------------------
# low-order statistics


def _marginal_stats(dist: JointDist):
    vals = dist.values / dist.values.sum()
    n1 = np.arange(vals.shape[0], dtype=float)
    n2 = np.arange(vals.shape[1], dtype=float)
    p1, p2 = vals.sum(axis=1), vals.sum(axis=0)
    m1, m2 = float(n1 @ p1), float(n2 @ p2)
    v1 = float(((n1 - m1) ** 2) @ p1)
    v2 = float(((n2 - m2) ** 2) @ p2)
    cov = float((n1 - m1) @ vals @ (n2 - m2))
    return m1, m2, v1, v2, cov


def covariance_delta(dist: JointDist) -> float:
    """Pearson correlation of the two beams' number fluctuations; negative
    values signal anticorrelation."""
    if dist.ndim != 2:
        raise ParameterError("covariance statistic needs a 2D distribution")
    m1, m2, v1, v2, cov = _marginal_stats(dist)
    if v1 <= 0 or v2 <= 0:
        raise DegenerateDistributionError("a marginal has zero variance")
    return cov / math.sqrt(v1 * v2)


def noise_reduction_plus(dist: JointDist) -> float:
    """Variance of the beam-sum number over its mean; below 1 is
    nonclassical, 1 for independent Poissonian beams."""
    if dist.ndim != 2:
        raise ParameterError("noise-reduction statistic needs a 2D distribution")
    m1, m2, v1, v2, cov = _marginal_stats(dist)
    if m1 + m2 <= 0:
        raise DegenerateDistributionError("beam-sum mean vanishes")
    return (v1 + v2 + 2.0 * cov) / (m1 + m2)


def fano(dist) -> float:
    """Variance-to-mean ratio of a 1D counting distribution (< 1 is
    sub-Poissonian)."""
    vals = dist.values if isinstance(dist, JointDist) else np.asarray(dist, dtype=float)
    if vals.ndim != 1:
        raise ParameterError("Fano factor is defined for 1D marginals")
    vals = vals / vals.sum()
    n = np.arange(vals.size, dtype=float)
    mean = float(n @ vals)
    if mean <= 0:
        raise DegenerateDistributionError("zero mean")
    var = float(((n - mean) ** 2) @ vals)
    return var / mean


# ---------------------------------------------------------------------------
# criterion families in intensity moments


def _as_index(k) -> tuple[int, int]:
    k = tuple(int(x) for x in k)
    if len(k) != 2 or any(x < 0 for x in k):
        raise ParameterError(f"criterion indices must be non-negative pairs, got {k}")
    return k


def _moments_of(target, order: int) -> MomentSet:
    if isinstance(target, MomentSet):
        if target.ordering != "intensity":
            raise ParameterError("criteria are defined on intensity moments")
        return target
    return intensity_moments(target, order)


def _ccs_value(mom: MomentSet, K, L) -> float:
    two_k_minus_l = tuple(2 * k - l for k, l in zip(K, L))
    return mom.moment(L) * mom.moment(two_k_minus_l) - mom.moment(K) ** 2


def ccs_criterion(moments, K, L) -> CriterionReport:
    """Cauchy-Schwarz family: <W^L><W^(2K-L)> - <W^K>^2, negative only for
    nonclassical fields.  Requires 2K >= L >= 0 componentwise."""
    K, L = _as_index(K), _as_index(L)
    if any(l > 2 * k for k, l in zip(K, L)):
        raise ParameterError(f"need 2K >= L componentwise, got K={K}, L={L}")
    order = max(max(l, 2 * k - l, k) for k, l in zip(K, L))
    mom = _moments_of(moments, order)
    value = _ccs_value(mom, K, L)
    return CriterionReport("ccs", (K, L), float(value), bool(value < 0))


def _matrix_value(mom: MomentSet, J, K, L) -> float:
    def g(a, b):
        return mom.moment(tuple(x + y for x, y in zip(a, b)))

    return (
        g(J, J) * (g(K, K) * g(L, L) - g(K, L) ** 2)
        - g(J, K) * (g(J, K) * g(L, L) - g(K, L) * g(J, L))
        + g(J, L) * (g(J, K) * g(K, L) - g(K, K) * g(J, L))
    )


def matrix_criterion(moments, J, K, L) -> CriterionReport:
    """Quadratic-form family: determinant of the 3x3 moment matrix built from
    the index triple (J, K, L); negative only for nonclassical fields."""
    J, K, L = _as_index(J), _as_index(K), _as_index(L)
    order = max(
        max(a + b for a, b in zip(x, y))
        for x in (J, K, L)
        for y in (J, K, L)
    )
    mom = _moments_of(moments, order)
    value = _matrix_value(mom, J, K, L)
    return CriterionReport("matrix", (J, K, L), float(value), bool(value < 0))


# ---------------------------------------------------------------------------
# probability-based counterparts


def _prob_moment_table(dist: JointDist, order1: int, order2: int) -> np.ndarray:
    """Substituted moment grid g[K] = K! p(K) / p(0,0), zero outside the
    support."""
    vals = dist.values
    p00 = float(vals[0, 0])
    if p00 <= 0:
        raise MappingUndefinedError("probability mapping needs p(0,0) > 0")
    g = np.zeros((order1 + 1, order2 + 1))
    for k1 in range(order1 + 1):
        for k2 in range(order2 + 1):
            if k1 < vals.shape[0] and k2 < vals.shape[1]:
                g[k1, k2] = (
                    math.factorial(k1) * math.factorial(k2) * vals[k1, k2] / p00
                )
    return g


def probability_criteria(dist: JointDist, family: str, indices) -> CriterionReport:
    """Criterion families with the probability substitution
    ``<W^K> <- K! p(K) / p(0,0)``.

    ``family`` is "ccs" (indices = (K, L)) or "matrix" (indices = (J, K, L)).
    Exact zeros for products of Poissonians, since the substitution is then
    the identity on coherent-field moments.
    """
    if dist.ndim != 2:
        raise ParameterError("probability criteria need a 2D distribution")
    if family == "ccs":
        K, L = (_as_index(i) for i in indices)
        if any(l > 2 * k for k, l in zip(K, L)):
            raise ParameterError(f"need 2K >= L componentwise, got K={K}, L={L}")
        hi = [max(l, 2 * k - l, k) for k, l in zip(K, L)]
        g = _prob_moment_table(dist, hi[0], hi[1])
        two_k_minus_l = tuple(2 * k - l for k, l in zip(K, L))
        value = g[L] * g[two_k_minus_l] - g[K] ** 2
        return CriterionReport("ccs_p", (K, L), float(value), bool(value < 0))
    if family == "matrix":
        J, K, L = (_as_index(i) for i in indices)
        hi = [
            max(x[ax] + y[ax] for x in (J, K, L) for y in (J, K, L))
            for ax in range(2)
        ]
        g = _prob_moment_table(dist, hi[0], hi[1])

        def gg(a, b):
            return g[tuple(x + y for x, y in zip(a, b))]

        value = (
            gg(J, J) * (gg(K, K) * gg(L, L) - gg(K, L) ** 2)
            - gg(J, K) * (gg(J, K) * gg(L, L) - gg(K, L) * gg(J, L))
            + gg(J, L) * (gg(J, K) * gg(K, L) - gg(K, K) * gg(J, L))
        )
        return CriterionReport("matrix_p", (J, K, L), float(value), bool(value < 0))
    raise ParameterError(f"unknown criterion family {family!r}")


def _neighbor_indices(K: tuple[int, int]) -> list[tuple[int, int]]:
    out = []
    for d1 in (-1, 0, 1):
        for d2 in (-1, 0, 1):
            cand = (K[0] + d1, K[1] + d2)
            if cand[0] >= 0 and cand[1] >= 0:
                out.append(cand)
    return out


def _combo_sets(dist: JointDist, family: str, floor: float):
    """Per-K candidate index combinations whose used probabilities average
    above the floor."""
    vals = dist.values / dist.values.sum()

    def p_of(idx):
        if idx[0] < vals.shape[0] and idx[1] < vals.shape[1]:
            return float(vals[idx])
        return 0.0

    combos: dict[tuple[int, int], list] = {}
    for k1 in range(vals.shape[0]):
        for k2 in range(vals.shape[1]):
            K = (k1, k2)
            cands = []
            if family == "ccs":
                for L in _neighbor_indices(K):
                    if any(l > 2 * k for k, l in zip(K, L)):
                        continue
                    used = {L, tuple(2 * k - l for k, l in zip(K, L)), K, (0, 0)}
                    if np.mean([p_of(u) for u in used]) > floor:
                        cands.append((K, L))
            else:
                for J in _neighbor_indices(K):
                    for L in _neighbor_indices(K):
                        used = {
                            tuple(a + b for a, b in zip(x, y))
                            for x in (J, K, L)
                            for y in (J, K, L)
                        }
                        used.add((0, 0))
                        if np.mean([p_of(u) for u in used]) > floor:
                            cands.append((J, K, L))
            if cands:
                combos[K] = cands
    return combos


def local_criterion_maps(
    dist: JointDist, family: str, floor: float = 0.01
) -> dict[tuple[int, int], CriterionReport]:
    """Location-resolved criteria: for each support point K, the minimum of
    the probability-based family over the unit neighborhood of K, keeping
    only combinations whose mean used probability exceeds ``floor``."""
    if family not in ("ccs", "matrix"):
        raise ParameterError(f"unknown criterion family {family!r}")
    combos = _combo_sets(dist, family, floor)
    out = {}
    for K, cands in combos.items():
        best = None
        best_idx = None
        for idx in cands:
            rep = probability_criteria(dist, family, idx)
            if best is None or rep.value < best:
                best, best_idx = rep.value, idx
        out[K] = CriterionReport(
            f"{family}_p_local", best_idx, float(best), bool(best < 0)
        )
    return out


# ---------------------------------------------------------------------------
# hybrid criterion


def hybrid_L(dist: JointDist, conditioning_axis: int = 0) -> dict[int, CriterionReport]:
    """Hybrid criterion per conditioning value: with the other beam's
    conditional distribution, <W^3><W> - <W^2>^2 < 0 flags nonclassicality.

    Conditioning slices with no probability mass are reported with a NaN
    value and ``nonclassical=False``.
    """
    if dist.ndim != 2:
        raise ParameterError("hybrid criterion needs a 2D distribution")
    vals = dist.values if conditioning_axis == 0 else dist.values.T
    out = {}
    for n_fix in range(vals.shape[0]):
        slice_ = vals[n_fix]
        mass = slice_.sum()
        if mass <= 0:
            out[n_fix] = CriterionReport("hybrid_L", (n_fix,), float("nan"), False)
            continue
        cond = JointDist(slice_ / mass, dist.axis_kind, signed=dist.signed)
        mom = moments_photon_to_intensity(photon_moments(cond, 3))
        value = mom.moment((3,)) * mom.moment((1,)) - mom.moment((2,)) ** 2
        out[n_fix] = CriterionReport("hybrid_L", (n_fix,), float(value), bool(value < 0))
    return out


# ---------------------------------------------------------------------------
# ordering transforms and nonclassicality depth


def _ordering_kernel(kmax: int, modes: float, nu: float) -> np.ndarray:
    """Moment transform of adding independent Gaussian (thermal) noise of
    ``nu`` mean photons per mode over ``modes`` modes to one beam:
    A[k, l] = (k!/l!) C(k + modes - 1, k - l) nu^(k-l)."""
    A = np.zeros((kmax + 1, kmax + 1))
    for k in range(kmax + 1):
        for l in range(k + 1):
            logc = (
                lgamma(k + 1.0)
                - lgamma(l + 1.0)
                + lgamma(modes + k)
                - lgamma(modes + l)
                - lgamma(k - l + 1.0)
            )
            A[k, l] = math.exp(logc) * nu ** (k - l) if (nu > 0 or k == l) else 0.0
    return A


def ordering_transform_moments(
    m: MomentSet, ctx: OrderingContext, s_target: float
) -> MomentSet:
    """Intensity moments under a less-ordered convention.

    Decreasing the ordering parameter from ``m.s`` to ``s_target`` adds
    independent thermal noise of (m.s - s_target)/2 mean photons per mode to
    each beam; the per-beam kernels are exact for fields with the context's
    mode counts and reduce to the identity at s_target = m.s.
    """
    if m.ordering != "intensity":
        raise ParameterError("ordering transforms act on intensity moments")
    if not (-1.0 <= s_target <= 1.0):
        raise ParameterError(f"ordering parameter must be in [-1, 1], got {s_target}")
    if s_target > m.s + 1e-12:
        raise ParameterError("cannot transform toward more normal ordering")
    nu = (m.s - s_target) / 2.0
    if m.naxes == 1:
        A1 = _ordering_kernel(m.max_order, ctx.modes_i1, nu)
        return MomentSet(A1 @ m.table, "intensity", s=float(s_target))
    if m.naxes != 2:
        raise ParameterError("ordering transforms support 1- and 2-beam moments")
    A1 = _ordering_kernel(m.table.shape[0] - 1, ctx.modes_i1, nu)
    A2 = _ordering_kernel(m.table.shape[1] - 1, ctx.modes_i2, nu)
    return MomentSet(A1 @ m.table @ A2.T, "intensity", s=float(s_target))


@dataclass(frozen=True)
class MomentCriterion:
    """A moment-route criterion evaluated under ordering transforms."""

    family: str
    K: tuple
    L: tuple | None = None
    J: tuple | None = None
    name: str | None = None

    def label(self) -> str:
        return self.name or f"{self.family}{self.indices()}"

    def indices(self) -> tuple:
        return tuple(i for i in (self.J, self.K, self.L) if i is not None)

    def order(self) -> int:
        if self.family == "ccs":
            return max(max(l, 2 * k - l, k) for k, l in zip(self.K, self.L))
        return max(
            x[ax] + y[ax]
            for x in (self.J, self.K, self.L)
            for y in (self.J, self.K, self.L)
            for ax in range(len(self.K))
        )

    def evaluate(self, mom: MomentSet) -> float:
        if self.family == "ccs":
            return _ccs_value(mom, self.K, self.L)
        if self.family == "matrix":
            return _matrix_value(mom, self.J, self.K, self.L)
        raise ParameterError(f"unknown criterion family {self.family!r}")


#: the two named workhorse criteria
CW = MomentCriterion("ccs", K=(1, 1), L=(0, 0), name="C_W")
MW = MomentCriterion("matrix", J=(0, 0), K=(1, 0), L=(0, 1), name="M_W")


@dataclass(frozen=True)
class ProbabilityCriterion:
    family: str
    indices: tuple
    name: str | None = None

    def label(self) -> str:
        return self.name or f"{self.family}_p{self.indices}"

    def evaluate(self, dist: JointDist) -> float:
        return probability_criteria(dist, self.family, self.indices).value


@dataclass(frozen=True)
class HybridCriterion:
    slice_value: int
    conditioning_axis: int = 0
    name: str | None = None

    def label(self) -> str:
        return self.name or f"L_Wp(n={self.slice_value})"

    def evaluate(self, dist: JointDist) -> float:
        return hybrid_L(dist, self.conditioning_axis)[self.slice_value].value


def _bisect_ncd(value_at, name, indices, s_tol, coarse):
    v1 = value_at(1.0)
    if not (v1 < 0):
        return NcdReport(name, indices, 1.0, 0.0, False)
    v_low = value_at(-1.0)
    if v_low < 0:
        return NcdReport(name, indices, -1.0, 1.0, True)
    grid = np.linspace(-1.0, 1.0, coarse)
    vals = np.array([value_at(s) if -1.0 < s < 1.0 else (v_low if s <= -1.0 else v1) for s in grid])
    sign_neg = vals < 0
    brackets = [
        (grid[i], grid[i + 1])
        for i in range(len(grid) - 1)
        if (not sign_neg[i]) and sign_neg[i + 1]
    ]
    multiple = len(brackets) > 1
    lo, hi = brackets[0] if brackets else (grid[-2], grid[-1])
    while hi - lo > s_tol:
        mid = 0.5 * (lo + hi)
        if value_at(mid) < 0:
            hi = mid
        else:
            lo = mid
    s_th = 0.5 * (lo + hi)
    return NcdReport(name, indices, float(s_th), float((1.0 - s_th) / 2.0), False, multiple)


def ncd(
    target,
    criterion,
    ctx: OrderingContext | None = None,
    s_tol: float = 1e-4,
    coarse: int = 17,
    pmf_kwargs: dict | None = None,
) -> NcdReport:
    """Nonclassicality depth of one criterion on one state.

    Moment criteria are swept through orderings with the per-beam kernel
    transform; probability and hybrid criteria are evaluated on the s-ordered
    quasi-probability distribution (exact at s = 1 by construction).  The
    threshold is located by bisection after a coarse scan; if several sign
    changes occur, the outermost one (closest to s = -1) is reported with the
    ``multiple_crossings`` flag set.
    """
    ctx = ctx or OrderingContext()
    if isinstance(criterion, MomentCriterion):
        mom = _moments_of(target, criterion.order())

        def value_at(s):
            return criterion.evaluate(ordering_transform_moments(mom, ctx, s))

        return _bisect_ncd(value_at, criterion.label(), criterion.indices(), s_tol, coarse)
    if isinstance(criterion, (ProbabilityCriterion, HybridCriterion)):
        if not isinstance(target, JointDist):
            raise ParameterError("probability-route depths need a distribution")
        from .quasidist import s_ordered_pmf

        kw = pmf_kwargs or {}
        cache: dict[float, JointDist] = {}

        def value_at(s):
            if s not in cache:
                cache[s] = s_ordered_pmf(target, s, **kw)
            return criterion.evaluate(cache[s])

        idx = criterion.indices if isinstance(criterion, ProbabilityCriterion) else (criterion.slice_value,)
        return _bisect_ncd(value_at, criterion.label(), idx, s_tol, coarse)
    raise ParameterError(f"unsupported criterion object {criterion!r}")


def ncd_local_map(
    dist: JointDist,
    family: str,
    floor: float = 0.01,
    s_tol: float = 1e-4,
    coarse: int = 17,
    pmf_kwargs: dict | None = None,
) -> dict[tuple[int, int], NcdReport]:
    """Depth map of the location-resolved probability criteria.

    The candidate index combinations are fixed by the probabilities of the
    input distribution, then each point's minimum-over-neighbors criterion is
    swept through orderings via the s-ordered quasi-probabilities (shared
    across map points).
    """
    from .quasidist import s_ordered_pmf

    combos = _combo_sets(dist, family, floor)
    kw = pmf_kwargs or {}
    cache: dict[float, JointDist] = {}

    def dist_at(s):
        if s not in cache:
            cache[s] = s_ordered_pmf(dist, s, **kw)
        return cache[s]

    out = {}
    for K, cands in combos.items():

        def value_at(s, _cands=cands):
            d = dist_at(s)
            return min(probability_criteria(d, family, idx).value for idx in _cands)

        out[K] = _bisect_ncd(value_at, f"{family}_p_local", K, s_tol, coarse)
    return out
