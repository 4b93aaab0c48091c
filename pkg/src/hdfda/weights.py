"""Weighting schemes, index-set sizes, count summaries, and homogeneity.

The OBS scheme gives every discrete observation the same weight; the SUBJ
scheme gives every subject the same total weight.  Generic (caller-supplied)
weights are validated against the normalization contracts, never silently
renormalized.  Subjects contributing nothing to a component or pair get
weight zero and are excluded from the normalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .model import DesignKind, ValidationError

Pair = tuple[int, int]

OBS = "obs"
SUBJ = "subj"


@dataclass(frozen=True)
class GenericWeights:
    """Caller-supplied weights: mean weights per (i, j), covariance weights
    per (i, pair) keyed by (j, k) with j <= k."""

    mean_weights: np.ndarray  # (n, p)
    cov_weights: dict[Pair, np.ndarray]  # pair -> (n,)


def _scheme_name(scheme) -> str:
    if isinstance(scheme, GenericWeights):
        return "generic"
    if scheme in (OBS, SUBJ):
        return scheme
    raise ValidationError(f"unknown weighting scheme {scheme!r}")


@dataclass(frozen=True)
class MeanWeights:
    """Per-(subject, component) weights with sum_i w_ij * N_ij = 1."""

    w: np.ndarray  # (n, p)


@dataclass(frozen=True)
class CovWeights:
    """Per-(subject, pair) weights with sum_i v_ijk * |index set| = 1."""

    pairs: tuple[Pair, ...]
    v: np.ndarray  # (n, len(pairs))
    sizes: np.ndarray  # (n, len(pairs)) index-set sizes

    def column(self, pair: Pair) -> np.ndarray:
        return self.v[:, self.pairs.index(pair)]


def index_set_size(design: DesignKind, j: int, k: int, n_j: int, n_k: int) -> int:
    """Number of raw-covariance index pairs (l, m) for one subject.

    FR with j != k uses the full product set; FR with j == k and SR (any
    pair) exclude the diagonal l == m.
    """
    if n_j < 0 or n_k < 0:
        raise ValidationError("counts must be nonnegative")
    if design is DesignKind.SR or j == k:
        return n_j * (n_j - 1) if n_j > 1 else 0
    return n_j * n_k


def index_pairs(design: DesignKind, j: int, k: int, n_j: int, n_k: int) -> Iterator[Pair]:
    """Iterate the index pairs (l, m) in row-major order."""
    exclude = design is DesignKind.SR or j == k
    for ell in range(n_j):
        for m in range(n_k):
            if exclude and ell == m:
                continue
            yield ell, m


def pair_sizes(design: DesignKind, counts: np.ndarray, j: int, k: int) -> np.ndarray:
    """Vector of per-subject index-set sizes for pair (j, k)."""
    nj = counts[:, j].astype(np.int64)
    if design is DesignKind.SR or j == k:
        return nj * np.maximum(nj - 1, 0)
    return nj * counts[:, k].astype(np.int64)


def mean_weights(scheme, counts: np.ndarray) -> MeanWeights:
    """Construct mean-estimation weights for the given scheme.

    OBS: w_ij = 1 / (sum_i N_ij); SUBJ: w_ij = 1 / (n_j+ * N_ij) where n_j+
    counts subjects with N_ij > 0.  Generic weights are validated to satisfy
    sum_i w_ij N_ij = 1 within 1e-9 relative per component.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n, p = counts.shape
    totals = counts.sum(axis=0)
    if np.any(totals == 0):
        j = int(np.argmax(totals == 0))
        raise ValidationError(f"component {j + 1} has no observations; cannot build mean weights")

    if isinstance(scheme, GenericWeights):
        w = np.asarray(scheme.mean_weights, dtype=float)
        if w.shape != (n, p):
            raise ValidationError(f"generic mean weights must have shape ({n}, {p})")
        if np.any(w[counts > 0] <= 0):
            raise ValidationError("generic mean weights must be strictly positive")
        norms = (w * counts).sum(axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            j = int(np.argmax(np.abs(norms - 1.0)))
            raise ValidationError(
                f"generic mean weights violate normalization for component {j + 1}: sum = {norms[j]!r}"
            )
        return MeanWeights(w)

    if scheme == OBS:
        w = np.where(counts > 0, 1.0 / totals, 0.0)
    elif scheme == SUBJ:
        active = (counts > 0).sum(axis=0)
        with np.errstate(divide="ignore"):
            w = np.where(counts > 0, 1.0 / (active * np.maximum(counts, 1)), 0.0)
    else:
        raise ValidationError(f"unknown weighting scheme {scheme!r}")
    return MeanWeights(w)


def cov_weights(scheme, design: DesignKind, counts: np.ndarray, pairs: Sequence[Pair]) -> CovWeights:
    """Construct covariance-estimation weights for the requested pairs.

    OBS: v_ijk = 1 / (sum_i |I_ijk|); SUBJ: v_ijk = 1 / (n_jk+ * |I_ijk|)
    over subjects with nonempty index sets.  Errors out if a requested pair
    has no usable index pairs at all.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = counts.shape[0]
    pairs = tuple((min(j, k), max(j, k)) for j, k in pairs)
    sizes = np.stack([pair_sizes(design, counts, j, k) for j, k in pairs], axis=1)
    totals = sizes.sum(axis=0)
    if np.any(totals == 0):
        j, k = pairs[int(np.argmax(totals == 0))]
        raise ValidationError(f"pair ({j + 1}, {k + 1}) has an empty index set for every subject")

    if isinstance(scheme, GenericWeights):
        cols = []
        for idx, pair in enumerate(pairs):
            if pair not in scheme.cov_weights:
                raise ValidationError(f"generic covariance weights missing pair {pair}")
            v = np.asarray(scheme.cov_weights[pair], dtype=float)
            if v.shape != (n,):
                raise ValidationError(f"generic covariance weights for {pair} must have shape ({n},)")
            if np.any(v[sizes[:, idx] > 0] <= 0):
                raise ValidationError(f"generic covariance weights for {pair} must be strictly positive")
            norm = float(v @ sizes[:, idx])
            if abs(norm - 1.0) > 1e-9:
                raise ValidationError(
                    f"generic covariance weights violate normalization for pair {pair}: sum = {norm!r}"
                )
            cols.append(v)
        return CovWeights(pairs, np.stack(cols, axis=1), sizes)

    if scheme == OBS:
        v = np.where(sizes > 0, 1.0 / totals, 0.0)
    elif scheme == SUBJ:
        active = (sizes > 0).sum(axis=0)
        v = np.where(sizes > 0, 1.0 / (active * np.maximum(sizes, 1)), 0.0)
    else:
        raise ValidationError(f"unknown weighting scheme {scheme!r}")
    return CovWeights(pairs, v, sizes)


@dataclass
class CountSummaries:
    """Count statistics entering the rate and homogeneity formulas.

    Per component j: the average, average-square, maximum, and harmonic-mean
    observation counts across subjects (harmonic is NaN when any count is
    zero).  Per pair (j, k): averages of N_ij N_ik, N_ij N_ik^2, and
    N_ij^2 N_ik^2, the maximum product, and the harmonic mean of the
    product.  Scheme-dependent maxima of w_ij N_ij and v_ijk |I_ijk| are
    included when a scheme is given.
    """

    n: int
    p: int
    avg: np.ndarray  # (p,)
    avg_sq: np.ndarray  # (p,)
    peak: np.ndarray  # (p,)
    harmonic: np.ndarray  # (p,) NaN where undefined
    pairs: tuple[Pair, ...]
    pair_avg: np.ndarray  # (npairs,)
    pair_avg_12: np.ndarray  # mean of N_ij * N_ik^2
    pair_avg_22: np.ndarray  # mean of N_ij^2 * N_ik^2
    pair_peak: np.ndarray
    pair_harmonic: np.ndarray  # NaN where undefined
    max_weight_share: np.ndarray | None = None  # (p,) max_i w_ij N_ij
    pair_max_weight_share: np.ndarray | None = None  # (npairs,) max_i v |I|


def all_pairs(p: int) -> list[Pair]:
    return [(j, k) for j in range(p) for k in range(j, p)]


def diagonal_pairs(p: int) -> list[Pair]:
    return [(j, j) for j in range(p)]


def count_summaries(
    counts: np.ndarray,
    scheme=None,
    design: DesignKind = DesignKind.FR,
    pairs: Sequence[Pair] | None = None,
) -> CountSummaries:
    """Compute the per-component and per-pair count statistics.

    When a scheme is supplied the weight-share maxima are filled in as well.
    Pair statistics default to all pairs j <= k.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n, p = counts.shape
    cf = counts.astype(float)
    avg = cf.mean(axis=0)
    avg_sq = (cf**2).mean(axis=0)
    peak = cf.max(axis=0)
    with np.errstate(divide="ignore"):
        inv = np.where(counts > 0, 1.0 / cf, np.inf)
    inv_sum = inv.sum(axis=0)
    harmonic = np.where(np.isfinite(inv_sum), n / inv_sum, np.nan)

    pair_list = tuple(pairs) if pairs is not None else tuple(all_pairs(p))
    jj = np.fromiter((j for j, _ in pair_list), dtype=np.int64, count=len(pair_list))
    kk = np.fromiter((k for _, k in pair_list), dtype=np.int64, count=len(pair_list))
    cj = cf[:, jj]
    ck = cf[:, kk]
    prod = cj * ck
    pair_avg = prod.mean(axis=0)
    pair_avg_12 = (cj * ck**2).mean(axis=0)
    pair_avg_22 = (cj**2 * ck**2).mean(axis=0)
    pair_peak = prod.max(axis=0)
    with np.errstate(divide="ignore"):
        pinv = np.where(prod > 0, 1.0 / prod, np.inf)
    pinv_sum = pinv.sum(axis=0)
    pair_harmonic = np.where(np.isfinite(pinv_sum), n / pinv_sum, np.nan)

    summaries = CountSummaries(
        n, p, avg, avg_sq, peak, harmonic,
        pair_list, pair_avg, pair_avg_12, pair_avg_22, pair_peak, pair_harmonic,
    )
    if scheme is not None:
        mw = mean_weights(scheme, counts)
        summaries.max_weight_share = (mw.w * cf).max(axis=0)
        cw = cov_weights(scheme, design, counts, pair_list)
        summaries.pair_max_weight_share = (cw.v * cw.sizes).max(axis=0)
    return summaries


@dataclass
class HomogeneityReport:
    """Ratios that control whether the OBS scheme is safe to use.

    mean_ratio_j = max(avg_sq_j / avg_j^2, peak_j / avg_j); cov_ratio_jk =
    max(avg_j * pair_avg_12 / pair_avg^2, pair_avg_22 / pair_avg^2,
    pair_peak / pair_avg).  All ratios are >= 1 for positive counts; large
    values flag heterogeneity under which OBS weighting degrades.
    """

    mean_ratio: np.ndarray  # (p,)
    pairs: tuple[Pair, ...]
    cov_ratio: np.ndarray  # (npairs,)
    max_mean_ratio: float
    max_cov_ratio: float


def homogeneity_report(summaries: CountSummaries) -> HomogeneityReport:
    """Evaluate the homogeneity ratios from precomputed count summaries."""
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_ratio = np.maximum(
            summaries.avg_sq / summaries.avg**2,
            summaries.peak / summaries.avg,
        )
        jj = np.fromiter((j for j, _ in summaries.pairs), dtype=np.int64, count=len(summaries.pairs))
        cov_ratio = np.maximum.reduce(
            [
                summaries.avg[jj] * summaries.pair_avg_12 / summaries.pair_avg**2,
                summaries.pair_avg_22 / summaries.pair_avg**2,
                summaries.pair_peak / summaries.pair_avg,
            ]
        )
    return HomogeneityReport(
        mean_ratio,
        summaries.pairs,
        cov_ratio,
        float(np.max(mean_ratio)),
        float(np.max(cov_ratio)),
    )


def cov_stochastic_variance(
    design: DesignKind,
    counts: np.ndarray,
    v: np.ndarray,
    j: int,
    k: int,
    b_j: float,
    b_k: float,
) -> float:
    """Variance proxy of the covariance smoother's stochastic term.

    For j != k under FR this is sum_i v_i^2 N_ij N_ik (1/b_j + N_ij - 1)
    (1/b_k + N_ik - 1); for the diagonal-excluded case it is
    sum_i v_i^2 N(N-1) {1/b^2 + 2 (N-2)/b + (N-2)(N-3)} with b = b_j.
    Under SR the diagonal-excluded form applies to every pair.
    """
    nj = counts[:, j].astype(float)
    if design is DesignKind.SR or j == k:
        nm = np.maximum
        return float(
            np.sum(
                v**2
                * nj
                * nm(nj - 1, 0)
                * (1.0 / (b_j * b_j) + 2.0 * nm(nj - 2, 0) / b_j + nm(nj - 2, 0) * nm(nj - 3, 0))
            )
        )
    nk = counts[:, k].astype(float)
    return float(np.sum(v**2 * nj * nk * (1.0 / b_j + nj - 1) * (1.0 / b_k + nk - 1)))


def cov_subject_mass_sq(design: DesignKind, counts: np.ndarray, v: np.ndarray, j: int, k: int) -> float:
    """Squared subject-mass scale for the covariance sup-norm bound.

    max(sum v^2 N_ij^2 N_ik, sum v^2 N_ij N_ik^2) off the diagonal, and
    sum v^2 N (N-1)^2 in the diagonal-excluded case.
    """
    nj = counts[:, j].astype(float)
    if design is DesignKind.SR or j == k:
        return float(np.sum(v**2 * nj * np.maximum(nj - 1, 0) ** 2))
    nk = counts[:, k].astype(float)
    return float(max(np.sum(v**2 * nj**2 * nk), np.sum(v**2 * nj * nk**2)))
