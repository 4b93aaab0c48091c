"""Local linear estimation of the mean functions.

Each mean curve solves a kernel-weighted least-squares line fit at every
grid point; the intercept is the estimate.  With S_r and R_r the weighted
kernel moment sums of order r (R carrying the responses), the closed form
is mu_hat = (R0*S2 - R1*S1) / (S0*S2 - S1^2).  Degenerate windows fall back
to the local-constant value R0/S0, and empty windows are flagged missing.

The per-point entry points accumulate subject-by-subject in ascending time
order (the reference summation order); the batch driver pools observations
per component and vectorizes the window sums, which reassociates floating
point addition but agrees with the reference to roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernels import KernelSpec, kernel_eval, kernel_values
from .model import (
    DesignKind,
    EstimateCurve,
    Grid,
    ObservationSet,
    PointStatus,
    ValidationError,
    component_grids,
)
from .weights import OBS, SUBJ, MeanWeights, mean_weights

# Relative determinant floor: below this the 2x2 system counts as singular.
DET_RTOL = 1e-10


@dataclass(frozen=True)
class MeanFitInternals:
    """Weighted kernel sums at one evaluation point: S_r for r in {0,1,2}
    and R_r for r in {0,1} (R carries the observed responses)."""

    s0: float
    s1: float
    s2: float
    r0: float
    r1: float

    def determinant(self) -> float:
        return self.s0 * self.s2 - self.s1 * self.s1


@dataclass(frozen=True)
class MeanBandwidths:
    """Per-component mean bandwidths (a single shared value under SR)."""

    b: np.ndarray  # (p,)

    @classmethod
    def resolve(cls, bandwidths, obs: ObservationSet) -> "MeanBandwidths":
        if isinstance(bandwidths, MeanBandwidths):
            b = bandwidths.b
        else:
            b = np.broadcast_to(np.asarray(bandwidths, dtype=float), (obs.p,)).copy()
        if b.shape != (obs.p,):
            raise ValidationError(f"expected {obs.p} mean bandwidths, got shape {b.shape}")
        if np.any(b <= 0):
            raise ValidationError("mean bandwidths must be positive")
        lengths = obs.domains[:, 1] - obs.domains[:, 0]
        if np.any(b > lengths):
            j = int(np.argmax(b > lengths))
            raise ValidationError(
                f"mean bandwidth {b[j]} exceeds domain length {lengths[j]} for component {j + 1}"
            )
        return cls(b)


def mean_sums_at(
    obs: ObservationSet,
    j: int,
    t: float,
    weights: MeanWeights,
    b: float,
    kernel: KernelSpec,
) -> MeanFitInternals:
    """Accumulate the local linear sums for component j at time t.

    Only observations with |T - t| <= b contribute; they are found by binary
    search on each subject's sorted time list and summed subject-by-subject
    in ascending time order.
    """
    if not b > 0:
        raise ValidationError("bandwidth must be positive")
    s0 = s1 = s2 = r0 = r1 = 0.0
    for i in range(obs.n):
        times = obs.times_of(i, j)
        if times.size == 0:
            continue
        w = weights.w[i, j]
        lo = int(np.searchsorted(times, t - b, side="left"))
        hi = int(np.searchsorted(times, t + b, side="right"))
        values = obs.values_of(i, j)
        for a in range(lo, hi):
            u = (times[a] - t) / b
            kb = kernel_eval(kernel, u) / b
            wk = w * kb
            s0 += wk
            s1 += wk * u
            s2 += wk * u * u
            r0 += wk * values[a]
            r1 += wk * u * values[a]
    return MeanFitInternals(s0, s1, s2, r0, r1)


def _solve_point(s0, s1, s2, r0, r1) -> tuple[float, PointStatus]:
    det = s0 * s2 - s1 * s1
    if det > DET_RTOL * max(s0 * s2, 1.0):
        return (r0 * s2 - r1 * s1) / det, PointStatus.EXACT
    if s0 > 0.0:
        return r0 / s0, PointStatus.FALLBACK
    return float("nan"), PointStatus.MISSING


def mean_at(
    obs: ObservationSet,
    j: int,
    t: float,
    weights: MeanWeights,
    b: float,
    kernel: KernelSpec,
) -> tuple[float, PointStatus]:
    """Evaluate the local linear mean estimate at one point.

    Returns the closed-form intercept with EXACT status when the window is
    nondegenerate, the local-constant value with FALLBACK status when only
    the zeroth moment survives, and NaN with MISSING status otherwise.
    """
    sums = mean_sums_at(obs, j, t, weights, b, kernel)
    return _solve_point(sums.s0, sums.s1, sums.s2, sums.r0, sums.r1)


def _pooled_component(obs: ObservationSet, j: int, w_col: np.ndarray):
    """Pool component j across subjects, sorted by time.

    Returns (times, values, per-observation weights); the sort is stable so
    ties keep subject order.
    """
    idx = obs.component_block_index(j)
    t = obs.times[idx]
    order = np.argsort(t, kind="stable")
    idx = idx[order]
    wobs = np.repeat(w_col, obs.counts[:, j])[order]
    return t[order], obs.values[idx], wobs


def _fit_curve_pooled(
    times: np.ndarray,
    values: np.ndarray,
    wobs: np.ndarray,
    grid: Grid,
    b: float,
    kernel: KernelSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Windowed local linear fit over a grid for one pooled component."""
    g = grid.count
    out = np.full(g, np.nan)
    status = np.full(g, PointStatus.MISSING, dtype=np.uint8)
    lo = np.searchsorted(times, grid.points - b, side="left")
    hi = np.searchsorted(times, grid.points + b, side="right")
    for a in range(g):
        sl = slice(lo[a], hi[a])
        if lo[a] == hi[a]:
            continue
        u = (times[sl] - grid.points[a]) / b
        wk = wobs[sl] * (kernel_values(kernel, u) / b)
        s0 = float(wk.sum())
        wku = wk * u
        s1 = float(wku.sum())
        s2 = float(wku @ u)
        r0 = float(wk @ values[sl])
        r1 = float(wku @ values[sl])
        out[a], status[a] = _solve_point(s0, s1, s2, r0, r1)
    return out, status


def _estimate_means_sr(
    obs: ObservationSet,
    w_subject: np.ndarray,
    grid: Grid,
    b: float,
    kernel: KernelSpec,
) -> list[EstimateCurve]:
    """SR fast path: one shared time pool, response matrix over components.

    All components of a subject share times and (for OBS/SUBJ) the same
    subject-level weight, so the S-moments are computed once and only the
    response sums vary with the component.
    """
    n, p = obs.n, obs.p
    ncounts = obs.counts[:, 0]
    total = int(ncounts.sum())
    times = np.empty(total)
    y = np.empty((p, total))
    wobs = np.repeat(w_subject, ncounts)
    pos = 0
    for i in range(n):
        ni = int(ncounts[i])
        if ni == 0:
            continue
        o = obs.offsets[i, 0]
        times[pos : pos + ni] = obs.times[o : o + ni]
        y[:, pos : pos + ni] = obs.values[o : o + ni * p].reshape(p, ni)
        pos += ni
    order = np.argsort(times, kind="stable")
    times = times[order]
    y = y[:, order]
    wobs = wobs[order]

    g = grid.count
    values = np.full((p, g), np.nan)
    status = np.full((p, g), PointStatus.MISSING, dtype=np.uint8)
    lo = np.searchsorted(times, grid.points - b, side="left")
    hi = np.searchsorted(times, grid.points + b, side="right")
    for a in range(g):
        sl = slice(lo[a], hi[a])
        if lo[a] == hi[a]:
            continue
        u = (times[sl] - grid.points[a]) / b
        wk = wobs[sl] * (kernel_values(kernel, u) / b)
        wku = wk * u
        s0 = float(wk.sum())
        s1 = float(wku.sum())
        s2 = float(wku @ u)
        r0 = y[:, sl] @ wk
        r1 = y[:, sl] @ wku
        det = s0 * s2 - s1 * s1
        if det > DET_RTOL * max(s0 * s2, 1.0):
            values[:, a] = (r0 * s2 - r1 * s1) / det
            status[:, a] = PointStatus.EXACT
        elif s0 > 0.0:
            values[:, a] = r0 / s0
            status[:, a] = PointStatus.FALLBACK
    return [
        EstimateCurve(j, grid, values[j], status[j], b)
        for j in range(p)
    ]


def estimate_means(
    obs: ObservationSet,
    scheme,
    bandwidths,
    grids,
    kernel: KernelSpec | None = None,
) -> list[EstimateCurve]:
    """Fit all p mean curves.

    Parameters
    ----------
    obs : ObservationSet
        Validated observations.
    scheme : 'obs' | 'subj' | GenericWeights
    bandwidths : float | array | MeanBandwidths
    grids : int | Grid | sequence of Grid
        Evaluation grid(s); an int builds a uniform grid per domain.
    kernel : KernelSpec, optional
        Defaults to the Epanechnikov kernel.

    The output is deterministic and independent of any parallel schedule.
    """
    from .kernels import EPANECHNIKOV

    if not obs.validated:
        raise ValidationError("observations must pass validate_observations first")
    kernel = kernel or EPANECHNIKOV
    bw = MeanBandwidths.resolve(bandwidths, obs)
    grid_list = component_grids(obs, grids)
    weights = mean_weights(scheme, obs.counts)

    shared = (
        obs.design is DesignKind.SR
        and scheme in (OBS, SUBJ)
        and len(set(float(b) for b in bw.b)) == 1
        and all(g is grid_list[0] for g in grid_list)
    )
    if shared:
        w_subject = weights.w[:, 0]
        return _estimate_means_sr(obs, w_subject, grid_list[0], float(bw.b[0]), kernel)

    curves = []
    for j in range(obs.p):
        times, vals, wobs = _pooled_component(obs, j, weights.w[:, j])
        values, status = _fit_curve_pooled(times, vals, wobs, grid_list[j], float(bw.b[j]), kernel)
        curves.append(EstimateCurve(j, grid_list[j], values, status, float(bw.b[j])))
    return curves
