"""Local linear (plane) estimation of auto- and cross-covariance surfaces.

Raw covariances are products of mean-centered observations over the design's
index-pair sets; a kernel-weighted plane fit at each surface point yields
the estimate via the cofactor closed form

    gamma_hat = (Q0*R00 - Q1*R10 + Q2*R01) / (Q0*S00 - Q1*S10 + Q2*S01),

with Q0 = S20*S02 - S11^2, Q1 = S10*S02 - S01*S11, Q2 = S10*S11 - S01*S20,
where S_qr / R_qr are the weighted double-kernel moment sums.

`cov_sums_at` is the per-point reference: subjects ascending, index pairs
(l, m) row-major, windows located by binary search on both time axes.  The
batch driver factorizes each subject's double sum into products of
single-axis sums (minus a same-time diagonal correction when the design
excludes l == m) and evaluates whole surfaces with matrix products; it
agrees with the reference up to floating-point reassociation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .kernels import EPANECHNIKOV, KernelSpec, kernel_eval, kernel_values
from .model import (
    DesignKind,
    EstimateCurve,
    EstimateSurface,
    Grid,
    ObservationSet,
    PointStatus,
    ValidationError,
)
from .weights import OBS, SUBJ, CovWeights, Pair, all_pairs, cov_weights, diagonal_pairs, pair_sizes

DET_RTOL = 1e-10


class MeanGapError(ValidationError):
    """A plug-in mean curve is missing at a time the raw covariances need."""

    def __init__(self, component: int, time: float, subject: int | None = None):
        self.component = component
        self.time = time
        self.subject = subject
        where = f"subject {subject + 1}, " if subject is not None else ""
        super().__init__(
            f"plug-in mean for component {component + 1} is missing at "
            f"time {time} ({where}no usable curve value)"
        )


@dataclass(frozen=True)
class OracleMean:
    """Known mean functions: fn(component, times) -> values."""

    fn: Callable[[int, np.ndarray], np.ndarray]

    def mean_values(self, j: int, times: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(j, np.asarray(times, dtype=float)), dtype=float)


@dataclass(frozen=True)
class PlugInMean:
    """Fitted mean curves, evaluated by linear interpolation between grid
    nodes.  Raises MeanGapError if a needed node is missing."""

    curves: tuple[EstimateCurve, ...]

    def mean_values(self, j: int, times: np.ndarray) -> np.ndarray:
        curve = self.curves[j]
        pts = curve.grid.points
        times = np.asarray(times, dtype=float)
        missing = curve.status == PointStatus.MISSING
        pos = np.clip(np.searchsorted(pts, times, side="right") - 1, 0, pts.size - 2)
        needs_right = times > pts[pos]
        bad = missing[pos] | (needs_right & missing[pos + 1])
        if np.any(bad):
            a = int(np.argmax(bad))
            raise MeanGapError(j, float(times[a]))
        clean = np.where(missing, 0.0, curve.values)
        return np.interp(times, pts, clean)


def as_mean_provider(provider) -> OracleMean | PlugInMean:
    if isinstance(provider, (OracleMean, PlugInMean)):
        return provider
    if callable(provider):
        return OracleMean(provider)
    return PlugInMean(tuple(provider))


@dataclass(frozen=True)
class CovBandwidths:
    """Per-component covariance bandwidths; the same b_j serves the
    auto-surface (j, j) and every cross-surface (j, k)."""

    b: np.ndarray  # (p,)

    @classmethod
    def resolve(cls, bandwidths, obs: ObservationSet) -> "CovBandwidths":
        if isinstance(bandwidths, CovBandwidths):
            b = bandwidths.b
        else:
            b = np.broadcast_to(np.asarray(bandwidths, dtype=float), (obs.p,)).copy()
        if b.shape != (obs.p,):
            raise ValidationError(f"expected {obs.p} covariance bandwidths, got shape {b.shape}")
        if np.any(b <= 0):
            raise ValidationError("covariance bandwidths must be positive")
        return cls(b)


@dataclass
class RawCovTerms:
    """Per-subject centered data backing the raw covariances of pair (j, k).

    The raw covariance for index pair (l, m) is resid_j[i][l] *
    resid_k[i][m]; pairs(i) iterates the design's index set in row-major
    order, excluding l == m when exclude_diagonal is set (SR design, or
    auto-covariance under FR).
    """

    j: int
    k: int
    n: int
    exclude_diagonal: bool
    times_j: list[np.ndarray]
    times_k: list[np.ndarray]
    resid_j: list[np.ndarray]
    resid_k: list[np.ndarray]

    def pair_count(self, i: int) -> int:
        nj = self.times_j[i].size
        if self.exclude_diagonal:
            return nj * (nj - 1) if nj > 1 else 0
        return nj * self.times_k[i].size

    def pairs(self, i: int):
        tj, tk = self.times_j[i], self.times_k[i]
        ej, ek = self.resid_j[i], self.resid_k[i]
        for ell in range(tj.size):
            for m in range(tk.size):
                if self.exclude_diagonal and ell == m:
                    continue
                yield ell, m, tj[ell], tk[m], ej[ell] * ek[m]


def raw_cov_terms(obs: ObservationSet, provider, j: int, k: int) -> RawCovTerms:
    """Center the observations of components j and k with the mean provider."""
    provider = as_mean_provider(provider)
    exclude = obs.design is DesignKind.SR or j == k
    times_j, times_k, resid_j, resid_k = [], [], [], []
    for i in range(obs.n):
        tj = obs.times_of(i, j)
        tk = obs.times_of(i, k)
        try:
            ej = obs.values_of(i, j) - provider.mean_values(j, tj)
            ek = obs.values_of(i, k) - provider.mean_values(k, tk)
        except MeanGapError as exc:
            raise MeanGapError(exc.component, exc.time, subject=i) from None
        times_j.append(tj)
        times_k.append(tk)
        resid_j.append(ej)
        resid_k.append(ek)
    return RawCovTerms(j, k, obs.n, exclude, times_j, times_k, resid_j, resid_k)


@dataclass(frozen=True)
class CovFitInternals:
    """Double-kernel moment sums at one surface point, plus the cofactors."""

    s00: float
    s10: float
    s01: float
    s20: float
    s11: float
    s02: float
    r00: float
    r10: float
    r01: float

    @property
    def q0(self) -> float:
        return self.s20 * self.s02 - self.s11 * self.s11

    @property
    def q1(self) -> float:
        return self.s10 * self.s02 - self.s01 * self.s11

    @property
    def q2(self) -> float:
        return self.s10 * self.s11 - self.s01 * self.s20

    def denominator(self) -> float:
        return self.q0 * self.s00 - self.q1 * self.s10 + self.q2 * self.s01


def cov_sums_at(
    s: float,
    t: float,
    raw: RawCovTerms,
    v: np.ndarray,
    b_j: float,
    b_k: float,
    kernel: KernelSpec,
) -> CovFitInternals:
    """Accumulate the plane-fit sums at (s, t), reference summation order.

    Subjects are visited in index order; within a subject the index pairs
    run row-major over the binary-searched windows on both axes.
    """
    if not (b_j > 0 and b_k > 0):
        raise ValidationError("bandwidths must be positive")
    s00 = s10 = s01 = s20 = s11 = s02 = r00 = r10 = r01 = 0.0
    for i in range(raw.n):
        vi = float(v[i])
        if vi == 0.0:
            continue
        tj, tk = raw.times_j[i], raw.times_k[i]
        ej, ek = raw.resid_j[i], raw.resid_k[i]
        jlo = int(np.searchsorted(tj, s - b_j, side="left"))
        jhi = int(np.searchsorted(tj, s + b_j, side="right"))
        klo = int(np.searchsorted(tk, t - b_k, side="left"))
        khi = int(np.searchsorted(tk, t + b_k, side="right"))
        for ell in range(jlo, jhi):
            u = (tj[ell] - s) / b_j
            kj = vi * kernel_eval(kernel, u) / b_j
            if kj == 0.0:
                continue
            zj = ej[ell]
            for m in range(klo, khi):
                if raw.exclude_diagonal and ell == m:
                    continue
                w = (tk[m] - t) / b_k
                kk = kernel_eval(kernel, w) / b_k
                kw = kj * kk
                z = zj * ek[m]
                s00 += kw
                s10 += kw * u
                s01 += kw * w
                s20 += kw * u * u
                s11 += kw * u * w
                s02 += kw * w * w
                r00 += kw * z
                r10 += kw * u * z
                r01 += kw * w * z
    return CovFitInternals(s00, s10, s01, s20, s11, s02, r00, r10, r01)


def _solve_surface_point(f: CovFitInternals) -> tuple[float, PointStatus]:
    den = f.denominator()
    if den > DET_RTOL * max(f.q0 * f.s00, 1.0):
        num = f.q0 * f.r00 - f.q1 * f.r10 + f.q2 * f.r01
        return num / den, PointStatus.EXACT
    if f.s00 > 0.0:
        return f.r00 / f.s00, PointStatus.FALLBACK
    return float("nan"), PointStatus.MISSING


def cov_at(
    s: float,
    t: float,
    raw: RawCovTerms,
    v: np.ndarray,
    b_j: float,
    b_k: float,
    kernel: KernelSpec,
) -> tuple[float, PointStatus]:
    """Evaluate the covariance surface estimate at one point."""
    return _solve_surface_point(cov_sums_at(s, t, raw, v, b_j, b_k, kernel))


# -- batch surface fitting -------------------------------------------------


def _segment_sums(rows: np.ndarray, starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Sum contiguous column segments of a (G, total) matrix -> (G, n)."""
    total = rows.shape[1]
    if total == 0:
        return np.zeros((rows.shape[0], starts.size))
    idx = np.minimum(starts, total - 1)
    out = np.add.reduceat(rows, idx, axis=1)
    out[:, counts == 0] = 0.0
    return np.ascontiguousarray(out)


class _TimeAxis:
    """Pooled per-component time axis with kernel moment matrices.

    P[q][g, o] = K_b(t_o - grid_g) * ((t_o - grid_g) / b)^q / b and A[q] are
    the per-subject segment sums of P[q].  Under SR all components share one
    axis instance.
    """

    def __init__(self, times: np.ndarray, starts: np.ndarray, counts: np.ndarray,
                 grid: Grid, b: float, kernel: KernelSpec):
        self.times = times
        self.starts = starts
        self.counts = counts
        self.grid = grid
        self.b = b
        u = (times[None, :] - grid.points[:, None]) / b
        k = kernel_values(kernel, u) / b
        p1 = k * u
        self.P = (k, p1, p1 * u)
        self.A = tuple(_segment_sums(pq, starts, counts) for pq in self.P)


class _ComponentResiduals:
    """Centered responses of one component, aligned with its time axis."""

    def __init__(self, resid: np.ndarray, axis: _TimeAxis):
        self.e = resid
        self.AE = tuple(
            _segment_sums(axis.P[q] * resid[None, :], axis.starts, axis.counts) for q in (0, 1)
        )


def _pooled_axis_arrays(obs: ObservationSet, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Component j observations pooled subject-major (flat block order)."""
    counts = obs.counts[:, j]
    starts = np.zeros(obs.n, dtype=np.int64)
    np.cumsum(counts[:-1], out=starts[1:])
    idx = obs.component_block_index(j)
    return obs.times[idx], obs.values[idx], starts, counts


def _mirror_upper(mat: np.ndarray) -> np.ndarray:
    """Reflect the upper triangle (inclusive) onto the lower one."""
    upper = np.triu(mat)
    return upper + np.triu(mat, 1).T


class _SurfaceFitter:
    """Workspace shared across the surfaces of one dataset.

    Caches per-component pooled axes (shared across all components under
    SR, where times coincide) and, when the weights are identical for every
    pair, the S-moment surfaces as well.
    """

    def __init__(self, obs: ObservationSet, provider, bandwidths: CovBandwidths,
                 grids: Sequence[Grid], kernel: KernelSpec):
        self.obs = obs
        self.provider = as_mean_provider(provider)
        self.bw = bandwidths.b
        self.grids = list(grids)
        self.kernel = kernel
        self.sr = obs.design is DesignKind.SR
        self._axes: dict = {}
        self._resids: dict[int, _ComponentResiduals] = {}
        self._values: dict[int, np.ndarray] = {}
        self._shared_s: dict | None = None

    def _axis_key(self, j: int):
        if self.sr and self.grids[j] is self.grids[0] and self.bw[j] == self.bw[0]:
            return "shared"
        return j

    def _axis(self, j: int) -> _TimeAxis:
        key = self._axis_key(j)
        if key not in self._axes:
            jj = 0 if key == "shared" else j
            times, values, starts, counts = _pooled_axis_arrays(self.obs, jj)
            self._axes[key] = _TimeAxis(times, starts, counts, self.grids[jj],
                                        float(self.bw[jj]), self.kernel)
            if key == "shared":
                self._values["shared_times"] = times
        return self._axes[key]

    def _residuals(self, j: int) -> _ComponentResiduals:
        if j not in self._resids:
            axis = self._axis(j)
            if self._axis_key(j) == "shared":
                _, values, _, _ = _pooled_axis_arrays(self.obs, j)
            else:
                values = _pooled_axis_arrays(self.obs, j)[1]
            try:
                resid = values - self.provider.mean_values(j, axis.times)
            except MeanGapError as exc:
                i = int(np.searchsorted(axis.starts, np.searchsorted(axis.times, exc.time), side="right")) - 1
                raise MeanGapError(exc.component, exc.time, subject=max(i, 0)) from None
            self._resids[j] = _ComponentResiduals(resid, axis)
        return self._resids[j]

    def _s_moments(self, j: int, k: int, v: np.ndarray, exclude: bool) -> dict:
        shared = self.sr and self._axis_key(j) == "shared" and self._axis_key(k) == "shared"
        if shared and self._shared_s is not None:
            return self._shared_s
        ax_j, ax_k = self._axis(j), self._axis(k)
        va = [ax_j.A[q] * v[None, :] for q in range(3)]
        s = {
            (0, 0): va[0] @ ax_k.A[0].T,
            (1, 0): va[1] @ ax_k.A[0].T,
            (0, 1): va[0] @ ax_k.A[1].T,
            (2, 0): va[2] @ ax_k.A[0].T,
            (1, 1): va[1] @ ax_k.A[1].T,
            (0, 2): va[0] @ ax_k.A[2].T,
        }
        if exclude:
            vobs = np.repeat(v, ax_j.counts)
            for (q, r) in s:
                s[(q, r)] = s[(q, r)] - (ax_j.P[q] * vobs[None, :]) @ ax_k.P[r].T
        if shared:
            self._shared_s = s
        return s

    def surface(self, j: int, k: int, v: np.ndarray) -> EstimateSurface:
        exclude = self.sr or j == k
        ax_j, ax_k = self._axis(j), self._axis(k)
        re_j, re_k = self._residuals(j), self._residuals(k)
        s = self._s_moments(j, k, v, exclude)

        r = {
            (0, 0): (re_j.AE[0] * v[None, :]) @ re_k.AE[0].T,
            (1, 0): (re_j.AE[1] * v[None, :]) @ re_k.AE[0].T,
            (0, 1): (re_j.AE[0] * v[None, :]) @ re_k.AE[1].T,
        }
        if exclude:
            c = np.repeat(v, ax_j.counts) * re_j.e * re_k.e
            for (q, rr) in r:
                r[(q, rr)] = r[(q, rr)] - (ax_j.P[q] * c[None, :]) @ ax_k.P[rr].T

        q0 = s[(2, 0)] * s[(0, 2)] - s[(1, 1)] ** 2
        q1 = s[(1, 0)] * s[(0, 2)] - s[(0, 1)] * s[(1, 1)]
        q2 = s[(1, 0)] * s[(1, 1)] - s[(0, 1)] * s[(2, 0)]
        den = q0 * s[(0, 0)] - q1 * s[(1, 0)] + q2 * s[(0, 1)]
        num = q0 * r[(0, 0)] - q1 * r[(1, 0)] + q2 * r[(0, 1)]

        exact = den > DET_RTOL * np.maximum(q0 * s[(0, 0)], 1.0)
        constant = ~exact & (s[(0, 0)] > 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            values = np.where(exact, num / den, np.where(constant, r[(0, 0)] / s[(0, 0)], np.nan))
        status = np.where(
            exact, np.uint8(PointStatus.EXACT),
            np.where(constant, np.uint8(PointStatus.FALLBACK), np.uint8(PointStatus.MISSING)),
        )
        if j == k:
            # The criterion is exchange-symmetric; mirror the upper triangle
            # so the stored surface is exactly so.
            values = _mirror_upper(values)
            status = _mirror_upper(status)
        return EstimateSurface(
            (j, k), (self.grids[j], self.grids[k]), values, status,
            (float(self.bw[j]), float(self.bw[k])),
        )


def resolve_pairs(p: int, selection) -> list[Pair]:
    """Normalize a pair selection ('all' | 'diag' | explicit list) to a
    j <= k pair list."""
    if selection == "all" or selection is None:
        return all_pairs(p)
    if selection == "diag":
        return diagonal_pairs(p)
    pairs = []
    for j, k in selection:
        if not (0 <= j < p and 0 <= k < p):
            raise ValidationError(f"pair ({j + 1}, {k + 1}) outside 1..{p}")
        pairs.append((min(j, k), max(j, k)))
    seen = set()
    unique = []
    for pair in pairs:
        if pair not in seen:
            seen.add(pair)
            unique.append(pair)
    return unique


def component_grids(obs: ObservationSet, grids) -> list[Grid]:
    """Resolve a grid spec (int | Grid | list) into one Grid per component,
    sharing the Grid object across components with identical domains."""
    if isinstance(grids, int):
        cache: dict[tuple[float, float], Grid] = {}
        out = []
        for j in range(obs.p):
            key = (float(obs.domains[j, 0]), float(obs.domains[j, 1]))
            if key not in cache:
                cache[key] = Grid.uniform(key[0], key[1], grids)
            out.append(cache[key])
        return out
    if isinstance(grids, Grid):
        return [grids] * obs.p
    grids = list(grids)
    if len(grids) != obs.p:
        raise ValidationError(f"expected {obs.p} grids, got {len(grids)}")
    return grids


def estimate_covariances(
    obs: ObservationSet,
    provider,
    scheme,
    bandwidths,
    grids,
    pairs="all",
    kernel: KernelSpec | None = None,
) -> list[EstimateSurface]:
    """Fit covariance surfaces for the selected pairs (upper triangle only).

    Surfaces are returned for j <= k; the mirrored pair is the transpose.
    Pairs whose index sets are empty for every subject are skipped with a
    warning.  Output is deterministic and independent of scheduling.
    """
    if not obs.validated:
        raise ValidationError("observations must pass validate_observations first")
    kernel = kernel or EPANECHNIKOV
    bw = CovBandwidths.resolve(bandwidths, obs)
    grid_list = component_grids(obs, grids)
    pair_list = resolve_pairs(obs.p, pairs)

    usable = []
    for j, k in pair_list:
        if int(pair_sizes(obs.design, obs.counts, j, k).sum()) == 0:
            warnings.warn(f"pair ({j + 1}, {k + 1}) has no usable index pairs; skipped")
        else:
            usable.append((j, k))
    if not usable:
        return []

    cw = cov_weights(scheme, obs.design, obs.counts, usable)
    fitter = _SurfaceFitter(obs, provider, bw, grid_list, kernel)
    return [fitter.surface(j, k, cw.v[:, idx]) for idx, (j, k) in enumerate(usable)]
