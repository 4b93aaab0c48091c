"""Core data model: designs, ragged observation stores, grids, estimates.

The observation store keeps all measurements in flat arrays with one
contiguous block per (subject, component) cell, row-major in (subject,
component).  Blocks are sorted by time at validation so the smoothers can
locate kernel windows by binary search.  Validated sets are treated as
immutable and are safe to share across workers.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class ValidationError(ValueError):
    """Input data or configuration violates a structural contract."""


class DesignKind(enum.Enum):
    """Observational design: independent times per component (FR) or a
    single shared time grid across all components of a subject (SR)."""

    FR = "fr"
    SR = "sr"

    @classmethod
    def parse(cls, name: str) -> "DesignKind":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValidationError(f"unknown design {name!r}; expected 'fr' or 'sr'") from None


class PointStatus(enum.IntEnum):
    """Per-point outcome of a local linear fit."""

    EXACT = 0
    FALLBACK = 1  # degenerate window, local-constant value returned
    MISSING = 2  # empty window, no value

    @property
    def label(self) -> str:
        return _STATUS_LABELS[self]


_STATUS_LABELS = {
    PointStatus.EXACT: "exact",
    PointStatus.FALLBACK: "fallback",
    PointStatus.MISSING: "missing",
}


@dataclass(frozen=True)
class Grid:
    """Uniform evaluation mesh spanning a closed interval.

    Points must be strictly increasing with uniform spacing; the spacing may
    deviate from exact uniformity by at most 1e-12 of the span (covers
    linspace rounding).
    """

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 2:
            raise ValidationError("grid needs at least 2 points in a 1-D array")
        steps = np.diff(pts)
        if np.any(steps <= 0):
            raise ValidationError("grid points must be strictly increasing")
        span = pts[-1] - pts[0]
        h = span / (pts.size - 1)
        if np.max(np.abs(steps - h)) > 1e-12 * span:
            raise ValidationError("grid spacing is not uniform")

    @classmethod
    def uniform(cls, lo: float, hi: float, count: int) -> "Grid":
        if count < 2:
            raise ValidationError("grid count must be at least 2")
        if not hi > lo:
            raise ValidationError(f"empty interval [{lo}, {hi}]")
        return cls(np.linspace(lo, hi, count))

    @property
    def count(self) -> int:
        return self.points.size

    @property
    def lo(self) -> float:
        return float(self.points[0])

    @property
    def hi(self) -> float:
        return float(self.points[-1])

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.count - 1)


@dataclass
class EstimateCurve:
    """Fitted mean curve for one component on a grid.

    values are NaN exactly where status == MISSING.
    """

    component: int
    grid: Grid
    values: np.ndarray
    status: np.ndarray
    bandwidth: float

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        self.status = np.asarray(self.status, dtype=np.uint8)
        if self.values.shape != (self.grid.count,) or self.status.shape != self.values.shape:
            raise ValidationError("curve arrays must match the grid length")
        if not self.bandwidth > 0:
            raise ValidationError("curve bandwidth must be positive")
        present = self.status != PointStatus.MISSING
        if not np.all(np.isfinite(self.values[present])):
            raise ValidationError("non-missing curve values must be finite")

    @property
    def missing_count(self) -> int:
        return int(np.sum(self.status == PointStatus.MISSING))


@dataclass
class EstimateSurface:
    """Fitted covariance surface for a component pair (j, k), j <= k.

    values[a, b] estimates the covariance at (grid_s[a], grid_t[b]).  For
    j == k the surface must be symmetric; the tolerance is 1e-10 for
    order-one surfaces and scales with the surface magnitude beyond that.
    """

    pair: tuple[int, int]
    grids: tuple[Grid, Grid]
    values: np.ndarray
    status: np.ndarray
    bandwidths: tuple[float, float]

    def __post_init__(self) -> None:
        j, k = self.pair
        if j > k:
            raise ValidationError("surface pair must satisfy j <= k")
        self.values = np.asarray(self.values, dtype=float)
        self.status = np.asarray(self.status, dtype=np.uint8)
        shape = (self.grids[0].count, self.grids[1].count)
        if self.values.shape != shape or self.status.shape != shape:
            raise ValidationError("surface arrays must match the grid shape")
        if not (self.bandwidths[0] > 0 and self.bandwidths[1] > 0):
            raise ValidationError("surface bandwidths must be positive")
        present = self.status != PointStatus.MISSING
        if not np.all(np.isfinite(self.values[present])):
            raise ValidationError("non-missing surface values must be finite")
        if j == k:
            both = present & present.T
            gap = np.abs(np.where(both, self.values - self.values.T, 0.0))
            scale = max(1.0, float(np.max(np.abs(self.values[present]), initial=0.0)))
            if gap.size and float(np.max(gap)) > 1e-10 * scale:
                raise ValidationError("auto-covariance surface is not symmetric")

    @property
    def missing_count(self) -> int:
        return int(np.sum(self.status == PointStatus.MISSING))


def transpose_surface(surface: EstimateSurface) -> tuple[np.ndarray, np.ndarray]:
    """Values and statuses of the mirrored pair (k, j), i.e. the transpose."""
    return surface.values.T.copy(), surface.status.T.copy()


def component_grids(obs: "ObservationSet", grids) -> list[Grid]:
    """Resolve a grid spec (int | Grid | sequence) to one Grid per component.

    An int builds a uniform grid per domain, reusing one Grid object across
    components with identical domains so downstream caches can key on
    identity.
    """
    if isinstance(grids, (int, np.integer)):
        cache: dict[tuple[float, float], Grid] = {}
        out = []
        for j in range(obs.p):
            key = (float(obs.domains[j, 0]), float(obs.domains[j, 1]))
            if key not in cache:
                cache[key] = Grid.uniform(key[0], key[1], int(grids))
            out.append(cache[key])
        return out
    if isinstance(grids, Grid):
        return [grids] * obs.p
    grids = list(grids)
    if len(grids) != obs.p:
        raise ValidationError(f"expected {obs.p} grids, got {len(grids)}")
    return grids


@dataclass
class ObservationSet:
    """Ragged store of (time, value) measurements per (subject, component).

    counts[i, j] is the number of observations of component j on subject i;
    offsets[i, j] is the start of that block in the flat times/values
    arrays, which are laid out row-major in (subject, component).
    """

    n: int
    p: int
    design: DesignKind
    domains: np.ndarray  # (p, 2)
    counts: np.ndarray  # (n, p) int64
    offsets: np.ndarray  # (n, p) int64
    times: np.ndarray  # (total,) float64
    values: np.ndarray  # (total,) float64
    validated: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        self.domains = np.asarray(self.domains, dtype=float).reshape(self.p, 2)
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(self.n, self.p)
        self.offsets = np.asarray(self.offsets, dtype=np.int64).reshape(self.n, self.p)
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)

    # -- accessors ---------------------------------------------------------

    def times_of(self, i: int, j: int) -> np.ndarray:
        o = self.offsets[i, j]
        return self.times[o : o + self.counts[i, j]]

    def values_of(self, i: int, j: int) -> np.ndarray:
        o = self.offsets[i, j]
        return self.values[o : o + self.counts[i, j]]

    @property
    def total_count(self) -> int:
        return int(self.times.size)

    def domain_length(self, j: int) -> float:
        return float(self.domains[j, 1] - self.domains[j, 0])

    def component_block_index(self, j: int) -> np.ndarray:
        """Flat indices of component j's observations, subject-major order."""
        parts = [
            np.arange(self.offsets[i, j], self.offsets[i, j] + self.counts[i, j])
            for i in range(self.n)
        ]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_lists(
        cls,
        design: DesignKind,
        domains: Sequence[Sequence[float]] | Sequence[float],
        times_by: Sequence[Sequence[Sequence[float]]],
        values_by: Sequence[Sequence[Sequence[float]]],
    ) -> "ObservationSet":
        """Build from nested lists: times_by[i][j] / values_by[i][j]."""
        n = len(times_by)
        if n == 0:
            raise ValidationError("empty dataset: no subjects")
        p = len(times_by[0])
        dom = np.asarray(domains, dtype=float)
        if dom.ndim == 1:
            dom = np.tile(dom.reshape(1, 2), (p, 1))
        counts = np.zeros((n, p), dtype=np.int64)
        chunks_t: list[np.ndarray] = []
        chunks_v: list[np.ndarray] = []
        for i in range(n):
            if len(times_by[i]) != p or len(values_by[i]) != p:
                raise ValidationError("every subject must list all components")
            for j in range(p):
                t = np.asarray(times_by[i][j], dtype=float)
                v = np.asarray(values_by[i][j], dtype=float)
                if t.shape != v.shape:
                    raise ValidationError(f"times/values length mismatch at subject {i + 1}, component {j + 1}")
                counts[i, j] = t.size
                chunks_t.append(t)
                chunks_v.append(v)
        offsets = _offsets_from_counts(counts)
        times = np.concatenate(chunks_t) if chunks_t else np.empty(0)
        values = np.concatenate(chunks_v) if chunks_v else np.empty(0)
        return cls(n, p, design, dom, counts, offsets, times, values)


def _offsets_from_counts(counts: np.ndarray) -> np.ndarray:
    flat = counts.ravel()
    offsets = np.zeros(flat.size, dtype=np.int64)
    np.cumsum(flat[:-1], out=offsets[1:])
    return offsets.reshape(counts.shape)


def validate_observations(raw: ObservationSet) -> ObservationSet:
    """Check structural invariants and return a block-sorted copy.

    Sorts every (subject, component) block by time, verifies that all times
    lie inside their component domains and, under SR, that every component
    of a subject carries the identical time list.  Idempotent.
    """
    n, p = raw.n, raw.p
    if n < 1 or p < 1:
        raise ValidationError("empty dataset: need at least one subject and one component")
    total = int(raw.counts.sum())
    if total == 0:
        raise ValidationError("empty dataset: no observations")
    if np.any(raw.counts < 0):
        raise ValidationError("negative observation count")
    if raw.times.size != total or raw.values.size != total:
        raise ValidationError("flat arrays do not match counts")
    if np.any(raw.domains[:, 0] >= raw.domains[:, 1]):
        raise ValidationError("each domain must satisfy lo < hi")

    offsets = _offsets_from_counts(raw.counts)
    if not np.array_equal(offsets, raw.offsets):
        raise ValidationError("offsets inconsistent with counts")

    # Stable per-block sort by time, vectorized across all blocks.
    block_id = np.repeat(np.arange(n * p, dtype=np.int64), raw.counts.ravel())
    order = np.lexsort((raw.times, block_id))
    times = raw.times[order]
    values = raw.values[order]

    comp_id = block_id % p
    lo = raw.domains[comp_id, 0]
    hi = raw.domains[comp_id, 1]
    bad = (times < lo) | (times > hi)
    if np.any(bad):
        o = int(np.argmax(bad))
        i, j = divmod(int(block_id[o]), p)
        raise ValidationError(
            f"time {times[o]} outside domain [{lo[o]}, {hi[o]}] "
            f"for subject {i + 1}, component {j + 1}"
        )

    if raw.design is DesignKind.SR:
        if np.any(np.abs(raw.domains - raw.domains[0]) > 0):
            raise ValidationError("SR design requires identical domains across components")
        same_counts = np.all(raw.counts == raw.counts[:, :1], axis=1)
        if not np.all(same_counts):
            i = int(np.argmin(same_counts))
            raise ValidationError(f"SR design: subject {i + 1} has differing counts across components")
        for i in range(n):
            ni = int(raw.counts[i, 0])
            if ni == 0:
                continue
            block = times[offsets[i, 0] : offsets[i, 0] + ni * p].reshape(p, ni)
            if np.any(block != block[0]):
                j = int(np.argmax(np.any(block != block[0], axis=1)))
                raise ValidationError(
                    f"SR design: subject {i + 1}, component {j + 1} has times differing from component 1"
                )

    return ObservationSet(
        n, p, raw.design, raw.domains.copy(), raw.counts.copy(), offsets, times, values, validated=True
    )


# -- observation CSV interchange -----------------------------------------

CSV_HEADER = ("subject", "component", "time", "value")


def read_observations_csv(
    path,
    design: DesignKind,
    domains: Sequence[float] | np.ndarray,
    n: int | None = None,
    p: int | None = None,
) -> ObservationSet:
    """Read `subject,component,time,value` rows (1-based ids) and validate.

    Domains and the design are supplied by the caller, never inferred from
    the data.  A single (lo, hi) pair is broadcast to every component.
    """
    subs: list[int] = []
    comps: list[int] = []
    ts: list[float] = []
    vs: list[float] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != list(CSV_HEADER):
            raise ValidationError(f"expected header {','.join(CSV_HEADER)!r} in {path}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                subs.append(int(row[0]))
                comps.append(int(row[1]))
                ts.append(float(row[2]))
                vs.append(float(row[3]))
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    if not subs:
        raise ValidationError(f"empty dataset: no data rows in {path}")
    subject = np.asarray(subs, dtype=np.int64) - 1
    comp = np.asarray(comps, dtype=np.int64) - 1
    if subject.min() < 0 or comp.min() < 0:
        raise ValidationError("subject and component ids must be positive (1-based)")
    n = n if n is not None else int(subject.max()) + 1
    p = p if p is not None else int(comp.max()) + 1
    if subject.max() >= n or comp.max() >= p:
        raise ValidationError("subject/component id exceeds declared n/p")

    dom = np.asarray(domains, dtype=float)
    if dom.ndim == 1:
        dom = np.tile(dom.reshape(1, 2), (p, 1))
    if dom.shape != (p, 2):
        raise ValidationError(f"domains must have shape ({p}, 2)")

    times = np.asarray(ts, dtype=float)
    values = np.asarray(vs, dtype=float)
    block = subject * p + comp
    order = np.lexsort((times, block))
    counts = np.bincount(block, minlength=n * p).astype(np.int64).reshape(n, p)
    raw = ObservationSet(
        n, p, design, dom, counts, _offsets_from_counts(counts), times[order], values[order]
    )
    return validate_observations(raw)


def write_observations_csv(obs: ObservationSet, path) -> None:
    """Write the observation CSV (1-based subject/component ids)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for i in range(obs.n):
            for j in range(obs.p):
                t = obs.times_of(i, j)
                v = obs.values_of(i, j)
                for a in range(t.size):
                    writer.writerow([i + 1, j + 1, repr(float(t[a])), repr(float(v[a]))])


def write_curves_csv(curves: Iterable[EstimateCurve], path) -> None:
    """Write fitted mean curves as `component,t,mu_hat,status` rows."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["component", "t", "mu_hat", "status"])
        for curve in curves:
            for g, t in enumerate(curve.grid.points):
                status = PointStatus(curve.status[g])
                writer.writerow(
                    [curve.component + 1, repr(float(t)), repr(float(curve.values[g])), status.label]
                )


def write_surfaces_csv(surfaces: Iterable[EstimateSurface], path) -> None:
    """Write fitted covariance surfaces as `j,k,s,t,gamma_hat,status` rows."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["j", "k", "s", "t", "gamma_hat", "status"])
        for surf in surfaces:
            j, k = surf.pair
            gs, gt = surf.grids
            for a, s in enumerate(gs.points):
                for b, t in enumerate(gt.points):
                    status = PointStatus(surf.status[a, b])
                    writer.writerow(
                        [j + 1, k + 1, repr(float(s)), repr(float(t)),
                         repr(float(surf.values[a, b])), status.label]
                    )
