"""Smoothing kernels with compact support on [-1, 1].

All kernels here are symmetric probability densities supported exactly on
[-1, 1] (the truncated Gaussian is renormalized to integrate to one on that
interval), and all are Lipschitz on their support.  Evaluations return an
exact 0.0 outside the support, which the windowed accumulators rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_KINDS = ("epanechnikov", "biweight", "truncated_gaussian")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family tag plus the shape parameter of the truncated Gaussian.

    Parameters
    ----------
    kind : {'epanechnikov', 'biweight', 'truncated_gaussian'}
    scale : float
        Standard deviation of the untruncated Gaussian; ignored for the
        polynomial kernels.
    """

    kind: str
    scale: float = 0.25

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {_KINDS}")
        if self.kind == "truncated_gaussian" and not self.scale > 0:
            raise ValueError("truncated_gaussian scale must be positive")


EPANECHNIKOV = KernelSpec("epanechnikov")
BIWEIGHT = KernelSpec("biweight")


def truncated_gaussian(scale: float = 0.25) -> KernelSpec:
    """Gaussian kernel restricted to [-1, 1] and renormalized."""
    return KernelSpec("truncated_gaussian", scale)


def _gaussian_norm(scale: float) -> float:
    # Mass of N(0, scale^2) on [-1, 1] is erf(1 / (scale * sqrt(2))).
    return 1.0 / (scale * _SQRT_2PI * math.erf(1.0 / (scale * math.sqrt(2.0))))


def kernel_eval(spec: KernelSpec, u: float) -> float:
    """Evaluate the kernel density at a single point.

    Returns exactly 0.0 for |u| > 1.
    """
    if u < -1.0 or u > 1.0:
        return 0.0
    if spec.kind == "epanechnikov":
        return 0.75 * (1.0 - u * u)
    if spec.kind == "biweight":
        w = 1.0 - u * u
        return 0.9375 * w * w
    z = u / spec.scale
    return _gaussian_norm(spec.scale) * math.exp(-0.5 * z * z)


def kernel_values(spec: KernelSpec, u: np.ndarray) -> np.ndarray:
    """Vectorized kernel evaluation; exact zeros outside [-1, 1]."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape, dtype=float)
    inside = np.abs(u) <= 1.0
    ui = u[inside]
    if spec.kind == "epanechnikov":
        out[inside] = 0.75 * (1.0 - ui * ui)
    elif spec.kind == "biweight":
        w = 1.0 - ui * ui
        out[inside] = 0.9375 * w * w
    else:
        z = ui / spec.scale
        out[inside] = _gaussian_norm(spec.scale) * np.exp(-0.5 * z * z)
    return out


def scaled_kernel(spec: KernelSpec, b: float, x: float) -> float:
    """Bandwidth-scaled kernel: kernel_eval(spec, x / b) / b."""
    if not b > 0:
        raise ValueError(f"bandwidth must be positive, got {b}")
    return kernel_eval(spec, x / b) / b


def scaled_kernel_values(spec: KernelSpec, b: float, x: np.ndarray) -> np.ndarray:
    """Vectorized bandwidth-scaled kernel."""
    if not b > 0:
        raise ValueError(f"bandwidth must be positive, got {b}")
    return kernel_values(spec, np.asarray(x, dtype=float) / b) / b


def parse_kernel(name: str) -> KernelSpec:
    """Build a KernelSpec from a CLI-style name.

    Accepts 'epanechnikov', 'biweight', or 'truncated_gaussian[:scale]'.
    """
    if name.startswith("truncated_gaussian"):
        if ":" in name:
            _, raw = name.split(":", 1)
            return truncated_gaussian(float(raw))
        return truncated_gaussian()
    return KernelSpec(name)
