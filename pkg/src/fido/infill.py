"""Reference-image generators for dropped pixels.

Mask convention: ``z == 1`` keeps the pixel of ``x``, ``z == 0`` drops it.
Heuristics (mean, blur, random) ignore the mask; local and harmonic
condition on the observed pixels and leave them untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from scipy.ndimage import convolve1d, label, uniform_filter

KINDS = ("mean", "blur", "random", "local", "harmonic")
GENERATIVE = ("local", "harmonic")
REFERENCE_SIDE = 224


@dataclass
class InfillStrategy:
    kind: str
    channel_means: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    blur_sigma: Optional[float] = None     # pixels; default 10 at 224 px, scaled
    random_sigma: float = 0.2
    local_window: Optional[int] = None     # default 15 at 224 px, scaled, odd
    max_sweeps: int = 10_000
    tolerance: float = 1e-6
    omega: Optional[float] = None         # None picks SOR factor from the hole size
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown infill kind {self.kind!r}; expected one of {KINDS}")
        self.channel_means = np.asarray(self.channel_means, dtype=np.float64)
        if self.blur_sigma is not None and self.blur_sigma <= 0:
            raise ValueError("blur sigma must be positive")
        if self.random_sigma <= 0:
            raise ValueError("random sigma must be positive")
        if self.local_window is not None and (self.local_window < 1 or self.local_window % 2 == 0):
            raise ValueError("local window must be a positive odd integer")
        if self.tolerance <= 0 or self.max_sweeps < 1:
            raise ValueError("harmonic tolerance and sweep cap must be positive")
        if self.omega is not None and not 0 < self.omega < 2:
            raise ValueError("relaxation factor must lie in (0, 2)")

    @property
    def is_generative(self) -> bool:
        return self.kind in GENERATIVE

    @property
    def is_stochastic(self) -> bool:
        return self.kind == "random"

    def sigma_for(self, height: int) -> float:
        return self.blur_sigma if self.blur_sigma is not None else 10.0 * height / REFERENCE_SIDE

    def window_for(self, height: int) -> int:
        if self.local_window is not None:
            return self.local_window
        w = max(3, int(round(15.0 * height / REFERENCE_SIDE)))
        return w if w % 2 else w + 1


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian truncated at 3 sigma and renormalised."""
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def mean_image(means: np.ndarray, shape) -> np.ndarray:
    c, h, w = shape
    return np.broadcast_to(np.asarray(means, dtype=np.float64)[:, None, None], (c, h, w)).copy()


def blur(x: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    out = convolve1d(x, k, axis=1, mode="reflect")
    return convolve1d(out, k, axis=2, mode="reflect")


def local_average(x: np.ndarray, z: np.ndarray, window: int, means: np.ndarray) -> np.ndarray:
    """Dropped pixels become the mean of observed pixels in a window around them."""
    zf = z.astype(np.float64)
    counts = uniform_filter(zf, size=window, mode="constant", cval=0.0)
    out = x.copy()
    dropped = ~z.astype(bool)
    has = counts > 1e-12
    for c in range(x.shape[0]):
        sums = uniform_filter(x[c] * zf, size=window, mode="constant", cval=0.0)
        fill = np.where(has, sums / np.where(has, counts, 1.0), means[c])
        out[c][dropped] = fill[dropped]
    return out


@njit(cache=True)
def _relax(u, dropped_i, dropped_j, omega, tol, max_sweeps):
    nc, h, w = u.shape
    n = dropped_i.shape[0]
    for sweep in range(max_sweeps):
        biggest = 0.0
        for k in range(n):
            i = dropped_i[k]
            j = dropped_j[k]
            for c in range(nc):
                s = 0.0
                m = 0
                if i > 0:
                    s += u[c, i - 1, j]
                    m += 1
                if i < h - 1:
                    s += u[c, i + 1, j]
                    m += 1
                if j > 0:
                    s += u[c, i, j - 1]
                    m += 1
                if j < w - 1:
                    s += u[c, i, j + 1]
                    m += 1
                old = u[c, i, j]
                new = old + omega * (s / m - old)
                d = abs(new - old)
                if d > biggest:
                    biggest = d
                u[c, i, j] = new
        if biggest < tol:
            return sweep + 1
    return max_sweeps


def boundary_mask(dropped: np.ndarray) -> np.ndarray:
    """Observed pixels 4-adjacent to at least one dropped pixel."""
    nb = np.zeros_like(dropped)
    nb[1:] |= dropped[:-1]
    nb[:-1] |= dropped[1:]
    nb[:, 1:] |= dropped[:, :-1]
    nb[:, :-1] |= dropped[:, 1:]
    return nb & ~dropped


def auto_omega(dropped: np.ndarray) -> float:
    """Over-relaxation factor 2 / (1 + sin(pi / L)), L ~ side of the largest hole."""
    labels, n = label(dropped)
    if n == 0:
        return 1.0
    largest = np.bincount(labels.ravel())[1:].max()
    side = np.sqrt(largest) + 1.0
    return float(2.0 / (1.0 + np.sin(np.pi / side))) if side > 2 else 1.0


def harmonic(x: np.ndarray, z: np.ndarray, tol: float = 1e-6, max_sweeps: int = 10_000,
             omega: Optional[float] = None, means: Optional[np.ndarray] = None,
             return_sweeps: bool = False):
    """Discrete Laplace fill of dropped pixels with observed pixels as Dirichlet data.

    Image borders are reflecting (a border pixel averages only its in-image
    neighbours).  Gauss-Seidel sweeps in row-major order run until the largest
    update falls below ``tol``; ``omega`` > 1 over-relaxes (SOR), and ``None``
    picks it from the size of the largest dropped region.
    """
    dropped = ~z.astype(bool)
    u = np.array(x, dtype=np.float64, copy=True)
    sweeps = 0
    if dropped.all():
        u = mean_image(means if means is not None else np.full(x.shape[0], 0.5), x.shape)
    elif dropped.any():
        # start from the boundary average so every iterate stays inside the boundary range
        edge = boundary_mask(dropped)
        u[:, dropped] = u[:, edge].mean(axis=1)[:, None]
        ii, jj = np.nonzero(dropped)
        omega = auto_omega(dropped) if omega is None else omega
        sweeps = _relax(u, ii.astype(np.int64), jj.astype(np.int64), float(omega), float(tol), int(max_sweeps))
    return (u, sweeps) if return_sweeps else u


def _check(x: np.ndarray, z: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z)
    if x.ndim != 3 or z.shape != x.shape[1:]:
        raise ValueError(f"mask shape {z.shape} does not match image {x.shape}")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("infill mask must be binary")
    return x, z


def infill(strategy: InfillStrategy, x: np.ndarray, z: np.ndarray,
           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Reference image for ``x`` given binary mask ``z`` (1 = observed).

    Generative kinds return ``x`` unchanged on observed pixels.  Output is
    clipped to [0, 1].  ``rng`` drives the random kind; when omitted a fresh
    generator seeded with ``strategy.seed`` is used.
    """
    x, z = _check(x, z)
    kind = strategy.kind
    h = x.shape[1]
    if kind == "mean":
        out = mean_image(strategy.channel_means, x.shape)
    elif kind == "blur":
        out = blur(x, strategy.sigma_for(h))
    elif kind == "random":
        rng = rng if rng is not None else np.random.default_rng(strategy.seed)
        out = rng.uniform(0.0, 1.0, x.shape) + rng.normal(0.0, strategy.random_sigma, x.shape)
    elif not z.any():
        out = mean_image(strategy.channel_means, x.shape)
    elif kind == "local":
        out = local_average(x, z, strategy.window_for(h), strategy.channel_means)
    else:
        out = harmonic(x, z, strategy.tolerance, strategy.max_sweeps, strategy.omega,
                       strategy.channel_means)
    out = np.clip(out, 0.0, 1.0)
    if strategy.is_generative:
        keep = z.astype(bool)
        out[:, keep] = x[:, keep]
    return out


def compose(x: np.ndarray, xhat: np.ndarray, z: np.ndarray) -> np.ndarray:
    """z * x + (1 - z) * xhat with z shared across channels (or matching x)."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"image shapes {x.shape} and {xhat.shape} differ")
    if np.any(z < 0) or np.any(z > 1):
        raise ValueError("mixing weights must lie in [0, 1]")
    zb = z if z.shape == x.shape else z[None]
    return zb * x + (1.0 - zb) * xhat
