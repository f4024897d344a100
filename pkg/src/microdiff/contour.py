"""Boundary tracing and Fourier shape descriptors for 2-D phase maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage, stats

from .descriptors import Microstructure
from .errors import ValidationError

# Moore neighbourhood in (row, col) offsets, clockwise on screen starting at west
_RING = np.array([(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)])
_DIR = {tuple(d): i for i, d in enumerate(_RING)}

MIN_CONTOUR_LENGTH = 4
HIST_BINS = 64


@dataclass
class Contour:
    """Closed boundary as ordered (x, y) pixel coordinates, x = column, y = row."""

    points: np.ndarray

    def __len__(self):
        return len(self.points)

    def as_complex(self) -> np.ndarray:
        p = np.asarray(self.points, dtype=np.float64)
        return p[:, 0] + 1j * p[:, 1]


@dataclass
class FourierDescriptor:
    coefficients: np.ndarray

    def __len__(self):
        return len(self.coefficients)

    def magnitudes(self, include_dc: bool = False) -> np.ndarray:
        a = np.abs(self.coefficients)
        return a if include_dc else a[1:]


def _moore_trace(fg: np.ndarray, start) -> list:
    """Trace the outer boundary of the region containing ``start``.

    ``start`` must be the first foreground pixel of its region in raster order,
    so its west neighbour is background. Stops when the start pixel is re-entered
    with the same backtrack direction (Jacob's criterion). Thin regions can
    return to the start from another side only; for those the trace also stops
    once the first move out of the start pixel repeats, which closes the same loop.
    """
    h, w = fg.shape

    def is_fg(r, c):
        return 0 <= r < h and 0 <= c < w and fg[r, c]

    start = tuple(int(v) for v in start)
    p = start
    back = 0  # entered from the west
    out = [p]
    first_state = None
    for _ in range(4 * fg.size + 8):
        found = None
        for k in range(1, 9):
            d = (back + k) % 8
            q = (p[0] + _RING[d][0], p[1] + _RING[d][1])
            if is_fg(*q):
                found = d
                break
        if found is None:
            return out  # isolated pixel
        prev = _RING[(found - 1) % 8]
        b_pos = (p[0] + prev[0], p[1] + prev[1])
        p = (p[0] + _RING[found][0], p[1] + _RING[found][1])
        back = _DIR[(b_pos[0] - p[0], b_pos[1] - p[1])]
        if p == start and back == 0:
            return out
        if first_state is None:
            first_state = (p, back)
        elif (p, back) == first_state:
            return out[:-1]  # the last point appended was the start pixel
        out.append(p)
    raise RuntimeError("boundary trace did not close")  # unreachable for finite images


def trace_boundaries(ms, min_length: int = MIN_CONTOUR_LENGTH) -> list:
    """Outer boundary of every 8-connected phase-1 region, in scanline discovery order.

    Contours shorter than ``min_length`` points (single pixels and the like) are dropped.
    """
    phase = ms.phase if isinstance(ms, Microstructure) else np.asarray(ms)
    if phase.ndim != 2:
        raise ValidationError("boundary tracing needs a 2-D image")
    fg = phase.astype(bool)
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return []
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    contours = []
    for idx in sorted(first[1:] if flat[first[0]] == 0 else first):
        start = np.unravel_index(idx, fg.shape)
        rc = _moore_trace(labels == flat[idx], start)
        if len(rc) >= min_length:
            pts = np.array([(c, r) for r, c in rc], dtype=np.int64)
            contours.append(Contour(pts))
    return contours


def fourier_descriptor(c: Contour) -> FourierDescriptor:
    """a(u) = sum_k s(k) exp(-2j pi u k / K), with s(k) = x(k) + j y(k)."""
    return FourierDescriptor(np.fft.fft(c.as_complex()))


def inverse_descriptor(d: FourierDescriptor) -> np.ndarray:
    """Complex boundary sequence recovered from its descriptor (1/K on the inverse)."""
    return np.fft.ifft(d.coefficients)


def pooled_magnitudes(descs) -> np.ndarray:
    descs = list(descs)
    if not descs:
        raise ValidationError("no descriptors to pool")
    return np.concatenate([d.magnitudes() for d in descs])


def magnitude_histogram(descs, bins: int = HIST_BINS):
    mags = pooled_magnitudes(descs)
    return np.histogram(mags, bins=bins, range=(0.0, float(mags.max()) or 1.0))


class SkewNormalFit(NamedTuple):
    shape: float
    location: float
    scale: float

    @property
    def skewness(self) -> float:
        """Third standardised moment of the fitted density."""
        return float(stats.skewnorm.stats(self.shape, moments="s"))


def fit_skew_normal(values) -> SkewNormalFit:
    """Maximum-likelihood skew-normal fit; returns (shape, location, scale).

    The data are standardised before fitting and the result mapped back, so the
    fit is exactly equivariant under affine rescaling of the input.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 3:
        raise ValidationError("need at least 3 values to fit")
    m, sd = v.mean(), v.std()
    if not sd > 0:
        raise ValidationError("degenerate population: all values equal")
    shape, loc, scale = stats.skewnorm.fit((v - m) / sd)
    return SkewNormalFit(float(shape), float(m + sd * loc), float(sd * scale))


def descriptor_population_stats(descs) -> SkewNormalFit:
    """Skew-normal (shape, location, scale) of pooled non-DC coefficient magnitudes."""
    return fit_skew_normal(pooled_magnitudes(descs))
