"""Phase statistics of binary microstructures: volume fraction, S2(r) and L(r).

Distances are integer lattice separations along the coordinate axes. A curve
for ``axis=None`` is the average over all axes. Periodic structures wrap
around; non-periodic ones only count pairs/segments that fit inside the grid,
normalising each r by its own number of placements.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ValidationError


@dataclass
class Microstructure:
    """Binary phase grid (1 = phase of interest, 0 = matrix)."""

    phase: np.ndarray
    periodic: bool = True

    def __post_init__(self):
        phase = np.asarray(self.phase)
        if phase.ndim not in (2, 3):
            raise ValidationError(f"microstructures are 2-D or 3-D, got {phase.ndim}-D")
        if phase.size == 0:
            raise ValidationError("empty microstructure")
        if phase.dtype != np.uint8:
            if not np.all((phase == 0) | (phase == 1)):
                raise ValidationError("phase values must be 0 or 1")
            phase = phase.astype(np.uint8)
        elif phase.max() > 1:
            raise ValidationError("phase values must be 0 or 1")
        self.phase = phase

    @property
    def dims(self) -> int:
        return self.phase.ndim

    @property
    def shape(self) -> tuple:
        return self.phase.shape

    def complement(self) -> "Microstructure":
        return Microstructure(1 - self.phase, self.periodic)


@dataclass
class DescriptorCurve:
    r: np.ndarray
    value: np.ndarray

    def __len__(self):
        return len(self.r)


def _as_ms(ms) -> Microstructure:
    return ms if isinstance(ms, Microstructure) else Microstructure(np.asarray(ms))


def _axes(ms: Microstructure, axis: Optional[int]) -> list:
    if axis is None:
        return list(range(ms.dims))
    if not 0 <= axis < ms.dims:
        raise ValidationError(f"axis {axis} out of range for {ms.dims}-D data")
    return [axis]


def _check_rmax(ms: Microstructure, r_max: int, axes) -> None:
    if r_max < 0:
        raise ValidationError("r_max must be >= 0")
    limit = min(ms.shape[a] for a in axes)
    if r_max >= limit:
        raise ValidationError(f"r_max={r_max} must be smaller than the extent {limit}")


def volume_fraction(ms) -> float:
    ms = _as_ms(ms)
    return float(ms.phase.mean())


def _head(a: np.ndarray, n: int, axis: int) -> np.ndarray:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(0, n)
    return a[tuple(idx)]


def _tail(a: np.ndarray, r: int, axis: int) -> np.ndarray:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(r, None)
    return a[tuple(idx)]


def two_point_correlation(ms, r_max: int, axis: Optional[int] = None) -> DescriptorCurve:
    """Direct S2(r): fraction of axis-aligned pairs at distance r both in phase 1."""
    ms = _as_ms(ms)
    axes = _axes(ms, axis)
    _check_rmax(ms, r_max, axes)
    ind = ms.phase.astype(bool)
    vals = np.zeros(r_max + 1)
    for ax in axes:
        n = ms.shape[ax]
        for r in range(r_max + 1):
            if ms.periodic:
                both = ind & np.roll(ind, -r, axis=ax)
            else:
                both = _head(ind, n - r, ax) & _tail(ind, r, ax)
            vals[r] += both.mean()
    return DescriptorCurve(np.arange(r_max + 1), vals / len(axes))


def autocorrelation_fft(ind: np.ndarray) -> np.ndarray:
    """Periodic autocorrelation <I(x) I(x + d)> over all lattice shifts d."""
    f = np.fft.rfftn(ind.astype(np.float64))
    return np.fft.irfftn(f * np.conj(f), s=ind.shape, axes=tuple(range(ind.ndim))) / ind.size


def s2_fft(ms, r_max: int, axis: Optional[int] = None) -> DescriptorCurve:
    """S2(r) of a periodic structure from its spectral autocorrelation."""
    ms = _as_ms(ms)
    if not ms.periodic:
        raise ValidationError("s2_fft requires a periodic microstructure")
    axes = _axes(ms, axis)
    _check_rmax(ms, r_max, axes)
    ac = autocorrelation_fft(ms.phase)
    vals = np.zeros(r_max + 1)
    for ax in axes:
        idx = [0] * ms.dims
        idx[ax] = slice(0, r_max + 1)
        vals += ac[tuple(idx)]
    return DescriptorCurve(np.arange(r_max + 1), vals / len(axes))


def lineal_path(ms, r_max: int, axis: Optional[int] = None) -> DescriptorCurve:
    """L(r): probability that r + 1 consecutive cells along an axis all lie in phase 1."""
    ms = _as_ms(ms)
    axes = _axes(ms, axis)
    _check_rmax(ms, r_max, axes)
    ind = ms.phase.astype(bool)
    vals = np.zeros(r_max + 1)
    for ax in axes:
        n = ms.shape[ax]
        run = ind.copy()
        vals[0] += run.mean()
        for r in range(1, r_max + 1):
            if ms.periodic:
                run &= np.roll(ind, -r, axis=ax)
            else:
                run = _head(run, n - r, ax) & _tail(ind, r, ax)
            vals[r] += run.mean()
    return DescriptorCurve(np.arange(r_max + 1), vals / len(axes))


def mean_curve(curves) -> DescriptorCurve:
    curves = list(curves)
    if not curves:
        raise ValidationError("no curves to average")
    return DescriptorCurve(curves[0].r.copy(), np.mean([c.value for c in curves], axis=0))


def curve_gap(a: DescriptorCurve, b: DescriptorCurve) -> float:
    """Mean absolute difference of two curves over their common r."""
    n = min(len(a), len(b))
    return float(np.mean(np.abs(a.value[:n] - b.value[:n])))
