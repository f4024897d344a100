"""Procedural two-phase microstructure generators (2-D and 3-D).

Every generator is a pure function of its :class:`GenSpec`: same spec, same grid.
Anisotropy vectors are given in (x, y, z) order where x is the last array axis
(image columns), y the one before it (rows), and so on.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .descriptors import Microstructure
from .errors import ValidationError

KINDS = ("inclusions", "fibers", "chessboard", "voronoi", "harmonic", "texture", "spinodal", "fractal")


@dataclass(frozen=True)
class GenSpec:
    kind: str = "inclusions"
    shape: tuple = (64, 64)
    target_fraction: float = 0.3
    seed: int = 0
    periodic: bool = True
    # inclusions / fibers
    radius_range: tuple = (4.0, 6.0)
    aspect: float = 3.0
    orientation: Optional[float] = None
    max_attempts: int = 20000
    # chessboard
    cell_size: int = 8
    # voronoi
    n_sites: int = 16
    labels: Optional[tuple] = None
    # harmonic / texture / spinodal
    correlation_length: float = 4.0
    anisotropy: Optional[tuple] = None
    band_width: float = 0.1
    n_harmonics: int = 128
    # fractal
    octaves: int = 4
    base_lattice: int = 4

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if self.kind not in KINDS:
            raise ValidationError(f"unknown generator kind {self.kind!r}; choose from {KINDS}")
        if len(self.shape) not in (2, 3) or min(self.shape) < 1:
            raise ValidationError(f"shape must be 2-D or 3-D with positive extents, got {self.shape}")
        if self.kind not in ("chessboard",) and not (self.labels is not None and self.kind == "voronoi"):
            if not 0.0 < self.target_fraction < 1.0:
                raise ValidationError("target_fraction must be in (0, 1)")

    @property
    def dims(self) -> int:
        return len(self.shape)

    def to_dict(self) -> dict:
        return asdict(self)


def generate(spec: GenSpec) -> Microstructure:
    """Dispatch on ``spec.kind``."""
    fn = {
        "inclusions": gen_inclusions,
        "fibers": gen_inclusions,
        "chessboard": gen_chessboard,
        "voronoi": gen_voronoi,
        "harmonic": gen_harmonic_field,
        "texture": gen_harmonic_field,
        "spinodal": gen_harmonic_field,
        "fractal": gen_fractal_noise,
    }[spec.kind]
    return fn(spec)


def _quantile_threshold(field: np.ndarray, fraction: float) -> np.ndarray:
    """Mark the round(fraction * N) largest cells as phase 1."""
    n_on = int(round(fraction * field.size))
    order = np.argsort(-field.ravel(), kind="stable")
    phase = np.zeros(field.size, dtype=np.uint8)
    phase[order[:n_on]] = 1
    return phase.reshape(field.shape)


# --------------------------------------------------------------------------- inclusions


def _stamp_indices(center, offsets, shape, periodic):
    pts = np.asarray(center)[None, :] + offsets
    if periodic:
        pts = pts % np.asarray(shape)
    else:
        keep = np.all((pts >= 0) & (pts < np.asarray(shape)), axis=1)
        pts = pts[keep]
    return tuple(pts.T)


def _ball_offsets(radius: float, dims: int) -> np.ndarray:
    R = int(np.ceil(radius))
    grid = np.stack(np.meshgrid(*[np.arange(-R, R + 1)] * dims, indexing="ij"), -1).reshape(-1, dims)
    return grid[(grid ** 2).sum(1) < radius ** 2]


def _random_rotation(dims: int, rng) -> np.ndarray:
    if dims == 2:
        a = rng.uniform(0, np.pi)
        return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _ellipsoid_offsets(radius: float, aspect: float, rot: np.ndarray) -> np.ndarray:
    dims = rot.shape[0]
    semi = np.full(dims, float(radius))
    semi[-1] = radius * aspect  # long axis along the last (x) direction before rotation
    R = int(np.ceil(semi.max()))
    grid = np.stack(np.meshgrid(*[np.arange(-R, R + 1)] * dims, indexing="ij"), -1).reshape(-1, dims)
    local = grid @ rot  # rotate into the body frame
    return grid[((local / semi) ** 2).sum(1) < 1.0]


def place_inclusions(spec: GenSpec):
    """Random sequential addition of non-overlapping inclusions.

    Returns ``(phase, placements)`` where each placement is ``(center, radius)``.
    Disks/spheres are tested analytically (center distance >= r_i + r_j, periodic
    minimum image); fibers/ellipsoids are tested on the raster.
    """
    r_lo, r_hi = spec.radius_range
    if not 0 < r_lo <= r_hi:
        raise ValidationError("radius_range must be positive and ordered")
    fibers = spec.kind == "fibers"
    if not fibers and spec.target_fraction >= 0.5:
        raise ValidationError("non-overlapping inclusions need target_fraction < 0.5")
    rng = np.random.default_rng(spec.seed)
    shape = np.asarray(spec.shape)
    phase = np.zeros(spec.shape, dtype=np.uint8)
    centers = np.zeros((0, spec.dims))
    radii = np.zeros(0)
    placements = []
    target = spec.target_fraction * phase.size
    filled = 0
    failures = 0
    while filled < target:
        if failures >= spec.max_attempts:
            raise ValidationError(
                f"could not place inclusion after {failures} attempts at fraction {filled / phase.size:.3f}; "
                "target_fraction is infeasible for this radius range")
        c = rng.integers(0, shape)
        r = rng.uniform(r_lo, r_hi)
        if fibers:
            rot = (_random_rotation(spec.dims, rng) if spec.orientation is None
                   else _fixed_rotation(spec.dims, spec.orientation))
            idx = _stamp_indices(c, _ellipsoid_offsets(r, spec.aspect, rot), spec.shape, spec.periodic)
            if phase[idx].any():
                failures += 1
                continue
        else:
            if len(radii):
                d = centers - c
                if spec.periodic:
                    d = d - shape * np.round(d / shape)
                if np.any((d ** 2).sum(1) < (radii + r) ** 2):
                    failures += 1
                    continue
            idx = _stamp_indices(c, _ball_offsets(r, spec.dims), spec.shape, spec.periodic)
        failures = 0
        phase[idx] = 1
        filled = int(phase.sum())
        centers = np.vstack([centers, c])
        radii = np.append(radii, r)
        placements.append((c.copy(), float(r)))
    return phase, placements


def _fixed_rotation(dims: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.eye(dims)
    rot[-2:, -2:] = [[c, -s], [s, c]]
    return rot


def gen_inclusions(spec: GenSpec) -> Microstructure:
    phase, _ = place_inclusions(spec)
    return Microstructure(phase, spec.periodic)


# --------------------------------------------------------------------------- chessboard


def gen_chessboard(spec: GenSpec) -> Microstructure:
    cell = int(spec.cell_size)
    if cell < 1 or any(n % cell for n in spec.shape):
        raise ValidationError(f"cell size {cell} must divide every extent of {spec.shape}")
    counts = [n // cell for n in spec.shape]
    if np.prod(counts) % 2:
        raise ValidationError("an odd number of cells cannot split evenly into both phases")
    idx = np.indices(spec.shape) // cell
    return Microstructure((idx.sum(0) % 2).astype(np.uint8), spec.periodic)


# --------------------------------------------------------------------------- voronoi


def _grid_graph_components(labels: np.ndarray, periodic: bool):
    """4-/6-adjacency components of equal-label cells."""
    n = labels.size
    flat_idx = np.arange(n).reshape(labels.shape)
    rows, cols = [], []
    for ax in range(labels.ndim):
        if periodic:
            nb = np.roll(flat_idx, -1, axis=ax)
            same = labels == np.roll(labels, -1, axis=ax)
            rows.append(flat_idx[same])
            cols.append(nb[same])
        else:
            a = np.take(flat_idx, np.arange(labels.shape[ax] - 1), axis=ax)
            b = np.take(flat_idx, np.arange(1, labels.shape[ax]), axis=ax)
            same = labels.ravel()[a] == labels.ravel()[b]
            rows.append(a[same])
            cols.append(b[same])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(r.size, dtype=np.int8), (r, c)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    return comp.reshape(labels.shape)


def _make_cells_connected(labels: np.ndarray, periodic: bool) -> np.ndarray:
    """Reassign stray fragments so that every cell is a single connected region."""
    labels = labels.copy()
    for _ in range(100):
        comp = _grid_graph_components(labels, periodic)
        keep = {}
        sizes = np.bincount(comp.ravel())
        for lab, cm in zip(labels.ravel(), comp.ravel()):
            if lab not in keep or sizes[cm] > sizes[keep[lab]]:
                keep[lab] = cm
        main = np.isin(comp, list(keep.values()))
        if main.all():
            return labels
        stray = np.argwhere(~main)
        for p in stray:
            nbrs = []
            for ax in range(labels.ndim):
                for step in (-1, 1):
                    q = p.copy()
                    q[ax] += step
                    if periodic:
                        q[ax] %= labels.shape[ax]
                    elif not 0 <= q[ax] < labels.shape[ax]:
                        continue
                    if main[tuple(q)]:
                        nbrs.append(labels[tuple(q)])
            if nbrs:
                vals, cnt = np.unique(nbrs, return_counts=True)
                labels[tuple(p)] = vals[np.argmax(cnt)]
    return labels


def voronoi_cells(spec: GenSpec) -> np.ndarray:
    """Nearest-site cell index per grid cell (periodic metric when periodic)."""
    if spec.n_sites < 2:
        raise ValidationError("voronoi needs at least 2 sites")
    rng = np.random.default_rng(spec.seed)
    shape = np.asarray(spec.shape, dtype=np.float64)
    sites = rng.uniform(0.0, 1.0, size=(spec.n_sites, spec.dims)) * shape
    tree = cKDTree(sites, boxsize=shape if spec.periodic else None)
    pts = np.indices(spec.shape).reshape(spec.dims, -1).T.astype(np.float64)
    _, nearest = tree.query(pts)
    cells = nearest.reshape(spec.shape)
    return _make_cells_connected(cells, spec.periodic)


def gen_voronoi(spec: GenSpec) -> Microstructure:
    cells = voronoi_cells(spec)
    if spec.labels is not None:
        lab = np.asarray(spec.labels, dtype=np.uint8)
        if lab.shape != (spec.n_sites,):
            raise ValidationError("labels must give one phase per site")
        return Microstructure(lab[cells], spec.periodic)
    # greedy: visit cells in random order, switch a cell on if it moves the fraction toward the target
    rng = np.random.default_rng([spec.seed, 1])
    area = np.bincount(cells.ravel(), minlength=spec.n_sites) / cells.size
    lab = np.zeros(spec.n_sites, dtype=np.uint8)
    frac = 0.0
    for k in rng.permutation(spec.n_sites):
        if abs(frac + area[k] - spec.target_fraction) < abs(frac - spec.target_fraction):
            lab[k] = 1
            frac += area[k]
    return Microstructure(lab[cells], spec.periodic)


# --------------------------------------------------------------------------- harmonic fields


def _axis_scale(spec: GenSpec) -> np.ndarray:
    """Per-array-axis correlation stretch from an (x, y, z)-ordered anisotropy vector."""
    aniso = spec.anisotropy
    if aniso is None:
        aniso = (4.0, 1.0, 1.0)[: spec.dims] if spec.kind == "texture" else (1.0,) * spec.dims
    aniso = np.asarray(aniso, dtype=np.float64)
    if aniso.shape != (spec.dims,) or np.any(aniso <= 0):
        raise ValidationError(f"anisotropy must have {spec.dims} positive entries")
    return aniso[::-1]


def harmonic_frequencies(spec: GenSpec, rng) -> np.ndarray:
    """Wave vectors (n_harmonics, dims) in array-axis order."""
    ell = float(spec.correlation_length)
    if ell <= 0:
        raise ValidationError("correlation_length must be > 0")
    M, d = spec.n_harmonics, spec.dims
    if spec.kind == "spinodal":
        k0 = 2.0 * np.pi / ell
        mag = np.abs(rng.normal(k0, spec.band_width * k0, size=M))
        dirs = rng.standard_normal((M, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        omega = dirs * mag[:, None]
    else:
        # Gaussian spectral density <-> exp(-r^2 / (2 ell^2)) covariance
        omega = rng.standard_normal((M, d)) / ell
        omega /= _axis_scale(spec)
    if spec.periodic:
        base = 2.0 * np.pi / np.asarray(spec.shape, dtype=np.float64)
        omega = np.round(omega / base) * base
    return omega


def harmonic_field(spec: GenSpec) -> np.ndarray:
    """Continuous field sum_m cos(w_m . x + phi_m) / sqrt(M / 2)."""
    if spec.n_harmonics < 8:
        raise ValidationError("need at least 8 harmonics")
    rng = np.random.default_rng(spec.seed)
    omega = harmonic_frequencies(spec, rng)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=spec.n_harmonics)
    coords = [np.arange(n, dtype=np.float64) for n in spec.shape]
    field = np.zeros(spec.shape, dtype=np.complex128)
    for m in range(spec.n_harmonics):
        term = np.exp(1j * phi[m])
        for ax, x in enumerate(coords):
            shp = [1] * spec.dims
            shp[ax] = -1
            term = term * np.exp(1j * omega[m, ax] * x).reshape(shp)
        field += term
    return field.real / np.sqrt(spec.n_harmonics / 2.0)


def gen_harmonic_field(spec: GenSpec) -> Microstructure:
    return Microstructure(_quantile_threshold(harmonic_field(spec), spec.target_fraction), spec.periodic)


# --------------------------------------------------------------------------- fractal value noise


def _smoothstep(u):
    return u * u * (3.0 - 2.0 * u)


def value_noise(shape: Sequence[int], lattice: int, rng) -> np.ndarray:
    """Periodic value noise: random lattice values, smoothstep-interpolated."""
    dims = len(shape)
    values = rng.uniform(-1.0, 1.0, size=(lattice,) * dims)
    lo, hi, w = [], [], []
    for n in shape:
        u = np.arange(n, dtype=np.float64) * lattice / n
        i0 = np.floor(u).astype(int)
        lo.append(i0 % lattice)
        hi.append((i0 + 1) % lattice)
        w.append(_smoothstep(u - i0))
    out = np.zeros(tuple(shape))
    for corner in range(2 ** dims):
        idx, weight = [], np.ones(tuple(shape))
        for ax in range(dims):
            upper = (corner >> ax) & 1
            idx.append(hi[ax] if upper else lo[ax])
            wa = w[ax] if upper else 1.0 - w[ax]
            shp = [1] * dims
            shp[ax] = -1
            weight = weight * wa.reshape(shp)
        out += weight * values[np.ix_(*idx)]
    return out


def fractal_field(spec: GenSpec) -> np.ndarray:
    if spec.octaves < 1:
        raise ValidationError("octaves must be >= 1")
    rng = np.random.default_rng(spec.seed)
    field = np.zeros(spec.shape)
    amp, lattice = 1.0, spec.base_lattice
    for _ in range(spec.octaves):
        field += amp * value_noise(spec.shape, lattice, rng)
        amp *= 0.5
        lattice *= 2
    return field


def gen_fractal_noise(spec: GenSpec) -> Microstructure:
    return Microstructure(_quantile_threshold(fractal_field(spec), spec.target_fraction), spec.periodic)


# --------------------------------------------------------------------------- datasets


def sample_seeds(seed: int, count: int) -> list:
    """Independent 64-bit per-sample seeds split from a dataset seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def _generate_phase(spec: GenSpec) -> np.ndarray:
    return generate(spec).phase


def worker_count() -> int:
    """Process count for dataset generation, from ``MICRODIFF_WORKERS`` (default 1)."""
    raw = os.environ.get("MICRODIFF_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"MICRODIFF_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"MICRODIFF_WORKERS must be >= 1, got {n}")
    return n


def generate_dataset(spec: GenSpec, count: int, seed: Optional[int] = None, workers: Optional[int] = None):
    """``count`` structures with seeds split from ``seed`` (default ``spec.seed``)."""
    seeds = sample_seeds(spec.seed if seed is None else seed, count)
    specs = [replace(spec, seed=s) for s in seeds]
    workers = worker_count() if workers is None else workers
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(workers) as pool:
            phases = list(pool.map(_generate_phase, specs, chunksize=max(1, count // (4 * workers))))
    else:
        phases = [_generate_phase(s) for s in specs]
    return [Microstructure(p, spec.periodic) for p in phases], seeds


def grid_hash(phase: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(phase.shape).encode())
    h.update(np.ascontiguousarray(phase, dtype=np.uint8).tobytes())
    return h.hexdigest()
