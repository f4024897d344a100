"""BGK lattice-Boltzmann flow through binary porous media and Darcy permeability.

Flow is driven by a uniform body force (Guo forcing) along one array axis; the
domain is periodic, solid faces use half-way bounce-back. Optional side walls
close the domain boundaries parallel to the flow (used for channel and duct
benchmarks). Everything is in lattice units with rho_0 = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DivergenceError, ValidationError


@dataclass(frozen=True)
class Lattice:
    name: str
    c: np.ndarray  # (Q, D) integer velocities in array-axis order
    w: np.ndarray  # (Q,) weights
    opp: np.ndarray  # (Q,) index of -c_i

    @property
    def Q(self) -> int:
        return len(self.w)

    @property
    def D(self) -> int:
        return self.c.shape[1]


def _lattice(name, c, w) -> Lattice:
    c = np.asarray(c, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    opp = np.array([int(np.flatnonzero((c == -ci).all(1))[0]) for ci in c])
    return Lattice(name, c, w, opp)


D2Q9 = _lattice(
    "D2Q9",
    [(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1)],
    [4 / 9] + [1 / 9] * 4 + [1 / 36] * 4,
)

D3Q19 = _lattice(
    "D3Q19",
    [(0, 0, 0),
     (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
     (1, 1, 0), (-1, -1, 0), (1, -1, 0), (-1, 1, 0),
     (1, 0, 1), (-1, 0, -1), (1, 0, -1), (-1, 0, 1),
     (0, 1, 1), (0, -1, -1), (0, 1, -1), (0, -1, 1)],
    [1 / 3] + [1 / 18] * 6 + [1 / 36] * 12,
)

LATTICES = {"D2Q9": D2Q9, "D3Q19": D3Q19}


@dataclass
class LbmState:
    lattice: Lattice
    f: np.ndarray  # (Q, *shape)
    solid: np.ndarray  # bool (*shape)
    tau: float = 1.0
    drive: float = 1e-5  # body-force density = pressure gradient magnitude
    axis: int = 0
    core: tuple = ()  # slices of the user domain inside the (possibly wall-padded) grid
    steps: int = 0
    converged: Optional[bool] = None
    history: list = field(default_factory=list)

    @property
    def shape(self) -> tuple:
        return self.solid.shape

    @property
    def force(self) -> np.ndarray:
        F = np.zeros(self.lattice.D)
        F[self.axis] = self.drive
        return F

    @property
    def viscosity(self) -> float:
        return (self.tau - 0.5) / 3.0


def make_state(solid, tau: float = 1.0, drive: float = 1e-5, axis: int = 0, walls: bool = False,
               lattice: Optional[Lattice] = None) -> LbmState:
    """Fluid at rest with unit density on every non-solid node.

    ``walls=True`` surrounds the domain with a solid layer on every axis except
    the flow axis. Fluid nodes with no fluid neighbour at all are made inert
    (treated as solid): they cannot carry flow.
    """
    solid = np.asarray(solid, dtype=bool)
    if solid.ndim not in (2, 3):
        raise ValidationError("LBM domains are 2-D or 3-D")
    if not 0 <= axis < solid.ndim:
        raise ValidationError(f"flow axis {axis} out of range")
    if tau <= 0.5:
        raise ValidationError("relaxation time must exceed 1/2")
    lat = lattice or (D2Q9 if solid.ndim == 2 else D3Q19)
    if lat.D != solid.ndim:
        raise ValidationError(f"{lat.name} does not match {solid.ndim}-D data")
    core = [slice(None)] * solid.ndim
    if walls:
        pad = [(0, 0) if a == axis else (1, 1) for a in range(solid.ndim)]
        solid = np.pad(solid, pad, constant_values=True)
        core = [slice(None) if a == axis else slice(1, -1) for a in range(solid.ndim)]
    solid = solid.copy()
    fluid = ~solid
    caged = fluid.copy()
    for ci in lat.c[1:]:
        caged &= np.roll(solid, tuple(ci), axis=tuple(range(solid.ndim)))
    solid |= caged
    f = lat.w.reshape((-1,) + (1,) * solid.ndim) * (~solid)[None].astype(np.float64)
    return LbmState(lat, f, solid, tau=float(tau), drive=float(drive), axis=axis, core=tuple(core))


def macroscopic(st: LbmState):
    """Density and (half-force corrected) velocity; zero on solid nodes."""
    lat = st.lattice
    rho = st.f.sum(0)
    mom = np.tensordot(lat.c.T.astype(np.float64), st.f, axes=(1, 0))
    fluid = ~st.solid
    safe = np.where(fluid, rho, 1.0)
    F = st.force.reshape((-1,) + (1,) * st.solid.ndim)
    u = np.where(fluid[None], (mom + 0.5 * F) / safe[None], 0.0)
    return rho, u


def equilibrium(lat: Lattice, rho: np.ndarray, u: np.ndarray) -> np.ndarray:
    cu = np.tensordot(lat.c.astype(np.float64), u, axes=(1, 0))
    usq = (u ** 2).sum(0)
    w = lat.w.reshape((-1,) + (1,) * rho.ndim)
    return w * rho[None] * (1.0 + 3.0 * cu + 4.5 * cu ** 2 - 1.5 * usq[None])


def _axes(st):
    return tuple(range(st.solid.ndim))


def step(st: LbmState) -> LbmState:
    """One BGK collide-and-stream update (in place; the state is also returned)."""
    lat = st.lattice
    nd = st.solid.ndim
    fluid = ~st.solid
    rho, u = macroscopic(st)
    feq = equilibrium(lat, rho, u)
    c = lat.c.astype(np.float64)
    F = st.force
    cu = np.tensordot(c, u, axes=(1, 0))
    cF = c @ F
    uF = np.tensordot(F, u, axes=(0, 0))
    w = lat.w.reshape((-1,) + (1,) * nd)
    # Guo source: (1 - 1/2tau) w_i [3 (c_i - u) + 9 (c_i . u) c_i] . F
    source = (1.0 - 0.5 / st.tau) * w * (3.0 * (cF.reshape((-1,) + (1,) * nd) - uF[None]) + 9.0 * cu * cF.reshape((-1,) + (1,) * nd))
    post = st.f - (st.f - feq) / st.tau + source
    post *= fluid[None]

    new = np.empty_like(post)
    ax = _axes(st)
    for i, ci in enumerate(lat.c):
        new[i] = np.roll(post[i], tuple(ci), axis=ax)
        blocked = np.roll(st.solid, tuple(ci), axis=ax) & fluid
        new[i][blocked] = post[lat.opp[i]][blocked]
    new *= fluid[None]
    if not np.all(np.isfinite(new)):
        bad = np.argwhere(~np.isfinite(new))[0]
        raise DivergenceError(f"non-finite distribution at direction {bad[0]}, node {tuple(bad[1:])}")
    st.f = new
    st.steps += 1
    return st


def mean_velocity(st: LbmState) -> float:
    """Velocity along the flow axis averaged over the whole user domain (solids count as 0)."""
    _, u = macroscopic(st)
    return float(u[st.axis][st.core].mean())


def run_to_steady(st: LbmState, tol: float = 1e-8, max_steps: int = 100000, window: int = 100) -> LbmState:
    """Step until the mean velocity changes by less than ``tol`` (relative) over ``window`` steps.

    Sets ``st.converged``; a state that runs out of steps is returned with
    ``converged = False`` rather than raising.
    """
    if tol <= 0:
        raise ValidationError("tol must be > 0")
    if st.solid.all():
        st.converged = True
        return st
    prev = mean_velocity(st)
    st.history.append(prev)
    done = 0
    while done < max_steps:
        n = min(window, max_steps - done)
        for _ in range(n):
            step(st)
        done += n
        cur = mean_velocity(st)
        st.history.append(cur)
        if n == window and abs(cur - prev) <= tol * abs(cur) or (cur == 0.0 and prev == 0.0):
            st.converged = True
            return st
        prev = cur
    st.converged = False
    return st


def darcy_permeability(st: LbmState) -> float:
    """kappa = u_mean * mu / (dp/dx), mu = (tau - 1/2) / 3."""
    if st.drive == 0:
        raise ValidationError("permeability is undefined at zero drive")
    return mean_velocity(st) * st.viscosity / st.drive


def permeability(solid, axis: int = 0, tau: float = 1.0, drive: float = 1e-5, walls: bool = False,
                 tol: float = 1e-8, max_steps: int = 100000):
    """Convenience wrapper: build, converge, return ``(kappa, state)``."""
    st = run_to_steady(make_state(solid, tau, drive, axis, walls), tol, max_steps)
    return darcy_permeability(st), st


# --------------------------------------------------------------------------- classes

CLASS_EDGES = (0.2, 0.5, 1.5, 3.0, 5.0)


@dataclass(frozen=True)
class PermeabilityClass:
    index: int
    low: float
    high: float


def permeability_classes() -> list:
    edges = (0.0,) + CLASS_EDGES + (math.inf,)
    return [PermeabilityClass(i, edges[i], edges[i + 1]) for i in range(len(edges) - 1)]


def classify_permeability(kappa: float) -> PermeabilityClass:
    """Six-range labeler; a value on a shared edge belongs to the lower range."""
    if not kappa >= 0:
        raise ValidationError(f"permeability must be >= 0, got {kappa}")
    idx = sum(1 for e in CLASS_EDGES if kappa > e)
    return permeability_classes()[idx]
