"""Phase-space states, spatial domains and the inflow/outflow boundary split.

A state is a position, a unit direction and an energy.  The slab geometry is
the z axis of the box geometry with unbounded lateral extent, so both modes
share one 3-vector representation; in 1D mode the direction is (0, 0, +-1).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

BOUNDARY_TOL = 1e-12


@dataclass(frozen=True)
class PhaseState:
    position: np.ndarray
    direction: np.ndarray
    energy: float
    alive: bool = True

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=float).reshape(3))

    @classmethod
    def at_depth(cls, z: float, energy: float, sign: float = 1.0) -> "PhaseState":
        return cls(np.array([0.0, 0.0, z]), np.array([0.0, 0.0, np.sign(sign) or 1.0]), energy)

    @classmethod
    def cemetery(cls) -> "PhaseState":
        return cls(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.0, alive=False)

    @property
    def depth(self) -> float:
        return float(self.position[2])


@dataclass(frozen=True)
class EnergyWindow:
    e_min: float = 1.0
    e_max: float = 250.0

    def __post_init__(self):
        if not 0 < self.e_min < self.e_max:
            raise ValueError(f"need 0 < e_min < e_max (got {self.e_min}, {self.e_max})")


class BoundaryClass(enum.Enum):
    INTERIOR = "Interior"
    GAMMA_MINUS = "GammaMinus"
    GAMMA_PLUS = "GammaPlus"


@dataclass(frozen=True)
class SpatialDomain:
    """A slab ``0 <= z <= L`` or a box centred laterally on the beam axis.

    ``extent`` is ``(L,)`` for ``slab-1d`` and ``(X, Y, Z)`` for ``box-3d``;
    the box spans ``[-X/2, X/2] x [-Y/2, Y/2] x [0, Z]``.
    """

    kind: str
    extent: tuple[float, ...]
    lo: np.ndarray = field(init=False, repr=False)
    hi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ext = tuple(float(e) for e in self.extent)
        if self.kind == "slab-1d":
            if len(ext) != 1:
                raise ValueError("slab-1d extent is (length,)")
            lo = np.array([-np.inf, -np.inf, 0.0])
            hi = np.array([np.inf, np.inf, ext[0]])
        elif self.kind == "box-3d":
            if len(ext) != 3:
                raise ValueError("box-3d extent is (X, Y, Z)")
            lo = np.array([-ext[0] / 2, -ext[1] / 2, 0.0])
            hi = np.array([ext[0] / 2, ext[1] / 2, ext[2]])
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if any(e <= 0 for e in ext):
            raise ValueError("all extents must be > 0")
        object.__setattr__(self, "extent", ext)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def slab(cls, length: float) -> "SpatialDomain":
        return cls("slab-1d", (length,))

    @classmethod
    def box(cls, x: float, y: float, z: float) -> "SpatialDomain":
        return cls("box-3d", (x, y, z))

    @property
    def length(self) -> float:
        return self.extent[-1]

    def _tol(self) -> np.ndarray:
        scale = np.where(np.isfinite(self.hi), np.abs(self.hi) + np.abs(self.lo), 1.0)
        return BOUNDARY_TOL * np.maximum(scale, 1.0)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        tol = self._tol()
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def boundary_normals(self, x) -> list[np.ndarray]:
        """Outward normals of every face the point lies on (empty if interior)."""
        x = np.asarray(x, dtype=float)
        tol = self._tol()
        normals = []
        for axis in range(3):
            if np.isfinite(self.lo[axis]) and abs(x[axis] - self.lo[axis]) <= tol[axis]:
                n = np.zeros(3)
                n[axis] = -1.0
                normals.append(n)
            if np.isfinite(self.hi[axis]) and abs(x[axis] - self.hi[axis]) <= tol[axis]:
                n = np.zeros(3)
                n[axis] = 1.0
                normals.append(n)
        return normals


def classify(state: PhaseState, domain: SpatialDomain, window: EnergyWindow) -> BoundaryClass:
    """Assign a live state to exactly one of Interior, GammaMinus, GammaPlus.

    Where the two boundary sets overlap the tie-break order is: energy
    exhaustion (E <= e_min) -> GammaPlus; then any face with w.n >= 0 ->
    GammaPlus; then a face with w.n < 0 or E >= e_max -> GammaMinus.
    The tie w.n = 0 belongs to GammaPlus.
    """
    if not state.alive:
        raise ValueError("the cemetery state has no boundary class")
    if not domain.contains(state.position):
        raise ValueError(f"position {state.position} lies outside the domain")
    if state.energy <= window.e_min:
        return BoundaryClass.GAMMA_PLUS
    normals = domain.boundary_normals(state.position)
    if normals:
        if any(float(state.direction @ n) >= 0.0 for n in normals):
            return BoundaryClass.GAMMA_PLUS
        return BoundaryClass.GAMMA_MINUS
    if state.energy >= window.e_max:
        return BoundaryClass.GAMMA_MINUS
    return BoundaryClass.INTERIOR


def exit_test(
    previous: PhaseState, next_: PhaseState, domain: SpatialDomain, window: EnergyWindow
) -> PhaseState | None:
    """Locate where a step leaves the domain or exhausts its energy.

    Returns ``None`` if ``next_`` is still interior, otherwise the state at the
    first crossing along the straight step segment (linear interpolation of
    position and energy).  The crossing keeps the pre-step direction, which is
    the direction that carried the particle out.
    """
    frac, axis, side = _crossing_fraction(previous, next_, domain, window)
    if frac is None:
        return None
    pos = previous.position + frac * (next_.position - previous.position)
    energy = previous.energy + frac * (next_.energy - previous.energy)
    if axis is None:
        energy = window.e_min
    else:
        pos[axis] = domain.hi[axis] if side > 0 else domain.lo[axis]
    return PhaseState(pos, previous.direction.copy(), float(energy))


def _crossing_fraction(previous, next_, domain, window):
    best, best_axis, best_side = None, None, 0
    if next_.energy <= window.e_min:
        de = previous.energy - next_.energy
        best = 1.0 if de <= 0 else (previous.energy - window.e_min) / de
    dx = next_.position - previous.position
    for axis in range(3):
        for bound, side in ((domain.hi[axis], 1), (domain.lo[axis], -1)):
            if not np.isfinite(bound):
                continue
            outside = next_.position[axis] > bound if side > 0 else next_.position[axis] < bound
            if outside and dx[axis] != 0:
                f = (bound - previous.position[axis]) / dx[axis]
                f = min(max(f, 0.0), 1.0)
                if best is None or f < best:
                    best, best_axis, best_side = f, axis, side
    return best, best_axis, best_side


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.sqrt(v @ v)
