"""Track-length fluence tallies, dose maps and discounted occupation estimates.

Fluence is the expected occupation density of tracks: the track length a
history spends in a (depth, energy[, direction]) bin divided by the bin
volume, averaged over histories.  In the slab geometry lengths are per unit
lateral area, so a fluence bin has units 1/(cm^2 MeV) per unit source weight
(per steradian as well when angular bins are used).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from protonplan.materials import Medium, Phantom, mean_stopping_power, stopping_power
from protonplan.phase_space import PhaseState

CAUSES = ("range-out", "spatial-exit", "max-length")


def _uniform_edges(edges, name: str) -> np.ndarray:
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2:
        raise ValueError(f"{name} edges need at least two entries")
    widths = np.diff(edges)
    if np.any(widths <= 0):
        raise ValueError(f"{name} edges must be strictly increasing")
    if not np.allclose(widths, widths[0], rtol=1e-9, atol=0.0):
        raise ValueError(f"{name} edges must be uniform")
    return edges


@dataclass(frozen=True)
class Grid:
    """Uniform depth x energy bins, optionally split into polar-angle bins.

    Angular bins are equal slices of ``cos(theta)`` about +z on [-1, 1], so
    each covers ``4 pi / n_angles`` steradians.  Depth edges start at 0.
    """

    z_edges: np.ndarray
    e_edges: np.ndarray
    n_angles: int = 1

    def __post_init__(self):
        z = _uniform_edges(self.z_edges, "depth")
        e = _uniform_edges(self.e_edges, "energy")
        if z[0] != 0.0:
            raise ValueError("depth edges must start at 0")
        if self.n_angles < 1:
            raise ValueError("n_angles must be >= 1")
        object.__setattr__(self, "z_edges", z)
        object.__setattr__(self, "e_edges", e)

    @classmethod
    def uniform(cls, length: float, n_z: int, e_min: float, e_max: float, n_e: int, n_angles: int = 1) -> "Grid":
        return cls(np.linspace(0.0, length, n_z + 1), np.linspace(e_min, e_max, n_e + 1), n_angles)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.n_z, self.n_e, self.n_angles

    @property
    def n_z(self) -> int:
        return self.z_edges.size - 1

    @property
    def n_e(self) -> int:
        return self.e_edges.size - 1

    @property
    def dz(self) -> float:
        return float(self.z_edges[1] - self.z_edges[0])

    @property
    def de(self) -> float:
        return float(self.e_edges[1] - self.e_edges[0])

    @property
    def d_omega(self) -> float:
        return 1.0 if self.n_angles == 1 else 4.0 * np.pi / self.n_angles

    @property
    def volume(self) -> float:
        return self.dz * self.de * self.d_omega

    @property
    def z_centers(self) -> np.ndarray:
        return 0.5 * (self.z_edges[1:] + self.z_edges[:-1])

    @property
    def e_centers(self) -> np.ndarray:
        return 0.5 * (self.e_edges[1:] + self.e_edges[:-1])

    def locate(self, z: float, energy: float, cos_z: float = 1.0) -> tuple[int, int, int] | None:
        iz = int(np.floor(z / self.dz))
        ie = int(np.floor((energy - self.e_edges[0]) / self.de))
        ic = min(max(int(np.floor((cos_z + 1.0) * 0.5 * self.n_angles)), 0), self.n_angles - 1)
        if 0 <= iz < self.n_z and 0 <= ie < self.n_e:
            return iz, ie, ic
        return None

    def kernel_vector(self) -> np.ndarray:
        return np.array([self.dz, self.n_z, self.e_edges[0], self.de, self.n_e, self.n_angles], dtype=float)


@dataclass(frozen=True)
class TrackEvent:
    """One straight segment of a track and the energy it lost along the way."""

    start: PhaseState
    end: PhaseState
    seg_len: float
    deposited_energy: float
    cause: str | None = None

    @property
    def terminal(self) -> bool:
        return self.cause is not None


@dataclass
class FluenceMap:
    """Per-bin track-length sums over histories with their sums of squares.

    ``scale`` is the total source weight the histories represent; values are
    ``scale * sum / (n_histories * volume)``.
    """

    grid: Grid
    track_sum: np.ndarray = None
    track_sq: np.ndarray = None
    n_histories: int = 0
    scale: float = 1.0
    overflow_length: float = 0.0
    overflow_segments: int = 0

    def __post_init__(self):
        if self.track_sum is None:
            self.track_sum = np.zeros(self.grid.shape)
        if self.track_sq is None:
            self.track_sq = np.zeros(self.grid.shape)

    @property
    def values(self) -> np.ndarray:
        if self.n_histories == 0:
            return np.zeros(self.grid.shape)
        return self.scale * self.track_sum / (self.n_histories * self.grid.volume)

    @property
    def stderr(self) -> np.ndarray:
        return self.scale * _stderr(self.track_sum, self.track_sq, self.n_histories) / self.grid.volume

    def angle_integrated(self) -> tuple[np.ndarray, np.ndarray]:
        """Fluence over (depth, energy) integrated over direction, with a
        conservative standard error (bins treated as fully correlated)."""
        dw = self.grid.d_omega
        return self.values.sum(axis=2) * dw, self.stderr.sum(axis=2) * dw

    def __add__(self, other: "FluenceMap") -> "FluenceMap":
        _check_mergeable(self, other)
        return FluenceMap(
            self.grid,
            self.track_sum + other.track_sum,
            self.track_sq + other.track_sq,
            self.n_histories + other.n_histories,
            self.scale,
            self.overflow_length + other.overflow_length,
            self.overflow_segments + other.overflow_segments,
        )


@dataclass
class DepositMap:
    """Per-depth-bin deposited energy sums over histories (direct dose tally)."""

    z_edges: np.ndarray
    energy_sum: np.ndarray = None
    energy_sq: np.ndarray = None
    n_histories: int = 0
    scale: float = 1.0
    overflow_energy: float = 0.0

    def __post_init__(self):
        self.z_edges = np.asarray(self.z_edges, dtype=float)
        n = self.z_edges.size - 1
        if self.energy_sum is None:
            self.energy_sum = np.zeros(n)
        if self.energy_sq is None:
            self.energy_sq = np.zeros(n)

    def dose(self, medium: Medium | Phantom) -> "DoseMap":
        """Deposited energy per unit mass: energy / (rho * bin width)."""
        rho = _density(medium, 0.5 * (self.z_edges[1:] + self.z_edges[:-1]))
        dz = np.diff(self.z_edges)
        if self.n_histories == 0:
            zero = np.zeros_like(dz)
            return DoseMap(self.z_edges, zero, zero.copy())
        mean = self.scale * self.energy_sum / self.n_histories
        se = self.scale * _stderr(self.energy_sum, self.energy_sq, self.n_histories)
        return DoseMap(self.z_edges, mean / (rho * dz), se / (rho * dz))

    def __add__(self, other: "DepositMap") -> "DepositMap":
        _check_mergeable(self, other)
        return DepositMap(
            self.z_edges,
            self.energy_sum + other.energy_sum,
            self.energy_sq + other.energy_sq,
            self.n_histories + other.n_histories,
            self.scale,
            self.overflow_energy + other.overflow_energy,
        )


@dataclass
class DoseMap:
    """Dose per depth bin [MeV/g per unit source weight] with standard errors."""

    z_edges: np.ndarray
    dose: np.ndarray
    stderr: np.ndarray = field(default=None)

    def __post_init__(self):
        self.z_edges = np.asarray(self.z_edges, dtype=float)
        self.dose = np.asarray(self.dose, dtype=float)
        if self.stderr is None:
            self.stderr = np.zeros_like(self.dose)

    @property
    def z_centers(self) -> np.ndarray:
        return 0.5 * (self.z_edges[1:] + self.z_edges[:-1])

    def peak_depth(self) -> float:
        return float(self.z_centers[int(np.argmax(self.dose))])


def _stderr(s: np.ndarray, sq: np.ndarray, n: int) -> np.ndarray:
    if n < 2:
        return np.zeros_like(s)
    mean = s / n
    var = np.maximum(sq / n - mean * mean, 0.0) * n / (n - 1)
    return np.sqrt(var / n)


def _check_mergeable(a, b):
    if type(a) is not type(b):
        raise TypeError("cannot merge different tally types")
    edges_a = a.grid.z_edges if hasattr(a, "grid") else a.z_edges
    edges_b = b.grid.z_edges if hasattr(b, "grid") else b.z_edges
    if (hasattr(a, "grid") and a.grid.shape != b.grid.shape) or not np.array_equal(edges_a, edges_b):
        raise ValueError("tallies are on different grids")
    if a.scale != b.scale:
        raise ValueError("tallies carry different source weights")


def _density(medium: Medium | Phantom, z: np.ndarray) -> np.ndarray:
    if isinstance(medium, Phantom):
        return np.array([medium.medium_at(zi).rho for zi in z])
    return np.full(np.shape(z), medium.rho)


def bin_stopping_power(medium: Medium, e_edges: np.ndarray, method: str = "mean") -> np.ndarray:
    """Stopping power assigned to each energy bin.

    ``"mean"`` is the harmonic mean over the bin (the exact energy loss per
    unit length averaged along a slowing-down track); ``"center"`` evaluates S
    at the bin centre.
    """
    e_edges = np.asarray(e_edges, dtype=float)
    if method == "mean":
        return mean_stopping_power(medium, e_edges[:-1], e_edges[1:])
    if method == "center":
        return stopping_power(medium, 0.5 * (e_edges[1:] + e_edges[:-1]))
    raise ValueError(f"unknown stopping-power method {method!r}")


def dose_weights(medium: Medium | Phantom, grid: Grid, method: str = "mean") -> np.ndarray:
    """Coefficients c[iz, ie] with dose[iz] = sum_ie c[iz, ie] * angle-integrated fluence[iz, ie]."""
    coeff = np.empty((grid.n_z, grid.n_e))
    for iz, zc in enumerate(grid.z_centers):
        m = medium.medium_at(zc) if isinstance(medium, Phantom) else medium
        coeff[iz] = bin_stopping_power(m, grid.e_edges, method) / m.rho * grid.de
    return coeff


def dose_from_fluence(fluence: FluenceMap, medium: Medium | Phantom, grid: Grid | None = None,
                      method: str = "mean") -> DoseMap:
    """Dose per depth bin as the sum over energy and angle of fluence x S/rho.

    The standard error treats the energy bins of one depth as fully
    correlated, which bounds the true error from above.
    """
    grid = grid or fluence.grid
    if grid.shape != fluence.grid.shape:
        raise ValueError("grid does not match the fluence map")
    phi, se = fluence.angle_integrated()
    c = dose_weights(medium, grid, method)
    return DoseMap(grid.z_edges, np.sum(c * phi, axis=1), np.sum(c * se, axis=1))


def deposit(events: Sequence[TrackEvent], grid: Grid, fluence: FluenceMap,
            deposits: DepositMap | None = None) -> None:
    """Score one history's track segments into ``fluence`` (and ``deposits``).

    Each segment adds its length to the bin holding its midpoint; segments
    outside the grid go to the overflow counters.  An empty sequence is not
    counted as a history.
    """
    events = [ev for ev in events if ev.start.alive]
    if not events:
        return
    length = {}
    energy = {}
    for ev in events:
        mid = 0.5 * (ev.start.position + ev.end.position)
        e_mid = 0.5 * (ev.start.energy + ev.end.energy)
        key = grid.locate(mid[2], e_mid, ev.start.direction[2])
        if key is None:
            fluence.overflow_length += ev.seg_len
            fluence.overflow_segments += 1
        else:
            length[key] = length.get(key, 0.0) + ev.seg_len
        iz = int(np.floor(mid[2] / grid.dz))
        if 0 <= iz < grid.n_z:
            energy[iz] = energy.get(iz, 0.0) + ev.deposited_energy
        elif deposits is not None:
            deposits.overflow_energy += ev.deposited_energy
    for key, v in length.items():
        fluence.track_sum[key] += v
        fluence.track_sq[key] += v * v
    fluence.n_histories += 1
    if deposits is not None:
        for iz, v in energy.items():
            deposits.energy_sum[iz] += v
            deposits.energy_sq[iz] += v * v
        deposits.n_histories += 1


def estimate_resolvent(v: Callable, lam: float, source, model, config, n: int,
                       stream_id: int = 0) -> tuple[float, float]:
    """Monte Carlo estimate of E[ integral of exp(-lam l) v(Y_l) dl ] along tracks.

    ``v(position, direction, energy)`` receives arrays of segment midpoints
    (shapes (m, 3), (m, 3), (m,)) and returns m values.  Each segment is
    discounted at its midpoint track length.  Returns (estimate, standard error).
    """
    from protonplan.sde_engine import iter_track_chunks

    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    per_track = np.zeros(n)
    for ev in iter_track_chunks(source, model, config, n, stream_id=stream_id, chunk=4096):
        if ev["particle"].size == 0:
            continue
        # segments arrive in track order per particle; midpoint track length from a per-particle cumsum
        pid, h = ev["particle"], ev["seg_len"]
        csum = np.cumsum(h)
        first = np.searchsorted(pid, pid, side="left")
        ell_mid = csum - 0.5 * h - np.where(first > 0, csum[first - 1], 0.0)
        mid_x = 0.5 * (ev["x0"] + ev["x1"])
        mid_e = 0.5 * (ev["e0"] + ev["e1"])
        vals = np.asarray(v(mid_x, ev["dir0"], mid_e), dtype=float)
        per_track += np.bincount(pid, weights=np.exp(-lam * ell_mid) * vals * h, minlength=n)
    per_track *= source.total_weight
    mean = float(per_track.mean())
    se = float(per_track.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return mean, se


def _fmt(x: float) -> str:
    return repr(float(x))


def write_fluence_csv(path, grid: Grid, values: np.ndarray, stderr: np.ndarray | None = None) -> None:
    """Depth-major rows of (z_lo, z_hi, E_lo, E_hi, fluence, fluence_stderr).

    ``values`` is angle-integrated, shape (n_z, n_e).
    """
    values = np.asarray(values, dtype=float)
    stderr = np.zeros_like(values) if stderr is None else np.asarray(stderr, dtype=float)
    lines = ["z_lo[cm],z_hi[cm],E_lo[MeV],E_hi[MeV],fluence[1/(cm2 MeV)],fluence_stderr[1/(cm2 MeV)]"]
    z, e = grid.z_edges, grid.e_edges
    for i in range(grid.n_z):
        for j in range(grid.n_e):
            lines.append(",".join(_fmt(x) for x in (z[i], z[i + 1], e[j], e[j + 1], values[i, j], stderr[i, j])))
    _write_lines(path, lines)


def write_dose_csv(path, dose: DoseMap) -> None:
    """Rows of (z_lo, z_hi, dose, dose_stderr)."""
    lines = ["z_lo[cm],z_hi[cm],dose[MeV/g],dose_stderr[MeV/g]"]
    z = dose.z_edges
    for i in range(dose.dose.size):
        lines.append(",".join(_fmt(x) for x in (z[i], z[i + 1], dose.dose[i], dose.stderr[i])))
    _write_lines(path, lines)


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Header names and the numeric body of a file written by this module."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    body = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, body


def _write_lines(path, lines: list[str]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
