"""Monte Carlo transport of protons parameterized by track length.

Between collisions a proton loses energy continuously at the stopping power,
moves along its direction and (in 3D) diffuses on the unit sphere:

    dE = -S dl,   dx = w dl,   dw = -mu^2 w dl + mu w x dB

integrated with Euler-Maruyama and renormalization of ``w``.  Collisions
arrive on an exponential clock at a global rate bound and are thinned to the
local rate ``sigma_e + sigma_ne``.  A track ends when its energy reaches
``e_min`` (range-out), when it leaves the domain, or at ``max_track_len``.

Batches are split into fixed-size chunks; each chunk is scored into private
buffers and the chunks are summed in index order, so results do not depend
on the number of worker threads.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from protonplan import _kernel as K
from protonplan.materials import Medium, Phantom, csda_path, stopping_power
from protonplan.phase_space import (
    BoundaryClass,
    EnergyWindow,
    PhaseState,
    SpatialDomain,
    classify,
    normalize,
)
from protonplan.scattering import CrossSections
from protonplan.tally import DepositMap, FluenceMap, Grid, TrackEvent


class ConfigError(ValueError):
    """Invalid or inconsistent engine configuration."""


@dataclass(frozen=True)
class SimConfig:
    step_len: float = 0.01
    mu: float = 0.0
    max_track_len: float = 100.0
    seed: int = 0
    n_particles: int = 10_000
    mode: str = "1d"
    chunk_size: int = 2048

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if not self.step_len > 0:
            errors.append(f"step_len must be > 0 (got {self.step_len})")
        if not self.max_track_len >= self.step_len:
            errors.append("max_track_len must be >= step_len")
        if not self.mu >= 0:
            errors.append(f"mu must be >= 0 (got {self.mu})")
        if self.n_particles < 1:
            errors.append(f"n_particles must be >= 1 (got {self.n_particles})")
        if self.mode not in ("1d", "3d"):
            errors.append(f"mode must be '1d' or '3d' (got {self.mode!r})")
        if not 0 <= self.seed < 2**64:
            errors.append("seed must be a 64-bit unsigned integer")
        if self.chunk_size < 1:
            errors.append("chunk_size must be >= 1")
        return errors


@dataclass(frozen=True)
class Beam:
    """A pencil beam with a Gaussian energy spread.

    ``position`` is the launch point (on the entrance face for ordinary
    beams); in 3D the lateral coordinates are smeared by ``lateral_sigma``.
    """

    energy_mean: float
    energy_sigma: float = 0.0
    weight: float = 1.0
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)
    lateral_sigma: float = 0.0

    def __post_init__(self):
        if self.energy_sigma < 0 or self.weight < 0 or self.lateral_sigma < 0:
            raise ConfigError("beam sigma, weight and lateral_sigma must be >= 0")
        d = np.asarray(self.direction, dtype=float)
        if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ConfigError("beam direction must be a unit 3-vector")


@dataclass(frozen=True)
class Source:
    """A weighted mixture of beams; a history picks beam k with probability w_k / sum(w)."""

    beams: tuple[Beam, ...]

    def __post_init__(self):
        object.__setattr__(self, "beams", tuple(self.beams))
        if not self.beams:
            raise ConfigError("source has no beams")
        if self.total_weight <= 0:
            raise ConfigError("source weights sum to zero")

    @classmethod
    def pencil(cls, energy: float, sigma: float = 0.0, weight: float = 1.0) -> "Source":
        return cls((Beam(energy, sigma, weight),))

    @property
    def total_weight(self) -> float:
        return float(sum(b.weight for b in self.beams))

    def check_window(self, window: EnergyWindow) -> None:
        for k, b in enumerate(self.beams):
            if not window.e_min < b.energy_mean <= window.e_max:
                raise ConfigError(
                    f"beam {k} energy {b.energy_mean} MeV lies outside ({window.e_min}, {window.e_max}]"
                )


@dataclass(frozen=True)
class TransportModel:
    """Immutable problem data shared by every history of a batch."""

    phantom: Phantom
    domain: SpatialDomain
    window: EnergyWindow = field(default_factory=EnergyWindow)
    xs: CrossSections | None = None

    def __post_init__(self):
        if self.xs is None:
            object.__setattr__(self, "xs", CrossSections.none(self.phantom))
        if self.xs.phantom.starts != self.phantom.starts:
            raise ConfigError("cross-section layers do not match the phantom")

    @classmethod
    def slab(cls, medium: Medium, length: float, window: EnergyWindow | None = None,
             xs: CrossSections | None = None) -> "TransportModel":
        phantom = Phantom.homogeneous(medium)
        if xs is not None and xs.phantom != phantom:
            xs = CrossSections(phantom, xs.sigma_e, xs.sigma_ne, xs.kernels, xs.e_ref, xs.q_e, xs.q_ne)
        return cls(phantom, SpatialDomain.slab(length), window or EnergyWindow(), xs)

    def rate_bound(self) -> float:
        return self.xs.rate_bound(self.window) if self.xs.active else 0.0


@dataclass
class BatchResult:
    fluence: FluenceMap
    deposits: DepositMap
    released: np.ndarray
    balance: dict
    n: int
    wall_time: float

    def direct_dose(self, medium: Medium | Phantom):
        return self.deposits.dose(medium)


BALANCE_KEYS = (
    "injected", "deposited", "released", "escaped", "residual", "truncated",
    "overflow_length", "overflow_segments", "overflow_energy",
    "n_range_out", "n_exit", "n_max_length", "n_collisions", "n_elastic", "n_segments",
)


# -- packing problem data for the compiled kernel ----------------------------

def _pack(source: Source, model: TransportModel, config: SimConfig):
    dom = model.domain
    geo = np.zeros(K.N_GEO)
    geo[K.G_MODE3D] = 1.0 if config.mode == "3d" else 0.0
    geo[K.G_XLO], geo[K.G_XHI] = dom.lo[0], dom.hi[0]
    geo[K.G_YLO], geo[K.G_YHI] = dom.lo[1], dom.hi[1]
    geo[K.G_ZHI] = dom.hi[2]
    geo[K.G_EMIN], geo[K.G_EMAX] = model.window.e_min, model.window.e_max
    geo[K.G_STEP] = config.step_len
    geo[K.G_MAXLEN] = config.max_track_len
    geo[K.G_MU] = config.mu
    geo[K.G_RATE] = model.rate_bound()
    geo[K.G_EREF], geo[K.G_QE], geo[K.G_QNE] = model.xs.e_ref, model.xs.q_e, model.xs.q_ne
    layers = model.phantom.arrays()
    xs = model.xs.arrays()
    w = np.array([b.weight for b in source.beams])
    cum = np.cumsum(w) / w.sum()
    cum[-1] = 1.0
    beams = (
        np.array([b.energy_mean for b in source.beams]),
        np.array([b.energy_sigma for b in source.beams]),
        cum,
        np.array([b.position for b in source.beams], dtype=float).reshape(-1, 3),
        np.array([b.lateral_sigma for b in source.beams]),
        np.array([_mode_direction(b.direction, config.mode) for b in source.beams]).reshape(-1, 3),
    )
    model_arrays = (
        geo, layers["starts"], layers["alpha"], layers["p"], layers["rho"], layers["e_screen"],
        xs["sigma_e"], xs["sigma_ne"], xs["kappa_e"], xs["kappa_ne"], xs["f_min"], xs["f_max"],
    )
    return model_arrays + beams


def _mode_direction(direction, mode: str) -> np.ndarray:
    d = np.asarray(direction, dtype=float)
    if mode == "1d":
        if abs(abs(d[2]) - 1.0) > 1e-12:
            raise ConfigError("1d mode needs beam directions along +-z")
        return np.array([0.0, 0.0, np.sign(d[2])])
    return d


def _check(source: Source, model: TransportModel, config: SimConfig) -> None:
    source.check_window(model.window)
    if config.mode == "1d" and model.domain.kind != "slab-1d":
        raise ConfigError("1d mode needs a slab-1d domain")


def _empty_buffers(grid: Grid):
    size = grid.n_z * grid.n_e * grid.n_angles
    return [np.zeros(size), np.zeros(size), np.zeros(grid.n_z), np.zeros(grid.n_z), np.zeros(grid.n_z),
            np.zeros(K.N_BAL)]


_NO_EVENTS = np.zeros((0, K.N_EV))


def run_batch(source: Source, model: TransportModel, config: SimConfig, grid: Grid,
              n: int | None = None, threads: int = 1, stream_id: int = 0) -> BatchResult:
    """Transport ``n`` histories (default ``config.n_particles``) and merge their tallies.

    Particle ``i`` draws from the stream keyed by ``(config.seed, stream_id)``
    with counter ``i``.  Results are bit-identical for any ``threads``.
    """
    n = config.n_particles if n is None else int(n)
    if n < 1:
        raise ConfigError(f"n must be >= 1 (got {n})")
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    _check(source, model, config)
    packed = _pack(source, model, config)
    gvec = grid.kernel_vector()
    chunks = [(s, min(s + config.chunk_size, n)) for s in range(0, n, config.chunk_size)]

    def run(chunk):
        bufs = _empty_buffers(grid)
        K.transport_chunk(*packed, gvec, np.uint64(config.seed), np.uint64(stream_id),
                          chunk[0], chunk[1], *bufs, False, _NO_EVENTS)
        return bufs

    t0 = time.perf_counter()
    total = _empty_buffers(grid)
    if threads == 1:
        results = map(run, chunks)
        for bufs in results:
            for acc, b in zip(total, bufs):
                acc += b
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for bufs in pool.map(run, chunks):
                for acc, b in zip(total, bufs):
                    acc += b
    wall = time.perf_counter() - t0

    flu_sum, flu_sq, dep_sum, dep_sq, rel_sum, bal = total
    scale = source.total_weight
    fluence = FluenceMap(grid, flu_sum.reshape(grid.shape), flu_sq.reshape(grid.shape), n, scale,
                         float(bal[K.B_OVERFLOW_LEN]), int(bal[K.B_OVERFLOW_SEG]))
    deposits = DepositMap(grid.z_edges, dep_sum, dep_sq, n, scale, float(bal[K.B_OVERFLOW_DEP]))
    balance = {k: float(v) for k, v in zip(BALANCE_KEYS, bal)}
    return BatchResult(fluence, deposits, rel_sum * scale / n, balance, n, wall)


# -- per-track recording -----------------------------------------------------

def _events_per_particle(source: Source, model: TransportModel, config: SimConfig) -> int:
    e_top = max(min(b.energy_mean + 6 * b.energy_sigma, model.window.e_max) for b in source.beams)
    path = max(float(csda_path(m, e_top, model.window.e_min)) for m in model.phantom.media)
    path = min(path, config.max_track_len)
    jumps = model.rate_bound() * path
    return int(1.2 * path / config.step_len) + 16 + int(4 * jumps) + 2 * len(model.phantom)


def iter_track_chunks(source: Source, model: TransportModel, config: SimConfig, n: int,
                      stream_id: int = 0, chunk: int = 256):
    """Yield the recorded segments of histories ``0..n-1`` in blocks of ``chunk``.

    Each block is a dict of column arrays (see ``record_tracks``).
    """
    _check(source, model, config)
    packed = _pack(source, model, config)
    grid = Grid.uniform(model.domain.length, 1, model.window.e_min, model.window.e_max, 1)
    gvec = grid.kernel_vector()
    per = _events_per_particle(source, model, config)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        capacity = per * (stop - start)
        while True:
            events = np.zeros((capacity, K.N_EV))
            count = K.transport_chunk(*packed, gvec, np.uint64(config.seed), np.uint64(stream_id),
                                      start, stop, *_empty_buffers(grid), True, events)
            if count >= 0:
                break
            capacity *= 2
        yield _columns(events[:count])


def _columns(ev: np.ndarray) -> dict:
    return {
        "x0": ev[:, K.EV_X0:K.EV_X0 + 3],
        "dir0": ev[:, K.EV_DIR0:K.EV_DIR0 + 3],
        "e0": ev[:, K.EV_E0],
        "x1": ev[:, K.EV_X1:K.EV_X1 + 3],
        "dir1": ev[:, K.EV_DIR1:K.EV_DIR1 + 3],
        "e1": ev[:, K.EV_E1],
        "seg_len": ev[:, K.EV_LEN],
        "deposited": ev[:, K.EV_DEP],
        "cause": ev[:, K.EV_CAUSE].astype(np.int64),
        "particle": ev[:, K.EV_PID].astype(np.int64),
    }


def record_tracks(source: Source, model: TransportModel, config: SimConfig, n: int,
                  stream_id: int = 0) -> dict:
    """All recorded segments of ``n`` histories as column arrays.

    Columns: x0, dir0, e0 (segment start), x1, dir1, e1 (segment end),
    seg_len, deposited, cause (0 none, 1 range-out, 2 spatial-exit,
    3 max-length) and particle index.
    """
    blocks = list(iter_track_chunks(source, model, config, n, stream_id))
    return {k: np.concatenate([b[k] for b in blocks]) for k in blocks[0]}


_CAUSE_NAMES = {K.CAUSE_RANGE_OUT: "range-out", K.CAUSE_EXIT: "spatial-exit", K.CAUSE_MAXLEN: "max-length"}


def simulate_track(start: PhaseState, model: TransportModel, config: SimConfig,
                   particle: int = 0, stream_id: int = 0) -> list[TrackEvent]:
    """Follow one proton from ``start`` until it is absorbed, leaves or is truncated.

    The random stream is the one history ``particle`` of a batch with the
    same seed would use.  The last event carries the termination cause; for
    a range-out ending in a collision, its end state is the pre-collision one.
    """
    cls = classify(start, model.domain, model.window)
    if cls is BoundaryClass.GAMMA_PLUS:
        raise ValueError("a track cannot start on the outflow boundary")
    beam = Beam(start.energy, 0.0, 1.0, tuple(start.position), tuple(normalize(start.direction)))
    source = Source((beam,))
    grid = Grid.uniform(model.domain.length, 1, model.window.e_min, model.window.e_max, 1)
    packed = _pack(source, model, config)
    capacity = _events_per_particle(source, model, config)
    while True:
        events = np.zeros((capacity, K.N_EV))
        count = K.transport_chunk(*packed, grid.kernel_vector(), np.uint64(config.seed), np.uint64(stream_id),
                                  particle, particle + 1, *_empty_buffers(grid), True, events)
        if count >= 0:
            break
        capacity *= 2
    out = []
    for row in events[:count]:
        a = PhaseState(row[K.EV_X0:K.EV_X0 + 3], row[K.EV_DIR0:K.EV_DIR0 + 3], row[K.EV_E0])
        b = PhaseState(row[K.EV_X1:K.EV_X1 + 3], row[K.EV_DIR1:K.EV_DIR1 + 3], row[K.EV_E1])
        cause = _CAUSE_NAMES.get(int(row[K.EV_CAUSE]))
        out.append(TrackEvent(a, b, float(row[K.EV_LEN]), float(row[K.EV_DEP]), cause))
    return out


# -- single-step operations --------------------------------------------------

def drift_diffuse_step(state: PhaseState, dt: float, medium: Medium, config: SimConfig, rng) -> PhaseState:
    """One Euler-Maruyama step of length ``dt``.

    ``rng`` is a ``numpy.random.Generator`` or a ``protonplan.rng.Stream``.
    """
    if not state.alive:
        raise ValueError("cannot step the cemetery state")
    w = state.direction
    energy = state.energy - stopping_power(medium, state.energy) * dt
    position = state.position + w * dt
    if config.mode == "3d" and config.mu > 0:
        db = np.sqrt(dt) * np.asarray(rng.standard_normal(3), dtype=float)
        w = (1.0 - config.mu**2 * dt) * w + config.mu * np.cross(w, db)
        w = normalize(w)
    return PhaseState(position, w.copy(), float(energy))


def next_jump(rate_bound: float, rng) -> float:
    """Distance to the next candidate collision on a clock of rate ``rate_bound``."""
    if rate_bound < 0:
        raise ValueError("rate bound must be >= 0")
    if rate_bound == 0:
        return math.inf
    return float(rng.exponential(1.0 / rate_bound))


def accept_jump(state: PhaseState, xs: CrossSections, rate_bound: float, rng) -> bool:
    """Thinning: keep a candidate with probability sigma_n(state) / rate_bound."""
    se, sne = xs.components(state.depth, state.energy)
    if se + sne > rate_bound * (1 + 1e-12):
        raise ValueError("local collision rate exceeds the bound")
    return bool(rng.random() * rate_bound < se + sne)


def warmup() -> None:
    """Compile the transport kernel (cached on disk after the first call)."""
    from protonplan.materials import BUILTIN_MEDIA

    model = TransportModel.slab(BUILTIN_MEDIA["water"], 1.0)
    run_batch(Source.pencil(20.0), model, SimConfig(n_particles=1), Grid.uniform(1.0, 2, 1.0, 250.0, 2))
