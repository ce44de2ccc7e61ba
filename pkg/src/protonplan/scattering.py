"""Collision rates and the elastic/non-elastic mixture transition kernel.

Both branches deflect the direction with a von Mises-Fisher law on the sphere
(density proportional to ``exp(kappa * cos(theta))`` about the incoming
direction).  Elastic events keep the energy exactly; non-elastic events keep a
uniformly drawn fraction of it.  The branch is chosen with probability
``sigma_e / (sigma_e + sigma_ne)`` evaluated at the pre-collision state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from protonplan.materials import Phantom
from protonplan.phase_space import EnergyWindow, PhaseState


@dataclass(frozen=True)
class KernelParams:
    kappa_e: float = 200.0
    kappa_ne: float = 5.0
    ne_frac_min: float = 0.5
    ne_frac_max: float = 0.95

    def __post_init__(self):
        if not (self.kappa_e > 0 and self.kappa_ne > 0):
            raise ValueError("kappa_e and kappa_ne must be > 0")
        if not 0 < self.ne_frac_min <= self.ne_frac_max <= 1:
            raise ValueError("need 0 < ne_frac_min <= ne_frac_max <= 1")


@dataclass(frozen=True)
class CrossSections:
    """Per-layer rates ``sigma(E) = sigma_ref * (E / e_ref)**q`` [1/cm].

    Layers follow ``phantom``; each tuple holds one entry per layer.
    """

    phantom: Phantom
    sigma_e: tuple[float, ...]
    sigma_ne: tuple[float, ...]
    kernels: tuple[KernelParams, ...]
    e_ref: float = 100.0
    q_e: float = 0.0
    q_ne: float = 0.0

    def __post_init__(self):
        n = len(self.phantom)
        for name in ("sigma_e", "sigma_ne", "kernels"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} needs one entry per phantom layer ({n})")
        if min(self.sigma_e) < 0 or min(self.sigma_ne) < 0:
            raise ValueError("cross sections must be >= 0")
        if self.e_ref <= 0:
            raise ValueError("e_ref must be > 0")

    @classmethod
    def none(cls, phantom: Phantom) -> "CrossSections":
        n = len(phantom)
        return cls(phantom, (0.0,) * n, (0.0,) * n, (KernelParams(),) * n)

    @classmethod
    def uniform(cls, phantom: Phantom, sigma_e: float, sigma_ne: float,
                kernel: KernelParams | None = None, **kw) -> "CrossSections":
        n = len(phantom)
        return cls(phantom, (sigma_e,) * n, (sigma_ne,) * n, (kernel or KernelParams(),) * n, **kw)

    def components(self, z: float, energy: float) -> tuple[float, float]:
        k = int(self.phantom.layer_index(z))
        e = max(energy, 1e-300) / self.e_ref
        return self.sigma_e[k] * e**self.q_e, self.sigma_ne[k] * e**self.q_ne

    def kernel_at(self, z: float) -> KernelParams:
        return self.kernels[int(self.phantom.layer_index(z))]

    def rate_bound(self, window: EnergyWindow) -> float:
        """Upper bound of the total rate over every layer and the energy window."""
        ends = np.array([window.e_min, window.e_max]) / self.e_ref
        bound = 0.0
        for se, sne in zip(self.sigma_e, self.sigma_ne):
            bound = max(bound, float(np.max(se * ends**self.q_e + sne * ends**self.q_ne)))
        return bound

    @property
    def active(self) -> bool:
        return max(self.sigma_e) > 0 or max(self.sigma_ne) > 0

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "sigma_e": np.asarray(self.sigma_e, dtype=float),
            "sigma_ne": np.asarray(self.sigma_ne, dtype=float),
            "kappa_e": np.array([k.kappa_e for k in self.kernels]),
            "kappa_ne": np.array([k.kappa_ne for k in self.kernels]),
            "f_min": np.array([k.ne_frac_min for k in self.kernels]),
            "f_max": np.array([k.ne_frac_max for k in self.kernels]),
        }


def total_rate(state: PhaseState, xs: CrossSections) -> float:
    if not state.alive:
        raise ValueError("the cemetery state has no collision rate")
    se, sne = xs.components(state.depth, state.energy)
    return se + sne


# -- compiled helpers shared with the transport kernel -----------------------

@numba.njit(cache=True)
def vmf_cos(kappa, u):
    """Inverse-CDF draw of cos(theta) under the concentration-kappa law."""
    w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    if w < -1.0:
        w = -1.0
    return w


@numba.njit(cache=True)
def rotate(dx, dy, dz, cos_t, phi):
    """Direction at polar cosine ``cos_t`` and azimuth ``phi`` about (dx, dy, dz)."""
    sin_t = np.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    # orthonormal frame perpendicular to the incoming direction
    if abs(dz) < 0.9:
        ax, ay, az = -dy, dx, 0.0
    else:
        ax, ay, az = 0.0, -dz, dy
    an = np.sqrt(ax * ax + ay * ay + az * az)
    ax, ay, az = ax / an, ay / an, az / an
    bx = dy * az - dz * ay
    by = dz * ax - dx * az
    bz = dx * ay - dy * ax
    c, s = np.cos(phi), np.sin(phi)
    nx = cos_t * dx + sin_t * (c * ax + s * bx)
    ny = cos_t * dy + sin_t * (c * ay + s * by)
    nz = cos_t * dz + sin_t * (c * az + s * bz)
    norm = np.sqrt(nx * nx + ny * ny + nz * nz)
    return nx / norm, ny / norm, nz / norm


@numba.njit(cache=True)
def transition(dx, dy, dz, energy, p_elastic, kappa_e, kappa_ne, f_min, f_max, u_branch, u_cos, u_phi, u_frac):
    """Post-collision (direction, energy) from four uniforms."""
    if u_branch < p_elastic:
        w = vmf_cos(kappa_e, u_cos)
        e_new = energy
    else:
        w = vmf_cos(kappa_ne, u_cos)
        e_new = energy * (f_min + (f_max - f_min) * u_frac)
    nx, ny, nz = rotate(dx, dy, dz, w, 2.0 * np.pi * u_phi)
    return nx, ny, nz, e_new


def sample_transition(state: PhaseState, xs: CrossSections, params: KernelParams | None, rng):
    """Draw a post-collision direction and energy from the mixture kernel."""
    se, sne = xs.components(state.depth, state.energy)
    total = se + sne
    if total <= 0:
        raise ValueError("sample_transition needs a positive collision rate")
    params = params or xs.kernel_at(state.depth)
    u = [rng.random() for _ in range(4)]
    d = state.direction
    nx, ny, nz, e_new = transition(
        d[0], d[1], d[2], state.energy, se / total,
        params.kappa_e, params.kappa_ne, params.ne_frac_min, params.ne_frac_max, *u,
    )
    return np.array([nx, ny, nz]), e_new


def vmf_cos_cdf(w, kappa: float):
    """CDF of cos(theta) for the concentration-kappa law."""
    w = np.asarray(w, dtype=float)
    return np.expm1(kappa * (w + 1.0)) / np.expm1(2.0 * kappa)


def vmf_density(w, kappa: float):
    """Density on the sphere (per steradian) as a function of cos(theta)."""
    w = np.asarray(w, dtype=float)
    return kappa * np.exp(kappa * (w - 1.0)) / (2.0 * np.pi * -np.expm1(-2.0 * kappa))


def _angular_mass(kappa: float, resolution: int) -> float:
    # Gauss-Legendre panels in w, geometrically graded towards w = 1 where the
    # mass concentrates for large kappa.
    order = 8
    n_panels = max(resolution // order, 2)
    gaps = np.geomspace(2.0, min(2.0, 1e-3 / kappa), n_panels)
    edges = np.unique(np.concatenate([1.0 - gaps, [1.0]]))
    x, wts = np.polynomial.legendre.leggauss(order)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    nodes = mid[:, None] + half[:, None] * x[None, :]
    f = 2.0 * np.pi * vmf_density(nodes, kappa)
    return float(np.sum(half[:, None] * wts[None, :] * f))


def _simpson_nonuniform(x, f):
    from scipy.integrate import simpson

    return simpson(f, x=x)


def kernel_mass(state: PhaseState, xs: CrossSections, params: KernelParams | None = None,
                resolution: int = 10_000) -> float:
    """Numerically integrate the mixture kernel over post-collision (direction, energy).

    The non-elastic energy density is uniform on ``[f_min E, f_max E]``; when
    the interval collapses it is a point mass and contributes exactly 1.
    """
    se, sne = xs.components(state.depth, state.energy)
    total = se + sne
    if total <= 0:
        raise ValueError("kernel_mass needs a positive collision rate")
    params = params or xs.kernel_at(state.depth)
    elastic = _angular_mass(params.kappa_e, resolution)
    ne_angle = _angular_mass(params.kappa_ne, resolution)
    lo, hi = params.ne_frac_min * state.energy, params.ne_frac_max * state.energy
    if hi > lo:
        e = np.linspace(lo, hi, resolution + 1)
        ne_energy = _simpson_nonuniform(e, np.full_like(e, 1.0 / (hi - lo)))
    else:
        ne_energy = 1.0
    return se / total * elastic + sne / total * ne_angle * ne_energy
