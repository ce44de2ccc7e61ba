"""Media, the range-energy power law and Bragg-Kleeman stopping power.

All energies are in MeV, lengths in cm, densities in g/cm^3.  The range law is
``R = alpha * E**p`` and the stopping power is its derivative inverted,
``S(E) = E**(1 - p) / (alpha * p)``, clamped below ``e_screen`` so that it
stays finite as the proton slows down.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Medium:
    """A homogeneous medium described by its Bragg-Kleeman parameters.

    Attributes:
        name: label used in configs and output.
        alpha: range coefficient [cm MeV^-p].
        p: range exponent, in [1, 2] for physical media.
        rho: mass density [g/cm^3].
        e_screen: energy [MeV] below which the stopping power is held constant.
    """

    name: str
    alpha: float
    p: float
    rho: float = 1.0
    e_screen: float = 1.0

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError(f"invalid medium {self.name!r}: " + "; ".join(errors))

    def validate(self, strict_exponent: bool = True) -> list[str]:
        errors = []
        if not self.alpha > 0:
            errors.append(f"alpha must be > 0 (got {self.alpha})")
        if strict_exponent and not 1.0 <= self.p <= 2.0:
            errors.append(f"p must lie in [1, 2] (got {self.p})")
        if not self.p > 0:
            errors.append(f"p must be > 0 (got {self.p})")
        if not self.rho > 0:
            errors.append(f"rho must be > 0 (got {self.rho})")
        if not self.e_screen > 0:
            errors.append(f"e_screen must be > 0 (got {self.e_screen})")
        return errors


def unchecked_medium(name: str, alpha: float, p: float, rho: float = 1.0, e_screen: float = 1.0) -> Medium:
    """Build a medium outside the physical exponent range (p < 1 or p > 2).

    Only meant for sensitivity checks that deliberately violate the
    monotone-stopping-power hypothesis.
    """
    m = object.__new__(Medium)
    for k, v in dict(name=name, alpha=alpha, p=p, rho=rho, e_screen=e_screen).items():
        object.__setattr__(m, k, v)
    errors = m.validate(strict_exponent=False)
    if errors:
        raise ValueError("; ".join(errors))
    return m


# Range-energy constants for water, muscle, bone and lung.  Water carries a
# tabulated uncertainty of alpha = 0.00246 +/- 0.00025 and p = 1.75 +/- 0.02;
# nominal values are used.  Densities are typical reference values, not part
# of the range table.
WATER_ALPHA_UNCERTAINTY = 0.00025
WATER_P_UNCERTAINTY = 0.02

BUILTIN_MEDIA: dict[str, Medium] = {
    "water": Medium("water", alpha=0.00246, p=1.75, rho=1.0),
    "muscle": Medium("muscle", alpha=0.0021, p=1.75, rho=1.05),
    "bone": Medium("bone", alpha=0.0011, p=1.77, rho=1.85),
    "lung": Medium("lung", alpha=0.0033, p=1.74, rho=0.26),
}


def range_(medium: Medium, e0):
    """CSDA range ``alpha * e0**p`` [cm]."""
    e0 = np.asarray(e0, dtype=float)
    if np.any(e0 < 0):
        raise ValueError("energy must be non-negative")
    r = medium.alpha * e0**medium.p
    return float(r) if r.ndim == 0 else r


def energy_at_depth(medium: Medium, e0, z):
    """Energy remaining after a straight CSDA path of length ``z``.

    Zero once ``z`` reaches the range.
    """
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("depth must be non-negative")
    residual = np.maximum(range_(medium, e0) - z, 0.0)
    e = (residual / medium.alpha) ** (1.0 / medium.p)
    return float(e) if e.ndim == 0 else e


def stopping_power(medium: Medium, e):
    """Screened Bragg-Kleeman stopping power [MeV/cm]."""
    e = np.maximum(np.asarray(e, dtype=float), medium.e_screen)
    s = e ** (1.0 - medium.p) / (medium.alpha * medium.p)
    return float(s) if s.ndim == 0 else s


def csda_path(medium: Medium, e_hi, e_lo):
    """Exact path length to slow down from ``e_hi`` to ``e_lo`` under the
    screened stopping power, i.e. the integral of dE / S(E).
    """
    return _residual_range(medium, e_hi) - _residual_range(medium, e_lo)


def _residual_range(medium: Medium, e):
    # antiderivative of 1/S with the clamp: linear below e_screen
    e = np.asarray(e, dtype=float)
    es = medium.e_screen
    a, p = medium.alpha, medium.p
    below = e * a * p * es ** (p - 1.0)
    above = a * p * es**p + a * (np.maximum(e, es) ** p - es**p)
    out = np.where(e <= es, below, above)
    return float(out) if out.ndim == 0 else out


def mean_stopping_power(medium: Medium, e_lo, e_hi):
    """Harmonic mean of S over [e_lo, e_hi]: (e_hi - e_lo) / path length.

    This is the cell stopping power that moves a CSDA particle across the
    whole interval in exactly the path length it physically needs.
    """
    e_lo = np.asarray(e_lo, dtype=float)
    e_hi = np.asarray(e_hi, dtype=float)
    return (e_hi - e_lo) / csda_path(medium, e_hi, e_lo)


@dataclass(frozen=True)
class ScenarioParams:
    """Truncated-Gaussian multiplicative perturbations of density and alpha."""

    density_rel_sigma: float = 0.03
    alpha_rel_sigma: float = 0.03
    truncation: float = 0.2

    def __post_init__(self):
        if self.density_rel_sigma < 0 or self.alpha_rel_sigma < 0:
            raise ValueError("scenario sigmas must be >= 0")
        if not 0 < self.truncation < 1:
            raise ValueError("truncation must lie in (0, 1)")

    @property
    def degenerate(self) -> bool:
        return self.density_rel_sigma == 0 and self.alpha_rel_sigma == 0


def _truncated_normal(rng: np.random.Generator, sigma: float, bound: float) -> float:
    if sigma == 0:
        return 0.0
    while True:
        x = rng.normal(0.0, sigma)
        if abs(x) <= bound:
            return x


def perturb_medium(medium: Medium, params: ScenarioParams, rng: np.random.Generator) -> Medium:
    """Draw one scenario of ``medium`` with scaled density and range coefficient."""
    eps_rho = _truncated_normal(rng, params.density_rel_sigma, params.truncation)
    eps_alpha = _truncated_normal(rng, params.alpha_rel_sigma, params.truncation)
    return dataclasses.replace(
        medium, rho=medium.rho * (1.0 + eps_rho), alpha=medium.alpha * (1.0 + eps_alpha)
    )


@dataclass(frozen=True)
class Phantom:
    """Piecewise-constant media stacked along depth.

    ``starts[k]`` is the depth where ``media[k]`` begins; the first start must
    be 0 and the last medium extends to the end of the domain.
    """

    starts: tuple[float, ...]
    media: tuple[Medium, ...]

    def __post_init__(self):
        if len(self.starts) != len(self.media) or not self.media:
            raise ValueError("phantom needs one start depth per medium")
        if self.starts[0] != 0.0:
            raise ValueError("first layer must start at depth 0")
        if any(b <= a for a, b in zip(self.starts, self.starts[1:])):
            raise ValueError("layer starts must be strictly increasing")

    @classmethod
    def homogeneous(cls, medium: Medium) -> "Phantom":
        return cls((0.0,), (medium,))

    @classmethod
    def layered(cls, layers: Sequence[tuple[float, Medium]]) -> "Phantom":
        return cls(tuple(float(z) for z, _ in layers), tuple(m for _, m in layers))

    def __len__(self):
        return len(self.media)

    def layer_index(self, z):
        idx = np.searchsorted(np.asarray(self.starts), z, side="right") - 1
        return np.clip(idx, 0, len(self.media) - 1)

    def medium_at(self, z: float) -> Medium:
        return self.media[int(self.layer_index(z))]

    def perturbed(self, params: ScenarioParams, rng: np.random.Generator) -> "Phantom":
        return Phantom(self.starts, tuple(perturb_medium(m, params, rng) for m in self.media))

    def arrays(self) -> dict[str, np.ndarray]:
        """Per-layer parameter arrays for the compiled kernels."""
        return {
            "starts": np.asarray(self.starts, dtype=float),
            "alpha": np.array([m.alpha for m in self.media]),
            "p": np.array([m.p for m in self.media]),
            "rho": np.array([m.rho for m in self.media]),
            "e_screen": np.array([m.e_screen for m in self.media]),
        }
