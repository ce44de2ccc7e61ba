"""Beam-weight optimization for depth-dose prescriptions.

The control is a vector of nonnegative beam weights ``g`` (one per pencil
beam of a bank) bounded by ``g_max``.  The cost is

    J(g) = sum_b w_b (D_b(g) - d_b)^2 dz_b + (alpha_reg / 2) |g|^2

with ``D(g)`` the depth-dose per bin.  Two gradient paths are provided: the
influence-matrix form ``2 D^T W (D g - d) + alpha_reg g`` and the adjoint
form, which runs a forward solve (deterministic or Monte Carlo), feeds the
dose residual into the discrete adjoint march and contracts the entrance
trace with each beam's spectrum.  Scenario averaging turns both into the
risk-neutral (expected) cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from protonplan.materials import Medium, Phantom, ScenarioParams, mean_stopping_power
from protonplan.pde_1d import Mesh1D, beam_spectrum, bin_dose, solve_adjoint, solve_forward
from protonplan.phase_space import EnergyWindow, SpatialDomain
from protonplan.rng import derive_seed
from protonplan.sde_engine import Beam, SimConfig, Source, TransportModel, run_batch
from protonplan.tally import Grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BeamBank:
    """Gaussian pencil beams entering the slab at z = 0 along +z."""

    energies: tuple[float, ...]
    sigmas: tuple[float, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "energies", tuple(float(e) for e in self.energies))
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        w = (1.0,) * len(self.energies) if self.weights is None else tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if not len(self.energies) == len(self.sigmas) == len(self.weights):
            raise ValueError("energies, sigmas and weights need the same length")
        if any(s < 0 for s in self.sigmas) or any(x < 0 for x in self.weights):
            raise ValueError("beam sigmas and weights must be >= 0")
        if any(e <= 0 for e in self.energies):
            raise ValueError("beam energies must be > 0")

    @classmethod
    def spanning(cls, medium: Medium, z_lo: float, z_hi: float, n_beams: int,
                 rel_sigma: float = 0.01) -> "BeamBank":
        """Beams whose CSDA ranges are evenly spaced over ``[z_lo, z_hi]``."""
        ranges = np.linspace(z_lo, z_hi, n_beams)
        energies = (ranges / medium.alpha) ** (1.0 / medium.p)
        return cls(tuple(energies), tuple(rel_sigma * energies))

    @property
    def n_beams(self) -> int:
        return len(self.energies)

    def check_window(self, window: EnergyWindow) -> None:
        for k, e in enumerate(self.energies):
            if not window.e_min < e <= window.e_max:
                raise ValueError(f"beam {k} energy {e} MeV lies outside ({window.e_min}, {window.e_max}]")

    def beam(self, k: int, weight: float = 1.0) -> Beam:
        return Beam(self.energies[k], self.sigmas[k], weight)

    def source(self, weights: Sequence[float] | None = None) -> Source:
        weights = self.weights if weights is None else weights
        return Source(tuple(self.beam(k, float(w)) for k, w in enumerate(weights)))

    def spectra(self, mesh: Mesh1D, window: EnergyWindow | None = None) -> np.ndarray:
        """Unit-weight entrance spectra, shape (n_beams, n_e)."""
        if self.n_beams == 0:
            return np.zeros((0, mesh.n_e))
        return np.array([beam_spectrum(e, s, 1.0, mesh, window) for e, s in zip(self.energies, self.sigmas)])


@dataclass(frozen=True)
class Prescription:
    """Target dose and weights per depth bin."""

    z_edges: np.ndarray
    d_prescribed: np.ndarray
    w: np.ndarray
    target: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        z = np.asarray(self.z_edges, dtype=float)
        d = np.asarray(self.d_prescribed, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if d.shape != (z.size - 1,) or w.shape != d.shape:
            raise ValueError("d_prescribed and w need one entry per depth bin")
        if np.any(d < 0) or np.any(w < 0):
            raise ValueError("d_prescribed and w must be >= 0")
        object.__setattr__(self, "z_edges", z)
        object.__setattr__(self, "d_prescribed", d)
        object.__setattr__(self, "w", w)

    @classmethod
    def target_box(cls, z_edges, z_lo: float, z_hi: float, level: float = 1.0,
                   w_in: float = 1.0, w_out: float = 0.1) -> "Prescription":
        """Uniform ``level`` inside ``[z_lo, z_hi]``, zero dose wanted elsewhere."""
        z_edges = np.asarray(z_edges, dtype=float)
        inside = cls._inside(z_edges, z_lo, z_hi)
        return cls(z_edges, np.where(inside, level, 0.0), np.where(inside, w_in, w_out), (z_lo, z_hi))

    @staticmethod
    def _inside(z_edges, z_lo, z_hi) -> np.ndarray:
        c = 0.5 * (z_edges[1:] + z_edges[:-1])
        return (c >= z_lo) & (c <= z_hi)

    @property
    def in_target(self) -> np.ndarray:
        return self._inside(self.z_edges, *self.target)

    @property
    def dz(self) -> np.ndarray:
        return np.diff(self.z_edges)


@dataclass(frozen=True)
class OptConfig:
    """Optimizer settings.

    ``step_rule`` is ``"backtracking"`` (Armijo, spectral initial step),
    ``"fixed"`` (``tau0 / (1 + k / k0)``), ``"exact"`` (``g = P(-z / alpha_reg)``)
    or ``"auto"``: backtracking for deterministic objectives, fixed steps for
    Monte Carlo ones.
    """

    alpha_reg: float = 1e-6
    step_rule: str = "auto"
    tau0: float = 1.0
    k0: float = 10.0
    armijo_c: float = 1e-4
    shrink: float = 0.5
    tol_eps: float = 1e-6
    max_iters: int = 500
    n_mc: int = 10_000
    n_scenarios: int = 1
    scenario: ScenarioParams = field(default_factory=lambda: ScenarioParams(0.0, 0.0))

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.alpha_reg < 0:
            errors.append("alpha_reg must be >= 0")
        if self.step_rule not in ("auto", "backtracking", "fixed", "exact"):
            errors.append(f"unknown step_rule {self.step_rule!r}")
        if self.step_rule == "exact" and self.alpha_reg <= 0:
            errors.append("step_rule 'exact' needs alpha_reg > 0")
        if not self.tol_eps > 0:
            errors.append("tol_eps must be > 0")
        if self.max_iters < 0:
            errors.append("max_iters must be >= 0")
        if self.tau0 <= 0 or self.k0 <= 0:
            errors.append("tau0 and k0 must be > 0")
        if not 0 < self.armijo_c < 1 or not 0 < self.shrink < 1:
            errors.append("armijo_c and shrink must lie in (0, 1)")
        if self.n_mc < 1 or self.n_scenarios < 1:
            errors.append("n_mc and n_scenarios must be >= 1")
        return errors


# -- influence matrices --------------------------------------------------------

def influence_matrix(bank: BeamBank, z_edges, model: TransportModel, mode: str = "pde",
                     sim: SimConfig | None = None, mesh: Mesh1D | None = None, threads: int = 1) -> np.ndarray:
    """Dose per depth bin from unit weight of each beam, shape (n_bins, n_beams).

    ``mode="mc"`` runs one batch per beam (stream id = beam index + 1) and
    uses the deposited-energy dose; ``mode="pde"`` solves on ``mesh``.
    """
    z_edges = np.asarray(z_edges, dtype=float)
    out = np.zeros((z_edges.size - 1, bank.n_beams))
    if bank.n_beams == 0:
        return out
    if mode == "pde":
        if mesh is None:
            raise ValueError("pde influence needs a mesh")
        spectra = bank.spectra(mesh, model.window)
        for k in range(bank.n_beams):
            out[:, k] = bin_dose(solve_forward(spectra[k], mesh, model.phantom), model.phantom, z_edges).dose
    elif mode == "mc":
        sim = sim or SimConfig()
        grid = Grid(z_edges, np.array([model.window.e_min, model.window.e_max]))
        for k in range(bank.n_beams):
            res = run_batch(Source((bank.beam(k),)), model, sim, grid, threads=threads, stream_id=k + 1)
            out[:, k] = res.direct_dose(model.phantom).dose
    else:
        raise ValueError(f"unknown influence mode {mode!r}")
    return out


# -- cost, gradient, projection ------------------------------------------------

def fidelity(dose: np.ndarray, prescription: Prescription) -> float:
    r = np.asarray(dose) - prescription.d_prescribed
    return float(np.sum(prescription.w * r * r * prescription.dz))


def cost(weights, influence: np.ndarray, prescription: Prescription, alpha_reg: float) -> float:
    g = np.asarray(weights, dtype=float)
    if np.any(g < 0):
        raise ValueError("weights must be >= 0")
    return fidelity(influence @ g, prescription) + 0.5 * alpha_reg * float(g @ g)


def expected_cost(weights, influences: Sequence[np.ndarray], prescription: Prescription,
                  alpha_reg: float) -> tuple[float, float]:
    """Average over scenarios of the fidelity, plus the regularization.

    The square sits inside the expectation.  Returns (value, standard error).
    """
    g = np.asarray(weights, dtype=float)
    if len(influences) < 1:
        raise ValueError("need at least one scenario")
    fid = np.array([fidelity(D @ g, prescription) for D in influences])
    se = float(fid.std(ddof=1) / np.sqrt(fid.size)) if fid.size > 1 else 0.0
    return float(fid.mean()) + 0.5 * alpha_reg * float(g @ g), se


def gradient_influence(weights, influence: np.ndarray, prescription: Prescription, alpha_reg: float) -> np.ndarray:
    g = np.asarray(weights, dtype=float)
    r = influence @ g - prescription.d_prescribed
    return 2.0 * influence.T @ (prescription.w * prescription.dz * r) + alpha_reg * g


def project(weights, g_max) -> np.ndarray:
    """Component-wise clamp onto ``[0, g_max]``."""
    return np.minimum(np.maximum(np.asarray(weights, dtype=float), 0.0), g_max)


def vi_residual(weights, grad, g_max) -> float:
    """``|g - P(g - grad)|``: zero exactly at solutions of the box-constrained VI."""
    g = np.asarray(weights, dtype=float)
    return float(np.linalg.norm(g - project(g - np.asarray(grad, dtype=float), g_max)))


# -- objectives ------------------------------------------------------------

class InfluenceObjective:
    """Quadratic cost through fixed influence matrices (one per scenario)."""

    def __init__(self, influences: np.ndarray | Sequence[np.ndarray], prescription: Prescription, alpha_reg: float):
        if isinstance(influences, np.ndarray) and influences.ndim == 2:
            influences = [influences]
        self.influences = [np.asarray(D, dtype=float) for D in influences]
        self.prescription = prescription
        self.alpha_reg = alpha_reg
        self.stochastic = False

    def set_iteration(self, k: int) -> None:
        pass

    def cost(self, g) -> float:
        return expected_cost(g, self.influences, self.prescription, self.alpha_reg)[0]

    def gradient(self, g) -> np.ndarray:
        grads = [gradient_influence(g, D, self.prescription, 0.0) for D in self.influences]
        return np.mean(grads, axis=0) + self.alpha_reg * np.asarray(g, dtype=float)

    def dose(self, g) -> np.ndarray:
        return np.mean([D @ g for D in self.influences], axis=0)


@dataclass
class Scenario:
    """One sampled anatomy/physics realization with its transport mesh."""

    phantom: Phantom
    mesh: Mesh1D
    spectra: np.ndarray


def mesh_for(phantom: Phantom, length: float, e_min: float, e_max: float, dz: float) -> Mesh1D:
    """Range-aligned mesh for the medium with the largest stopping power.

    Every other layer then moves less than one cell per step.
    """
    stiff = max(phantom.media, key=lambda m: float(mean_stopping_power(m, e_min, e_max)))
    return Mesh1D.range_aligned(stiff, length, e_min, e_max, dz)


def sample_scenarios(bank: BeamBank, phantom: Phantom, params: ScenarioParams, n: int, length: float,
                     window: EnergyWindow, dz: float, rng: np.random.Generator) -> list[Scenario]:
    """Draw ``n`` perturbed phantoms (the nominal one when the draw is degenerate)."""
    e_top = min(window.e_max, max(e + 6 * s for e, s in zip(bank.energies, bank.sigmas)) if bank.n_beams else window.e_max)
    out = []
    for _ in range(n):
        ph = phantom if params.degenerate else phantom.perturbed(params, rng)
        mesh = mesh_for(ph, length, window.e_min, e_top, dz)
        out.append(Scenario(ph, mesh, bank.spectra(mesh, window)))
    return out


class AdjointObjective:
    """Cost and gradient through forward solves and the discrete adjoint.

    ``forward="pde"`` uses the deterministic march; ``forward="mc"`` runs a
    Monte Carlo batch per scenario (the hybrid scheme).  Monte Carlo seeds
    depend only on the iteration set by ``set_iteration``, so a line search
    within one iteration sees common random numbers.
    """

    def __init__(self, bank: BeamBank, prescription: Prescription, scenarios: Sequence[Scenario], alpha_reg: float,
                 forward: str = "pde", window: EnergyWindow | None = None, sim: SimConfig | None = None,
                 q_factor: float = 1.0, threads: int = 1):
        if forward not in ("pde", "mc"):
            raise ValueError(f"unknown forward mode {forward!r}")
        self.bank = bank
        self.prescription = prescription
        self.scenarios = list(scenarios)
        self.alpha_reg = alpha_reg
        self.forward = forward
        self.window = window or EnergyWindow()
        self.sim = sim or SimConfig()
        self.q_factor = q_factor
        self.threads = threads
        self.stochastic = forward == "mc"
        self._iteration = 0
        self._cache: dict = {}

    def set_iteration(self, k: int) -> None:
        self._iteration = k
        self._cache.clear()

    def scenario_dose(self, s: int, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        key = (s, g.tobytes())
        if key in self._cache:
            return self._cache[key]
        sc = self.scenarios[s]
        z_edges = self.prescription.z_edges
        if not np.any(g > 0):
            dose = np.zeros(z_edges.size - 1)
        elif self.forward == "pde":
            dose = bin_dose(solve_forward(g @ sc.spectra, sc.mesh, sc.phantom), sc.phantom, z_edges).dose
        else:
            seed = derive_seed(self.sim.seed, self._iteration, s)
            sim = replace(self.sim, seed=seed)
            model = TransportModel(sc.phantom, SpatialDomain.slab(sc.mesh.length), self.window)
            grid = Grid(z_edges, np.array([self.window.e_min, self.window.e_max]))
            res = run_batch(self.bank.source(g), model, sim, grid, threads=self.threads)
            dose = res.direct_dose(sc.phantom).dose
        self._cache[key] = dose
        return dose

    def cost(self, g) -> float:
        g = np.asarray(g, dtype=float)
        fid = [fidelity(self.scenario_dose(s, g), self.prescription) for s in range(len(self.scenarios))]
        return float(np.mean(fid)) + 0.5 * self.alpha_reg * float(g @ g)

    def scenario_gradient(self, s: int, g) -> np.ndarray:
        """Fidelity gradient of one scenario: entrance adjoint trace against each spectrum."""
        sc = self.scenarios[s]
        residual = self.scenario_dose(s, g) - self.prescription.d_prescribed
        z = solve_adjoint(residual, sc.mesh, sc.phantom, self.prescription.z_edges, self.prescription.w,
                          self.q_factor)
        return sc.spectra @ z.trace

    def gradient(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        grads = [self.scenario_gradient(s, g) for s in range(len(self.scenarios))]
        return np.mean(grads, axis=0) + self.alpha_reg * g

    def dose(self, g) -> np.ndarray:
        return np.mean([self.scenario_dose(s, g) for s in range(len(self.scenarios))], axis=0)


# -- the optimization loop ---------------------------------------------------

@dataclass
class PlanProblem:
    objective: InfluenceObjective | AdjointObjective
    g0: np.ndarray
    g_max: float | np.ndarray


@dataclass
class OptResult:
    weights: np.ndarray
    cost_trace: list[float]
    vi_trace: list[float]
    grad_norm_trace: list[float]
    iterations: int
    converged: bool
    projected_start: bool

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1]


def default_g_max(influence: np.ndarray, prescription: Prescription, factor: float = 10.0) -> float:
    """``factor`` times the common weight that brings the mean target dose to prescription."""
    inside = prescription.in_target
    if not inside.any():
        inside = prescription.d_prescribed > 0
    per_unit = float(np.mean(influence[inside].sum(axis=1))) if inside.any() else 0.0
    level = float(np.mean(prescription.d_prescribed[inside])) if inside.any() else 0.0
    if per_unit <= 0 or level <= 0:
        return factor
    return factor * level / per_unit


def optimize(problem: PlanProblem, config: OptConfig) -> OptResult:
    """Projected-gradient iteration ``g <- P(g - tau grad J(g))`` until the VI residual is small.

    Every iterate lies in the box.  Under ``backtracking`` the cost never
    increases; ``grad_norm_trace`` records ``|z + alpha_reg g|`` (the raw
    gradient norm) next to the fixed-point residual.
    """
    obj = problem.objective
    g_max = problem.g_max
    rule = config.step_rule
    if rule == "auto":
        rule = "fixed" if obj.stochastic else "backtracking"
    g = project(problem.g0, g_max)
    projected = not np.array_equal(g, np.asarray(problem.g0, dtype=float))
    if projected:
        log.info("initial weights were infeasible and have been projected onto the box")
    costs, res_trace, gnorms = [], [], []
    tau = config.tau0
    prev = None
    converged = False
    k = 0
    for k in range(config.max_iters + 1):
        obj.set_iteration(k)
        j = obj.cost(g)
        grad = obj.gradient(g)
        res = vi_residual(g, grad, g_max)
        costs.append(j)
        res_trace.append(res)
        gnorms.append(float(np.linalg.norm(grad)))
        if res <= config.tol_eps:
            converged = True
            break
        if k == config.max_iters:
            break
        if rule == "exact":
            z = grad - config.alpha_reg * g
            g = project(-z / config.alpha_reg, g_max)
            continue
        if rule == "fixed":
            g = project(g - config.tau0 / (1.0 + k / config.k0) * grad, g_max)
            continue
        # spectral (Barzilai-Borwein) first trial, then Armijo backtracking
        if prev is not None:
            s, y = g - prev[0], grad - prev[1]
            sy = float(s @ y)
            if sy > 0:
                tau = float(s @ s) / sy
        prev = (g.copy(), grad.copy())
        for _ in range(80):
            trial = project(g - tau * grad, g_max)
            if obj.cost(trial) <= j + config.armijo_c * float(grad @ (trial - g)):
                break
            tau *= config.shrink
        else:
            log.warning("line search found no decrease at iteration %d (residual %.3g); stopping", k, res)
            break
        if np.array_equal(trial, g):
            log.info("step no longer moves the iterate at iteration %d (residual %.3g); stopping", k, res)
            break
        g = trial
    return OptResult(g, costs, res_trace, gnorms, k, converged, projected)


# -- dose-shape diagnostics ----------------------------------------------------

def target_ripple(dose: np.ndarray, prescription: Prescription) -> float:
    """(max - min) over target bins, relative to the mean prescribed level there."""
    inside = prescription.in_target
    level = float(np.mean(prescription.d_prescribed[inside]))
    d = np.asarray(dose)[inside]
    return float((d.max() - d.min()) / level)


def entrance_ratio(dose: np.ndarray, prescription: Prescription) -> float:
    """Dose in the first bin over the mean dose in the target."""
    d = np.asarray(dose)
    mean = float(np.mean(d[prescription.in_target]))
    return float(d[0] / mean) if mean > 0 else float("inf")
