"""Deterministic depth/energy transport in the continuous-slowing-down limit.

Solves ``d psi/dz - d(S psi)/dE = 0`` on ``[0, L] x [e_lo, e_hi]`` with
``psi(0, E) = g(E)``, marching in depth.  Depth is sampled at uniform nodes;
energy is split into finite-volume cells, and each depth step moves a
fraction ``nu_j = S_j dz / dE_j`` of cell ``j`` down into cell ``j - 1``
(the lowest cell drains out of the window).  The scheme is first-order
upwind in both directions, positive and conservative for ``nu <= 1``.

On a mesh whose cell edges are spaced by equal CSDA path length
(``Mesh1D.range_aligned``) every ``nu`` equals 1 and the march transports
each cell exactly along the characteristics; on uniform energy cells it is
the textbook upwind scheme, whose numerical diffusion is large but whose
algebra is easy to inspect.

The adjoint is the exact transpose of the discrete forward march, so
gradients obtained from it are exact derivatives of the discrete cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from protonplan.materials import Medium, Phantom, _residual_range, mean_stopping_power
from protonplan.phase_space import EnergyWindow
from protonplan.tally import DoseMap, Grid

NU_TOL = 1e-9


class CFLError(ValueError):
    """A depth step moves more than one energy cell."""


@dataclass(frozen=True)
class Mesh1D:
    """Uniform depth nodes and energy cells (edges ascending).

    Attributes:
        z_nodes: ``n_z`` uniformly spaced depths from 0 to the slab length.
        e_edges: ``n_e + 1`` ascending energy cell edges [MeV].
    """

    z_nodes: np.ndarray
    e_edges: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z_nodes, dtype=float)
        e = np.asarray(self.e_edges, dtype=float)
        if z.size < 2 or e.size < 3:
            raise ValueError("need at least 2 depth nodes and 2 energy cells")
        if z[0] != 0.0 or np.any(np.diff(z) <= 0):
            raise ValueError("depth nodes must start at 0 and increase")
        if not np.allclose(np.diff(z), z[1] - z[0], rtol=1e-9, atol=0):
            raise ValueError("depth nodes must be uniform")
        if np.any(np.diff(e) <= 0):
            raise ValueError("energy edges must increase")
        object.__setattr__(self, "z_nodes", z)
        object.__setattr__(self, "e_edges", e)

    @classmethod
    def uniform(cls, length: float, n_z: int, e_min: float, e_max: float, n_e: int) -> "Mesh1D":
        return cls(np.linspace(0.0, length, n_z), np.linspace(e_min, e_max, n_e + 1))

    @classmethod
    def range_aligned(cls, medium: Medium, length: float, e_min: float, e_max: float, dz: float) -> "Mesh1D":
        """Energy edges one depth step of CSDA path apart in ``medium``.

        The depth step is ``length / round(length / dz)``.  The top edge is
        the first aligned edge at or above ``e_max``, so the mesh may extend
        slightly past it.
        """
        n_steps = max(int(round(length / dz)), 1)
        dz = length / n_steps
        r_lo = float(_residual_range(medium, e_min))
        n_cells = max(int(np.ceil((float(_residual_range(medium, e_max)) - r_lo) / dz - 1e-9)), 2)
        edges = _inverse_residual_range(medium, r_lo + dz * np.arange(n_cells + 1))
        edges[0] = e_min
        return cls(np.linspace(0.0, length, n_steps + 1), edges)

    @property
    def n_z(self) -> int:
        return self.z_nodes.size

    @property
    def n_e(self) -> int:
        return self.e_edges.size - 1

    @property
    def dz(self) -> float:
        return float(self.z_nodes[1] - self.z_nodes[0])

    @property
    def length(self) -> float:
        return float(self.z_nodes[-1])

    @property
    def de(self) -> np.ndarray:
        return np.diff(self.e_edges)

    @property
    def e_centers(self) -> np.ndarray:
        return 0.5 * (self.e_edges[1:] + self.e_edges[:-1])


def _inverse_residual_range(medium: Medium, r: np.ndarray) -> np.ndarray:
    a, p, es = medium.alpha, medium.p, medium.e_screen
    r_screen = a * p * es**p
    r = np.asarray(r, dtype=float)
    below = r / (a * p * es ** (p - 1.0))
    above = (np.maximum(r - r_screen, 0.0) / a + es**p) ** (1.0 / p)
    return np.where(r <= r_screen, below, above)


@dataclass
class Field2D:
    """Values on (depth node, energy cell); ``role`` says what they are."""

    mesh: Mesh1D
    values: np.ndarray
    role: str = "fluence"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_z, self.mesh.n_e):
            raise ValueError("field shape does not match the mesh")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field has non-finite entries")

    @property
    def trace(self) -> np.ndarray:
        """Values on the entrance plane z = 0."""
        return self.values[0]


def _as_phantom(medium: Medium | Phantom) -> Phantom:
    return medium if isinstance(medium, Phantom) else Phantom.homogeneous(medium)


def _cell_stopping(medium: Medium, mesh: Mesh1D) -> np.ndarray:
    return mean_stopping_power(medium, mesh.e_edges[:-1], mesh.e_edges[1:])


def step_fractions(mesh: Mesh1D, medium: Medium | Phantom, cfl_limit: float = 1.0) -> np.ndarray:
    """``nu[i, j]``: fraction of cell j that drops one cell during step i -> i+1.

    The medium of step i is the one at the step midpoint.
    """
    phantom = _as_phantom(medium)
    mids = mesh.z_nodes[:-1] + 0.5 * mesh.dz
    layers = np.asarray(phantom.layer_index(mids))
    nu = np.empty((mesh.n_z - 1, mesh.n_e))
    for k in np.unique(layers):
        nu[layers == k] = _cell_stopping(phantom.media[k], mesh) * mesh.dz / mesh.de
    worst = float(nu.max())
    if worst > cfl_limit * (1.0 + NU_TOL):
        i, j = np.unravel_index(int(np.argmax(nu)), nu.shape)
        raise CFLError(
            f"S*dz/dE = {worst:.6g} exceeds {cfl_limit:g} at z = {mesh.z_nodes[i]:.6g} cm, "
            f"E = {mesh.e_centers[j]:.6g} MeV; refine dz or coarsen the energy cells"
        )
    return np.minimum(nu, 1.0)


def _step(psi: np.ndarray, nu: np.ndarray, de: np.ndarray) -> np.ndarray:
    out = (1.0 - nu) * psi
    out[:-1] += (nu[1:] * psi[1:]) * (de[1:] / de[:-1])
    return out


def _step_transpose(z: np.ndarray, nu: np.ndarray, de: np.ndarray) -> np.ndarray:
    out = (1.0 - nu) * z
    out[1:] += nu[1:] * (de[1:] / de[:-1]) * z[:-1]
    return out


def solve_forward(g: np.ndarray, mesh: Mesh1D, medium: Medium | Phantom, cfl_limit: float = 1.0) -> Field2D:
    """Fluence for entrance spectrum ``g`` (density per MeV on the energy cells)."""
    g = np.asarray(g, dtype=float)
    if g.shape != (mesh.n_e,):
        raise ValueError(f"inflow spectrum needs {mesh.n_e} entries")
    if np.any(g < 0):
        raise ValueError("inflow spectrum must be >= 0")
    nu = step_fractions(mesh, medium, cfl_limit)
    de = mesh.de
    psi = np.empty((mesh.n_z, mesh.n_e))
    psi[0] = g
    for i in range(mesh.n_z - 1):
        psi[i + 1] = _step(psi[i], nu[i], de)
    return Field2D(mesh, psi, "fluence")


def node_dose_weights(mesh: Mesh1D, medium: Medium | Phantom) -> np.ndarray:
    """``kappa[i, j]``: dose at node i per unit fluence in cell j, S_j dE_j / rho."""
    phantom = _as_phantom(medium)
    layers = np.asarray(phantom.layer_index(mesh.z_nodes))
    kappa = np.empty((mesh.n_z, mesh.n_e))
    for k in np.unique(layers):
        m = phantom.media[k]
        kappa[layers == k] = _cell_stopping(m, mesh) * mesh.de / m.rho
    return kappa


def depth_projection(mesh: Mesh1D, z_edges: np.ndarray) -> np.ndarray:
    """``P[b, i]``: share of node i's interval in depth bin b, over the bin width.

    Node i stands for ``[z_i - dz/2, z_i + dz/2]`` clipped to the slab, so
    ``P @ f(z_nodes)`` is the bin average of a nodal quantity.
    """
    z_edges = np.asarray(z_edges, dtype=float)
    lo = np.clip(mesh.z_nodes - 0.5 * mesh.dz, 0.0, mesh.length)
    hi = np.clip(mesh.z_nodes + 0.5 * mesh.dz, 0.0, mesh.length)
    overlap = np.clip(np.minimum(hi[None, :], z_edges[1:, None]) - np.maximum(lo[None, :], z_edges[:-1, None]), 0.0, None)
    return overlap / np.diff(z_edges)[:, None]


def energy_projection(mesh: Mesh1D, e_edges: np.ndarray) -> np.ndarray:
    """``Q[j, m]``: share of cell j's energy width inside bin m, over the bin width."""
    e_edges = np.asarray(e_edges, dtype=float)
    lo, hi = mesh.e_edges[:-1], mesh.e_edges[1:]
    overlap = np.clip(np.minimum(hi[:, None], e_edges[None, 1:]) - np.maximum(lo[:, None], e_edges[None, :-1]), 0.0, None)
    return overlap / np.diff(e_edges)[None, :]


def node_dose(field: Field2D, medium: Medium | Phantom) -> np.ndarray:
    return np.sum(field.values * node_dose_weights(field.mesh, medium), axis=1)


def bin_dose(field: Field2D, medium: Medium | Phantom, z_edges: np.ndarray) -> DoseMap:
    """Average dose over each depth bin (no statistical error)."""
    return DoseMap(z_edges, depth_projection(field.mesh, z_edges) @ node_dose(field, medium))


def binned_fluence(field: Field2D, grid: Grid) -> np.ndarray:
    """Fluence averaged over the (depth, energy) bins of a tally grid."""
    return depth_projection(field.mesh, grid.z_edges) @ field.values @ energy_projection(field.mesh, grid.e_edges)


def solve_adjoint(residual: np.ndarray, mesh: Mesh1D, medium: Medium | Phantom, z_edges: np.ndarray,
                  weights: np.ndarray | None = None, q_factor: float = 1.0, cfl_limit: float = 1.0) -> Field2D:
    """Adjoint field for the cost ``sum_b w_b (D_b - d_b)^2 dz_b``.

    ``residual`` is ``D_b - d_b`` on the depth bins ``z_edges``.  The source
    at node i and cell j is ``q * sum_b 2 w_b dz_b r_b P[b, i] * S_j dE_j / rho``
    and the field vanishes past the exit plane; ``trace`` (z = 0) is the
    derivative of the cost with respect to the entrance spectrum values.
    """
    residual = np.asarray(residual, dtype=float)
    z_edges = np.asarray(z_edges, dtype=float)
    if residual.shape != (z_edges.size - 1,):
        raise ValueError("residual needs one entry per depth bin")
    weights = np.ones_like(residual) if weights is None else np.asarray(weights, dtype=float)
    nu = step_fractions(mesh, medium, cfl_limit)
    src_nodes = depth_projection(mesh, z_edges).T @ (2.0 * weights * np.diff(z_edges) * residual)
    source = q_factor * src_nodes[:, None] * node_dose_weights(mesh, medium)
    de = mesh.de
    z = np.empty((mesh.n_z, mesh.n_e))
    z[-1] = source[-1]
    for i in range(mesh.n_z - 2, -1, -1):
        z[i] = source[i] + _step_transpose(z[i + 1], nu[i], de)
    return Field2D(mesh, z, "adjoint")


@dataclass
class DiscreteOperator:
    """Sparse matrix of the march acting on the nodes beyond the entrance plane.

    Row block i (node i >= 1) reads ``(psi_i - M_{i-1} psi_{i-1}) / dz``;
    the entrance values are lifted into the right-hand side by ``lift``.
    """

    mesh: Mesh1D
    matrix: sp.csr_matrix
    nu: np.ndarray

    def lift(self, g: np.ndarray) -> np.ndarray:
        rhs = np.zeros(self.matrix.shape[0])
        rhs[: self.mesh.n_e] = _step(np.asarray(g, dtype=float), self.nu[0], self.mesh.de) / self.mesh.dz
        return rhs

    def weights(self) -> np.ndarray:
        """Quadrature weights (dE dz per unknown) of the discrete L2 product."""
        return np.tile(self.mesh.de, self.mesh.n_z - 1) * self.mesh.dz


def assemble_operator(mesh: Mesh1D, medium: Medium | Phantom, cfl_limit: float = 1.0) -> DiscreteOperator:
    nu = step_fractions(mesh, medium, cfl_limit)
    n_e, n_rows = mesh.n_e, (mesh.n_z - 1) * mesh.n_e
    de = mesh.de
    rows, cols, vals = [np.arange(n_rows)], [np.arange(n_rows)], [np.full(n_rows, 1.0 / mesh.dz)]
    j = np.arange(n_e)
    # unknown (node i, cell j) sits at (i - 1) * n_e + j; node i couples to node i - 1
    for i in range(2, mesh.n_z):
        base, prev, m = (i - 1) * n_e, (i - 2) * n_e, nu[i - 1]
        rows.append(base + j)
        cols.append(prev + j)
        vals.append(-(1.0 - m) / mesh.dz)
        rows.append(base + j[:-1])
        cols.append(prev + j[1:])
        vals.append(-m[1:] * (de[1:] / de[:-1]) / mesh.dz)
    matrix = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_rows, n_rows)
    )
    return DiscreteOperator(mesh, matrix, nu)


def monotonicity_check(op: DiscreteOperator | np.ndarray) -> float:
    """Smallest eigenvalue of the symmetric part of the operator.

    The quadratic form uses the discrete L2 product (weights dE dz), i.e. the
    eigenvalue of ``W^-1/2 sym(W A) W^-1/2``; on uniform energy cells this is
    ``lambda_min((A + A^T) / 2)``.  A bare matrix is taken as is.
    """
    if isinstance(op, DiscreteOperator):
        a = op.matrix.toarray()
        w = op.weights()
    else:
        a = np.asarray(op, dtype=float)
        w = np.ones(a.shape[0])
    if a.shape[0] > 5000:
        raise ValueError("monotonicity_check is meant for meshes with at most 5000 unknowns")
    sw = np.sqrt(w)
    wa = w[:, None] * a
    sym = 0.5 * (wa + wa.T) / (sw[:, None] * sw[None, :])
    return float(np.linalg.eigvalsh(sym)[0])


def beam_spectrum(mean: float, sigma: float, weight: float, mesh: Mesh1D,
                  window: EnergyWindow | None = None) -> np.ndarray:
    """Entrance spectrum (per MeV on the mesh cells) of a Gaussian beam.

    The Gaussian is truncated to the window like the Monte Carlo source; a
    zero-width beam puts its weight into the cell holding ``mean``.
    """
    lo_e = window.e_min if window else mesh.e_edges[0]
    hi_e = window.e_max if window else mesh.e_edges[-1]
    edges = np.clip(mesh.e_edges, lo_e, hi_e)
    if sigma == 0:
        j = int(np.searchsorted(mesh.e_edges, mean, side="left")) - 1
        if not 0 <= j < mesh.n_e:
            raise ValueError(f"beam energy {mean} MeV lies outside the mesh")
        g = np.zeros(mesh.n_e)
        g[j] = weight / mesh.de[j]
        return g
    cdf = ndtr((edges - mean) / sigma)
    total = ndtr((hi_e - mean) / sigma) - ndtr((lo_e - mean) / sigma)
    if (cdf[-1] - cdf[0]) < total * (1.0 - 1e-9):
        raise ValueError(f"mesh [{mesh.e_edges[0]}, {mesh.e_edges[-1]}] MeV misses part of the beam spectrum")
    return weight * np.diff(cdf) / total / mesh.de
