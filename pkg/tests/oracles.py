"""Reference computations that do not go through the package's own numerics."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.integrate import solve_ivp


def power_range(alpha: float, p: float, e0: float) -> float:
    return alpha * math.pow(e0, p)


def power_energy(alpha: float, p: float, e0: float, z: float) -> float:
    r = alpha * math.pow(e0, p) - z
    return math.pow(r / alpha, 1.0 / p) if r > 0 else 0.0


def bragg_kleeman(alpha: float, p: float, e: float, e_screen: float = 1.0) -> float:
    return math.pow(max(e, e_screen), 1.0 - p) / (alpha * p)


def integrated_depth(alpha: float, p: float, e0: float, e_stop: float) -> float:
    """Depth where dE/dz = -S(E) first reaches ``e_stop``, by adaptive RK."""
    def rhs(z, y):
        return [-bragg_kleeman(alpha, p, y[0])]

    def hit(z, y):
        return y[0] - e_stop

    hit.terminal = True
    sol = solve_ivp(rhs, (0.0, 10 * power_range(alpha, p, e0)), [e0], events=hit, rtol=1e-10, atol=1e-12)
    return float(sol.t_events[0][0])


def philox_block(seed: int, stream: int, block: int, particle: int) -> np.ndarray:
    """Four 64-bit outputs for counter ``(block, particle, 0, 0)`` via numpy's Philox.

    numpy increments its 256-bit counter before each block, so it is seeded
    with the counter minus one.
    """
    value = (block + (particle << 64) - 1) % (1 << 256)
    words = [(value >> (64 * i)) & ((1 << 64) - 1) for i in range(4)]
    bg = np.random.Philox(key=np.array([seed, stream], dtype=np.uint64),
                          counter=np.array(words, dtype=np.uint64))
    return bg.random_raw(4)


def quadratic_cost(g, D, d, w, dz, alpha_reg) -> float:
    r = D @ g - d
    return float(np.sum(w * dz * r * r) + 0.5 * alpha_reg * g @ g)


def active_set_oracle(D, d, w, dz, alpha_reg, g_max):
    """Box-constrained quadratic minimum by enumerating lower/upper/free per beam."""
    n = D.shape[1]
    H = 2.0 * D.T @ ((w * dz)[:, None] * D) + alpha_reg * np.eye(n)
    b = 2.0 * D.T @ (w * dz * d)
    best, best_g = math.inf, None
    for state in itertools.product((0, 1, 2), repeat=n):
        st = np.array(state)
        g = np.where(st == 1, g_max, 0.0)
        free = st == 2
        if free.any():
            rhs = b[free] - H[np.ix_(free, ~free)] @ g[~free]
            try:
                g[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
            except np.linalg.LinAlgError:
                continue
        if np.any(g < -1e-12) or np.any(g > g_max + 1e-12):
            continue
        g = np.clip(g, 0.0, g_max)
        j = quadratic_cost(g, D, d, w, dz, alpha_reg)
        if j < best:
            best, best_g = j, g
    return best_g, best


def vi_holds_on_vertices(g, grad, g_max, tol=1e-12) -> bool:
    """<grad, v - g> >= 0 for every vertex v of the box [0, g_max]^n."""
    n = g.size
    for corner in itertools.product((0.0, g_max), repeat=n):
        if float(grad @ (np.array(corner) - g)) < -tol:
            return False
    return True


def rel_l2(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))
