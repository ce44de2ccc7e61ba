import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from protonplan.materials import BUILTIN_MEDIA, Phantom
from protonplan.phase_space import EnergyWindow, PhaseState
from protonplan.scattering import (
    CrossSections,
    KernelParams,
    kernel_mass,
    sample_transition,
    total_rate,
    transition,
)

WATER = Phantom.homogeneous(BUILTIN_MEDIA["water"])
START = PhaseState(np.zeros(3), np.array([0.0, 0.0, 1.0]), 100.0)


def xs(se, sne, kernel=None, **kw):
    return CrossSections.uniform(WATER, se, sne, kernel, **kw)


def test_total_rate_examples():
    assert total_rate(START, xs(0.0, 0.0)) == 0.0
    assert total_rate(START, xs(0.1, 0.02)) == pytest.approx(0.12)


def test_total_rate_jumps_at_interface():
    ph = Phantom.layered([(0.0, BUILTIN_MEDIA["water"]), (2.0, BUILTIN_MEDIA["bone"])])
    c = CrossSections(ph, (0.1, 0.3), (0.0, 0.05), (KernelParams(), KernelParams()))
    below = PhaseState([0, 0, 2.0 - 1e-9], [0, 0, 1], 50.0)
    at = PhaseState([0, 0, 2.0], [0, 0, 1], 50.0)
    assert total_rate(below, c) == pytest.approx(0.1)
    assert total_rate(at, c) == pytest.approx(0.35)


def test_power_law_energy_dependence_and_bound():
    c = xs(0.2, 0.1, e_ref=100.0, q_e=-1.0, q_ne=0.5)
    se, sne = c.components(0.0, 50.0)
    assert se == pytest.approx(0.4) and sne == pytest.approx(0.1 * math.sqrt(0.5))
    bound = c.rate_bound(EnergyWindow(1.0, 250.0))
    for e in np.linspace(1.0, 250.0, 200):
        assert sum(c.components(0.0, e)) <= bound * (1 + 1e-12)


@pytest.mark.parametrize("kw", [dict(kappa_e=0.0), dict(kappa_ne=-1.0), dict(ne_frac_min=0.0),
                                dict(ne_frac_min=0.9, ne_frac_max=0.8), dict(ne_frac_max=1.2)])
def test_invalid_kernel_params(kw):
    with pytest.raises(ValueError):
        KernelParams(**kw)


def test_negative_cross_section_rejected():
    with pytest.raises(ValueError):
        xs(-0.1, 0.0)


def test_pure_elastic_conserves_energy_exactly():
    rng = np.random.default_rng(0)
    c = xs(0.3, 0.0)
    for _ in range(2000):
        _, e = sample_transition(START, c, None, rng)
        assert e == START.energy


def test_concentration_limit():
    rng = np.random.default_rng(1)
    c = xs(0.3, 0.0, KernelParams(kappa_e=1e6))
    for _ in range(2000):
        d, _ = sample_transition(START, c, None, rng)
        assert d @ START.direction > 0.999


def test_elastic_fraction_binomial():
    rng = np.random.default_rng(2)
    n = 100_000
    u = rng.random((n, 4))
    e = np.array([transition(0.0, 0.0, 1.0, 100.0, 0.75, 200.0, 5.0, 0.5, 0.95, *row)[3] for row in u])
    frac = np.mean(e == 100.0)
    assert abs(frac - 0.75) < 3 * math.sqrt(0.75 * 0.25 / n)


def test_elastic_fraction_through_cross_sections():
    rng = np.random.default_rng(3)
    c = xs(0.3, 0.1)
    n = 20_000
    kept = sum(sample_transition(START, c, None, rng)[1] == START.energy for _ in range(n))
    assert abs(kept / n - 0.75) < 3 * math.sqrt(0.75 * 0.25 / n)


def test_zero_rate_is_a_contract_violation():
    with pytest.raises(ValueError):
        sample_transition(START, xs(0.0, 0.0), None, np.random.default_rng(0))
    with pytest.raises(ValueError):
        kernel_mass(START, xs(0.0, 0.0))


directions = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda v: np.linalg.norm(v) > 1e-3)
unit_interval = st.floats(1e-12, 1 - 1e-12)


@given(directions, st.floats(1.5, 250.0), st.floats(0, 1), st.floats(0.01, 1e5), st.floats(0.01, 1e3),
       unit_interval, unit_interval, unit_interval, unit_interval)
def test_transition_invariants(d, energy, p_el, k_e, k_ne, u0, u1, u2, u3):
    d = np.array(d) / np.linalg.norm(d)
    nx, ny, nz, e_new = transition(d[0], d[1], d[2], energy, p_el, k_e, k_ne, 0.5, 0.95, u0, u1, u2, u3)
    assert abs(math.sqrt(nx * nx + ny * ny + nz * nz) - 1.0) < 1e-12
    if u0 < p_el:
        assert e_new == energy
    else:
        assert 0 < e_new < energy


def test_elastic_polar_angle_ks():
    rng = np.random.default_rng(4)
    kappa = 50.0
    n = 100_000
    u = rng.random((n, 4))
    cos = np.array([transition(0.0, 0.0, 1.0, 100.0, 1.0, kappa, 5.0, 0.5, 0.95, *row)[2] for row in u])

    def cdf(w):
        # density on [-1, 1] proportional to exp(kappa w)
        return (np.exp(kappa * (w - 1.0)) - np.exp(-2.0 * kappa)) / (1.0 - np.exp(-2.0 * kappa))

    assert stats.kstest(cos, cdf).pvalue > 0.01


def test_kernel_mass_pure_elastic():
    assert kernel_mass(START, xs(0.3, 0.0)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("kernel", [KernelParams(), KernelParams(kappa_e=1e4, kappa_ne=0.5),
                                    KernelParams(ne_frac_min=0.9, ne_frac_max=0.9)])
def test_kernel_mass_mixture(kernel):
    assert kernel_mass(START, xs(0.2, 0.07, kernel), resolution=10_000) == pytest.approx(1.0, abs=1e-6)


def test_mixture_weights_sum_to_one():
    se, sne = xs(0.2, 0.07).components(0.0, 100.0)
    assert se / (se + sne) + sne / (se + sne) == 1.0
