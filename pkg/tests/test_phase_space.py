import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from protonplan.phase_space import (
    BoundaryClass,
    EnergyWindow,
    PhaseState,
    SpatialDomain,
    classify,
    exit_test,
    normalize,
)

WIN = EnergyWindow(1.0, 250.0)
SLAB = SpatialDomain.slab(8.5)
BOX = SpatialDomain.box(4.0, 4.0, 10.0)


def state(pos, direction, energy):
    return PhaseState(np.asarray(pos, float), normalize(np.asarray(direction, float)), energy)


def test_window_and_domain_validation():
    with pytest.raises(ValueError):
        EnergyWindow(5.0, 5.0)
    with pytest.raises(ValueError):
        EnergyWindow(0.0, 10.0)
    with pytest.raises(ValueError):
        SpatialDomain.slab(0.0)
    with pytest.raises(ValueError):
        SpatialDomain("sphere", (1.0,))


def test_exit_face_outward_is_gamma_plus():
    s = state([0, 0, 8.5], [np.sqrt(0.75), 0, 0.5], 50.0)
    assert classify(s, SLAB, WIN) is BoundaryClass.GAMMA_PLUS


def test_energy_exhaustion_is_gamma_plus():
    assert classify(PhaseState.at_depth(3.0, WIN.e_min), SLAB, WIN) is BoundaryClass.GAMMA_PLUS


def test_entry_face_inward_is_gamma_minus():
    s = PhaseState.at_depth(0.0, 100.0)
    assert classify(s, SLAB, WIN) is BoundaryClass.GAMMA_MINUS


def test_tangent_direction_belongs_to_gamma_plus():
    s = state([0, 0, 0.0], [1, 0, 0], 100.0)
    assert classify(s, SLAB, WIN) is BoundaryClass.GAMMA_PLUS


def test_interior_and_top_energy():
    assert classify(PhaseState.at_depth(4.0, 100.0), SLAB, WIN) is BoundaryClass.INTERIOR
    assert classify(PhaseState.at_depth(4.0, WIN.e_max), SLAB, WIN) is BoundaryClass.GAMMA_MINUS


def test_cemetery_has_no_class():
    with pytest.raises(ValueError):
        classify(PhaseState.cemetery(), SLAB, WIN)


unit = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


@given(st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.sampled_from([0.0, 2.5, 10.0])),
       unit, st.floats(0.5, 260.0))
def test_classify_is_total(pos, direction, energy):
    s = state(pos, direction, energy)
    assert classify(s, BOX, WIN) in set(BoundaryClass)


def test_no_exit_inside():
    a = PhaseState.at_depth(4.0, 50.0)
    b = PhaseState.at_depth(4.1, 49.0)
    assert exit_test(a, b, SLAB, WIN) is None


def test_spatial_exit_interpolates_energy():
    a = PhaseState.at_depth(8.4, 20.0)
    b = PhaseState.at_depth(8.6, 18.0)
    hit = exit_test(a, b, SLAB, WIN)
    assert hit.depth == 8.5
    assert hit.energy == pytest.approx(19.0, rel=1e-12)
    assert classify(hit, SLAB, WIN) is BoundaryClass.GAMMA_PLUS


def test_energy_crossing_mid_step():
    a = PhaseState.at_depth(2.0, 1.5)
    b = PhaseState.at_depth(2.1, 0.5)
    hit = exit_test(a, b, SLAB, WIN)
    # energy falls linearly by 1 MeV over 0.1 cm; e_min = 1 is reached half way
    assert hit.depth == pytest.approx(2.05, rel=1e-12)
    assert hit.energy == WIN.e_min
    assert classify(hit, SLAB, WIN) is BoundaryClass.GAMMA_PLUS


@given(st.floats(0.0, 8.49), st.floats(0.001, 0.5), st.floats(1.01, 200.0), st.floats(0.0, 5.0))
def test_exit_state_is_outflow(z0, step, e0, loss):
    a = PhaseState.at_depth(z0, e0)
    b = PhaseState.at_depth(z0 + step, e0 - loss)
    hit = exit_test(a, b, SLAB, WIN)
    if hit is not None:
        assert classify(hit, SLAB, WIN) is BoundaryClass.GAMMA_PLUS


@given(unit)
def test_normalize_idempotent(v):
    u = normalize(np.array(v))
    assert abs(np.linalg.norm(u) - 1) < 1e-15
    assert np.max(np.abs(normalize(u) - u)) < 1e-15
