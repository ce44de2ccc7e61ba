import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bragg_kleeman, power_energy
from protonplan.materials import BUILTIN_MEDIA, Phantom, csda_path, energy_at_depth, range_
from protonplan.phase_space import EnergyWindow, PhaseState, SpatialDomain
from protonplan.scattering import CrossSections, KernelParams
from protonplan.sde_engine import (
    Beam,
    ConfigError,
    SimConfig,
    Source,
    TransportModel,
    accept_jump,
    drift_diffuse_step,
    next_jump,
    record_tracks,
    run_batch,
    simulate_track,
)
from protonplan.rng import Stream
from protonplan.tally import Grid

WATER = BUILTIN_MEDIA["water"]


def slab(length=12.0, xs=None, window=None):
    return TransportModel.slab(WATER, length, window, xs)


def box(xs=None, size=(20.0, 20.0, 12.0)):
    ph = Phantom.homogeneous(WATER)
    return TransportModel(ph, SpatialDomain.box(*size), EnergyWindow(), xs)


# -- configuration -------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(step_len=0.0), dict(n_particles=0), dict(mu=-1.0),
                                dict(max_track_len=0.001), dict(mode="2d"), dict(seed=-1)])
def test_sim_config_validation(kw):
    with pytest.raises(ConfigError):
        SimConfig(**kw)


def test_empty_source_is_config_error():
    with pytest.raises(ConfigError):
        Source(())
    with pytest.raises(ConfigError):
        Source((Beam(100.0, 0.0, 0.0),))


def test_beam_outside_window_rejected():
    with pytest.raises(ConfigError):
        run_batch(Source.pencil(300.0), slab(), SimConfig(n_particles=1), Grid.uniform(12, 2, 1, 250, 2))


def test_1d_mode_needs_axial_beams_and_slab():
    with pytest.raises(ConfigError):
        run_batch(Source.pencil(100.0), box(), SimConfig(n_particles=1), Grid.uniform(12, 2, 1, 250, 2))
    tilted = Source((Beam(100.0, direction=(0.6, 0.0, 0.8)),))
    with pytest.raises(ConfigError):
        run_batch(tilted, slab(), SimConfig(n_particles=1), Grid.uniform(12, 2, 1, 250, 2))


# -- single steps ------------------------------------------------------------------

def test_deterministic_limit_of_steps():
    cfg = SimConfig(mu=0.0, mode="3d")
    s = PhaseState([0, 0, 0], [0, 0, 1], 100.0)
    e_ref = 100.0
    dt = 0.01
    for _ in range(50):
        s = drift_diffuse_step(s, dt, WATER, cfg, np.random.default_rng(0))
        e_ref -= bragg_kleeman(WATER.alpha, WATER.p, e_ref) * dt
    assert s.position[2] == pytest.approx(50 * dt, rel=1e-12)
    assert s.energy == pytest.approx(e_ref, rel=1e-12)
    assert np.array_equal(s.direction, [0, 0, 1])


@given(st.floats(0.0, 2.0), st.floats(1e-4, 0.1), st.integers(0, 2**32))
def test_step_keeps_unit_direction(mu, dt, seed):
    cfg = SimConfig(mu=mu, mode="3d")
    d = np.array([0.3, -0.4, math.sqrt(0.75)])
    s = PhaseState([0, 0, 1], d / np.linalg.norm(d), 80.0)
    out = drift_diffuse_step(s, dt, WATER, cfg, np.random.default_rng(seed))
    assert abs(np.linalg.norm(out.direction) - 1.0) < 1e-12


def test_small_angle_moment():
    mu, dt, n = 0.1, 0.01, 100_000
    cfg = SimConfig(mu=mu, mode="3d")
    s = PhaseState([0, 0, 1], [0, 0, 1], 80.0)
    rng = np.random.default_rng(7)
    x = np.array([1.0 - drift_diffuse_step(s, dt, WATER, cfg, rng).direction[2] for _ in range(n)])
    se = x.std(ddof=1) / math.sqrt(n)
    assert abs(x.mean() - mu**2 * dt) < 3 * se


def test_small_angle_moment_with_counter_stream():
    mu, dt, n = 0.3, 0.01, 20_000
    cfg = SimConfig(mu=mu, mode="3d")
    s = PhaseState([0, 0, 1], [0, 0, 1], 80.0)
    rng = Stream(11)
    x = np.array([1.0 - drift_diffuse_step(s, dt, WATER, cfg, rng).direction[2] for _ in range(n)])
    assert abs(x.mean() - mu**2 * dt) < 3 * x.std(ddof=1) / math.sqrt(n)


def test_next_jump():
    rng = np.random.default_rng(0)
    assert next_jump(0.0, rng) == math.inf
    with pytest.raises(ValueError):
        next_jump(-1.0, rng)
    r = 0.37
    x = np.array([next_jump(r, rng) for _ in range(100_000)])
    assert abs(x.mean() - 1 / r) < 3 * x.std(ddof=1) / math.sqrt(x.size)


def test_thinning_at_the_bound_accepts_everything():
    xs = CrossSections.uniform(Phantom.homogeneous(WATER), 0.2, 0.05)
    s = PhaseState([0, 0, 1], [0, 0, 1], 80.0)
    rng = np.random.default_rng(0)
    assert all(accept_jump(s, xs, 0.25, rng) for _ in range(1000))
    frac = np.mean([accept_jump(s, xs, 0.5, rng) for _ in range(20_000)])
    assert abs(frac - 0.5) < 3 * math.sqrt(0.25 / 20_000)
    with pytest.raises(ValueError):
        accept_jump(s, xs, 0.1, rng)


# -- tracks ------------------------------------------------------------------------

def test_track_leaves_thin_slab():
    assert range_(WATER, 150.0) > 8.5
    ev = simulate_track(PhaseState.at_depth(0.0, 150.0), slab(8.5), SimConfig())
    assert ev[-1].cause == "spatial-exit"
    assert ev[-1].end.depth == 8.5
    assert all(e.cause is None for e in ev[:-1])


def test_track_ranges_out_and_deposits_its_energy():
    e0 = (3.37 / WATER.alpha) ** (1 / WATER.p)
    ev = simulate_track(PhaseState.at_depth(0.0, e0), slab(8.5), SimConfig())
    assert ev[-1].cause == "range-out"
    assert ev[-1].end.energy == 1.0
    total = sum(e.deposited_energy for e in ev)
    assert total == pytest.approx(e0 - 1.0, rel=1e-12)
    assert ev[-1].end.depth == pytest.approx(3.37 - range_(WATER, 1.0), rel=0.01)


def test_single_step_budget_gives_max_length():
    ev = simulate_track(PhaseState.at_depth(0.0, 100.0), slab(), SimConfig(step_len=0.01, max_track_len=0.01))
    assert len(ev) == 1
    assert ev[0].cause == "max-length"


def test_track_cannot_start_on_outflow():
    with pytest.raises(ValueError):
        simulate_track(PhaseState.at_depth(12.0, 100.0), slab(12.0), SimConfig())


def test_segments_bounded_by_step():
    ev = simulate_track(PhaseState.at_depth(0.0, 100.0), slab(), SimConfig(step_len=0.02))
    lens = np.array([e.seg_len for e in ev])
    assert np.all(lens > 0) and np.all(lens <= 0.02 * (1 + 1e-12))
    assert all(e.deposited_energy >= 0 for e in ev)
    assert len(ev) <= 1.02 * range_(WATER, 100.0) / 0.02 + 1


def test_csda_depth_energy_curve():
    for h in (0.01, 0.005):
        ev = record_tracks(Source.pencil(105.0), slab(), SimConfig(step_len=h), 1)
        z, e = ev["x1"][:, 2], ev["e1"]
        dev = np.abs(z - csda_path(WATER, 105.0, e)).max() / range_(WATER, 105.0)
        assert dev < 0.01
        high = e > 20.0
        exact = np.array([power_energy(WATER.alpha, WATER.p, 105.0, zz) for zz in z[high]])
        assert np.max(np.abs(e[high] - exact) / exact) < 0.01


def test_energy_monotone_and_unit_directions_with_scattering():
    xs = CrossSections.uniform(Phantom.homogeneous(WATER), 0.5, 0.1, KernelParams(kappa_e=50.0))
    ev = record_tracks(Source.pencil(100.0), box(xs), SimConfig(mu=0.2, mode="3d"), 50)
    assert np.all(ev["e1"] <= ev["e0"])
    pid = ev["particle"]
    same = pid[1:] == pid[:-1]
    assert np.all(ev["e0"][1:][same] <= ev["e1"][:-1][same])
    for key in ("dir0", "dir1"):
        assert np.max(np.abs(np.linalg.norm(ev[key], axis=1) - 1.0)) < 1e-12


def test_non_elastic_jump_below_floor_is_range_out():
    xs = CrossSections.uniform(Phantom.homogeneous(WATER), 0.0, 5.0, KernelParams(ne_frac_min=0.05, ne_frac_max=0.1))
    ev = record_tracks(Source.pencil(15.0), slab(), SimConfig(), 200)
    last = np.r_[ev["particle"][1:] != ev["particle"][:-1], True]
    assert np.all(ev["cause"][last] == 1)


# -- batches -------------------------------------------------------------------------

GRID = Grid.uniform(12.0, 60, 1.0, 251.0, 50)


def test_batch_of_one_matches_single_track():
    src = Source.pencil(90.0)
    res = run_batch(src, slab(), SimConfig(), GRID, n=1)
    ev = simulate_track(PhaseState.at_depth(0.0, 90.0), slab(), SimConfig())
    assert res.deposits.energy_sum.sum() == pytest.approx(sum(e.deposited_energy for e in ev), rel=1e-12)
    assert res.fluence.track_sum.sum() == pytest.approx(sum(e.seg_len for e in ev), rel=1e-12)


@pytest.mark.parametrize("mode", ["1d", "3d"])
def test_thread_count_does_not_change_tallies(mode):
    xs = CrossSections.uniform(Phantom.homogeneous(WATER), 0.3, 0.05)
    model = slab(xs=xs) if mode == "1d" else box(xs)
    src = Source((Beam(100.0, 2.0),))
    cfg = SimConfig(mu=0.1, mode=mode, seed=123, chunk_size=64)
    ref = run_batch(src, model, cfg, GRID, n=700, threads=1)
    for threads in (4, 8):
        res = run_batch(src, model, cfg, GRID, n=700, threads=threads)
        assert np.array_equal(res.fluence.track_sum, ref.fluence.track_sum)
        assert np.array_equal(res.fluence.track_sq, ref.fluence.track_sq)
        assert np.array_equal(res.deposits.energy_sum, ref.deposits.energy_sum)
        assert res.balance == ref.balance


def test_seed_changes_results():
    src = Source((Beam(100.0, 2.0),))
    a = run_batch(src, slab(), SimConfig(seed=1), GRID, n=200)
    b = run_batch(src, slab(), SimConfig(seed=2), GRID, n=200)
    assert not np.array_equal(a.deposits.energy_sum, b.deposits.energy_sum)


def test_standard_error_scales_with_sqrt_n():
    xs = CrossSections.uniform(Phantom.homogeneous(WATER), 0.0, 0.05)
    src = Source((Beam(100.0, 1.0),))
    small = run_batch(src, slab(xs=xs), SimConfig(seed=5), GRID, n=4000).direct_dose(WATER)
    large = run_batch(src, slab(xs=xs), SimConfig(seed=6), GRID, n=16000).direct_dose(WATER)
    k = int(np.argmax(large.dose))
    ratio = large.stderr[k] / small.stderr[k]
    assert ratio == pytest.approx(0.5, rel=0.15)


def test_balance_counts():
    res = run_batch(Source.pencil(150.0), slab(8.5), SimConfig(), GRID, n=100)
    b = res.balance
    assert b["n_exit"] == 100 and b["n_range_out"] == 0
    lhs = b["deposited"] + b["released"] + b["escaped"] + b["residual"] + b["truncated"]
    assert b["injected"] == pytest.approx(lhs, rel=1e-12)
    assert b["escaped"] == pytest.approx(100 * float(energy_at_depth(WATER, 150.0, 8.5)), rel=0.01)
