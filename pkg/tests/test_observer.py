import math

import numpy as np
import pytest

from setkkl.dynsys import EXAMPLE_NAMES, example_registry
from setkkl.exceptions import EmptySet, SignalGap
from setkkl.models import FilterPair, InversionConfig, NoiseSpec, OutputSignal, PointSet
from setkkl.observer import (
    ObserverSetup,
    check_amplitudes,
    continuous_selection,
    default_jump_tol,
    estimate_indices,
    fit_decay_slope,
    iss_sweep,
    run_filter,
    run_set_observer,
    sample_noise,
    select_path,
    separation_check,
    short_arc_check,
    steady_state_floor,
)
from setkkl.setvalued import empirical_lipschitz
from setkkl.transform import TransformField, make_filter_pair, tabulate_image

X0 = np.array([1.2, 0.0])


@pytest.fixture(scope="module")
def limit_cycle_setup():
    system = example_registry("limit_cycle_squared_output", grid_resolution=11)
    pair = make_filter_pair(system.n_y, 3, [-4.0, -5.0, -6.0])
    field = TransformField.build(system, pair, step=2e-2)
    return system, field, tabulate_image(field)


@pytest.fixture(scope="module")
def matched_run(limit_cycle_setup):
    """Run started on the image of the true state."""
    system, field, atlas = limit_cycle_setup
    return run_set_observer(
        system, field, atlas, None, X0, field.evaluate(X0), horizon=3.0, step=2e-2,
        cfg=InversionConfig(residual_tol=1e-4, max_rejections=12), decimation=25,
        initial_guess=X0,
    )


# Filter

def test_run_filter_first_order_response():
    pair = FilterPair(A_o=[[-1.0]], B_o=[1.0], n_y=1)
    y = OutputSignal(times=[0.0, 2.0], values=[[1.0], [1.0]])
    traj = run_filter(pair, y, np.zeros(1), step=1e-2)
    assert traj.times[-1] == 2.0
    np.testing.assert_allclose(traj.final, [1.0 - math.exp(-2.0)], atol=1e-9)


def test_run_filter_gap_and_single_node():
    pair = FilterPair(A_o=[[-1.0]], B_o=[1.0], n_y=1)
    y = OutputSignal(times=[0.0, 1.0], values=[[0.0], [1.0]])
    with pytest.raises(SignalGap) as exc:
        run_filter(pair, y, np.zeros(1), step=1e-2, t1=2.0)
    assert exc.value.requested == (0.0, 2.0)
    single = run_filter(pair, y, np.array([0.5]), step=1e-2, t0=0.5, t1=0.5)
    assert len(single) == 1
    np.testing.assert_array_equal(single.final, [0.5])


# Noise and decimation

def test_sample_noise_kinds():
    times = np.linspace(0.0, 1.0, 11)
    np.testing.assert_array_equal(sample_noise(NoiseSpec(), times, 2), np.zeros((11, 2)))
    uniform = sample_noise(NoiseSpec(kind="uniform", amplitude=0.1, seed=3), times, 2)
    assert uniform.shape == (11, 2)
    assert np.all(np.abs(uniform) <= 0.1)
    np.testing.assert_array_equal(
        uniform, sample_noise(NoiseSpec(kind="uniform", amplitude=0.1, seed=3), times, 2)
    )
    wave = sample_noise(NoiseSpec(kind="sinusoid", amplitude=0.2), times, 1)
    assert np.max(np.abs(wave)) <= 0.2


def test_estimate_indices_keep_last_node():
    np.testing.assert_array_equal(estimate_indices(10, 4), [0, 4, 8, 9])
    np.testing.assert_array_equal(estimate_indices(9, 4), [0, 4, 8])
    np.testing.assert_array_equal(estimate_indices(1, 4), [0])
    with pytest.raises(ValueError):
        estimate_indices(5, 0)


# Selection

def test_select_path_follows_nearest_branch():
    times = np.arange(4.0)
    estimates = [
        PointSet(points=[[-1.0], [1.0]]),
        PointSet(points=[[-1.1], [1.1]]),
        PointSet.empty(1),
        PointSet(points=[[-1.2], [1.2]]),
    ]
    result = select_path(estimates, times, initial_guess=np.array([0.9]), jump_tol=0.5)
    np.testing.assert_allclose(result.path[:, 0], [1.0, 1.1, 1.1, 1.2])
    assert result.gaps == [2]
    assert result.continuous
    assert result.max_jump == pytest.approx(0.1)


def test_select_path_reports_jumps_after_settling():
    times = np.arange(3.0)
    estimates = [PointSet(points=[[0.0]]), PointSet(points=[[2.0]]), PointSet(points=[[2.1]])]
    early = select_path(estimates, times, jump_tol=0.5)
    assert not early.continuous
    settled = select_path(estimates, times, jump_tol=0.5, settle_time=2.0)
    assert settled.continuous
    assert settled.settled_max_jump == pytest.approx(0.1)


def test_select_path_empty_start_needs_guess():
    with pytest.raises(EmptySet):
        select_path([PointSet.empty(1)], np.zeros(1))
    result = select_path([PointSet.empty(1)], np.zeros(1), initial_guess=np.array([0.3]))
    assert result.gaps == [0]
    assert result.max_jump == 0.0


def test_default_jump_tol():
    assert default_jump_tol(np.zeros((1, 2))) == 0.0
    assert default_jump_tol(np.array([[0.0, 0.0], [0.3, 0.4], [0.3, 0.5]])) == pytest.approx(2.5)


# Observer runs

def test_matched_run_tracks_both_branches(matched_run):
    run = matched_run
    np.testing.assert_allclose(run.times, np.linspace(0.0, 3.0, 7))
    assert run.provenance == "analytic"
    assert not run.exited_domain
    assert np.max(run.z_error_series) < 1e-2
    assert all(e.cardinality == 2 for e in run.estimates)
    assert np.max(run.hausdorff_series) < 0.1
    # the selection stays on the true state rather than its mirror image
    np.testing.assert_array_less(run.selection_error_series[:, 0], 0.1)
    assert run.selection_result.continuous


def test_continuous_selection_recomputes_certificate(matched_run):
    result = continuous_selection(matched_run, initial_guess=-X0, settle_fraction=0.5)
    np.testing.assert_array_less(np.linalg.norm(result.path + matched_run.truth.states, axis=1), 0.1)
    assert result.jump_tol == pytest.approx(default_jump_tol(matched_run.truth.states))
    with pytest.raises(ValueError):
        continuous_selection(matched_run, settle_fraction=1.0)


def test_zero_start_converges(limit_cycle_setup):
    system, field, atlas = limit_cycle_setup
    run = run_set_observer(system, field, atlas, None, X0, None, horizon=3.0, step=2e-2,
                           cfg=InversionConfig(residual_tol=1e-4, max_rejections=12),
                           decimation=50)
    assert run.z_error_series[-1] < 0.2 * run.z_error_series[0]
    assert all(not e.is_empty for e in run.estimates)


def _slowest_block_offset(field, size):
    # A_o = diag(-4, -5, -6): coordinates 0 and 3 carry the slowest rate in both channels
    offset = np.zeros(field.n_z)
    offset[[0, 3]] = size / np.sqrt(2.0)
    return offset


def test_filter_error_contracts_at_the_slowest_rate(limit_cycle_setup):
    system, field, atlas = limit_cycle_setup
    z0 = field.evaluate(X0) + _slowest_block_offset(field, 1.0)
    run = run_set_observer(system, field, atlas, None, X0, z0, horizon=2.5, step=2e-2,
                           cfg=InversionConfig(residual_tol=1e-4, max_rejections=12), decimation=10)
    assert run.z_error_series[0] == pytest.approx(1.0, rel=1e-3)
    slope = fit_decay_slope(run.times, run.z_error_series)
    assert slope == pytest.approx(-field.pair.hurwitz_margin, rel=0.15)


def test_hausdorff_error_is_dominated_by_filter_error(limit_cycle_setup):
    system, field, atlas = limit_cycle_setup
    cfg = InversionConfig(residual_tol=1e-6, max_rejections=12)
    z0 = field.evaluate(X0) + _slowest_block_offset(field, 5e-3)
    run = run_set_observer(system, field, atlas, None, X0, z0, horizon=1.0, step=2e-2,
                           cfg=cfg, decimation=10)
    assert all(e.cardinality == 2 for e in run.estimates)

    # the run stays near the cycle, away from the rank loss at the origin
    r = np.linalg.norm(atlas.grid_points, axis=1)
    band = (r >= 0.8) & (r <= 1.4)
    local = float(np.max(1.0 / atlas.jacobian_min_sv[band]))
    lipschitz = max(empirical_lipschitz(field, atlas, cfg, seed=3)["max"], local)
    floor = lipschitz * 1e-5
    # first-order bound; 10% covers the curvature over the initial offset
    assert np.all(run.hausdorff_series <= 1.1 * lipschitz * run.z_error_series + floor)


@pytest.mark.parametrize("name", EXAMPLE_NAMES)
def test_graph_invariance_on_every_example(name):
    system = example_registry(name, grid_resolution=5)
    pair = make_filter_pair(system.n_y, 3, [-4.0, -5.0, -6.0])
    horizon, step = 1.0, 1e-2
    field = TransformField.build(system, pair, step=step)
    x0 = system.domain.sample(1, seed=11)[0]
    run = run_set_observer(system, field, tabulate_image(field), None, x0, field.evaluate(x0),
                           horizon=horizon, step=step, cfg=InversionConfig(residual_tol=1e-4),
                           decimation=50)
    assert np.max(run.z_error_series) <= 10.0 * (field.tol_trunc + 1e3 * horizon * step ** 4)


def test_zero_horizon_gives_one_estimate(limit_cycle_setup):
    system, field, atlas = limit_cycle_setup
    run = run_set_observer(system, field, atlas, None, X0, field.evaluate(X0), horizon=0.0,
                           step=2e-2, cfg=InversionConfig(residual_tol=1e-4))
    assert len(run.times) == 1
    assert run.selection_result.jumps.size == 0
    assert run.hausdorff_series[0] < 0.1


def test_observer_input_validation(limit_cycle_setup):
    system, field, atlas = limit_cycle_setup
    with pytest.raises(ValueError):
        run_set_observer(system, field, atlas, None, np.array([2.0, 0.0]), None, 1.0, 2e-2)
    with pytest.raises(ValueError):
        run_set_observer(system, field, atlas, None, X0, np.zeros(3), 1.0, 2e-2)
    with pytest.raises(ValueError):
        run_set_observer(system, field, atlas, None, X0, None, -1.0, 2e-2)


# Diagnostics of runs

def test_steady_state_floor_uses_terminal_window(matched_run):
    mask = matched_run.times >= 0.8 * matched_run.times[-1]
    assert steady_state_floor(matched_run) == pytest.approx(np.max(matched_run.hausdorff_series[mask]))


def test_fit_decay_slope_recovers_rate():
    t = np.linspace(0.0, 10.0, 201)
    assert fit_decay_slope(t, 3.0 * np.exp(-1.5 * t)) == pytest.approx(-1.5, rel=1e-6)
    with pytest.raises(ValueError):
        fit_decay_slope(t, np.ones_like(t))


def test_short_arc_check():
    t = np.linspace(0.0, 4.0 * np.pi, 401)
    circle = np.stack([np.cos(t), np.sin(t)], axis=1)
    assert not short_arc_check(t, circle, window=3.0 * np.pi)["passed"]
    line = np.stack([t, np.zeros_like(t)], axis=1)
    report = short_arc_check(t, line, window=np.pi)
    assert report["passed"]
    assert report["windows"] >= 4
    with pytest.raises(ValueError):
        short_arc_check(t, line, window=0.0)


def test_separation_check(matched_run):
    report = separation_check(matched_run)
    # the two solutions are x and -x on a cycle of radius about one
    assert report["passed"]
    assert report["min_separation"] > 1.5


def test_iss_sweep_keeps_amplitude_order(limit_cycle_setup):
    system, field, atlas = limit_cycle_setup
    setup = ObserverSetup(system=system, field=field, atlas=atlas, x0=X0, horizon=0.5, step=2e-2,
                          z0=field.evaluate(X0), cfg=InversionConfig(residual_tol=1e-4, max_rejections=12),
                          noise=NoiseSpec(kind="uniform", seed=7), decimation=25)
    rows = iss_sweep(setup, [0.0, 0.05])
    assert [r.amplitude for r in rows] == [0.0, 0.05]
    assert all(np.isfinite(r.floor) for r in rows)
    assert setup.noise_at(0.0).kind == "none"
    with pytest.raises(ValueError):
        check_amplitudes([0.1, 0.01])
    with pytest.raises(ValueError):
        check_amplitudes([-0.1])
