import math

import numpy as np
import pytest

from setkkl.dynsys import example_registry
from setkkl.exceptions import EmptyGrid, NotControllable, NotHurwitz
from setkkl.models import DomainSpec
from setkkl.transform import (
    TransformField,
    assemble_atlas,
    conditioning_map,
    evaluate_T,
    jacobian_T,
    linear_transform_matrix,
    make_filter_pair,
    pde_residual,
    split_batches,
    tabulate_image,
    truncation_horizon,
)
from setkkl.utils import central_difference

OSCILLATOR_S = np.array([[0.0, 1.0], [-1.0, 0.0]])
OSCILLATOR_C = np.array([[1.0, 0.0]])


@pytest.fixture(scope="module")
def limit_cycle():
    return example_registry("limit_cycle_squared_output", grid_resolution=9)


@pytest.fixture(scope="module")
def limit_cycle_field(limit_cycle):
    pair = make_filter_pair(limit_cycle.n_y, 3, [-4.0, -5.0, -6.0])
    return TransformField.build(limit_cycle, pair, step=1e-2)


@pytest.fixture(scope="module")
def oscillator():
    return example_registry("harmonic_oscillator", grid_resolution=6)


@pytest.fixture(scope="module")
def oscillator_pair():
    return make_filter_pair(1, 2, [-1.0, -2.0])


def test_make_filter_pair_spectrum():
    pair = make_filter_pair(2, 3, [-1.0, -2.0, -3.0])
    assert pair.n_z == 6
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(pair.A_o).real), [-3.0, -2.0, -1.0])
    assert pair.hurwitz_margin == pytest.approx(1.0)


def test_make_filter_pair_complex_block():
    pair = make_filter_pair(1, 2, [complex(-1.0, 2.0), complex(-1.0, -2.0)])
    np.testing.assert_array_equal(pair.A_o, [[-1.0, 2.0], [-2.0, -1.0]])
    eig = np.linalg.eigvals(pair.A_o)
    np.testing.assert_allclose(np.sort(eig.imag), [-2.0, 2.0])


def test_make_filter_pair_rejects_bad_spectra():
    with pytest.raises(NotHurwitz):
        make_filter_pair(1, 2, [-1.0, 0.0])
    with pytest.raises(NotControllable) as exc:
        make_filter_pair(1, 2, [-1.0, -1.0])
    assert exc.value.rank == 1
    with pytest.raises(ValueError):
        make_filter_pair(1, 2, [complex(-1.0, 1.0), -2.0])
    with pytest.raises(ValueError):
        make_filter_pair(1, 3, [-1.0, -2.0])


def test_perturbation_is_seeded():
    a = make_filter_pair(1, 2, [-1.0, -2.0], seed=4, perturbation=0.1)
    b = make_filter_pair(1, 2, [-1.0, -2.0], seed=4, perturbation=0.1)
    c = make_filter_pair(1, 2, [-1.0, -2.0], seed=5, perturbation=0.1)
    np.testing.assert_array_equal(a.B_o, b.B_o)
    assert not np.array_equal(a.B_o, c.B_o)


def test_truncation_horizon_formula():
    assert truncation_horizon(1.0, 1.0, 1, 1e-6) == pytest.approx(math.log(1e6))
    # slower filters need longer horizons
    assert truncation_horizon(1.0, 0.5, 1, 1e-6) > truncation_horizon(1.0, 1.0, 1, 1e-6)


def test_linear_plant_matches_sylvester(oscillator, oscillator_pair):
    field = TransformField.build(oscillator, oscillator_pair, step=1e-2, tol_trunc=1e-9)
    M = linear_transform_matrix(OSCILLATOR_S, OSCILLATOR_C, oscillator_pair)
    points = oscillator.domain.sample(50, seed=1)
    np.testing.assert_allclose(evaluate_T(field, points), points @ M.T, atol=1e-6)
    np.testing.assert_allclose(jacobian_T(field, points), np.broadcast_to(M, (50,) + M.shape), atol=1e-6)


def test_rk4_quadrature_beats_trapezoid(oscillator, oscillator_pair):
    M = linear_transform_matrix(OSCILLATOR_S, OSCILLATOR_C, oscillator_pair)
    points = oscillator.domain.sample(5, seed=2)
    errors = {}
    for quadrature in TransformField.QUADRATURES:
        field = TransformField.build(oscillator, oscillator_pair, step=1e-2, tol_trunc=1e-9,
                                     quadrature=quadrature)
        errors[quadrature] = np.max(np.abs(field.evaluate(points) - points @ M.T))
    assert errors["trapezoid"] < 1e-3
    assert errors["rk4"] < errors["trapezoid"]


def test_static_plant_closed_form():
    system = example_registry("static")
    pair = make_filter_pair(1, 1, [-1.0])
    field = TransformField.build(system, pair)
    gain = 1.0 - math.exp(-field.horizon)
    x = system.domain.grid()
    np.testing.assert_allclose(field.evaluate(x), gain * x)
    report = conditioning_map(tabulate_image(field))
    np.testing.assert_array_equal(report.cond, np.ones(len(x)))
    assert report.all_full_rank


def test_single_state_shapes(limit_cycle_field):
    x = np.array([0.5, -0.3])
    value, jac = limit_cycle_field.evaluate_with_jacobian(x)
    assert value.shape == (6,)
    assert jac.shape == (6, 2)
    np.testing.assert_array_equal(limit_cycle_field.evaluate(x), value)


def test_jacobian_matches_finite_differences(limit_cycle_field):
    x = np.array([[0.5, -0.3], [1.2, 0.9], [-0.1, 1.4]])
    jac = limit_cycle_field.jacobian(x)
    fd = central_difference(limit_cycle_field.evaluate, x)
    np.testing.assert_allclose(jac, fd, rtol=1e-5, atol=1e-6)


def test_antipodal_points_share_images(limit_cycle_field):
    x = np.array([[0.7, 0.2], [-1.1, 0.4]])
    np.testing.assert_allclose(limit_cycle_field.evaluate(x), limit_cycle_field.evaluate(-x), atol=1e-12)


def test_truncation_tail_below_tolerance(limit_cycle_field):
    doubled = TransformField(
        system=limit_cycle_field.system,
        pair=limit_cycle_field.pair,
        horizon=2.0 * limit_cycle_field.horizon,
        step=limit_cycle_field.step,
    )
    x = limit_cycle_field.system.domain.sample(4, seed=0)
    gap = np.linalg.norm(doubled.evaluate(x) - limit_cycle_field.evaluate(x), axis=-1)
    assert np.all(gap <= limit_cycle_field.tol_trunc)


def test_pde_residual(limit_cycle_field):
    x = limit_cycle_field.system.domain.sample(10, seed=5)
    trapezoid = pde_residual(limit_cycle_field, x)
    forward = pde_residual(limit_cycle_field, x, scheme="forward")
    assert trapezoid.shape == (10,)
    assert np.max(trapezoid) < 1e-3
    assert np.max(trapezoid) < np.max(forward)
    assert isinstance(pde_residual(limit_cycle_field, x[0]), float)
    with pytest.raises(ValueError):
        pde_residual(limit_cycle_field, x, delta=0.0)


def test_tabulation_independent_of_batch_size(limit_cycle_field):
    small = tabulate_image(limit_cycle_field, batch_size=7)
    large = tabulate_image(limit_cycle_field)
    np.testing.assert_array_equal(small.grid_points, large.grid_points)
    np.testing.assert_allclose(small.images, large.images, rtol=0, atol=1e-12)
    assert len(split_batches(small.grid_points, 7)) == math.ceil(len(small) / 7)


def test_empty_tabulation_is_rejected(limit_cycle_field):
    with pytest.raises(EmptyGrid):
        assemble_atlas(np.empty((0, 2)), [], spacing=0.1)
    sparse = DomainSpec(kind="annulus", center=(0.0, 0.0), radius=1.5, inner_radius=0.5, grid_resolution=2)
    with pytest.raises(EmptyGrid):
        tabulate_image(limit_cycle_field, sparse)


def test_rotation_turns_images_twice_as_fast(limit_cycle_field):
    # z = T(x) splits into complex pairs (z_k, z_{k+3}) rotating by 2 phi when x rotates by phi
    x = np.array([[0.6, -0.8], [1.3, 0.2]])
    phi = 0.4
    rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    z = limit_cycle_field.evaluate(x)
    z_rot = limit_cycle_field.evaluate(x @ rot.T)
    w = z[:, :3] + 1j * z[:, 3:]
    w_rot = z_rot[:, :3] + 1j * z_rot[:, 3:]
    np.testing.assert_allclose(w_rot, np.exp(2j * phi) * w, atol=1e-6)


def test_conditioning_flags_rank_loss(limit_cycle_field):
    # the squared output has a vanishing Jacobian at the origin
    domain = DomainSpec(kind="box", lower=(-0.5, -0.5), upper=(0.5, 0.5), grid_resolution=3)
    report = conditioning_map(tabulate_image(limit_cycle_field, domain))
    center = int(np.flatnonzero(np.all(report.points == 0.0, axis=1))[0])
    assert not report.full_rank[center]
    assert np.sum(report.full_rank) == len(report.points) - 1


def test_transform_field_validation(limit_cycle_field, oscillator):
    with pytest.raises(ValueError):
        TransformField(system=limit_cycle_field.system, pair=limit_cycle_field.pair,
                       horizon=1.0, quadrature="simpson")
    with pytest.raises(ValueError):
        TransformField(system=oscillator, pair=limit_cycle_field.pair, horizon=1.0)
    with pytest.raises(ValueError):
        linear_transform_matrix(OSCILLATOR_S, np.eye(2), make_filter_pair(1, 1, [-1.0]))
