import unittest

import numpy as np

from setkkl.dynsys import (
    EXAMPLE_NAMES,
    cutoff_field,
    example_registry,
    flow,
    integrate,
    linear_system,
    output_along,
    rk4_march,
)
from setkkl.exceptions import BadRadii, NonFiniteState, UnknownExample
from setkkl.models import DomainSpec
from setkkl.utils import central_difference


class TestIntegration(unittest.TestCase):
    def setUp(self):
        self.oscillator = example_registry("harmonic_oscillator")
        self.limit_cycle = example_registry("limit_cycle_squared_output")

    def test_rotation_matches_closed_form(self):
        traj = integrate(self.oscillator, np.array([1.0, 0.0]), 0.0, np.pi, step=1e-2)
        self.assertEqual(traj.times[-1], np.pi)
        np.testing.assert_allclose(traj.final, [-1.0, 0.0], atol=1e-8)

    def test_backward_and_batched(self):
        x0 = np.array([[1.0, 0.0], [0.0, 0.5]])
        traj = integrate(self.oscillator, x0, 0.0, -1.0, step=1e-2)
        self.assertEqual(traj.direction, "backward")
        self.assertEqual(traj.states.shape, (101, 2, 2))
        np.testing.assert_allclose(traj.final[0], [np.cos(1.0), np.sin(1.0)], atol=1e-8)

    def test_stride_keeps_last_node(self):
        traj = integrate(self.oscillator, np.array([1.0, 0.0]), 0.0, 1.05, step=0.1, stride=4)
        np.testing.assert_allclose(traj.times, [0.0, 0.4, 0.8, 1.05])

    def test_flow_round_trip(self):
        x = np.array([0.3, -1.1])
        there = flow(self.limit_cycle, x, 0.7, "forward", step=1e-3)
        back = flow(self.limit_cycle, there, 0.7, "backward", step=1e-3)
        np.testing.assert_allclose(back, x, atol=1e-9)
        np.testing.assert_array_equal(flow(self.limit_cycle, x, 0.0), x)

    def test_rk4_is_fourth_order(self):
        x0 = np.array([1.0, 0.0])
        exact = np.array([np.cos(2.0), -np.sin(2.0)])
        coarse, fine = (np.linalg.norm(integrate(self.oscillator, x0, 0.0, 2.0, step=h).final - exact)
                        for h in (0.1, 0.05))
        self.assertTrue(14.0 <= coarse / fine < 18.0, coarse / fine)

    def test_flow_composes(self):
        x = np.array([[0.3, -1.1], [-0.6, 0.2]])
        two_legs = flow(self.limit_cycle, flow(self.limit_cycle, x, 0.3, step=1e-3), 0.5, step=1e-3)
        np.testing.assert_allclose(two_legs, flow(self.limit_cycle, x, 0.8, step=1e-3), atol=1e-12)
        back = flow(self.limit_cycle, flow(self.limit_cycle, x, 0.4, "backward", step=1e-3), 0.4, step=1e-3)
        np.testing.assert_allclose(back, x, atol=1e-9)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            integrate(self.oscillator, np.zeros(2), 0.0, 0.0)
        with self.assertRaises(ValueError):
            integrate(self.oscillator, np.zeros(2), 0.0, 1.0, step=0.0)
        with self.assertRaises(ValueError):
            flow(self.oscillator, np.zeros(2), 1.0, "sideways")

    def test_blow_up_raises(self):
        # backward limit cycle escapes to infinity in finite time
        with self.assertRaises(NonFiniteState) as ctx:
            integrate(self.limit_cycle, np.array([3.0, 0.0]), 0.0, -5.0, step=1e-2)
        self.assertIsNotNone(ctx.exception.time)

    def test_rk4_march_time_dependent(self):
        times = np.linspace(0.0, 1.0, 11)
        kept, states = rk4_march(lambda t, y: np.array([2.0 * t]), np.array([0.0]), times)
        np.testing.assert_allclose(states[:, 0], kept ** 2, atol=1e-12)

    def test_output_along(self):
        traj = integrate(self.limit_cycle, np.array([1.0, 0.0]), 0.0, 1.0, step=1e-2)
        y = output_along(self.limit_cycle, traj)
        np.testing.assert_allclose(y(1.0), self.limit_cycle.h(traj.final))


class TestCutoff(unittest.TestCase):
    def setUp(self):
        self.system = example_registry("limit_cycle_squared_output")

    def test_equal_inside_zero_outside(self):
        cut = cutoff_field(self.system, 1.8, 2.2)
        inside = np.array([[1.0, 0.5], [-1.7, 0.0]])
        np.testing.assert_array_equal(cut.f(inside), self.system.f(inside))
        np.testing.assert_array_equal(cut.f(np.array([2.5, 0.0])), [0.0, 0.0])
        self.assertEqual(cut.cutoff_radii, (1.8, 2.2))
        self.assertEqual(cut.name, "limit_cycle_squared_output+cutoff")

    def test_equal_on_the_whole_inner_ball(self):
        cut = cutoff_field(self.system, 1.8, 2.2)
        inside = self.system.domain.sample(200, seed=2)
        np.testing.assert_array_equal(cut.f(inside), self.system.f(inside))
        np.testing.assert_array_equal(cut.jacobian_f(inside), self.system.jacobian_f(inside))

    def test_analytic_jacobian_in_blend_region(self):
        cut = cutoff_field(self.system, 1.8, 2.2)
        x = np.array([[1.9, 0.3], [-1.2, 1.5]])
        np.testing.assert_allclose(cut.jacobian_f(x), central_difference(cut.f, x), atol=1e-6)

    def test_backward_solutions_stay_bounded(self):
        cut = cutoff_field(self.system, 1.8, 2.2)
        traj = integrate(cut, np.array([1.7, 0.0]), 0.0, -20.0, step=1e-2)
        self.assertLessEqual(np.max(np.linalg.norm(traj.states, axis=-1)), 2.2 + 1e-9)

    def test_bad_radii(self):
        with self.assertRaises(BadRadii):
            cutoff_field(self.system, 2.0, 1.9)
        with self.assertRaises(BadRadii):
            cutoff_field(self.system, 1.5, 2.0)


class TestRegistry(unittest.TestCase):
    def test_all_examples_build(self):
        for name in EXAMPLE_NAMES:
            system = example_registry(name)
            self.assertEqual(system.name, name)
            grid = system.domain.grid()
            self.assertEqual(system.f(grid).shape, grid.shape)
            self.assertEqual(system.h(grid).shape, (len(grid), system.n_y))
            self.assertIsNotNone(system.indistinguishable)

    def test_analytic_jacobians(self):
        for name in EXAMPLE_NAMES:
            system = example_registry(name, grid_resolution=7)
            grid = system.domain.grid()
            np.testing.assert_allclose(system.jacobian_f(grid), central_difference(system.f, grid), atol=1e-6)
            np.testing.assert_allclose(system.jacobian_h(grid), central_difference(system.h, grid), atol=1e-6)

    def test_antipodal_outputs_agree(self):
        system = example_registry("limit_cycle_squared_output")
        x = np.array([0.4, -1.1])
        np.testing.assert_allclose(system.h(x), system.h(-x))
        self.assertEqual(system.indistinguishable(x).shape, (2, 2))

    def test_limit_cycle_is_odd(self):
        system = example_registry("limit_cycle_squared_output")
        x = system.domain.sample(50, seed=4)
        np.testing.assert_array_equal(system.f(-x), -system.f(x))
        np.testing.assert_array_equal(system.h(-x), system.h(x))
        cut = cutoff_field(system, 1.8, 2.2)
        np.testing.assert_array_equal(cut.f(-x), -cut.f(x))

    def test_grid_resolution_override(self):
        self.assertEqual(len(example_registry("sine_pair_map", grid_resolution=11).domain.grid()), 11)

    def test_unknown_example(self):
        with self.assertRaises(UnknownExample):
            example_registry("lorenz")

    def test_linear_system_static_flag(self):
        domain = DomainSpec(kind="box", lower=(-1.0,), upper=(1.0,))
        self.assertTrue(linear_system([[0.0]], [[1.0]], domain).static)
        self.assertFalse(linear_system([[-1.0]], [[1.0]], domain).static)


if __name__ == '__main__':
    unittest.main()
