import json
import os
import unittest
from unittest.mock import patch

from setkkl.config import (
    DEFAULT_OUT_DIR,
    env_workers,
    get_env_var,
    load_experiment,
    parse_experiment,
)
from setkkl.exceptions import ConfigError
from setkkl.harness import apply_overrides, resolve_output_dir, resolve_system, resolve_workers


class TestParseExperiment(unittest.TestCase):
    def setUp(self):
        self.base = {
            "system": {"name": "limit_cycle_squared_output"},
            "pair": {"eigenvalues": [-1.0, -2.0, -3.0]},
        }

    def parse(self, data):
        return parse_experiment(json.dumps(data))

    def test_defaults(self):
        config = self.parse(self.base)
        self.assertEqual(config.pair.n_o, 3)
        self.assertEqual(config.transform.quadrature, "rk4")
        self.assertEqual(config.inversion.residual_tol, 1e-5)
        self.assertEqual(config.observer.noise.kind, "none")
        self.assertIsNone(config.output_dir)
        self.assertEqual(config.seed, 0)

    def test_nested_sections(self):
        self.base["observer"] = {"x0": [1.2, 0.0], "noise": {"kind": "uniform", "amplitude": 0.01}}
        self.base["inversion"] = {"residual_tol": 1e-8, "cluster_radius": 1e-3}
        config = self.parse(self.base)
        self.assertEqual(config.observer.noise.amplitude, 0.01)
        self.assertEqual(config.observer.noise.spec(5).seed, 5)
        self.assertEqual(config.inversion.cluster_radius, 1e-3)

    def test_complex_eigenvalues(self):
        self.base["pair"] = {"eigenvalues": [[-1.0, 1.0], [-1.0, -1.0]]}
        config = self.parse(self.base)
        self.assertEqual(config.pair.complex_eigenvalues(), [complex(-1, 1), complex(-1, -1)])

    def test_missing_required_field(self):
        del self.base["pair"]["eigenvalues"]
        with self.assertRaises(ConfigError) as ctx:
            self.parse(self.base)
        self.assertEqual(ctx.exception.field, "pair.eigenvalues")

    def test_unknown_field(self):
        self.base["observer"] = {"x_0": [1.0, 0.0]}
        with self.assertRaises(ConfigError) as ctx:
            self.parse(self.base)
        self.assertEqual(ctx.exception.field, "observer.x_0")

    def test_invalid_values(self):
        cases = [
            ("pair", {"eigenvalues": ["fast"]}, "pair"),
            ("observer", {"iss_amplitudes": [0.04, 0.01]}, "observer"),
            ("diagnostics", {"k_sweep": [4, 2]}, "diagnostics"),
            ("atlas", {"domain": {"kind": "ball", "center": [0.0, 0.0]}}, "atlas"),
            ("inversion", {"residual_tol": 0.0}, "inversion"),
        ]
        for section, value, field in cases:
            with self.subTest(section=section):
                data = dict(self.base, **{section: value})
                with self.assertRaises(ConfigError) as ctx:
                    self.parse(data)
                self.assertEqual(ctx.exception.field, field)

    def test_invalid_workers(self):
        with self.assertRaises(ConfigError):
            self.parse(dict(self.base, workers=0))

    def test_json_syntax_error_reports_line(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_experiment('{\n  "system": {"name": "static"},\n  "pair": [\n}')
        self.assertEqual(ctx.exception.line, 4)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_experiment("/nonexistent/setkkl.json")


class TestResolution(unittest.TestCase):
    def setUp(self):
        self.config = parse_experiment(json.dumps({
            "system": {"name": "limit_cycle_squared_output"},
            "pair": {"eigenvalues": [-1.0, -2.0, -3.0]},
            "atlas": {"resolution": 7, "domain": {"kind": "annulus", "center": [0.0, 0.0],
                                                  "radius": 1.5, "inner_radius": 0.5}},
        }))

    def test_overrides_take_precedence(self):
        config = apply_overrides(self.config, out="cli-out", seed=4, workers=2)
        self.assertEqual(config.output_dir, "cli-out")
        self.assertEqual(config.seed, 4)
        self.assertEqual(resolve_workers(config), 2)
        unchanged = apply_overrides(self.config)
        self.assertIsNone(unchanged.output_dir)
        with self.assertRaises(ConfigError):
            apply_overrides(self.config, workers=0)

    @patch.dict(os.environ, {"SETKKL_OUT_DIR": "env-out", "SETKKL_WORKERS": "3"})
    def test_environment_fallbacks(self):
        self.assertEqual(str(resolve_output_dir(self.config)), "env-out")
        self.assertEqual(resolve_workers(self.config), 3)
        self.assertEqual(str(resolve_output_dir(apply_overrides(self.config, out="cli-out"))), "cli-out")

    @patch.dict(os.environ, {}, clear=True)
    def test_builtin_defaults(self):
        self.assertEqual(str(resolve_output_dir(self.config)), DEFAULT_OUT_DIR)
        self.assertEqual(resolve_workers(self.config), 1)
        self.assertIsNone(env_workers())

    @patch.dict(os.environ, {"SETKKL_WORKERS": "many"})
    def test_bad_worker_variable(self):
        with self.assertRaises(ConfigError):
            env_workers()

    def test_get_env_var(self):
        with patch.dict(os.environ, {}, clear=True):
            with self.assertRaises(ValueError):
                get_env_var("SETKKL_OUT_DIR")
            self.assertEqual(get_env_var("SETKKL_OUT_DIR", "fallback"), "fallback")

    def test_domain_override(self):
        system = resolve_system(self.config)
        self.assertEqual(system.domain.kind, "annulus")
        self.assertEqual(system.domain.grid_resolution, 7)

    def test_unknown_example(self):
        config = parse_experiment(json.dumps({"system": {"name": "van_der_pol"},
                                              "pair": {"eigenvalues": [-1.0]}}))
        with self.assertRaises(ConfigError) as ctx:
            resolve_system(config)
        self.assertEqual(ctx.exception.field, "system.name")

    def test_domain_dimension_mismatch(self):
        config = parse_experiment(json.dumps({
            "system": {"name": "static"},
            "pair": {"eigenvalues": [-1.0]},
            "atlas": {"domain": {"kind": "box", "lower": [0.0, 0.0], "upper": [1.0, 1.0]}},
        }))
        with self.assertRaises(ConfigError):
            resolve_system(config)


if __name__ == "__main__":
    unittest.main()
