"""Experiment orchestration: builds the pipeline from a config and writes the artifacts."""
import asyncio
import dataclasses
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .async_pipeline import AsyncPipeline
from .config import DEFAULT_OUT_DIR, ExperimentConfig, env_workers, get_env_var
from .distinguish import (
    backward_indist_oracle,
    characterization_check,
    default_oracle_horizon,
    horizon_sensitivity,
    k_sweep_rank,
    rank_profile_Hm,
)
from .dynsys import example_registry
from .exceptions import ConfigError, NotControllable, NotHurwitz, UnknownExample
from .models import FilterPair, ImageAtlas, SystemModel
from .observer import (
    ObserverSetup,
    fit_decay_slope,
    iss_sweep,
    separation_check,
    short_arc_check,
)
from .setvalued import cardinality_profile, empirical_lipschitz
from .transform import TransformField, conditioning_map, make_filter_pair, tabulate_image
from .utils import write_csv, write_json

logger = logging.getLogger(__name__)


def _names(prefix: str, n: int) -> list:
    return [f"{prefix}_{i + 1}" for i in range(n)]


def resolve_output_dir(config: ExperimentConfig) -> Path:
    """Config value, then SETKKL_OUT_DIR, then the built-in default."""
    return Path(config.output_dir or get_env_var("SETKKL_OUT_DIR", DEFAULT_OUT_DIR))


def resolve_workers(config: ExperimentConfig) -> int:
    return config.workers or env_workers() or 1


def resolve_system(config: ExperimentConfig) -> SystemModel:
    try:
        system = example_registry(config.system.name, config.atlas.resolution)
    except UnknownExample as e:
        raise ConfigError(str(e), field="system.name")
    try:
        return dataclasses.replace(system, domain=config.atlas.domain_spec(system.domain))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid domain for {system.name}: {e}", field="atlas.domain")


def build_pair(config: ExperimentConfig, system: SystemModel) -> FilterPair:
    section = config.pair
    seed = config.seed if section.seed is None else section.seed
    try:
        return make_filter_pair(system.n_y, section.n_o, section.complex_eigenvalues(),
                                seed=seed, perturbation=section.perturbation)
    except (ValueError, NotHurwitz, NotControllable) as e:
        raise ConfigError(str(e), field="pair.eigenvalues")


def build_field(config: ExperimentConfig, system: SystemModel, pair: FilterPair) -> TransformField:
    t = config.transform
    try:
        return TransformField.build(
            system, pair, k=config.pair.k, horizon=t.horizon, step=t.step,
            tol_trunc=t.tol_trunc, r_keep=t.r_keep, r_zero=t.r_zero, quadrature=t.quadrature,
        )
    except ValueError as e:
        raise ConfigError(str(e), field="transform")


def build_atlas(config: ExperimentConfig, field: TransformField) -> ImageAtlas:
    workers = resolve_workers(config)
    if workers == 1:
        return tabulate_image(field, batch_size=config.atlas.batch_size)

    async def tabulate():
        async with AsyncPipeline(workers) as pipeline:
            return await pipeline.tabulate_image(field, batch_size=config.atlas.batch_size)

    return asyncio.run(tabulate())


def _transform_summary(field: TransformField, pair: FilterPair) -> dict:
    return {
        "horizon": field.horizon,
        "n_z": pair.n_z,
        "hurwitz_margin": pair.hurwitz_margin,
        "controllability_cond": pair.controllability_cond,
        "cutoff_radii": field.system.cutoff_radii,
        "k": field.k,
    }


def _write_meta(out_dir: Path, command: str, config: ExperimentConfig, results: dict) -> Path:
    return write_json(out_dir / "meta.json", {
        "command": command,
        "config": config.to_dict(),
        "results": results,
    })


def _write_atlas(out_dir: Path, atlas: ImageAtlas, name: str = "atlas.csv") -> Path:
    n_x, n_z = atlas.grid_points.shape[1], atlas.images.shape[1]
    rows = (
        list(x) + list(z) + [smin, cond]
        for x, z, smin, cond in zip(atlas.grid_points, atlas.images,
                                    atlas.jacobian_min_sv, atlas.jacobian_cond)
    )
    return write_csv(out_dir / name, _names("x", n_x) + _names("z", n_z) + ["sigma_min", "cond"], rows)


def cmd_transform_build(config: ExperimentConfig) -> dict:
    """
    Tabulate T over the domain grid and map the conditioning of its Jacobian

    Writes atlas.csv, conditioning.csv, summary.json and meta.json.
    """
    out_dir = resolve_output_dir(config)
    system = resolve_system(config)
    pair = build_pair(config, system)
    field = build_field(config, system, pair)
    atlas = build_atlas(config, field)
    report = conditioning_map(atlas, config.transform.rank_tol)

    _write_atlas(out_dir, atlas)
    n_x = system.n_x
    write_csv(
        out_dir / "conditioning.csv",
        _names("x", n_x) + ["cond", "sigma_min", "full_rank"],
        (list(x) + [c, s, f] for x, c, s, f in zip(report.points, report.cond,
                                                   report.sigma_min, report.full_rank)),
    )
    summary = {
        "grid_points": len(atlas),
        "min_sigma_min": report.min_sigma_min,
        "max_cond": report.max_cond,
        "all_full_rank": report.all_full_rank,
        "below_1e3": report.below_cond_bound,
        "rank_tol": report.rank_tol,
        **_transform_summary(field, pair),
    }
    write_json(out_dir / "summary.json", summary)
    _write_meta(out_dir, "transform-build", config, summary)
    logger.info("Atlas and conditioning map written to %s", out_dir)
    return summary


def _observer_setup(config: ExperimentConfig, system: SystemModel, field: TransformField,
                    atlas: ImageAtlas) -> ObserverSetup:
    section = config.observer
    if section.x0 is None:
        raise ConfigError("observe needs observer.x0", field="observer.x0")
    x0 = np.asarray(section.x0, dtype=float)
    if x0.shape != (system.n_x,):
        raise ConfigError(f"observer.x0 must have {system.n_x} entries", field="observer.x0")
    if not system.domain.contains(x0):
        raise ConfigError(f"observer.x0 = {section.x0} lies outside the domain", field="observer.x0")
    z0 = None
    if section.z0 is not None:
        z0 = np.asarray(section.z0, dtype=float)
        if z0.shape != (field.n_z,):
            raise ConfigError(f"observer.z0 must have {field.n_z} entries", field="observer.z0")
    guess = None if section.initial_guess is None else np.asarray(section.initial_guess, dtype=float)
    return ObserverSetup(
        system=system,
        field=field,
        atlas=atlas,
        x0=x0,
        horizon=section.horizon,
        step=section.step,
        z0=z0,
        cfg=config.inversion,
        noise=section.noise.spec(config.seed),
        decimation=section.decimation,
        initial_guess=guess,
        settle_fraction=section.settle_fraction,
    )


def _run_iss(config: ExperimentConfig, setup: ObserverSetup) -> list:
    amplitudes = config.observer.iss_amplitudes
    workers = resolve_workers(config)
    if workers == 1:
        return iss_sweep(setup, amplitudes)

    async def sweep():
        async with AsyncPipeline(workers) as pipeline:
            return await pipeline.iss_sweep(setup, amplitudes)

    return asyncio.run(sweep())


def cmd_observe(config: ExperimentConfig) -> dict:
    """
    Run the set-valued observer and write its record

    Writes run.csv, estimates.csv, image_set.csv, meta.json and, when noise
    amplitudes are configured, iss.csv.
    """
    out_dir = resolve_output_dir(config)
    system = resolve_system(config)
    pair = build_pair(config, system)
    field = build_field(config, system, pair)
    atlas = build_atlas(config, field)
    setup = _observer_setup(config, system, field, atlas)
    run = setup.run()
    selection = run.selection_result

    n_x, n_z = system.n_x, field.n_z
    width = run.selection_error_series.shape[1]
    header = (["t"] + _names("z", n_z) + _names("x_true", n_x) + _names("selection", n_x)
              + ["hausdorff", "z_error", "domain_exit"] + _names("err_branch", width))
    rows = (
        [t] + list(z) + list(x) + list(s) + [d, e, exit_] + list(errs)
        for t, z, x, s, d, e, exit_, errs in zip(
            run.times, run.z_states, run.truth.states, run.selection, run.hausdorff_series,
            run.z_error_series, run.domain_exit, run.selection_error_series,
        )
    )
    write_csv(out_dir / "run.csv", header, rows)

    estimate_rows = []
    for t, estimate in zip(run.times, run.estimates):
        for branch, x in enumerate(estimate.points):
            residual = estimate.residuals[branch] if estimate.residuals is not None else float("nan")
            estimate_rows.append([t, branch] + list(x) + [residual])
    write_csv(out_dir / "estimates.csv", ["t", "branch"] + _names("x", n_x) + ["residual"], estimate_rows)
    _write_atlas(out_dir, atlas, "image_set.csv")

    try:
        slope = fit_decay_slope(run.times, run.hausdorff_series)
    except ValueError:
        slope = None
    results = {
        "provenance": run.provenance,
        "exited_domain": run.exited_domain,
        "final_hausdorff": float(run.hausdorff_series[-1]),
        "hausdorff_decay_slope": slope,
        "filter_rate": field.k * pair.hurwitz_margin,
        "selection": {
            "continuous": selection.continuous,
            "max_jump": selection.max_jump,
            "settled_max_jump": selection.settled_max_jump,
            "jump_tol": selection.jump_tol,
            "gaps": selection.gaps,
        },
        "cluster_radius": config.inversion.resolved_cluster_radius(atlas),
        "separation": separation_check(run),
        **_transform_summary(field, pair),
    }
    if len(run.times) > 1:
        results["short_arc"] = short_arc_check(run.times, run.z_states, config.observer.short_arc_window)
    if config.observer.lipschitz_pairs > 0:
        results["lipschitz"] = empirical_lipschitz(
            field, atlas, config.inversion, n_pairs=config.observer.lipschitz_pairs, seed=config.seed
        )
    if config.observer.iss_amplitudes:
        iss_rows = _run_iss(config, setup)
        write_csv(out_dir / "iss.csv", ["amplitude", "floor"], ([r.amplitude, r.floor] for r in iss_rows))
        results["iss"] = [dataclasses.asdict(r) for r in iss_rows]

    _write_meta(out_dir, "observe", config, results)
    logger.info("Observer artifacts written to %s", out_dir)
    return results


def cmd_diagnose(config: ExperimentConfig) -> dict:
    """
    Run the diagnostics switched on in the config

    Writes cardinality.csv, indist.csv, characterization.json,
    observability.csv and k_sweep.csv depending on the toggles, and always
    meta.json.
    """
    out_dir = resolve_output_dir(config)
    diag = config.diagnostics
    system = resolve_system(config)
    results = {}

    needs_field = diag.cardinality or diag.characterization or diag.k_sweep
    if needs_field:
        pair = build_pair(config, system)
        field = build_field(config, system, pair)
        results["transform"] = _transform_summary(field, pair)

    if diag.cardinality:
        atlas = build_atlas(config, field)
        report = cardinality_profile(field, atlas, config.inversion)
        write_csv(
            out_dir / "cardinality.csv",
            _names("x", system.n_x) + ["card", "modal_flag"],
            (list(x) + [c, m] for x, c, m in zip(report.points, report.cardinality, report.modal_flag)),
        )
        results["cardinality"] = {
            "modal_p": report.modal_p,
            "violations": report.violations,
            "cluster_radius": config.inversion.resolved_cluster_radius(atlas),
        }

    if diag.characterization:
        horizon = diag.oracle_horizon or default_oracle_horizon(field.system, system.domain)
        oracle = backward_indist_oracle(field.system, system.domain, horizon, diag.oracle_tol,
                                        step=config.transform.step)
        ids = oracle.class_ids
        write_csv(
            out_dir / "indist.csv",
            ["index"] + _names("x", system.n_x) + ["class_id"],
            ([i] + list(x) + [c] for i, (x, c) in enumerate(zip(oracle.grid, ids))),
        )
        verdict = characterization_check(field, oracle, diag.match_tol)
        payload = {
            **dataclasses.asdict(verdict),
            "oracle_horizon": horizon,
            "oracle_tol": diag.oracle_tol,
            "classes": len(oracle.classes),
            "modal_class_size": int(np.argmax(np.bincount(oracle.class_sizes))),
            "transitivity_violations": len(oracle.transitivity_violations),
        }
        if diag.horizon_sensitivity:
            payload["horizon_sensitivity"] = horizon_sensitivity(
                field.system, system.domain, horizon, diag.oracle_tol, step=config.transform.step
            )
        write_json(out_dir / "characterization.json", payload)
        results["characterization"] = payload

    if diag.rank_map:
        report = rank_profile_Hm(system, m=diag.hm_order, rank_tol=config.transform.rank_tol)
        write_csv(
            out_dir / "observability.csv",
            _names("x", system.n_x) + ["sigma_min", "rank"],
            (list(x) + [s, r] for x, s, r in zip(report.points, report.sigma_min, report.rank)),
        )
        results["rank_map"] = {"m": report.m, "deficient": report.deficient, "max_rank": report.max_rank}

    if diag.k_sweep:
        rows = k_sweep_rank(system, pair, diag.k_sweep, step=config.transform.step,
                            tol_trunc=config.transform.tol_trunc, rank_tol=config.transform.rank_tol)
        write_csv(
            out_dir / "k_sweep.csv",
            ["k", "horizon", "min_sigma_min", "max_cond", "full_rank"],
            ([r.k, r.horizon, r.min_sigma_min, r.max_cond, r.full_rank] for r in rows),
        )
        results["k_sweep"] = [dataclasses.asdict(r) for r in rows]

    _write_meta(out_dir, "diagnose", config, results)
    logger.info("Diagnostics written to %s", out_dir)
    return results


COMMANDS = {
    "transform-build": cmd_transform_build,
    "observe": cmd_observe,
    "diagnose": cmd_diagnose,
}


def run_command(name: str, config: ExperimentConfig) -> dict:
    try:
        command = COMMANDS[name]
    except KeyError:
        raise ConfigError(f"Unknown command {name!r}")
    return command(config)


def apply_overrides(
    config: ExperimentConfig,
    out: Optional[str] = None,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
) -> ExperimentConfig:
    """Command-line values take precedence over the JSON document."""
    changes = {}
    if out is not None:
        changes["output_dir"] = out
    if seed is not None:
        changes["seed"] = seed
    if workers is not None:
        if workers < 1:
            raise ConfigError("--workers must be at least 1", field="workers")
        changes["workers"] = workers
    return dataclasses.replace(config, **changes)
