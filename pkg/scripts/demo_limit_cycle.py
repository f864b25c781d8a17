import asyncio
import argparse

import numpy as np

from setkkl import (
    AsyncPipeline,
    InversionConfig,
    TransformField,
    example_registry,
    make_filter_pair,
    run_set_observer,
    tabulate_image,
)
from setkkl.exceptions import NonFiniteState, SetKKLError
from setkkl.observer import fit_decay_slope


def build(resolution: int, step: float):
    """Limit cycle with squared output and a five-dimensional filter per channel."""
    system = example_registry("limit_cycle_squared_output", grid_resolution=resolution)
    pair = make_filter_pair(system.n_y, 5, [-1.0, -2.0, -3.0, -4.0, -5.0])
    field = TransformField.build(system, pair, step=step)
    return system, pair, field


def report(system, field, atlas, horizon: float, step: float):
    print(f"Horizon tau: {field.horizon:.3f}")
    print(f"Worst Jacobian condition: {np.max(atlas.jacobian_cond):.3g}")

    print("\nRunning the set-valued observer...")
    run = run_set_observer(
        system, field, atlas, None,
        x_true0=np.array([0.5, 0.5]),
        z0=None,
        horizon=horizon,
        step=step,
        cfg=InversionConfig(residual_tol=1e-4),
        settle_fraction=0.3,
    )
    print(f"Ground truth: {run.provenance}")
    print(f"Final Hausdorff error: {run.hausdorff_series[-1]:.3g}")
    try:
        print(f"Decay slope: {fit_decay_slope(run.times, run.hausdorff_series):.3f}")
    except ValueError as e:
        print(f"Decay slope unavailable: {e}")
    print(f"Selection continuous: {run.selection_result.continuous}")
    print(f"Estimate sizes at the end: {[e.cardinality for e in run.estimates[-3:]]}")


def demo_sync(resolution: int, horizon: float, step: float):
    """Tabulate on one thread."""
    print("\n🔄 Tabulating T on one thread...")
    system, pair, field = build(resolution, step)
    try:
        atlas = tabulate_image(field)
        report(system, field, atlas, horizon, step)
    except NonFiniteState as e:
        print(f"Error: integration blew up at t={e.time}")
    except SetKKLError as e:
        print(f"Error: {e}")


async def demo_async(resolution: int, horizon: float, step: float, workers: int):
    """Tabulate on a thread pool."""
    print(f"\n⚡ Tabulating T on {workers} workers...")
    system, pair, field = build(resolution, step)
    try:
        async with AsyncPipeline(workers) as pipeline:
            atlas = await pipeline.tabulate_image(field)
        report(system, field, atlas, horizon, step)
    except NonFiniteState as e:
        print(f"Error: integration blew up at t={e.time}")
    except SetKKLError as e:
        print(f"Error: {e}")


def main():
    parser = argparse.ArgumentParser(description='Set-valued observer on the limit cycle with squared output')
    parser.add_argument('--async-test', action='store_true', help='Tabulate on a thread pool')
    parser.add_argument('--workers', type=int, default=4, help='Thread pool size for --async-test')
    parser.add_argument('--resolution', type=int, default=25, help='Grid points per axis')
    parser.add_argument('--horizon', type=float, default=10.0, help='Simulated time')
    parser.add_argument('--step', type=float, default=1e-2, help='RK4 step')
    args = parser.parse_args()

    if args.async_test:
        asyncio.run(demo_async(args.resolution, args.horizon, args.step, args.workers))
    else:
        demo_sync(args.resolution, args.horizon, args.step)


if __name__ == '__main__':
    main()
