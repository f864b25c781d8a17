"""Set-valued KKL observer runs, continuous selections and noise sweeps."""
import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import pdist

from .dynsys import integrate, rk4_march
from .exceptions import EmptySet, SignalGap
from .models import (
    FilterPair,
    ImageAtlas,
    IndistReport,
    InversionConfig,
    IssRow,
    NoiseSpec,
    ObserverRun,
    OutputSignal,
    PointSet,
    SelectionResult,
    SystemModel,
    Trajectory,
)
from .setvalued import extend_inverse_batch, hausdorff, match_branches
from .transform import TransformField
from .utils import time_grid

logger = logging.getLogger(__name__)

DEFAULT_DECIMATION = 10
JUMP_FACTOR = 5.0
FLOOR_WINDOW = 0.2


def run_filter(
    pair: Union[FilterPair, TransformField],
    y: OutputSignal,
    z0: np.ndarray,
    step: float,
    t0: Optional[float] = None,
    t1: Optional[float] = None,
) -> Trajectory:
    """
    Integrate z' = A z + B y(t) with RK4

    Args:
        pair: Filter pair, or a transform whose gain-scaled matrix kA is used
        y: Output signal, linearly interpolated between its nodes
        z0: Initial filter state
        step: RK4 step
        t0, t1: Integration span; defaults to the span of y

    Returns:
        Trajectory of z

    Raises:
        SignalGap: If [t0, t1] is not covered by y
    """
    lo, hi = y.span
    t0 = lo if t0 is None else t0
    t1 = hi if t1 is None else t1
    if not y.covers(t0, t1):
        raise SignalGap(f"Output covers [{lo}, {hi}] but the filter needs [{t0}, {t1}]",
                        (lo, hi), (t0, t1))
    A, B = pair.A, pair.B
    z0 = np.asarray(z0, dtype=float)
    if t0 == t1:
        return Trajectory(times=np.array([t0]), states=z0[None, :])
    times = time_grid(t0, t1, step)
    kept, states = rk4_march(lambda t, z: A @ z + B @ y(t), z0, times)
    return Trajectory(times=kept, states=states)


def sample_noise(noise: NoiseSpec, times: np.ndarray, n_y: int) -> np.ndarray:
    """Noise values on a time grid, shape (len(times), n_y)."""
    times = np.asarray(times, dtype=float)
    if noise.kind == "none" or noise.amplitude == 0:
        return np.zeros((len(times), n_y))
    rng = np.random.default_rng(noise.seed)
    if noise.kind == "uniform":
        return rng.uniform(-noise.amplitude, noise.amplitude, size=(len(times), n_y))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_y)
    return noise.amplitude * np.sin(noise.frequency * times[:, None] + phases[None, :])


def estimate_indices(n_nodes: int, decimation: int) -> np.ndarray:
    """Every decimation-th node plus the last one."""
    if decimation < 1:
        raise ValueError("decimation must be at least 1")
    idx = np.arange(0, n_nodes, decimation)
    if idx[-1] != n_nodes - 1:
        idx = np.append(idx, n_nodes - 1)
    return idx


def _oracle_sets(report: IndistReport, states: np.ndarray) -> list:
    """Oracle class of the grid point nearest to each state."""
    ids = report.class_ids
    nearest = np.argmin(
        np.linalg.norm(states[:, None, :] - report.grid[None, :, :], axis=-1), axis=1
    )
    return [PointSet(points=report.grid[report.classes[ids[j]]]) for j in nearest]


def _ground_truth(
    system: SystemModel,
    field: TransformField,
    states: np.ndarray,
    oracle: Optional[IndistReport],
) -> tuple[list, str]:
    if system.indistinguishable is not None:
        return [PointSet.merged(system.indistinguishable(x)) for x in states], "analytic"
    if oracle is None:
        from .distinguish import backward_indist_oracle, default_oracle_horizon
        oracle = backward_indist_oracle(
            field.system, system.domain, default_oracle_horizon(field.system, system.domain),
            step=field.step,
        )
    return _oracle_sets(oracle, states), "oracle"


def select_path(
    estimates: Sequence,
    times: np.ndarray,
    initial_guess: Optional[np.ndarray] = None,
    jump_tol: float = np.inf,
    settle_time: Optional[float] = None,
) -> SelectionResult:
    """
    Follow one branch through a stream of point sets

    The first point is the member of estimates[0] nearest to initial_guess
    (the first member when no guess is given); each next point is the member
    nearest to the previous selection. Empty sets hold the previous value and
    are recorded as gaps.
    """
    times = np.asarray(times, dtype=float)
    if len(estimates) != len(times):
        raise ValueError("estimates and times must have the same length")
    first = estimates[0]
    dim = first.points.shape[1] if first.cardinality else np.size(initial_guess)
    path = np.empty((len(estimates), dim))
    gaps = []
    if first.is_empty:
        if initial_guess is None:
            raise EmptySet("First estimate is empty and no initial guess was given")
        path[0] = initial_guess
        gaps.append(0)
    elif initial_guess is None:
        path[0] = first.points[0]
    else:
        path[0] = first.points[first.nearest(initial_guess)[0]]

    for i in range(1, len(estimates)):
        current = estimates[i]
        if current.is_empty:
            path[i] = path[i - 1]
            gaps.append(i)
            continue
        j = match_branches(path[i - 1][None, :], current).pairing[0]
        path[i] = current.points[j]

    jumps = np.linalg.norm(np.diff(path, axis=0), axis=-1)
    settle_time = times[0] if settle_time is None else settle_time
    settled = jumps[times[1:] >= settle_time]
    if gaps:
        logger.warning("Selection held its value over %d empty estimates", len(gaps))
    return SelectionResult(
        path=path,
        jumps=jumps,
        max_jump=float(np.max(jumps)) if len(jumps) else 0.0,
        settled_max_jump=float(np.max(settled)) if len(settled) else 0.0,
        jump_tol=float(jump_tol),
        gaps=gaps,
    )


def default_jump_tol(truth_states: np.ndarray) -> float:
    """Five times the largest truth displacement between consecutive estimate times."""
    if len(truth_states) < 2:
        return 0.0
    return JUMP_FACTOR * float(np.max(np.linalg.norm(np.diff(truth_states, axis=0), axis=-1)))


def continuous_selection(
    run: ObserverRun,
    initial_guess: Optional[np.ndarray] = None,
    jump_tol: Optional[float] = None,
    settle_fraction: float = 0.0,
) -> SelectionResult:
    """
    Continuous selection x_hat(t) in T^inv(z(t)) by branch tracking

    The continuity certificate only considers jumps after
    settle_fraction * (run length).
    """
    if not 0.0 <= settle_fraction < 1.0:
        raise ValueError("settle_fraction must be in [0, 1)")
    truth = run.truth.states
    if jump_tol is None:
        jump_tol = default_jump_tol(truth)
    t_start, t_end = float(run.times[0]), float(run.times[-1])
    settle_time = t_start + settle_fraction * (t_end - t_start)
    return select_path(run.estimates, run.times, initial_guess, jump_tol, settle_time)


def run_set_observer(
    system: SystemModel,
    field: TransformField,
    atlas: ImageAtlas,
    pair: Optional[FilterPair],
    x_true0: np.ndarray,
    z0: Optional[np.ndarray],
    horizon: float,
    step: float,
    cfg: Optional[InversionConfig] = None,
    noise: Optional[NoiseSpec] = None,
    decimation: int = DEFAULT_DECIMATION,
    initial_guess: Optional[np.ndarray] = None,
    settle_fraction: float = 0.0,
    oracle: Optional[IndistReport] = None,
) -> ObserverRun:
    """
    Simulate the plant, run the filter and invert T along the way

    The plant is integrated on a half-step grid so that every RK4 stage of
    the filter reads a stored output sample. Estimates are computed every
    `decimation` filter steps (and at the final time).

    Args:
        system: Plant (the transform's cutoff copy is simulated)
        field: Transform used for inversion and z-error
        atlas: Tabulated image supplying inversion seeds
        pair: Filter pair; defaults to the transform's pair. The gain k of the transform is applied
        x_true0: Initial plant state, must lie in the domain
        z0: Initial filter state; None means zero
        horizon: Simulated time, zero gives a single estimate
        step: Filter RK4 step
        cfg: Inversion tolerances
        noise: Measurement noise added to y
        decimation: Filter steps between estimates
        initial_guess: Seed of the continuous selection
        settle_fraction: Start of the window for the continuity certificate
        oracle: Precomputed indistinguishability classes for systems without an analytic map

    Returns:
        ObserverRun
    """
    cfg = cfg or InversionConfig()
    noise = noise or NoiseSpec()
    x_true0 = np.asarray(x_true0, dtype=float)
    if horizon < 0:
        raise ValueError("horizon cannot be negative")
    if not system.domain.contains(x_true0):
        raise ValueError(f"Initial state {x_true0.tolist()} is outside the domain")
    if pair is not None and pair is not field.pair:
        field = TransformField(system=field.system, pair=pair, horizon=field.horizon,
                               step=field.step, k=field.k, tol_trunc=field.tol_trunc,
                               quadrature=field.quadrature)
    z0 = np.zeros(field.n_z) if z0 is None else np.asarray(z0, dtype=float)
    if z0.shape != (field.n_z,):
        raise ValueError(f"z0 must have length {field.n_z}")

    if horizon == 0:
        fine = Trajectory(times=np.array([0.0]), states=x_true0[None, :])
    else:
        fine = integrate(field.system, x_true0, 0.0, horizon, step=step / 2.0)
    y_values = system.h(fine.states) + sample_noise(noise, fine.times, system.n_y)
    y = OutputSignal(times=fine.times, values=y_values)
    z_traj = run_filter(field, y, z0, step)

    idx = estimate_indices(len(z_traj), decimation)
    times = z_traj.times[idx]
    z_states = z_traj.states[idx]
    nearest_fine = np.argmin(np.abs(fine.times[None, :] - times[:, None]), axis=1)
    truth_states = fine.states[nearest_fine]
    truth = Trajectory(times=times, states=truth_states)

    logger.info("Inverting %d filter states for %s", len(times), system.name)
    estimates = extend_inverse_batch(field, atlas, z_states, cfg)
    indist_truth, provenance = _ground_truth(system, field, truth_states, oracle)

    hausdorff_series = np.array([hausdorff(e, g)[0] for e, g in zip(estimates, indist_truth)])
    z_error_series = np.linalg.norm(z_states - field.evaluate(truth_states), axis=-1)
    domain_exit = ~system.domain.contains(truth_states)
    if np.any(domain_exit):
        first = float(times[np.argmax(domain_exit)])
        logger.warning("Plant state left the domain at t=%.6g; Hausdorff bounds do not apply there", first)

    jump_tol = default_jump_tol(truth_states)
    settle_time = settle_fraction * float(times[-1])
    selection = select_path(estimates, times, initial_guess, jump_tol, settle_time)

    width = max(g.cardinality for g in indist_truth)
    selection_errors = np.full((len(times), width), np.nan)
    for i, g in enumerate(indist_truth):
        selection_errors[i, :g.cardinality] = np.linalg.norm(g.points - selection.path[i], axis=-1)

    run = ObserverRun(
        times=times,
        z_states=z_states,
        estimates=estimates,
        selection=selection.path,
        truth=truth,
        indist_truth=indist_truth,
        hausdorff_series=hausdorff_series,
        selection_error_series=selection_errors,
        z_error_series=z_error_series,
        domain_exit=domain_exit,
        provenance=provenance,
        selection_result=selection,
    )
    logger.info("Observer run finished: final Hausdorff error %.3g, selection %s",
                hausdorff_series[-1], "continuous" if selection.continuous else "jumping")
    return run


def steady_state_floor(run: ObserverRun, window: float = FLOOR_WINDOW) -> float:
    """Max Hausdorff error over the final `window` fraction of the run."""
    t_start, t_end = float(run.times[0]), float(run.times[-1])
    mask = run.times >= t_end - window * (t_end - t_start)
    return float(np.max(run.hausdorff_series[mask]))


@dataclass
class ObserverSetup:
    """Inputs of an observer run, reused across noise sweeps.

    Attributes:
        system: Plant
        field: Transform
        atlas: Tabulated image
        x0: Initial plant state
        horizon: Simulated time
        step: Filter step
        z0: Initial filter state (None is zero)
        cfg: Inversion tolerances
        noise: Noise template; iss sweeps replace its amplitude
        decimation: Filter steps between estimates
        initial_guess: Selection seed
        settle_fraction: Start of the continuity certificate window
    """
    system: SystemModel
    field: TransformField
    atlas: ImageAtlas
    x0: np.ndarray
    horizon: float
    step: float
    z0: Optional[np.ndarray] = None
    cfg: InversionConfig = dataclasses.field(default_factory=InversionConfig)
    noise: NoiseSpec = dataclasses.field(default_factory=NoiseSpec)
    decimation: int = DEFAULT_DECIMATION
    initial_guess: Optional[np.ndarray] = None
    settle_fraction: float = 0.0

    def run(self, noise: Optional[NoiseSpec] = None) -> ObserverRun:
        return run_set_observer(
            self.system, self.field, self.atlas, None, self.x0, self.z0,
            self.horizon, self.step, self.cfg, noise or self.noise,
            decimation=self.decimation, initial_guess=self.initial_guess,
            settle_fraction=self.settle_fraction,
        )

    def noise_at(self, amplitude: float) -> NoiseSpec:
        kind = self.noise.kind if self.noise.kind != "none" else "uniform"
        return NoiseSpec(kind=kind if amplitude > 0 else "none", amplitude=amplitude,
                         seed=self.noise.seed, frequency=self.noise.frequency)


def check_amplitudes(amplitudes: Sequence[float]) -> list:
    amplitudes = [float(a) for a in amplitudes]
    if any(a < 0 for a in amplitudes):
        raise ValueError("Noise amplitudes cannot be negative")
    if amplitudes != sorted(amplitudes):
        raise ValueError("Noise amplitudes must be sorted")
    return amplitudes


def iss_sweep(setup: ObserverSetup, amplitudes: Sequence[float]) -> list:
    """
    Steady-state Hausdorff floor for each noise amplitude

    Returns:
        List of IssRow in the order of `amplitudes`
    """
    rows = []
    for amplitude in check_amplitudes(amplitudes):
        run = setup.run(setup.noise_at(amplitude))
        rows.append(IssRow(amplitude=amplitude, floor=steady_state_floor(run)))
        logger.info("Noise amplitude %g: floor %.3g", amplitude, rows[-1].floor)
    return rows


def fit_decay_slope(
    times: np.ndarray,
    series: np.ndarray,
    upper: float = 1e-1,
    lower: float = 1e-4,
) -> float:
    """
    Slope of log(series) over the samples between lower and upper times its initial value

    Raises:
        ValueError: If fewer than two samples fall in the window
    """
    times = np.asarray(times, dtype=float)
    series = np.asarray(series, dtype=float)
    start = series[0]
    mask = (series > 0) & (series <= upper * start) & (series >= lower * start)
    if np.sum(mask) < 2:
        raise ValueError("Decay window holds fewer than two samples")
    slope, _ = np.polyfit(times[mask], np.log(series[mask]), 1)
    return float(slope)


def short_arc_check(
    times: np.ndarray,
    z_states: np.ndarray,
    window: float,
    eps: Optional[float] = None,
) -> dict:
    """
    Look for self-intersections of z over sliding time windows

    Two samples of one window at least three indices apart count as a
    crossing when they are within eps of each other while the arc between
    them is longer than 10 eps. Windows advance by half their length.
    """
    times = np.asarray(times, dtype=float)
    z = np.asarray(z_states, dtype=float)
    if window <= 0:
        raise ValueError("window must be positive")
    seg = np.linalg.norm(np.diff(z, axis=0), axis=-1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if eps is None:
        eps = 1e-3 * max(float(np.max(np.linalg.norm(z, axis=-1))), 1e-12)
    crossings, windows = [], 0
    start = float(times[0])
    while True:
        inside = np.flatnonzero((times >= start) & (times <= start + window))
        windows += 1
        if len(inside) > 3:
            d = np.linalg.norm(z[inside][:, None, :] - z[inside][None, :, :], axis=-1)
            a, b = np.triu_indices(len(inside), k=3)
            hit = (d[a, b] <= eps) & (arc[inside][b] - arc[inside][a] > 10.0 * eps)
            if np.any(hit):
                crossings.append(float(start))
        if start + window >= times[-1]:
            break
        start += window / 2.0
    return {
        "window": float(window),
        "eps": float(eps),
        "windows": windows,
        "self_intersections": crossings,
        "passed": not crossings,
    }


def separation_check(run: ObserverRun, window_fraction: float = FLOOR_WINDOW) -> dict:
    """Smallest gap between distinct ground-truth solutions over the terminal window."""
    t_start, t_end = float(run.times[0]), float(run.times[-1])
    mask = run.times >= t_end - window_fraction * (t_end - t_start)
    gaps = [float(np.min(pdist(s.points))) for s, m in zip(run.indist_truth, mask)
            if m and s.cardinality > 1]
    separation = min(gaps) if gaps else float("inf")
    return {
        "window_fraction": window_fraction,
        "min_separation": separation,
        "passed": separation > 0,
    }
