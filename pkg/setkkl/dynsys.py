"""Plant models, fixed-step RK4 integration and the example registry."""
import dataclasses
import logging
from typing import Callable, Literal, Optional

import numpy as np

from .exceptions import BadRadii, NonFiniteState, UnknownExample
from .models import DomainSpec, OutputSignal, SystemModel, Trajectory
from .utils import time_grid

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-3

Direction = Literal["forward", "backward"]
TimeField = Callable[[float, np.ndarray], np.ndarray]


def rk4_march(
    rhs: TimeField,
    y0: np.ndarray,
    times: np.ndarray,
    stride: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Classical RK4 over a prescribed grid

    Args:
        rhs: right-hand side rhs(t, y), vectorized over leading axes of y
        y0: initial value, any shape
        times: strictly monotone grid; step sizes are its differences
        stride: keep every stride-th node (the last node is always kept)

    Returns:
        (kept_times, kept_states)

    Raises:
        NonFiniteState: If any state becomes NaN or infinite
    """
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise NonFiniteState("Initial state is not finite", float(times[0]), y)
    n = len(times)
    keep = [0] + [i for i in range(stride, n - 1, stride)] + ([n - 1] if n > 1 else [])
    keep_set = set(keep)
    out = np.empty((len(keep),) + y.shape)
    out[0] = y
    slot = 1
    for i in range(n - 1):
        t = times[i]
        dt = times[i + 1] - t
        k1 = rhs(t, y)
        k2 = rhs(t + dt / 2, y + dt / 2 * k1)
        k3 = rhs(t + dt / 2, y + dt / 2 * k2)
        k4 = rhs(t + dt, y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(
                f"State became non-finite at t={times[i + 1]}; cut off the field first",
                float(times[i + 1]),
                y,
            )
        if i + 1 in keep_set:
            out[slot] = y
            slot += 1
    return times[keep], out


def integrate(
    system: SystemModel,
    x0: np.ndarray,
    t0: float,
    t1: float,
    step: float = DEFAULT_STEP,
    stride: int = 1,
) -> Trajectory:
    """
    Integrate x' = f(x) from t0 to t1 with fixed-step RK4

    x0 may be a single state (n_x,) or a batch (N, n_x); states of the
    returned trajectory then have shape (L, n_x) or (L, N, n_x).
    t1 < t0 integrates backward in time. The last step is shortened so the
    final node lands exactly on t1.

    Raises:
        ValueError: If step <= 0 or t0 == t1
        NonFiniteState: If the solution blows up
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if t0 == t1:
        raise ValueError("t0 and t1 must differ")
    times = time_grid(t0, t1, step)
    kept_times, states = rk4_march(lambda t, x: system.f(x), x0, times, stride=stride)
    return Trajectory(times=kept_times, states=states)


def flow(
    system: SystemModel,
    x: np.ndarray,
    duration: float,
    direction: Direction = "forward",
    step: float = DEFAULT_STEP,
) -> np.ndarray:
    """Endpoint of the flow of f after `duration` time units forward or backward."""
    if duration < 0:
        raise ValueError("duration cannot be negative")
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    x = np.asarray(x, dtype=float)
    if duration == 0:
        return x.copy()
    t1 = duration if direction == "forward" else -duration
    times = time_grid(0.0, t1, step)
    _, states = rk4_march(lambda t, y: system.f(y), x, times, stride=len(times))
    return states[-1]


def output_along(system: SystemModel, traj: Trajectory) -> OutputSignal:
    """Output y = h(x) sampled along a trajectory."""
    return OutputSignal(times=traj.times.copy(), values=system.h(traj.states))


def _blend(r: np.ndarray, r_keep: float, r_zero: float) -> tuple[np.ndarray, np.ndarray]:
    """C1 cubic Hermite bump and its radial derivative."""
    width = r_zero - r_keep
    s = np.clip((r - r_keep) / width, 0.0, 1.0)
    sigma = 1.0 - 3.0 * s ** 2 + 2.0 * s ** 3
    dsigma = (-6.0 * s + 6.0 * s ** 2) / width
    return sigma, dsigma


def cutoff_field(system: SystemModel, r_keep: float, r_zero: float) -> SystemModel:
    """
    Multiply f by a radial bump so large balls become backward invariant

    The modified field equals f on |x| <= r_keep and vanishes on |x| >= r_zero.

    Raises:
        BadRadii: If r_keep >= r_zero, r_keep <= 0, or the domain is not inside the r_keep ball
    """
    if r_keep <= 0 or r_keep >= r_zero:
        raise BadRadii(f"Need 0 < r_keep < r_zero, got r_keep={r_keep}, r_zero={r_zero}")
    if system.domain.bounding_radius() > r_keep:
        raise BadRadii(
            f"Domain of {system.name} (radius {system.domain.bounding_radius():.6g}) "
            f"is not contained in the ball of radius r_keep={r_keep}"
        )
    base_f, base_jac = system.f, system.jacobian_f

    def f(x):
        x = np.asarray(x, dtype=float)
        sigma, _ = _blend(np.linalg.norm(x, axis=-1), r_keep, r_zero)
        return sigma[..., None] * base_f(x)

    def df(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        sigma, dsigma = _blend(r, r_keep, r_zero)
        with np.errstate(invalid="ignore", divide="ignore"):
            grad = np.where(r[..., None] > 0, dsigma[..., None] * x / np.where(r > 0, r, 1.0)[..., None], 0.0)
        return sigma[..., None, None] * base_jac(x) + base_f(x)[..., :, None] * grad[..., None, :]

    logger.debug("Cut off %s between radii %g and %g", system.name, r_keep, r_zero)
    return dataclasses.replace(
        system,
        f=f,
        df=df,
        name=f"{system.name}+cutoff",
        cutoff_radii=(float(r_keep), float(r_zero)),
    )


# Example systems

def _squared_output(x):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x1 ** 2 - x2 ** 2, 2.0 * x1 * x2], axis=-1)


def _squared_output_jac(x):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([
        np.stack([2.0 * x1, -2.0 * x2], axis=-1),
        np.stack([2.0 * x2, 2.0 * x1], axis=-1),
    ], axis=-2)


def _limit_cycle(x):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    g = 1.0 - (x1 ** 2 + x2 ** 2)
    return np.stack([x2 + x1 * g, -x1 + x2 * g], axis=-1)


def _limit_cycle_jac(x):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    g = 1.0 - (x1 ** 2 + x2 ** 2)
    return np.stack([
        np.stack([g - 2.0 * x1 ** 2, 1.0 - 2.0 * x1 * x2], axis=-1),
        np.stack([-1.0 - 2.0 * x1 * x2, g - 2.0 * x2 ** 2], axis=-1),
    ], axis=-2)


def _antipodal(x):
    x = np.asarray(x, dtype=float)
    return np.stack([x, -x])


def _singleton(x):
    return np.asarray(x, dtype=float)[None, :]


def _rescale(r2):
    """phi(r) = (1 - r)^2 below 1, zero above, applied to r = |x|^2."""
    inside = r2 < 1.0
    phi = np.where(inside, (1.0 - r2) ** 2, 0.0)
    dphi = np.where(inside, -2.0 * (1.0 - r2), 0.0)
    return phi, dphi


def _rescaled_limit_cycle(x):
    x = np.asarray(x, dtype=float)
    phi, _ = _rescale(np.sum(x ** 2, axis=-1))
    return phi[..., None] * _limit_cycle(x)


def _rescaled_limit_cycle_jac(x):
    x = np.asarray(x, dtype=float)
    phi, dphi = _rescale(np.sum(x ** 2, axis=-1))
    grad = 2.0 * dphi[..., None] * x
    return phi[..., None, None] * _limit_cycle_jac(x) + _limit_cycle(x)[..., :, None] * grad[..., None, :]


def _zero_field(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _zero_jac(x):
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    return np.zeros(x.shape[:-1] + (n, n))


def _sine_pair(x):
    x = np.asarray(x, dtype=float)
    return np.concatenate([np.sin(2.0 * x), np.sin(x)], axis=-1)


def _sine_pair_jac(x):
    x = np.asarray(x, dtype=float)
    return np.stack([2.0 * np.cos(2.0 * x), np.cos(x)], axis=-2)


def _sine_pair_indist(x):
    """Only the crossing at the origin of the output plane is shared."""
    x = np.asarray(x, dtype=float)
    if np.all(np.abs(_sine_pair(x)) < 1e-12):
        return np.array([[-np.pi], [0.0], [np.pi]])
    return x[None, :]


def linear_system(
    S: np.ndarray,
    C: np.ndarray,
    domain: DomainSpec,
    name: str = "linear",
) -> SystemModel:
    """Linear plant x' = S x, y = C x with analytic Jacobians."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    return SystemModel(
        n_x=S.shape[0],
        n_y=C.shape[0],
        f=lambda x: np.asarray(x, dtype=float) @ S.T,
        h=lambda x: np.asarray(x, dtype=float) @ C.T,
        df=lambda x: np.broadcast_to(S, np.shape(x)[:-1] + S.shape).copy(),
        dh=lambda x: np.broadcast_to(C, np.shape(x)[:-1] + C.shape).copy(),
        domain=domain,
        name=name,
        static=not np.any(S),
    )


def _limit_cycle_squared_output(grid_resolution: Optional[int]) -> SystemModel:
    return SystemModel(
        n_x=2,
        n_y=2,
        f=_limit_cycle,
        h=_squared_output,
        df=_limit_cycle_jac,
        dh=_squared_output_jac,
        domain=DomainSpec(kind="ball", center=(0.0, 0.0), radius=1.7,
                          grid_resolution=grid_resolution or 40),
        name="limit_cycle_squared_output",
        indistinguishable=_antipodal,
    )


def _sine_pair_map(grid_resolution: Optional[int]) -> SystemModel:
    return SystemModel(
        n_x=1,
        n_y=2,
        f=_zero_field,
        h=_sine_pair,
        df=_zero_jac,
        dh=_sine_pair_jac,
        domain=DomainSpec(kind="box", lower=(-np.pi,), upper=(np.pi,),
                          grid_resolution=grid_resolution or 101),
        name="sine_pair_map",
        indistinguishable=_sine_pair_indist,
        static=True,
    )


def _rescaled_limit_cycle_system(grid_resolution: Optional[int]) -> SystemModel:
    return SystemModel(
        n_x=2,
        n_y=2,
        f=_rescaled_limit_cycle,
        h=_squared_output,
        df=_rescaled_limit_cycle_jac,
        dh=_squared_output_jac,
        domain=DomainSpec(kind="ball", center=(0.0, 0.0), radius=2.0,
                          grid_resolution=grid_resolution or 40),
        name="rescaled_limit_cycle",
        indistinguishable=_antipodal,
    )


def _harmonic_oscillator(grid_resolution: Optional[int]) -> SystemModel:
    system = linear_system(
        S=[[0.0, 1.0], [-1.0, 0.0]],
        C=[[1.0, 0.0]],
        domain=DomainSpec(kind="box", lower=(-1.0, -1.0), upper=(1.0, 1.0),
                          grid_resolution=grid_resolution or 20),
        name="harmonic_oscillator",
    )
    return dataclasses.replace(system, indistinguishable=_singleton)


def _static(grid_resolution: Optional[int]) -> SystemModel:
    system = linear_system(
        S=[[0.0]],
        C=[[1.0]],
        domain=DomainSpec(kind="box", lower=(-1.0,), upper=(1.0,),
                          grid_resolution=grid_resolution or 21),
        name="static",
    )
    return dataclasses.replace(system, indistinguishable=_singleton)


_REGISTRY = {
    "limit_cycle_squared_output": _limit_cycle_squared_output,
    "sine_pair_map": _sine_pair_map,
    "rescaled_limit_cycle": _rescaled_limit_cycle_system,
    "harmonic_oscillator": _harmonic_oscillator,
    "static": _static,
}

EXAMPLE_NAMES = tuple(_REGISTRY)


def example_registry(name: str, grid_resolution: Optional[int] = None) -> SystemModel:
    """
    Look up a shipped example system by its stable public name

    Raises:
        UnknownExample: If the name is not registered
    """
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise UnknownExample(
            f"Unknown example {name!r}; expected one of {', '.join(EXAMPLE_NAMES)}"
        )
    return factory(grid_resolution)
