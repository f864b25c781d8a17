"""
KKL transform construction

T(x) is the truncated backward integral

    T(x) = int_{-tau}^{0} exp(-kA s) B h(X(x, s)) ds

evaluated by integrating the backward flow, the variational equation and the
integrand together on one fixed RK4 grid.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Literal, Optional, Sequence

import numpy as np
from scipy.linalg import expm, solve_sylvester

from .dynsys import DEFAULT_STEP, cutoff_field, flow
from .exceptions import EmptyGrid, NonFiniteState, NotControllable, NotHurwitz
from .models import ConditioningReport, DomainSpec, FilterPair, ImageAtlas, SystemModel
from .utils import as_batch, condition_numbers, singular_values, time_grid

logger = logging.getLogger(__name__)

DEFAULT_TOL_TRUNC = 1e-6
DEFAULT_RANK_TOL = 1e-4
KEEP_FACTOR = 1.05
ZERO_FACTOR = 1.3
ATLAS_BATCH = 256

Quadrature = Literal["rk4", "trapezoid"]


def make_filter_pair(
    n_y: int,
    n_o: int,
    eigenvalues: Sequence[complex],
    seed: int = 0,
    perturbation: float = 0.0,
) -> FilterPair:
    """
    Build (A, B) = (I ⊗ A_o, I ⊗ B_o) with a prescribed spectrum for A_o

    Real eigenvalues give 1x1 blocks, conjugate pairs a ± ib give the
    rotation block [[a, b], [-b, a]]. B_o is the all-ones column, optionally
    perturbed by seeded Gaussian noise of size `perturbation`.

    Args:
        n_y: Number of output channels
        n_o: Block dimension
        eigenvalues: n_o values; complex ones must come with their conjugate
        seed: Seed for the B_o perturbation
        perturbation: Standard deviation of the B_o perturbation (0 disables it)

    Returns:
        FilterPair

    Raises:
        NotHurwitz: If any eigenvalue has a nonnegative real part
        NotControllable: If (A_o, B_o) is not controllable
        ValueError: If the eigenvalue list does not fit n_o
    """
    if n_o < 1:
        raise ValueError("n_o must be at least 1")
    eigs = [complex(e) for e in eigenvalues]
    if len(eigs) != n_o:
        raise ValueError(f"Expected {n_o} eigenvalues, got {len(eigs)}")
    unstable = [e for e in eigs if e.real >= 0]
    if unstable:
        raise NotHurwitz(f"Filter eigenvalues must have negative real parts, got {unstable}")

    blocks = []
    pending = list(eigs)
    while pending:
        e = pending.pop(0)
        if e.imag == 0:
            blocks.append(np.array([[e.real]]))
            continue
        partner = next((j for j, c in enumerate(pending) if np.isclose(c, e.conjugate())), None)
        if partner is None:
            raise ValueError(f"Complex eigenvalue {e} is missing its conjugate")
        pending.pop(partner)
        a, b = e.real, abs(e.imag)
        blocks.append(np.array([[a, b], [-b, a]]))

    A_o = np.zeros((n_o, n_o))
    offset = 0
    for block in blocks:
        size = len(block)
        A_o[offset:offset + size, offset:offset + size] = block
        offset += size

    B_o = np.ones(n_o)
    if perturbation > 0:
        B_o = B_o + perturbation * np.random.default_rng(seed).standard_normal(n_o)

    ctrb = np.column_stack([np.linalg.matrix_power(A_o, i) @ B_o for i in range(n_o)])
    rank = int(np.linalg.matrix_rank(ctrb))
    if rank < n_o:
        raise NotControllable(
            f"(A_o, B_o) is not controllable: rank {rank} < {n_o}; use distinct eigenvalues",
            rank=rank,
            condition=float(np.linalg.cond(ctrb)),
        )

    pair = FilterPair(A_o=A_o, B_o=B_o, n_y=n_y)
    logger.debug("Filter pair n_z=%d, margin %.6g, ctrb cond %.3g",
                 pair.n_z, pair.hurwitz_margin, pair.controllability_cond)
    return pair


def output_bound(system: SystemModel, radius: Optional[float] = None, samples: int = 2000) -> float:
    """Sampled bound on |h| over the domain and, if given, the origin ball of `radius`."""
    points = [system.domain.grid()]
    if radius is not None:
        ball = DomainSpec(kind="ball", center=(0.0,) * system.n_x, radius=radius)
        points.append(ball.sample(samples, seed=0))
    values = system.h(np.concatenate(points))
    return float(np.max(np.linalg.norm(values, axis=-1)))


def truncation_horizon(bound: float, rate: float, n_o: int, tol_trunc: float) -> float:
    """
    Horizon after which the tail of the integral is below tol_trunc

    The tail is bounded by M exp(-rate tau) / rate with M = sqrt(n_o) * bound.
    """
    magnitude = math.sqrt(n_o) * max(bound, tol_trunc)
    scale = max(magnitude, magnitude / rate)
    return max(math.log(scale / tol_trunc), 0.0) / rate


@dataclass
class TransformField:
    """Numerical evaluator of T and its Jacobian.

    Attributes:
        system: Plant, cut off outside r_zero unless static
        pair: Filter pair (A, B)
        horizon: Truncation length tau
        step: RK4 step
        k: Gain scaling, the filter matrix is kA
        tol_trunc: Truncation tolerance the horizon was chosen for
        quadrature: "rk4" (default, fourth order, uses the RK4 stage states) or
            "trapezoid" (second order, endpoint samples only) accumulation of the integral
    """
    system: SystemModel
    pair: FilterPair
    horizon: float
    step: float = DEFAULT_STEP
    k: float = 1.0
    tol_trunc: float = DEFAULT_TOL_TRUNC
    quadrature: Quadrature = "rk4"

    QUADRATURES = ("rk4", "trapezoid")

    def __post_init__(self):
        """Validate the transform parameters."""
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.quadrature not in self.QUADRATURES:
            raise ValueError(f"quadrature must be one of {self.QUADRATURES}")
        if self.system.n_y != self.pair.n_y:
            raise ValueError(
                f"Filter pair has {self.pair.n_y} channels but the system has {self.system.n_y} outputs"
            )

    @classmethod
    def build(
        cls,
        system: SystemModel,
        pair: FilterPair,
        k: float = 1.0,
        horizon: Optional[float] = None,
        step: float = DEFAULT_STEP,
        tol_trunc: float = DEFAULT_TOL_TRUNC,
        r_keep: Optional[float] = None,
        r_zero: Optional[float] = None,
        quadrature: Quadrature = "rk4",
    ) -> "TransformField":
        """
        Cut off the plant and pick the horizon from tol_trunc

        Radii default to 1.05 R and 1.3 R, R the bounding radius of the
        domain. Static plants are used as they are.
        """
        if not system.static and system.cutoff_radii is None:
            radius = system.domain.bounding_radius()
            system = cutoff_field(
                system,
                r_keep if r_keep is not None else KEEP_FACTOR * radius,
                r_zero if r_zero is not None else ZERO_FACTOR * radius,
            )
        if horizon is None:
            ball = None if system.static else system.cutoff_radii[1]
            horizon = truncation_horizon(
                output_bound(system, ball), k * pair.hurwitz_margin, pair.n_o, tol_trunc
            )
        logger.debug("Transform for %s: k=%g, horizon %.6g, step %g", system.name, k, horizon, step)
        return cls(system=system, pair=pair, horizon=horizon, step=step, k=k,
                   tol_trunc=tol_trunc, quadrature=quadrature)

    @property
    def A(self) -> np.ndarray:
        return self.k * self.pair.A

    @property
    def B(self) -> np.ndarray:
        return self.pair.B

    @property
    def n_z(self) -> int:
        return self.pair.n_z

    @cached_property
    def _nodes(self) -> np.ndarray:
        return time_grid(0.0, self.horizon, self.step)

    @cached_property
    def _kernel(self) -> tuple[np.ndarray, np.ndarray]:
        """exp(kA u) B at the grid nodes and at the step midpoints."""
        u = self._nodes
        steps = np.diff(u)
        propagators = {}

        def propagator(dt):
            # steps equal up to rounding share one propagator
            key = round(dt / self.step, 9)
            if key not in propagators:
                h = key * self.step
                propagators[key] = (expm(self.A * h / 2.0), expm(self.A * h))
            return propagators[key]

        nodes = np.empty((len(u), self.n_z, self.n_z))
        mids = np.empty((len(steps), self.n_z, self.n_z))
        nodes[0] = np.eye(self.n_z)
        for i, dt in enumerate(steps):
            half, full = propagator(float(dt))
            mids[i] = nodes[i] @ half
            nodes[i + 1] = nodes[i] @ full
        return nodes @ self.B, mids @ self.B

    @cached_property
    def _static_gain(self) -> np.ndarray:
        """(kA)^-1 (exp(kA tau) - I) B, the exact integral for f = 0."""
        A = self.A
        return np.linalg.solve(A, expm(A * self.horizon) - np.eye(self.n_z)) @ self.B

    def _sweep(self, x: np.ndarray, with_jacobian: bool) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """Joint backward sweep over a batch of states, shape (N, n_x)."""
        system = self.system
        if system.static:
            values = system.h(x) @ self._static_gain.T
            jac = self._static_gain @ system.jacobian_h(x) if with_jacobian else None
            return values, jac

        u = self._nodes
        nodes, mids = self._kernel
        rk4_quad = self.quadrature == "rk4"
        f, h = system.f, system.h
        df, dh = system.jacobian_f, system.jacobian_h

        xi = np.array(x, dtype=float)
        total = np.zeros((len(xi), self.n_z))
        psi = np.broadcast_to(np.eye(system.n_x), (len(xi), system.n_x, system.n_x)).copy()
        total_jac = np.zeros((len(xi), self.n_z, system.n_x)) if with_jacobian else None
        g_prev = h(xi) @ nodes[0].T
        gj_prev = nodes[0] @ (dh(xi) @ psi) if with_jacobian else None

        for i in range(len(u) - 1):
            dt = u[i + 1] - u[i]
            k1 = -f(xi)
            x2 = xi + dt / 2 * k1
            k2 = -f(x2)
            x3 = xi + dt / 2 * k2
            k3 = -f(x3)
            x4 = xi + dt * k3
            k4 = -f(x4)
            xi_next = xi + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

            if with_jacobian:
                a1 = -df(xi) @ psi
                p2 = psi + dt / 2 * a1
                a2 = -df(x2) @ p2
                p3 = psi + dt / 2 * a2
                a3 = -df(x3) @ p3
                p4 = psi + dt * a3
                a4 = -df(x4) @ p4
                psi_next = psi + dt / 6 * (a1 + 2 * a2 + 2 * a3 + a4)

            g_next = h(xi_next) @ nodes[i + 1].T
            if rk4_quad:
                g2 = h(x2) @ mids[i].T
                g3 = h(x3) @ mids[i].T
                g4 = h(x4) @ nodes[i + 1].T
                total += dt / 6 * (g_prev + 2 * g2 + 2 * g3 + g4)
            else:
                total += dt / 2 * (g_prev + g_next)

            if with_jacobian:
                gj_next = nodes[i + 1] @ (dh(xi_next) @ psi_next)
                if rk4_quad:
                    gj2 = mids[i] @ (dh(x2) @ p2)
                    gj3 = mids[i] @ (dh(x3) @ p3)
                    gj4 = nodes[i + 1] @ (dh(x4) @ p4)
                    total_jac += dt / 6 * (gj_prev + 2 * gj2 + 2 * gj3 + gj4)
                else:
                    total_jac += dt / 2 * (gj_prev + gj_next)
                psi, gj_prev = psi_next, gj_next

            if not np.all(np.isfinite(xi_next)):
                raise NonFiniteState(
                    f"Backward flow of {system.name} became non-finite at s={-u[i + 1]}",
                    float(-u[i + 1]),
                    xi_next,
                )
            xi, g_prev = xi_next, g_next

        return total, total_jac

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """T(x) for a state (n_x,) or a batch (N, n_x)."""
        xb, single = as_batch(x)
        values, _ = self._sweep(xb, with_jacobian=False)
        return values[0] if single else values

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """dT/dx, shape (n_z, n_x) or (N, n_z, n_x)."""
        return self.evaluate_with_jacobian(x)[1]

    def evaluate_with_jacobian(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """T and dT/dx from one joint sweep."""
        xb, single = as_batch(x)
        values, jac = self._sweep(xb, with_jacobian=True)
        if single:
            return values[0], jac[0]
        return values, jac


def evaluate_T(field: TransformField, x: np.ndarray) -> np.ndarray:
    return field.evaluate(x)


def jacobian_T(field: TransformField, x: np.ndarray) -> np.ndarray:
    return field.jacobian(x)


def pde_residual(
    field: TransformField,
    x: np.ndarray,
    delta: float = 1e-4,
    scheme: Literal["trapezoid", "forward"] = "trapezoid",
) -> np.ndarray:
    """
    Flow-based check of L_f T = kA T + B h without Jacobians

    "forward" compares (T(X(x, delta)) - T(x)) / delta with the right-hand
    side at x; "trapezoid" compares it with the average of the right-hand
    side at both ends, which removes the O(delta) bias.

    Returns:
        Residual norm, a float for one state or an array for a batch
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if scheme not in ("trapezoid", "forward"):
        raise ValueError("scheme must be 'trapezoid' or 'forward'")
    xb, single = as_batch(x)
    system = field.system
    x_delta = flow(system, xb, delta, "forward", step=min(field.step, delta))
    values = field.evaluate(np.concatenate([xb, x_delta]))
    t_here, t_there = values[:len(xb)], values[len(xb):]

    def rhs(t, states):
        return t @ field.A.T + system.h(states) @ field.B.T

    target = rhs(t_here, xb)
    if scheme == "trapezoid":
        target = (target + rhs(t_there, x_delta)) / 2.0
    residual = np.linalg.norm((t_there - t_here) / delta - target, axis=-1)
    return float(residual[0]) if single else residual


def split_batches(points: np.ndarray, batch_size: int = ATLAS_BATCH) -> list:
    """Fixed-size row batches; the partition only depends on batch_size."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    return [points[i:i + batch_size] for i in range(0, len(points), batch_size)]


def tabulate_batch(field: TransformField, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Images and descending Jacobian singular values for one batch of grid points."""
    values, jac = field.evaluate_with_jacobian(np.atleast_2d(points))
    return values, singular_values(jac)


def assemble_atlas(points: np.ndarray, results: list, spacing: float) -> ImageAtlas:
    if not results:
        raise EmptyGrid("Cannot assemble an atlas from zero grid points")
    images = np.concatenate([r[0] for r in results])
    sv = np.concatenate([r[1] for r in results])
    return ImageAtlas(
        grid_points=points,
        images=images,
        jacobian_min_sv=sv[:, -1],
        jacobian_max_sv=sv[:, 0],
        jacobian_cond=condition_numbers(sv),
        spacing=spacing,
    )


def tabulate_image(
    field: TransformField,
    domain: Optional[DomainSpec] = None,
    batch_size: int = ATLAS_BATCH,
) -> ImageAtlas:
    """
    Tabulate T and the Jacobian singular values on the domain grid

    Args:
        field: Transform to evaluate
        domain: Grid source; defaults to the domain of the field's system
        batch_size: Rows per joint sweep

    Returns:
        ImageAtlas in row-major grid order
    """
    domain = domain or field.system.domain
    points = domain.grid()
    results = [tabulate_batch(field, batch) for batch in split_batches(points, batch_size)]
    atlas = assemble_atlas(points, results, domain.spacing)
    logger.info("Tabulated %d grid points of %s", len(atlas), field.system.name)
    return atlas


def conditioning_map(atlas: ImageAtlas, rank_tol: float = DEFAULT_RANK_TOL) -> ConditioningReport:
    """Per-point condition numbers of dT/dx; full rank means sigma_min > rank_tol * sigma_max."""
    full_rank = atlas.jacobian_min_sv > rank_tol * atlas.jacobian_max_sv
    report = ConditioningReport(
        points=atlas.grid_points,
        cond=atlas.jacobian_cond,
        sigma_min=atlas.jacobian_min_sv,
        full_rank=full_rank,
        rank_tol=rank_tol,
    )
    if not report.all_full_rank:
        logger.warning("Jacobian of T is rank deficient at %d of %d grid points",
                       int(np.sum(~full_rank)), len(full_rank))
    return report


def linear_transform_matrix(
    S: np.ndarray,
    C: np.ndarray,
    pair: FilterPair,
    k: float = 1.0,
) -> np.ndarray:
    """
    Closed-form T(x) = M x for a linear plant x' = S x, y = C x

    M solves M S - kA M = B C.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[0] != pair.n_y:
        raise ValueError("C must have one row per filter channel")
    return solve_sylvester(-k * pair.A, S, pair.B @ C)
