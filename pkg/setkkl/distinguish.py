"""Backward indistinguishability oracle, characterization check and observability ranks."""
import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .dynsys import DEFAULT_STEP, integrate
from .exceptions import OrderTooHigh
from .models import (
    CharacterizationVerdict,
    DomainSpec,
    FilterPair,
    IndistReport,
    KSweepRow,
    ObservabilityReport,
    SystemModel,
)
from .transform import DEFAULT_RANK_TOL, DEFAULT_TOL_TRUNC, TransformField
from .utils import FD_STEPS, as_batch, condition_numbers, directional_difference, singular_values

logger = logging.getLogger(__name__)

DEFAULT_ORACLE_TOL = 1e-3
MAX_ORACLE_HORIZON = 20.0
MIN_PLANT_RATE = 0.5
MAX_SAMPLES = 1000
PAIR_CHUNK = 4096


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def _backward_outputs(system: SystemModel, grid: np.ndarray, horizon: float, step: float) -> np.ndarray:
    """Outputs along backward solutions, shape (samples, N, n_y)."""
    n_steps = math.ceil(horizon / step)
    stride = max(1, math.ceil(n_steps / MAX_SAMPLES))
    traj = integrate(system, grid, 0.0, -horizon, step=step, stride=stride)
    return system.h(traj.states)


def backward_indist_oracle(
    system: SystemModel,
    domain: Optional[DomainSpec] = None,
    horizon: float = 10.0,
    tol: float = DEFAULT_ORACLE_TOL,
    step: float = DEFAULT_STEP,
) -> IndistReport:
    """
    Brute-force backward indistinguishability classes on a grid

    Two grid points are related when their outputs along the backward flow
    stay within tol of each other over [-horizon, 0]. Classes are the
    connected components of that relation; pairs that share a class without
    being related are reported as transitivity violations.

    Args:
        system: Plant, cut off so backward solutions stay bounded
        domain: Grid source; defaults to the system's domain
        horizon: Backward time window
        tol: Output distance threshold
        step: RK4 step

    Returns:
        IndistReport
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    domain = domain or system.domain
    grid = domain.grid()
    n = len(grid)

    if np.isinf(tol):
        related = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:
        outputs = _backward_outputs(system, grid, horizon, step)
        a, b = np.nonzero(np.triu(cdist(outputs[0], outputs[0]) <= tol, k=1))
        related = []
        for start in range(0, len(a), PAIR_CHUNK):
            ia, ib = a[start:start + PAIR_CHUNK], b[start:start + PAIR_CHUNK]
            gap = np.max(np.linalg.norm(outputs[:, ia] - outputs[:, ib], axis=-1), axis=0)
            keep = gap <= tol
            related.extend(zip(ia[keep].tolist(), ib[keep].tolist()))

    uf = _UnionFind(n)
    for i, j in related:
        uf.union(i, j)
    groups = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)
    classes = sorted(groups.values(), key=lambda c: c[0])

    related_set = set(related)
    violations = [
        (i, j)
        for members in classes if len(members) > 2
        for k, i in enumerate(members)
        for j in members[k + 1:]
        if (i, j) not in related_set
    ]
    if violations:
        logger.warning("%d pairs share a class without being related; tol %g straddles a class boundary",
                       len(violations), tol)
    logger.info("Oracle found %d classes on %d grid points", len(classes), n)
    return IndistReport(
        grid=grid,
        classes=classes,
        horizon=horizon,
        tol=tol,
        related_pairs=related,
        transitivity_violations=violations,
    )


def default_oracle_horizon(system: SystemModel, domain: Optional[DomainSpec] = None) -> float:
    """
    10 / rho_plant capped at 20

    rho_plant is the median magnitude of the spectral abscissa of df over
    the grid, floored at 0.5.
    """
    grid = (domain or system.domain).grid()
    abscissa = np.max(np.linalg.eigvals(system.jacobian_f(grid)).real, axis=-1)
    rate = max(float(np.median(np.abs(abscissa))), MIN_PLANT_RATE)
    return min(10.0 / rate, MAX_ORACLE_HORIZON)


def horizon_sensitivity(
    system: SystemModel,
    domain: Optional[DomainSpec] = None,
    horizon: float = 10.0,
    tol: float = DEFAULT_ORACLE_TOL,
    step: float = DEFAULT_STEP,
) -> dict:
    """Re-run the oracle at twice the horizon and list the classes that split."""
    base = backward_indist_oracle(system, domain, horizon, tol, step)
    doubled = backward_indist_oracle(system, domain, 2.0 * horizon, tol, step)
    ids = doubled.class_ids
    split = [members for members in base.classes if len(set(ids[members].tolist())) > 1]
    if split:
        logger.warning("%d oracle classes split when the horizon doubles", len(split))
    return {
        "horizon": horizon,
        "doubled_horizon": 2.0 * horizon,
        "classes": len(base.classes),
        "classes_doubled": len(doubled.classes),
        "split_classes": split,
        "stable": not split,
    }


def characterization_check(
    field: TransformField,
    report: IndistReport,
    match_tol: Optional[float] = None,
) -> CharacterizationVerdict:
    """
    Check T(x_a) = T(x_b) exactly when x_a and x_b share an oracle class

    Related pairs must have images within match_tol (default 10 tol_trunc),
    unrelated pairs must be farther apart than match_tol.
    """
    match_tol = 10.0 * field.tol_trunc if match_tol is None else match_tol
    images = field.evaluate(report.grid)
    d = cdist(images, images)
    ids = report.class_ids
    a, b = np.triu_indices(len(report.grid), k=1)
    same = ids[a] == ids[b]
    gaps = d[a, b]

    related_margin, worst_related = 0.0, None
    if np.any(same):
        k = int(np.argmax(np.where(same, gaps, -np.inf)))
        related_margin, worst_related = float(gaps[k]), (int(a[k]), int(b[k]))
    unrelated_margin, worst_unrelated = float("inf"), None
    if np.any(~same):
        k = int(np.argmin(np.where(same, np.inf, gaps)))
        unrelated_margin, worst_unrelated = float(gaps[k]), (int(a[k]), int(b[k]))

    passed = related_margin <= match_tol < unrelated_margin
    if not passed:
        logger.warning("Characterization fails: related margin %.3g, unrelated margin %.3g, tol %.3g",
                       related_margin, unrelated_margin, match_tol)
    return CharacterizationVerdict(
        passed=bool(passed),
        match_tol=match_tol,
        related_margin=related_margin,
        unrelated_margin=unrelated_margin,
        worst_related_pair=worst_related,
        worst_unrelated_pair=worst_unrelated,
    )


def _gradient_chain(system: SystemModel, m: int) -> list:
    """
    Callables G_0, ..., G_(m-1) with G_k the Jacobian of L_f^k h

    G_0 is dh and G_k = D_f G_(k-1) + G_(k-1) df: only the derivative of
    G_(k-1) along f is differenced, the df factor stays analytic.
    """
    f, df = system.f, system.jacobian_f
    chain = [system.jacobian_h]
    for k in range(1, m):
        if k > len(FD_STEPS):
            raise OrderTooHigh(f"Order m={m} needs more than {len(FD_STEPS)} nested differences")

        def grad_k(x, g=chain[-1], s=FD_STEPS[k - 1]):
            along = directional_difference(g, x, f(x), s)
            return along + g(x) @ df(x)

        chain.append(grad_k)
    return chain


def max_observability_order(system: SystemModel) -> int:
    return len(FD_STEPS) + (1 if system.dh is not None else 0)


def diff_observability_map(system: SystemModel, x: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """
    H_m(x) = (h, L_f h, ..., L_f^(m-1) h) and its Jacobian

    L_f^k h is G_(k-1) f where G_k, the Jacobian of L_f^k h, is propagated
    from dh and df; each order adds one difference along f (steps 1e-6,
    1e-4, 1e-3 from the inside out).

    Returns:
        (H of shape (..., m n_y), Jacobian of shape (..., m n_y, n_x))

    Raises:
        OrderTooHigh: If more than three nested differences would be needed
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if m > max_observability_order(system):
        raise OrderTooHigh(
            f"Order m={m} exceeds {max_observability_order(system)} for {system.name}"
        )
    xb, single = as_batch(x)
    chain = _gradient_chain(system, m)
    fx = system.f(xb)
    grads = [g(xb) for g in chain]
    lie = [system.h(xb)] + [np.einsum("nyx,nx->ny", g, fx) for g in grads[:-1]]
    values = np.concatenate(lie, axis=-1)
    jac = np.concatenate(grads, axis=-2)
    if single:
        return values[0], jac[0]
    return values, jac


def rank_profile_Hm(
    system: SystemModel,
    domain: Optional[DomainSpec] = None,
    m: int = 1,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> ObservabilityReport:
    """
    Rank of dH_m/dx at every grid point

    A singular value counts when it exceeds rank_tol times the largest
    singular value over the whole grid.
    """
    grid = (domain or system.domain).grid()
    _, jac = diff_observability_map(system, grid, m)
    sv = singular_values(jac)
    threshold = rank_tol * float(np.max(sv[:, 0]))
    rank = np.sum(sv > threshold, axis=-1)
    report = ObservabilityReport(
        m=m,
        points=grid,
        sigma_min=sv[:, -1],
        sigma_max=sv[:, 0],
        rank=rank,
        max_rank=min(m * system.n_y, system.n_x),
    )
    if report.deficient:
        logger.info("H_%d is rank deficient at %d of %d grid points", m, len(report.deficient), len(grid))
    return report


def k_sweep_rank(
    system: SystemModel,
    pair: FilterPair,
    ks: Sequence[float],
    domain: Optional[DomainSpec] = None,
    points: Optional[np.ndarray] = None,
    step: float = DEFAULT_STEP,
    tol_trunc: float = DEFAULT_TOL_TRUNC,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> list:
    """
    Jacobian statistics of T_k for the gain-scaled pairs (kA, B)

    Each gain gets its own truncation horizon, so tau shrinks like 1/k.

    Returns:
        List of KSweepRow, one per gain
    """
    ks = [float(k) for k in ks]
    if any(k <= 0 for k in ks) or ks != sorted(ks):
        raise ValueError("Gains must be positive and ascending")
    if points is None:
        points = (domain or system.domain).grid()
    points = np.atleast_2d(np.asarray(points, dtype=float))
    rows = []
    for k in ks:
        field = TransformField.build(system, pair, k=k, step=step, tol_trunc=tol_trunc)
        sv = singular_values(field.jacobian(points))
        rows.append(KSweepRow(
            k=k,
            horizon=field.horizon,
            min_sigma_min=float(np.min(sv[:, -1])),
            max_cond=float(np.max(condition_numbers(sv))),
            full_rank=bool(np.all(sv[:, -1] > rank_tol * sv[:, 0])),
        ))
        logger.info("k=%g: min sigma_min %.3g, full rank %s", k, rows[-1].min_sigma_min, rows[-1].full_rank)
    return rows
