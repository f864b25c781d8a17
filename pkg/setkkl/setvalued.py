"""Set-valued metrics, preimages of T, the projected inverse and branch bookkeeping."""
import itertools
import logging
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import EmptySet, LengthMismatch, TooLarge
from .models import (
    BranchMatch,
    BranchTrack,
    CardinalityReport,
    ImageAtlas,
    InversionConfig,
    PointSet,
)
from .transform import TransformField

logger = logging.getLogger(__name__)

MAX_TUPLE = 8
QUERY_CHUNK = 128
SEED_INFLATION = 3.0
STALL_STEP = 1e-13
DAMPING_FLOOR = 1e-12

SetLike = Union[PointSet, np.ndarray, Sequence]


def _as_points(s: SetLike) -> np.ndarray:
    if isinstance(s, PointSet):
        return s.points
    arr = np.asarray(s, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr[:, None]
    return arr


def hausdorff(Sa: SetLike, Sb: SetLike) -> tuple[float, float, float]:
    """
    Hausdorff distance between two finite sets

    Returns:
        (d_H, delta_ab, delta_ba) where delta_ab = max_a min_b |a - b|

    Raises:
        EmptySet: If either set is empty
    """
    a, b = _as_points(Sa), _as_points(Sb)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("Hausdorff distance needs two nonempty sets")
    d = cdist(a, b)
    delta_ab = float(np.max(np.min(d, axis=1)))
    delta_ba = float(np.max(np.min(d, axis=0)))
    return max(delta_ab, delta_ba), delta_ab, delta_ba


def tuple_distance(Sa: SetLike, Sb: SetLike) -> float:
    """
    Distance between unordered p-tuples: min over permutations of the max pointwise gap

    Raises:
        LengthMismatch: If the tuples have different lengths
        TooLarge: If p exceeds 8
    """
    a, b = _as_points(Sa), _as_points(Sb)
    if len(a) != len(b):
        raise LengthMismatch(f"Tuples of lengths {len(a)} and {len(b)} cannot be compared")
    if len(a) > MAX_TUPLE:
        raise TooLarge(f"Permutation enumeration is limited to p <= {MAX_TUPLE}, got {len(a)}")
    if len(a) == 0:
        return 0.0
    d = cdist(a, b)
    rows = np.arange(len(a))
    return float(min(np.max(d[rows, list(perm)]) for perm in itertools.permutations(rows)))


def gauss_newton(
    field: TransformField,
    seeds: np.ndarray,
    targets: np.ndarray,
    cfg: InversionConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Batched Gauss-Newton with Levenberg-Marquardt damping on 1/2 |T(x) - z|^2

    Each row of `seeds` is refined towards the matching row of `targets`.
    Every row carries its own damping mu: an accepted step shrinks it by the
    gain ratio, a rejected step multiplies it by a doubling factor. A row
    stops when its gradient norm drops below cfg.gradient_tol, its step
    stalls, it has taken cfg.max_gn_iters accepted steps or more than
    cfg.max_rejections consecutive steps were rejected.

    Returns:
        (points, residual norms)
    """
    x = np.array(seeds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    n, n_x = x.shape
    eye = np.eye(n_x)

    active = np.ones(n, dtype=bool)
    stale = np.ones(n, dtype=bool)
    mu = np.full(n, np.nan)
    nu = np.full(n, 2.0)
    rejections = np.zeros(n, dtype=int)
    accepted_steps = np.zeros(n, dtype=int)
    r = np.zeros_like(targets)
    jac = np.zeros((n, targets.shape[1], n_x))

    for iteration in range(cfg.max_gn_iters * (cfg.max_rejections + 1)):
        refresh = np.flatnonzero(active & stale)
        if len(refresh):
            values, jac[refresh] = field.evaluate_with_jacobian(x[refresh])
            r[refresh] = values - targets[refresh]
            stale[refresh] = False

        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        J = jac[idx]
        cost = 0.5 * np.sum(r[idx] ** 2, axis=-1)
        grad = np.einsum("nzx,nz->nx", J, r[idx])
        jtj = np.einsum("nzx,nzy->nxy", J, J)
        diag_top = np.max(np.diagonal(jtj, axis1=1, axis2=2), axis=-1)
        fresh = np.isnan(mu[idx])
        mu[idx[fresh]] = 1e-3 * np.where(diag_top[fresh] > 0, diag_top[fresh], 1.0)

        m = np.maximum(mu[idx], DAMPING_FLOOR * np.maximum(1.0, diag_top))
        step = -np.linalg.solve(jtj + m[:, None, None] * eye, grad[..., None])[..., 0]
        scale = STALL_STEP * np.maximum(1.0, np.linalg.norm(x[idx], axis=-1))
        done = np.linalg.norm(grad, axis=-1) < cfg.gradient_tol
        stalled = np.linalg.norm(step, axis=-1) < scale

        trying = ~done & ~stalled
        sel = np.flatnonzero(trying)
        better = np.zeros(len(idx), dtype=bool)
        if len(sel):
            trial = x[idx[sel]] + step[sel]
            r_trial = field.evaluate(trial) - targets[idx[sel]]
            cost_trial = 0.5 * np.sum(r_trial ** 2, axis=-1)
            cost_trial = np.where(np.isfinite(cost_trial), cost_trial, np.inf)
            h = step[sel]
            predicted = 0.5 * np.einsum("nx,nx->n", h, m[sel, None] * h - grad[sel])
            gain = (cost[sel] - cost_trial) / np.maximum(predicted, np.finfo(float).tiny)
            ok = cost_trial < cost[sel]
            better[sel] = ok

            good = idx[sel[ok]]
            x[good] = trial[ok]
            r[good] = r_trial[ok]
            stale[good] = True
            mu[good] *= np.maximum(1.0 / 3.0, 1.0 - (2.0 * gain[ok] - 1.0) ** 3)
            nu[good] = 2.0
            rejections[good] = 0
            accepted_steps[good] += 1

            bad = idx[sel[~ok]]
            mu[bad] *= nu[bad]
            nu[bad] *= 2.0
            rejections[bad] += 1

        exhausted = (rejections[idx] > cfg.max_rejections) | (accepted_steps[idx] >= cfg.max_gn_iters)
        active[idx[done | stalled | exhausted]] = False
        logger.debug("Levenberg-Marquardt iteration %d: %d of %d rows active, %d accepted",
                     iteration, int(np.sum(active)), n, int(np.sum(better)))

    residuals = np.linalg.norm(field.evaluate(x) - targets, axis=-1)
    return x, residuals


def cluster_points(points: np.ndarray, residuals: np.ndarray, radius: float) -> PointSet:
    """
    Merge candidates closer than radius

    Candidates are visited by (residual, coordinates); each cluster keeps its
    lowest-residual member. The result is sorted lexicographically.
    """
    dim = points.shape[1] if points.ndim == 2 else 1
    if len(points) == 0:
        return PointSet.empty(dim, radius)
    order = np.lexsort(tuple(points[:, j] for j in reversed(range(dim))) + (residuals,))
    kept, kept_res = [], []
    for i in order:
        if all(np.linalg.norm(points[i] - q) > radius for q in kept):
            kept.append(points[i])
            kept_res.append(residuals[i])
    kept = np.array(kept)
    kept_res = np.array(kept_res)
    out = np.lexsort(tuple(kept[:, j] for j in reversed(range(dim))))
    return PointSet(points=kept[out], merge_radius=radius, residuals=kept_res[out])


def _seed_reach(atlas: ImageAtlas, cfg: InversionConfig) -> float:
    """Image-space slack: how far T can move across one grid cell, plus the residual tolerance."""
    n_x = atlas.grid_points.shape[1]
    sigma = float(np.nanmax(atlas.jacobian_max_sv))
    cell = sigma * atlas.spacing * np.sqrt(n_x) if np.isfinite(sigma) else 0.0
    return SEED_INFLATION * cfg.residual_tol + cell


def _seed_indices(distances: np.ndarray, reach: float, cfg: InversionConfig) -> np.ndarray:
    order = np.argsort(distances, kind="stable")
    within = int(np.sum(distances <= distances[order[0]] + reach))
    count = max(cfg.seeds_per_query, min(cfg.max_seeds, within))
    return np.sort(order[:count])


def _refine_queries(
    field: TransformField,
    atlas: ImageAtlas,
    queries: np.ndarray,
    cfg: InversionConfig,
) -> tuple[list, list, np.ndarray]:
    """Gauss-Newton from atlas seeds for a chunk of queries; returns per-query candidates."""
    distances = cdist(queries, atlas.images)
    reach = _seed_reach(atlas, cfg)
    seed_sets = [_seed_indices(d, reach, cfg) for d in distances]
    owners = np.concatenate([np.full(len(s), q) for q, s in enumerate(seed_sets)])
    seeds = atlas.grid_points[np.concatenate(seed_sets)]
    points, residuals = gauss_newton(field, seeds, queries[owners], cfg)
    inside = field.system.domain.contains(points) & np.isfinite(residuals)
    cand_points = [points[(owners == q) & inside] for q in range(len(queries))]
    cand_res = [residuals[(owners == q) & inside] for q in range(len(queries))]
    return cand_points, cand_res, distances


def _chunks(queries: np.ndarray):
    for start in range(0, len(queries), QUERY_CHUNK):
        yield queries[start:start + QUERY_CHUNK]


def _queries(zs: np.ndarray, atlas: ImageAtlas) -> np.ndarray:
    return np.asarray(zs, dtype=float).reshape(-1, atlas.images.shape[1])


def preimage_batch(
    field: TransformField,
    atlas: ImageAtlas,
    zs: np.ndarray,
    cfg: Optional[InversionConfig] = None,
) -> list:
    """T^-(z) for each row of zs; empty sets mean no preimage within residual_tol."""
    cfg = cfg or InversionConfig()
    radius = cfg.resolved_cluster_radius(atlas)
    results = []
    for chunk in _chunks(_queries(zs, atlas)):
        cand_points, cand_res, _ = _refine_queries(field, atlas, chunk, cfg)
        for pts, res in zip(cand_points, cand_res):
            member = res <= cfg.residual_tol
            results.append(cluster_points(pts[member], res[member], radius))
    return results


def preimage(
    field: TransformField,
    atlas: ImageAtlas,
    z: np.ndarray,
    cfg: Optional[InversionConfig] = None,
) -> PointSet:
    """
    Preimage {x in X : T(x) = z} within the residual tolerance

    Args:
        field: Transform to invert
        atlas: Tabulated images supplying the Gauss-Newton seeds
        z: Point of z-space
        cfg: Inversion tolerances

    Returns:
        Clustered PointSet, possibly empty
    """
    return preimage_batch(field, atlas, np.asarray(z)[None, :], cfg)[0]


def extend_inverse_batch(
    field: TransformField,
    atlas: ImageAtlas,
    zs: np.ndarray,
    cfg: Optional[InversionConfig] = None,
) -> list:
    """
    Projected inverse T^inv(z) for each row of zs

    When the best candidate fits within residual_tol the result equals the
    preimage. Otherwise it is the set of candidates within residual_tol of
    the smallest residual. Falls back to the closest atlas points when no
    refined candidate stays in the domain, so the result is never empty.
    """
    cfg = cfg or InversionConfig()
    radius = cfg.resolved_cluster_radius(atlas)
    results = []
    for chunk in _chunks(_queries(zs, atlas)):
        cand_points, cand_res, distances = _refine_queries(field, atlas, chunk, cfg)
        for pts, res, dist in zip(cand_points, cand_res, distances):
            if len(pts) == 0:
                member = dist <= np.min(dist) + cfg.residual_tol
                results.append(cluster_points(atlas.grid_points[member], dist[member], radius))
                continue
            r_min = float(np.min(res))
            bound = cfg.residual_tol if r_min <= cfg.residual_tol else r_min + cfg.residual_tol
            member = res <= bound
            results.append(cluster_points(pts[member], res[member], radius))
    return results


def extend_inverse(
    field: TransformField,
    atlas: ImageAtlas,
    z: np.ndarray,
    cfg: Optional[InversionConfig] = None,
) -> PointSet:
    return extend_inverse_batch(field, atlas, np.asarray(z)[None, :], cfg)[0]


def cardinality_profile(
    field: TransformField,
    atlas: ImageAtlas,
    cfg: Optional[InversionConfig] = None,
) -> CardinalityReport:
    """card(T^-(T(x))) at every atlas point, its modal value and the points that deviate."""
    sets = preimage_batch(field, atlas, atlas.images, cfg)
    card = np.array([s.cardinality for s in sets])
    modal_p = int(np.argmax(np.bincount(card)))
    violations = [int(i) for i in np.flatnonzero(card != modal_p)]
    if violations:
        logger.warning("Preimage cardinality differs from p=%d at %d grid points",
                       modal_p, len(violations))
    logger.info("Cardinality profile over %d points: modal p=%d", len(card), modal_p)
    return CardinalityReport(
        points=atlas.grid_points,
        cardinality=card,
        modal_p=modal_p,
        violations=violations,
    )


def empirical_lipschitz(
    field: TransformField,
    atlas: ImageAtlas,
    cfg: Optional[InversionConfig] = None,
    n_pairs: int = 20,
    offset: float = 1e-2,
    seed: int = 0,
) -> dict:
    """
    Empirical bound on d_H(T^inv(z_a), T^inv(z_b)) / |z_a - z_b|

    Pairs are atlas images of grid neighbours (on the image) and atlas
    images shifted by `offset` in a random direction (off the image).
    """
    rng = np.random.default_rng(seed)
    n = len(atlas)
    if n < 2:
        raise ValueError("empirical_lipschitz needs at least two atlas points")
    picks = rng.choice(n, size=min(n_pairs, n), replace=False)
    grid_d = cdist(atlas.grid_points[picks], atlas.grid_points)
    grid_d[np.arange(len(picks)), picks] = np.inf
    neighbours = np.argmin(grid_d, axis=1)
    directions = rng.standard_normal((len(picks), atlas.images.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    z_a = atlas.images[picks]
    z_b = atlas.images[neighbours]
    z_off = z_a + offset * directions
    sets = extend_inverse_batch(field, atlas, np.concatenate([z_a, z_b, z_off]), cfg)
    m = len(picks)

    def ratios(first, second, gaps):
        out = []
        for s_a, s_b, gap in zip(first, second, gaps):
            if gap > 0:
                out.append(hausdorff(s_a, s_b)[0] / gap)
        return np.array(out)

    on_image = ratios(sets[:m], sets[m:2 * m], np.linalg.norm(z_a - z_b, axis=1))
    off_image = ratios(sets[:m], sets[2 * m:], np.full(m, offset))
    both = np.concatenate([on_image, off_image])
    return {
        "on_image_max": float(np.max(on_image)) if len(on_image) else 0.0,
        "off_image_max": float(np.max(off_image)) if len(off_image) else 0.0,
        "median": float(np.median(both)) if len(both) else 0.0,
        "max": float(np.max(both)) if len(both) else 0.0,
        "pairs": int(m),
        "offset": offset,
    }


def match_branches(prev: SetLike, next: SetLike) -> BranchMatch:
    """
    Greedy nearest pairing of the points of `prev` to those of `next`

    Pairs are taken by increasing distance, ties broken by (prev index, next index).
    Points left over on either side are reported as unmatched.
    """
    a, b = _as_points(prev), _as_points(next)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("match_branches needs two nonempty sets")
    d = cdist(a, b)
    ii, jj = np.meshgrid(np.arange(len(a)), np.arange(len(b)), indexing="ij")
    order = np.lexsort((jj.ravel(), ii.ravel(), d.ravel()))
    pairing = np.full(len(a), -1)
    distances = np.full(len(a), np.inf)
    used = np.zeros(len(b), dtype=bool)
    for flat in order:
        i, j = ii.flat[flat], jj.flat[flat]
        if pairing[i] < 0 and not used[j]:
            pairing[i] = j
            distances[i] = d[i, j]
            used[j] = True
    return BranchMatch(
        pairing=pairing,
        distances=distances,
        unmatched_next=[int(j) for j in np.flatnonzero(~used)],
    )


def nonsplit_circle_map(t: float) -> PointSet:
    """
    Two-valued map on the unit circle that is continuous but not split

    The circle is parametrized by t in [0, 1); the labelled branches are
    f(t) = (2 - t, 4 - t) and g(t) = (1 + t, 3 + t e^(t - 1)), and f(t) -> g(0)
    as t -> 1. Points are returned in the order (f, g).
    """
    s = float(t) % 1.0
    f = (2.0 - s, 4.0 - s)
    g = (1.0 + s, 3.0 + s * np.exp(s - 1.0))
    return PointSet(points=np.array([f, g]))


def circle_map_stream(samples_per_loop: int = 200, loops: int = 1) -> list:
    """Samples of nonsplit_circle_map at t = i / samples_per_loop, endpoints included."""
    if samples_per_loop < 2 or loops < 1:
        raise ValueError("Need at least two samples per loop and one loop")
    return [nonsplit_circle_map(i / samples_per_loop) for i in range(samples_per_loop * loops + 1)]


def track_branches(stream: Sequence, loop_length: Optional[int] = None) -> BranchTrack:
    """
    Follow every branch of a stream of equal-cardinality sets

    Args:
        stream: Sequence of sets, labelled consistently at loop starts
        loop_length: Samples per loop; a monodromy permutation is recorded each time it elapses

    Returns:
        BranchTrack with the paths, per-loop permutations and the number of loops that swapped labels
    """
    if len(stream) == 0:
        raise EmptySet("track_branches needs a nonempty stream")
    first = _as_points(stream[0])
    p = len(first)
    labels = np.arange(p)
    paths = np.empty((len(stream), p, first.shape[1]))
    paths[0] = first
    monodromies = []
    loop_start = labels.copy()
    for i in range(1, len(stream)):
        current = _as_points(stream[i])
        match = match_branches(paths[i - 1], current)
        if np.any(match.pairing < 0) or len(current) != p:
            raise ValueError(f"Cardinality changed at sample {i}; branches cannot be tracked")
        labels = match.pairing
        paths[i] = current[labels]
        if loop_length and i % loop_length == 0:
            permutation = np.empty(p, dtype=int)
            permutation[loop_start] = labels
            monodromies.append(permutation)
            loop_start = labels.copy()
    swap_count = sum(1 for m in monodromies if not np.array_equal(m, np.arange(p)))
    logger.debug("Tracked %d branches over %d samples, %d swaps", p, len(stream), swap_count)
    return BranchTrack(paths=paths, monodromies=monodromies, swap_count=swap_count)
