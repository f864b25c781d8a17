from dataclasses import dataclass, field
from typing import Callable, ClassVar, Literal, Optional

import numpy as np
from scipy.spatial.distance import pdist

from .exceptions import EmptyGrid, SignalGap

VectorField = Callable[[np.ndarray], np.ndarray]
JacobianField = Callable[[np.ndarray], np.ndarray]

DomainKind = Literal["box", "ball", "annulus"]


@dataclass
class DomainSpec:
    """Compact set on which the observer is analysed.

    Attributes:
        kind: One of "box", "ball" or "annulus"
        lower: Box lower corner (box only)
        upper: Box upper corner (box only)
        center: Center of a ball or annulus
        radius: Ball radius, or outer radius of an annulus
        inner_radius: Inner radius of an annulus
        grid_resolution: Points per axis of the tabulation grid
    """
    kind: DomainKind
    lower: Optional[tuple] = None
    upper: Optional[tuple] = None
    center: Optional[tuple] = None
    radius: Optional[float] = None
    inner_radius: Optional[float] = None
    grid_resolution: int = 20

    KINDS: ClassVar[tuple] = ("box", "ball", "annulus")
    BOUNDARY_TOL: ClassVar[float] = 1e-9

    def __post_init__(self):
        """Validate the domain parameters after initialization."""
        if self.kind not in self.KINDS:
            raise ValueError(f"Domain kind must be one of {self.KINDS}, got {self.kind!r}")

        if self.kind == "box":
            if self.lower is None or self.upper is None:
                raise ValueError("Box domain needs lower and upper corners")
            self.lower = tuple(float(v) for v in self.lower)
            self.upper = tuple(float(v) for v in self.upper)
            if len(self.lower) != len(self.upper) or len(self.lower) == 0:
                raise ValueError("Box corners must have the same nonzero length")
            if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
                raise ValueError("Box must have a nonempty interior (lower < upper on every axis)")
        else:
            if self.center is None or self.radius is None:
                raise ValueError(f"{self.kind} domain needs a center and a radius")
            self.center = tuple(float(v) for v in self.center)
            self.radius = float(self.radius)
            if self.radius <= 0:
                raise ValueError("Radius must be positive")
            if self.kind == "annulus":
                if self.inner_radius is None:
                    raise ValueError("Annulus domain needs an inner radius")
                self.inner_radius = float(self.inner_radius)
                if not 0 < self.inner_radius < self.radius:
                    raise ValueError("Annulus needs 0 < inner_radius < radius")

        if self.grid_resolution < 2:
            raise ValueError("grid_resolution must be at least 2")

    @property
    def dim(self) -> int:
        return len(self.lower) if self.kind == "box" else len(self.center)

    def box_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box of the domain."""
        if self.kind == "box":
            return np.array(self.lower), np.array(self.upper)
        c = np.array(self.center)
        return c - self.radius, c + self.radius

    @property
    def spacing(self) -> float:
        """Largest grid spacing over the axes."""
        lo, hi = self.box_bounds()
        return float(np.max((hi - lo) / (self.grid_resolution - 1)))

    def bounding_radius(self) -> float:
        """Radius of the smallest origin-centred ball containing the domain."""
        if self.kind == "box":
            lo, hi = self.box_bounds()
            return float(np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi))))
        return float(np.linalg.norm(self.center) + self.radius)

    def contains(self, points: np.ndarray, tol: Optional[float] = None) -> np.ndarray:
        """Boolean mask of the points (shape (..., dim)) lying in the domain."""
        pts = np.asarray(points, dtype=float)
        lo, hi = self.box_bounds()
        slack = (self.BOUNDARY_TOL if tol is None else tol) * max(1.0, float(np.max(hi - lo)))
        if self.kind == "box":
            return np.all((pts >= lo - slack) & (pts <= hi + slack), axis=-1)
        r = np.linalg.norm(pts - np.array(self.center), axis=-1)
        inside = r <= self.radius + slack
        if self.kind == "annulus":
            inside &= r >= self.inner_radius - slack
        return inside

    def grid(self) -> np.ndarray:
        """Row-major tabulation grid restricted to the domain, shape (N, dim).

        Raises:
            EmptyGrid: If no grid point lies in the domain
        """
        lo, hi = self.box_bounds()
        axes = [np.linspace(a, b, self.grid_resolution) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        pts = pts[self.contains(pts)]
        if len(pts) == 0:
            raise EmptyGrid(f"No point of the {self.grid_resolution}-per-axis grid lies in the {self.kind} domain")
        return pts

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        """Uniform random points of the domain by rejection from the bounding box."""
        rng = np.random.default_rng(seed)
        lo, hi = self.box_bounds()
        out = np.empty((0, self.dim))
        while len(out) < n:
            batch = rng.uniform(lo, hi, size=(max(2 * n, 16), self.dim))
            out = np.concatenate([out, batch[self.contains(batch, tol=0.0)]])
        return out[:n]


@dataclass
class SystemModel:
    """Plant x' = f(x), y = h(x).

    All callables are vectorized over leading axes: f maps (..., n_x) to
    (..., n_x), h maps (..., n_x) to (..., n_y), df and dh return
    (..., n_x, n_x) and (..., n_y, n_x).

    Attributes:
        n_x: State dimension
        n_y: Output dimension
        f: Vector field
        h: Output map
        domain: Compact set of interest
        name: Identifier (registry name for shipped examples)
        df: Optional analytic Jacobian of f
        dh: Optional analytic Jacobian of h
        indistinguishable: Optional analytic map x -> (p, n_x) array of states indistinguishable from x
        static: True when f is identically zero
        cutoff_radii: (r_keep, r_zero) once the field has been cut off
    """
    n_x: int
    n_y: int
    f: VectorField
    h: VectorField
    domain: DomainSpec
    name: str
    df: Optional[JacobianField] = None
    dh: Optional[JacobianField] = None
    indistinguishable: Optional[Callable[[np.ndarray], np.ndarray]] = None
    static: bool = False
    cutoff_radii: Optional[tuple] = None

    def __post_init__(self):
        """Validate dimensions after initialization."""
        if self.n_x < 1 or self.n_y < 1:
            raise ValueError("State and output dimensions must be at least 1")
        if self.domain.dim != self.n_x:
            raise ValueError(
                f"Domain dimension {self.domain.dim} does not match n_x={self.n_x}"
            )
        if not self.name:
            raise ValueError("System name cannot be empty")

    def jacobian_f(self, x: np.ndarray) -> np.ndarray:
        if self.df is not None:
            return np.asarray(self.df(x), dtype=float)
        from .utils import central_difference
        return central_difference(self.f, x)

    def jacobian_h(self, x: np.ndarray) -> np.ndarray:
        if self.dh is not None:
            return np.asarray(self.dh(x), dtype=float)
        from .utils import central_difference
        return central_difference(self.h, x)


@dataclass
class Trajectory:
    """Time-indexed states; times strictly monotone.

    States may carry a batch axis: shape (L, n) or (L, N, n).
    """
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        """Validate the time grid after initialization."""
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.states = np.asarray(self.states, dtype=float)
        if len(self.times) < 1:
            raise ValueError("Trajectory needs at least one node")
        if len(self.states) != len(self.times):
            raise ValueError("times and states must have the same length")
        if len(self.times) > 1:
            diffs = np.diff(self.times)
            if not (np.all(diffs > 0) or np.all(diffs < 0)):
                raise ValueError("times must be strictly monotone")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def direction(self) -> Literal["forward", "backward"]:
        if len(self.times) > 1 and self.times[-1] < self.times[0]:
            return "backward"
        return "forward"

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class OutputSignal:
    """Piecewise-linear output signal y(t).

    A query at a stored node returns the stored value exactly.
    """
    times: np.ndarray
    values: np.ndarray
    interpolation: Literal["linear"] = "linear"
    _t: np.ndarray = field(init=False, repr=False)
    _v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        """Validate nodes and build an ascending view for lookups."""
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.values = np.asarray(self.values, dtype=float)
        if len(self.times) < 1 or len(self.values) != len(self.times):
            raise ValueError("OutputSignal needs matching, nonempty times and values")
        if len(self.times) > 1:
            diffs = np.diff(self.times)
            if not (np.all(diffs > 0) or np.all(diffs < 0)):
                raise ValueError("times must be strictly monotone")
        if self.interpolation != "linear":
            raise ValueError("Only linear interpolation is supported")
        order = np.argsort(self.times)
        self._t = self.times[order]
        self._v = self.values[order]

    @property
    def span(self) -> tuple[float, float]:
        return float(self._t[0]), float(self._t[-1])

    def covers(self, t0: float, t1: float) -> bool:
        lo, hi = self.span
        return lo <= min(t0, t1) and max(t0, t1) <= hi

    def __call__(self, t: float) -> np.ndarray:
        lo, hi = self.span
        if t < lo or t > hi:
            raise SignalGap(f"Output queried at t={t} outside [{lo}, {hi}]", (lo, hi), (t, t))
        idx = int(np.searchsorted(self._t, t))
        if idx < len(self._t) and self._t[idx] == t:
            return self._v[idx].copy()
        t_a, t_b = self._t[idx - 1], self._t[idx]
        w = (t - t_a) / (t_b - t_a)
        return (1.0 - w) * self._v[idx - 1] + w * self._v[idx]


@dataclass
class FilterPair:
    """Filter matrices with the Kronecker structure A = I ⊗ A_o, B = I ⊗ B_o.

    Attributes:
        A_o: Block of size n_o x n_o
        B_o: Column of size n_o x 1
        n_y: Number of output channels (copies of the block)
        A, B: Assembled filter matrices
        hurwitz_margin: -max Re(eig(A_o)), positive
        controllability_cond: Condition number of the controllability matrix of (A_o, B_o)
    """
    A_o: np.ndarray
    B_o: np.ndarray
    n_y: int
    A: np.ndarray = field(init=False)
    B: np.ndarray = field(init=False)
    hurwitz_margin: float = field(init=False)
    controllability_cond: float = field(init=False)

    def __post_init__(self):
        """Assemble the Kronecker form and check stability."""
        self.A_o = np.atleast_2d(np.asarray(self.A_o, dtype=float))
        self.B_o = np.asarray(self.B_o, dtype=float).reshape(-1, 1)
        if self.A_o.shape != (len(self.B_o), len(self.B_o)):
            raise ValueError("A_o must be square and match the length of B_o")
        if self.n_y < 1:
            raise ValueError("n_y must be at least 1")
        eye = np.eye(self.n_y)
        self.A = np.kron(eye, self.A_o)
        self.B = np.kron(eye, self.B_o)
        self.hurwitz_margin = float(-np.max(np.linalg.eigvals(self.A_o).real))
        if self.hurwitz_margin <= 0:
            raise ValueError("A_o must be Hurwitz")
        ctrb = np.hstack([
            np.linalg.matrix_power(self.A_o, i) @ self.B_o for i in range(self.n_o)
        ])
        self.controllability_cond = float(np.linalg.cond(ctrb))

    @property
    def n_o(self) -> int:
        return len(self.B_o)

    @property
    def n_z(self) -> int:
        return self.n_o * self.n_y


@dataclass
class ImageAtlas:
    """Tabulation of T over a domain grid with Jacobian singular-value stats."""
    grid_points: np.ndarray
    images: np.ndarray
    jacobian_min_sv: np.ndarray
    jacobian_max_sv: np.ndarray
    jacobian_cond: np.ndarray
    spacing: float = 0.0

    def __post_init__(self):
        """Validate that all per-point lists line up."""
        n = len(self.grid_points)
        if n == 0:
            raise ValueError("Atlas must contain at least one point")
        for name in ("images", "jacobian_min_sv", "jacobian_max_sv", "jacobian_cond"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"Atlas field {name} has the wrong length")

    def __len__(self) -> int:
        return len(self.grid_points)


@dataclass
class ConditioningReport:
    """Per-point conditioning of the Jacobian of T and its summary."""
    points: np.ndarray
    cond: np.ndarray
    sigma_min: np.ndarray
    full_rank: np.ndarray
    rank_tol: float

    COND_BOUND: ClassVar[float] = 1e3

    @property
    def min_sigma_min(self) -> float:
        return float(np.min(self.sigma_min))

    @property
    def max_cond(self) -> float:
        return float(np.max(self.cond))

    @property
    def all_full_rank(self) -> bool:
        return bool(np.all(self.full_rank))

    @property
    def below_cond_bound(self) -> bool:
        """Whether the worst conditioning stays under 1e3."""
        return self.max_cond < self.COND_BOUND


@dataclass
class PointSet:
    """Finite unordered set of states.

    Attributes:
        points: Array of shape (p, n); p may be 0
        merge_radius: Points closer than this are considered equal
        residuals: Optional per-point inversion residuals
    """
    points: np.ndarray
    merge_radius: float = 0.0
    residuals: Optional[np.ndarray] = None

    def __post_init__(self):
        """Validate distinctness of the points."""
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size == 0 and self.points.ndim == 2 and self.points.shape[0] == 1:
            self.points = self.points.reshape(0, 0)
        if self.merge_radius < 0:
            raise ValueError("merge_radius cannot be negative")
        if len(self.points) > 1 and np.min(pdist(self.points)) <= self.merge_radius:
            raise ValueError("PointSet points must be farther apart than merge_radius")

    @classmethod
    def empty(cls, dim: int, merge_radius: float = 0.0) -> "PointSet":
        return cls(points=np.empty((0, dim)), merge_radius=merge_radius)

    @classmethod
    def merged(cls, points: np.ndarray, merge_radius: float = 0.0) -> "PointSet":
        """Greedy merge: keep each point unless it lies within merge_radius of a kept one."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        kept = []
        for p in pts:
            if all(np.linalg.norm(p - q) > merge_radius for q in kept):
                kept.append(p)
        if not kept:
            return cls.empty(pts.shape[1], merge_radius)
        return cls(points=np.array(kept), merge_radius=merge_radius)

    @property
    def cardinality(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return self.cardinality

    @property
    def is_empty(self) -> bool:
        return self.cardinality == 0

    def nearest(self, x: np.ndarray) -> tuple[int, float]:
        """Index of and distance to the point nearest to x."""
        if self.is_empty:
            raise ValueError("nearest() on an empty PointSet")
        d = np.linalg.norm(self.points - np.asarray(x, dtype=float), axis=-1)
        i = int(np.argmin(d))
        return i, float(d[i])


@dataclass
class InversionConfig:
    """Tolerances for preimage computation.

    Attributes:
        residual_tol: z-space residual below which a point is a preimage
        cluster_radius: x-space merge radius; None means 2x the atlas spacing
        max_gn_iters: Gauss-Newton iteration cap
        seeds_per_query: Nearest atlas images always used as seeds
        max_seeds: Cap on seeds per query when many images fall within one cell of the nearest
        max_rejections: Consecutive rejected Levenberg-Marquardt steps before a seed is dropped
        gradient_tol: Gradient norm declaring convergence
    """
    residual_tol: float = 1e-5
    cluster_radius: Optional[float] = None
    max_gn_iters: int = 50
    seeds_per_query: int = 8
    max_seeds: int = 64
    max_rejections: int = 30
    gradient_tol: float = 1e-10

    def __post_init__(self):
        """Validate tolerances after initialization."""
        if self.residual_tol <= 0:
            raise ValueError("residual_tol must be positive")
        if self.cluster_radius is not None and self.cluster_radius <= 0:
            raise ValueError("cluster_radius must be positive")
        if self.max_gn_iters < 0 or self.max_rejections < 0:
            raise ValueError("Iteration caps cannot be negative")
        if self.seeds_per_query < 1:
            raise ValueError("seeds_per_query must be at least 1")
        if self.max_seeds < self.seeds_per_query:
            raise ValueError("max_seeds cannot be smaller than seeds_per_query")

    def resolved_cluster_radius(self, atlas: ImageAtlas) -> float:
        if self.cluster_radius is not None:
            return self.cluster_radius
        if atlas.spacing > 0:
            return 2.0 * atlas.spacing
        return 1e-3


@dataclass
class CardinalityReport:
    """Cardinality of T^-(T(x)) over the atlas grid."""
    points: np.ndarray
    cardinality: np.ndarray
    modal_p: int
    violations: list

    @property
    def modal_flag(self) -> np.ndarray:
        return self.cardinality == self.modal_p


@dataclass
class BranchMatch:
    """Pairing of the points of one set to those of the next.

    pairing[i] is the index in the next set paired with point i of the
    previous set, or -1 when point i found no partner.
    """
    pairing: np.ndarray
    distances: np.ndarray
    unmatched_next: list

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.pairing, np.arange(len(self.pairing))))


@dataclass
class BranchTrack:
    """Branches followed through a stream of point sets."""
    paths: np.ndarray
    monodromies: list
    swap_count: int


NoiseKind = Literal["none", "uniform", "sinusoid"]


@dataclass
class NoiseSpec:
    """Measurement noise added to the plant output.

    Attributes:
        kind: "none", "uniform" or "sinusoid"
        amplitude: Bound on the noise magnitude per channel
        seed: Random seed (uniform samples, sinusoid phases)
        frequency: Angular frequency of the sinusoid
    """
    kind: NoiseKind = "none"
    amplitude: float = 0.0
    seed: int = 0
    frequency: float = 5.0

    KINDS: ClassVar[tuple] = ("none", "uniform", "sinusoid")

    def __post_init__(self):
        """Validate the noise parameters."""
        if self.kind not in self.KINDS:
            raise ValueError(f"Noise kind must be one of {self.KINDS}")
        if self.amplitude < 0:
            raise ValueError("Noise amplitude cannot be negative")


@dataclass
class SelectionResult:
    """Continuous selection x_hat(t) picked from the set estimates."""
    path: np.ndarray
    jumps: np.ndarray
    max_jump: float
    settled_max_jump: float
    jump_tol: float
    gaps: list

    @property
    def continuous(self) -> bool:
        return self.settled_max_jump <= self.jump_tol


@dataclass
class ObserverRun:
    """Record of a set-valued observer run on the estimate grid.

    Attributes:
        times: Estimate times
        z_states: Filter state at each estimate time
        estimates: T^inv(z(t)) at each estimate time
        selection: Continuous selection x_hat(t)
        truth: Plant states at the estimate times
        indist_truth: Ground-truth indistinguishable sets
        hausdorff_series: d_H(estimates[i], indist_truth[i])
        selection_error_series: |x_hat - x_i| per ground-truth candidate, shape (L, p)
        z_error_series: |z(t) - T(x(t))|
        domain_exit: Whether x(t) is outside the domain at each time
        provenance: "analytic" or "oracle" ground truth
        selection_result: Jumps and continuity certificate of the selection
    """
    times: np.ndarray
    z_states: np.ndarray
    estimates: list
    selection: np.ndarray
    truth: Trajectory
    indist_truth: list
    hausdorff_series: np.ndarray
    selection_error_series: np.ndarray
    z_error_series: np.ndarray
    domain_exit: np.ndarray
    provenance: str
    selection_result: Optional[SelectionResult] = None

    def __post_init__(self):
        """Validate that every series shares the time grid."""
        n = len(self.times)
        for name in ("z_states", "estimates", "selection", "indist_truth",
                     "hausdorff_series", "selection_error_series", "z_error_series",
                     "domain_exit"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"ObserverRun field {name} does not match the time grid")

    @property
    def exited_domain(self) -> bool:
        return bool(np.any(self.domain_exit))


@dataclass
class IssRow:
    amplitude: float
    floor: float


@dataclass
class IndistReport:
    """Brute-force backward-indistinguishability classes over a grid.

    Attributes:
        grid: Grid states, shape (N, n_x)
        classes: Partition of grid indices, each class sorted, classes ordered by first index
        horizon: Backward time window used
        tol: Output-distance threshold
        related_pairs: Unordered pairs (i, j), i < j, found related
        transitivity_violations: Pairs sharing a class without being directly related
    """
    grid: np.ndarray
    classes: list
    horizon: float
    tol: float
    related_pairs: list = field(default_factory=list)
    transitivity_violations: list = field(default_factory=list)

    def __post_init__(self):
        """Validate that the classes partition the grid."""
        members = sorted(i for c in self.classes for i in c)
        if members != list(range(len(self.grid))):
            raise ValueError("classes must partition the grid indices")

    @property
    def class_ids(self) -> np.ndarray:
        ids = np.empty(len(self.grid), dtype=int)
        for cid, members in enumerate(self.classes):
            ids[list(members)] = cid
        return ids

    @property
    def class_sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.classes])


@dataclass
class CharacterizationVerdict:
    """Outcome of the T(x_a) = T(x_b) <=> x_a ~ x_b check on a grid."""
    passed: bool
    match_tol: float
    related_margin: float
    unrelated_margin: float
    worst_related_pair: Optional[tuple] = None
    worst_unrelated_pair: Optional[tuple] = None


@dataclass
class ObservabilityReport:
    """Rank profile of the differential observability map H_m."""
    m: int
    points: np.ndarray
    sigma_min: np.ndarray
    sigma_max: np.ndarray
    rank: np.ndarray
    max_rank: int

    def __post_init__(self):
        """Rank never exceeds min(m * n_y, n_x)."""
        if len(self.rank) and int(np.max(self.rank)) > self.max_rank:
            raise ValueError("rank exceeds min(m * n_y, n_x)")

    @property
    def deficient(self) -> list:
        return [int(i) for i in np.flatnonzero(self.rank < self.points.shape[1])]


@dataclass
class KSweepRow:
    k: float
    horizon: float
    min_sigma_min: float
    max_cond: float
    full_rank: bool
