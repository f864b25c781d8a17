"""Configuration module for setkkl."""
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from dotenv import load_dotenv

from .exceptions import ConfigError
from .models import DomainSpec, InversionConfig, NoiseSpec

DEFAULT_OUT_DIR = "setkkl-out"
DEFAULT_LOG_LEVEL = "INFO"


def load_config(env_file: Optional[str] = None) -> None:
    """Load environment configuration.

    Args:
        env_file: Optional path to specific .env file. If not provided,
                 will look for .env in current directory.
    """
    load_dotenv(dotenv_path=env_file)


def get_env_var(var_name: str, default: Optional[str] = None) -> str:
    """Get environment variable or raise error with helpful message.

    Args:
        var_name: Name of the environment variable
        default: Optional default value if not set

    Returns:
        The environment variable value

    Raises:
        ValueError: If the variable is not set and no default is provided
    """
    value = os.getenv(var_name, default)
    if value is None:
        raise ValueError(
            f"Please set {var_name} environment variable\n"
            f"Example: export {var_name}=your_{var_name.lower()}_here"
        )
    return value


def env_workers() -> Optional[int]:
    value = get_env_var("SETKKL_WORKERS", "")
    if not value:
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"SETKKL_WORKERS must be an integer, got {value!r}", field="SETKKL_WORKERS")


@dataclass
class SystemSection:
    """Which example system to run.

    Attributes:
        name: Registry name of the example
    """
    name: str


@dataclass
class PairSection:
    """Filter pair specification.

    Attributes:
        eigenvalues: Spectrum of A_o; reals or [re, im] pairs
        n_o: Block dimension, defaults to the number of eigenvalues
        seed: Seed of the B_o perturbation, defaults to the experiment seed
        k: Gain scaling
        perturbation: Size of the seeded B_o perturbation
    """
    eigenvalues: list
    n_o: Optional[int] = None
    seed: Optional[int] = None
    k: float = 1.0
    perturbation: float = 0.0

    def __post_init__(self):
        """Validate the spectrum."""
        if not isinstance(self.eigenvalues, list) or not self.eigenvalues:
            raise ValueError("eigenvalues must be a nonempty list")
        self.complex_eigenvalues()
        if self.n_o is None:
            self.n_o = len(self.eigenvalues)
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.perturbation < 0:
            raise ValueError("perturbation cannot be negative")

    def complex_eigenvalues(self) -> list:
        values = []
        for e in self.eigenvalues:
            if isinstance(e, (int, float)) and not isinstance(e, bool):
                values.append(complex(e))
            elif isinstance(e, list) and len(e) == 2 and all(isinstance(v, (int, float)) for v in e):
                values.append(complex(e[0], e[1]))
            else:
                raise ValueError(f"Eigenvalue {e!r} must be a number or a [re, im] pair")
        return values


@dataclass
class TransformSection:
    """Transform construction parameters.

    Attributes:
        horizon: Truncation length; None derives it from tol_trunc
        step: RK4 step
        tol_trunc: Truncation tolerance
        r_keep: Cutoff inner radius (default 1.05 R)
        r_zero: Cutoff outer radius (default 1.3 R)
        quadrature: "rk4" (default) integrates the output inside the RK4 sweep with
            Simpson weights, fourth order in step; "trapezoid" uses the sampled
            endpoints only and is second order
        rank_tol: Relative singular value threshold of full-rank verdicts
    """
    horizon: Optional[float] = None
    step: float = 1e-3
    tol_trunc: float = 1e-6
    r_keep: Optional[float] = None
    r_zero: Optional[float] = None
    quadrature: str = "rk4"
    rank_tol: float = 1e-4

    def __post_init__(self):
        if self.step <= 0 or self.tol_trunc <= 0:
            raise ValueError("step and tol_trunc must be positive")
        if self.horizon is not None and self.horizon <= 0:
            raise ValueError("horizon must be positive")


@dataclass
class AtlasSection:
    """Tabulation grid.

    Attributes:
        resolution: Points per axis; None keeps the example default
        domain: Optional domain override (kind, lower/upper or center/radius/inner_radius)
        batch_size: Grid rows per joint sweep
    """
    resolution: Optional[int] = None
    domain: Optional[dict] = None
    batch_size: int = 256

    def __post_init__(self):
        if self.resolution is not None and self.resolution < 2:
            raise ValueError("resolution must be at least 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.domain is not None:
            if "grid_resolution" in self.domain:
                raise ValueError("set atlas.resolution instead of domain.grid_resolution")
            DomainSpec(**self.domain)

    def domain_spec(self, default: DomainSpec) -> DomainSpec:
        resolution = self.resolution or default.grid_resolution
        if self.domain is None:
            return dataclasses.replace(default, grid_resolution=resolution)
        return DomainSpec(**self.domain, grid_resolution=resolution)


@dataclass
class NoiseSection:
    kind: str = "none"
    amplitude: float = 0.0
    seed: Optional[int] = None
    frequency: float = 5.0

    def __post_init__(self):
        self.spec(0)

    def spec(self, default_seed: int) -> NoiseSpec:
        seed = default_seed if self.seed is None else self.seed
        return NoiseSpec(kind=self.kind, amplitude=self.amplitude, seed=seed, frequency=self.frequency)


@dataclass
class ObserverSection:
    """Observer run parameters.

    Attributes:
        x0: Initial plant state (required by observe)
        z0: Initial filter state, zero when omitted
        horizon: Simulated time
        step: Filter step
        decimation: Filter steps between estimates
        noise: Measurement noise
        initial_guess: Seed of the continuous selection
        settle_fraction: Start of the continuity certificate window
        iss_amplitudes: Noise amplitudes of the ISS sweep (empty disables it)
        lipschitz_pairs: Pairs used for the empirical Lipschitz bound (0 disables it)
        short_arc_window: Window of the short-arc heuristic in time units
    """
    x0: Optional[list] = None
    z0: Optional[list] = None
    horizon: float = 15.0
    step: float = 1e-3
    decimation: int = 10
    noise: NoiseSection = field(default_factory=NoiseSection)
    initial_guess: Optional[list] = None
    settle_fraction: float = 0.0
    iss_amplitudes: list = field(default_factory=list)
    lipschitz_pairs: int = 0
    short_arc_window: float = 1.0

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon cannot be negative")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.decimation < 1:
            raise ValueError("decimation must be at least 1")
        if not 0.0 <= self.settle_fraction < 1.0:
            raise ValueError("settle_fraction must be in [0, 1)")
        if any(a < 0 for a in self.iss_amplitudes) or self.iss_amplitudes != sorted(self.iss_amplitudes):
            raise ValueError("iss_amplitudes must be nonnegative and sorted")


@dataclass
class DiagnosticsSection:
    """Diagnostic toggles.

    Attributes:
        cardinality: Preimage cardinality profile over the atlas
        characterization: Oracle classes and the T(x_a) = T(x_b) check
        horizon_sensitivity: Re-run the oracle at twice its horizon
        rank_map: Rank profile of H_m
        hm_order: Order m of H_m
        k_sweep: Gains of the k-sweep (empty disables it)
        oracle_horizon: Backward window of the oracle; None uses the plant-rate default
        oracle_tol: Output distance threshold of the oracle
        match_tol: z-space tolerance of the characterization check (default 10 tol_trunc)
    """
    cardinality: bool = False
    characterization: bool = False
    horizon_sensitivity: bool = False
    rank_map: bool = False
    hm_order: int = 1
    k_sweep: list = field(default_factory=list)
    oracle_horizon: Optional[float] = None
    oracle_tol: float = 1e-3
    match_tol: Optional[float] = None

    def __post_init__(self):
        if self.hm_order < 1:
            raise ValueError("hm_order must be at least 1")
        if any(k <= 0 for k in self.k_sweep) or self.k_sweep != sorted(self.k_sweep):
            raise ValueError("k_sweep gains must be positive and ascending")
        if self.oracle_horizon is not None and self.oracle_horizon <= 0:
            raise ValueError("oracle_horizon must be positive")


@dataclass
class ExperimentConfig:
    """A complete experiment, parsed from one JSON document."""
    system: SystemSection
    pair: PairSection
    transform: TransformSection = field(default_factory=TransformSection)
    atlas: AtlasSection = field(default_factory=AtlasSection)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    observer: ObserverSection = field(default_factory=ObserverSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    output_dir: Optional[str] = None
    seed: int = 0
    workers: Optional[int] = None

    def __post_init__(self):
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be at least 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: Any, path: str):
    """Instantiate a (nested) config dataclass, naming the dotted path on failure."""
    where = path or "<root>"
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object", field=path or None)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            dotted = f"{path}.{key}" if path else key
            raise ConfigError(f"Unknown field {dotted}", field=dotted)
    kwargs = {}
    for name, f in known.items():
        dotted = f"{path}.{name}" if path else name
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"Missing required field {dotted}", field=dotted)
            continue
        value = data[name]
        if dataclasses.is_dataclass(f.type):
            value = _build(f.type, value, dotted)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {where}: {e}", field=path or None)


def parse_experiment(text: str) -> ExperimentConfig:
    """Parse a JSON experiment document.

    Raises:
        ConfigError: On JSON syntax errors (with the line), unknown or missing fields, invalid values
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON: {e.msg}", line=e.lineno)
    return _build(ExperimentConfig, data, "")


def load_experiment(path: Union[str, Path]) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    return parse_experiment(text)


# Load configuration on module import
load_config()
