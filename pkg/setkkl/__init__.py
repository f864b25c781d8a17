"""Set-valued KKL observers for non-injective plants."""

from .async_pipeline import AsyncPipeline
from .config import load_config, get_env_var, load_experiment, parse_experiment, ExperimentConfig
from .distinguish import (
    backward_indist_oracle,
    characterization_check,
    diff_observability_map,
    horizon_sensitivity,
    k_sweep_rank,
    rank_profile_Hm,
)
from .dynsys import cutoff_field, example_registry, flow, integrate, linear_system, output_along
from .models import (
    DomainSpec,
    SystemModel,
    Trajectory,
    OutputSignal,
    FilterPair,
    ImageAtlas,
    ConditioningReport,
    PointSet,
    InversionConfig,
    CardinalityReport,
    BranchMatch,
    BranchTrack,
    NoiseSpec,
    SelectionResult,
    ObserverRun,
    IssRow,
    IndistReport,
    CharacterizationVerdict,
    ObservabilityReport,
    KSweepRow,
)
from .exceptions import (
    SetKKLError,
    NonFiniteState,
    BadRadii,
    UnknownExample,
    NotHurwitz,
    NotControllable,
    EmptySet,
    LengthMismatch,
    TooLarge,
    SignalGap,
    OrderTooHigh,
    ConfigError,
)
from .observer import (
    ObserverSetup,
    continuous_selection,
    iss_sweep,
    run_filter,
    run_set_observer,
    steady_state_floor,
)
from .setvalued import (
    cardinality_profile,
    circle_map_stream,
    extend_inverse,
    hausdorff,
    match_branches,
    nonsplit_circle_map,
    preimage,
    track_branches,
    tuple_distance,
)
from .transform import (
    TransformField,
    conditioning_map,
    evaluate_T,
    jacobian_T,
    linear_transform_matrix,
    make_filter_pair,
    pde_residual,
    tabulate_image,
)

__all__ = [
    'AsyncPipeline',
    'DomainSpec',
    'SystemModel',
    'Trajectory',
    'OutputSignal',
    'FilterPair',
    'ImageAtlas',
    'ConditioningReport',
    'PointSet',
    'InversionConfig',
    'CardinalityReport',
    'BranchMatch',
    'BranchTrack',
    'NoiseSpec',
    'SelectionResult',
    'ObserverRun',
    'IssRow',
    'IndistReport',
    'CharacterizationVerdict',
    'ObservabilityReport',
    'KSweepRow',
    'SetKKLError',
    'NonFiniteState',
    'BadRadii',
    'UnknownExample',
    'NotHurwitz',
    'NotControllable',
    'EmptySet',
    'LengthMismatch',
    'TooLarge',
    'SignalGap',
    'OrderTooHigh',
    'ConfigError',
    'integrate',
    'flow',
    'output_along',
    'cutoff_field',
    'linear_system',
    'example_registry',
    'make_filter_pair',
    'TransformField',
    'evaluate_T',
    'jacobian_T',
    'pde_residual',
    'tabulate_image',
    'conditioning_map',
    'linear_transform_matrix',
    'hausdorff',
    'tuple_distance',
    'preimage',
    'extend_inverse',
    'cardinality_profile',
    'match_branches',
    'nonsplit_circle_map',
    'circle_map_stream',
    'track_branches',
    'run_filter',
    'run_set_observer',
    'continuous_selection',
    'steady_state_floor',
    'ObserverSetup',
    'iss_sweep',
    'backward_indist_oracle',
    'horizon_sensitivity',
    'characterization_check',
    'diff_observability_map',
    'rank_profile_Hm',
    'k_sweep_rank',
    'load_config',
    'get_env_var',
    'load_experiment',
    'parse_experiment',
    'ExperimentConfig',
]
