"""Neural-network inference as structured sparse coding."""

from .adversarial import AttackConfig, epsilon_sweep, fgsm, robust_accuracy
from .checkpoint import checkpoint_load, checkpoint_save
from .config import ExperimentConfig, parse_config, parse_config_text
from .data import DatasetHandle, downsample, load_cifar10, synth_dataset, synth_textures
from .dictionary import (
    assemble_global_dictionary,
    dictionary_metrics,
    frame_potential,
    lipschitz_constant,
    mutual_coherence,
    welch_bound,
)
from .estimator import DeepPursuitClassifier
from .exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DeepPursuitError,
    DimensionError,
    GraphError,
    NumericIncident,
    OperatorTooLargeError,
    TopologyError,
)
from .experiments import run_experiment
from .model import ModelParams, init_model
from .network import LayerSpec, NetworkSpec, SkipSpec, conv_pyramid_spec, dense_spec, validate_spec
from .pursuit import (
    PursuitConfig,
    PursuitState,
    deep_pursuit,
    feed_forward,
    ista_solve,
    layered_basis_pursuit,
    run_pursuit,
)
from .records import RunRecord
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "CheckpointError", "ConfigError", "DataError", "DatasetHandle", "DeepPursuitClassifier",
    "DeepPursuitError", "DimensionError", "ExperimentConfig", "GraphError", "LayerSpec", "ModelParams",
    "NetworkSpec", "NumericIncident", "OperatorTooLargeError", "PursuitConfig", "PursuitState", "RunRecord",
    "SkipSpec", "TopologyError", "TrainConfig", "conv_pyramid_spec", "assemble_global_dictionary",
    "checkpoint_load", "checkpoint_save", "deep_pursuit", "dense_spec", "dictionary_metrics", "downsample",
    "epsilon_sweep", "feed_forward", "fgsm", "frame_potential", "init_model", "ista_solve",
    "layered_basis_pursuit", "lipschitz_constant", "load_cifar10", "mutual_coherence", "parse_config",
    "parse_config_text", "robust_accuracy", "run_experiment", "run_pursuit", "synth_dataset",
    "synth_textures", "train", "validate_spec", "welch_bound",
]
