"""Exemplar-free class-incremental learning on point clouds, at desk scale."""
from .backbones import ModelState, build_model, expand_head, load_checkpoint, save_checkpoint
from .data import DataProvider, LabelMapper, PointSet, generate_synthetic_classes, parse_off
from .estimator import IncrementalPointCloudClassifier, check_point_clouds
from .exceptions import ConfigError, InvalidArgumentError, InvalidStateError, LoadError, ParseError
from .experiment import ExperimentConfig, run_benchmark, verify_bundle
from .harness import AccuracyMatrix, evaluate_union, forgetting_measure, run_scenario
from .losses import DistillConfig, census_loss, lwf_loss
from .sampler import SamplerConfig, Scenario, build_scenario, fixed_scenario
from .trainer import TrainConfig, advance_task, desk_config, start_run, train_base, train_joint

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix", "ConfigError", "DataProvider", "DistillConfig", "ExperimentConfig",
    "IncrementalPointCloudClassifier", "InvalidArgumentError", "InvalidStateError", "LabelMapper",
    "LoadError", "ModelState", "ParseError", "PointSet", "SamplerConfig", "Scenario", "TrainConfig",
    "advance_task", "build_model", "build_scenario", "census_loss", "check_point_clouds",
    "desk_config", "evaluate_union", "expand_head", "fixed_scenario", "forgetting_measure",
    "generate_synthetic_classes", "load_checkpoint", "lwf_loss", "parse_off", "run_benchmark",
    "run_scenario", "save_checkpoint", "start_run", "train_base", "train_joint", "verify_bundle",
]
