# segp-bench: desk-scale continual learning with adversarial anchors
from .config_loader import ConfigLoader
from .validator import ConfigValidator
from .duotower import DualTowerModel, ModelConfig, PretrainConfig, Snapshot, SnapshotLabel
from .anchorforge import AnchorSet, AnchorSource, DpgdConfig, build_anchor_set
from .segp_train import TrainConfig, train_task
from .protopath import InferenceConfig, PrototypeBank, dual_path_predict
from .clmetrics import AccuracyMatrix, drift_probe
from .streambench import (ExperimentSettings, MethodFlags, RunOptions, RunRecord, StreamSpec,
                          generate_stream, run_ablation, run_experiment, run_sweep)
from .report import emit_report

__version__ = "0.1.0"
__all__ = [
    "ConfigLoader",
    "ConfigValidator",
    "DualTowerModel",
    "ModelConfig",
    "PretrainConfig",
    "Snapshot",
    "SnapshotLabel",
    "AnchorSet",
    "AnchorSource",
    "DpgdConfig",
    "build_anchor_set",
    "TrainConfig",
    "train_task",
    "InferenceConfig",
    "PrototypeBank",
    "dual_path_predict",
    "AccuracyMatrix",
    "drift_probe",
    "ExperimentSettings",
    "MethodFlags",
    "RunOptions",
    "RunRecord",
    "StreamSpec",
    "generate_stream",
    "run_ablation",
    "run_experiment",
    "run_sweep",
    "emit_report",
]
