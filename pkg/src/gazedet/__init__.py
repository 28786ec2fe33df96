"""Multi-person gaze target detection with proposal-based heatmap prediction."""

from .data import SceneSample, SynthConfig, generate_dataset, generate_scene, load_annotations
from .gtgen import (
    Annotation,
    GroundTruthConfig,
    GroundTruthMaps,
    make_connection_map,
    make_gaussian_map,
    make_ground_truth,
)
from .harness import TrainConfig, evaluate, one_cycle_lr, train
from .losses import LossBreakdown, LossWeights, detection_mse, heatmap_mse, oof_bce, total_loss
from .matching import Assignment, MatchWeights, hungarian, match_instances, matching_cost
from .metrics import MetricReport, auc_score, gaze_distances, instance_map, oof_ap
from .model import FeatureMaps, HeadTargetNet, ModelConfig, ProposalSet, build_model
from .postprocess import InstancePrediction, extract_gaze_point, extract_head_box, otsu_threshold, to_instances

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "Assignment",
    "FeatureMaps",
    "GroundTruthConfig",
    "GroundTruthMaps",
    "HeadTargetNet",
    "InstancePrediction",
    "LossBreakdown",
    "LossWeights",
    "MatchWeights",
    "MetricReport",
    "ModelConfig",
    "ProposalSet",
    "SceneSample",
    "SynthConfig",
    "TrainConfig",
    "auc_score",
    "build_model",
    "detection_mse",
    "evaluate",
    "extract_gaze_point",
    "extract_head_box",
    "gaze_distances",
    "generate_dataset",
    "generate_scene",
    "heatmap_mse",
    "hungarian",
    "instance_map",
    "load_annotations",
    "make_connection_map",
    "make_gaussian_map",
    "make_ground_truth",
    "match_instances",
    "matching_cost",
    "oof_ap",
    "oof_bce",
    "one_cycle_lr",
    "otsu_threshold",
    "to_instances",
    "total_loss",
    "train",
]
