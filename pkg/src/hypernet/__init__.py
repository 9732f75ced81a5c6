"""Hyper Feature region proposals and object detection, implemented in numpy.

The common entry points are re-exported here; the submodules hold the rest.
"""
from .config import HyperNetConfig, ablation_select, desk_config, full_scale_config
from .data_io import (DataFormatError, Sample, generate_shapes_dataset, load_checkpoint, read_dataset,
                      save_checkpoint, split_dataset, write_dataset)
from .evaluation import (average_precision, benchmark_stages, mean_average_precision, proposals_needed,
                         recall_at, recall_vs_iou, recall_vs_n)
from .geometry import Box, BoxDelta, decode, encode, generate_candidates, iou, nms
from .heads import Detection, flop_estimate
from .model import HyperNetModel
from .training import TrainPlan, TrainingDiverged, run_joint_training, train_proposal_only

__version__ = "0.1.0"

__all__ = [
    "Box", "BoxDelta", "DataFormatError", "Detection", "HyperNetConfig", "HyperNetModel", "Sample",
    "TrainPlan", "TrainingDiverged", "ablation_select", "average_precision", "benchmark_stages", "decode",
    "desk_config", "encode", "flop_estimate", "full_scale_config", "generate_candidates",
    "generate_shapes_dataset", "iou", "load_checkpoint", "mean_average_precision", "nms", "proposals_needed",
    "read_dataset", "recall_at", "recall_vs_iou", "recall_vs_n", "run_joint_training", "save_checkpoint",
    "split_dataset", "train_proposal_only", "write_dataset",
]
