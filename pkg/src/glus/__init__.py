"""Global-local referring video object segmentation on a synthetic moving-shapes corpus."""

from .dataset import Dataset, ReferringSample, VideoClip, WorldConfig, generate_world, load_dataset, write_dataset
from .metrics import MetricReport, boundary_F, evaluate_dataset, region_J
from .model import ModelConfig, Segmenter
from .trainer import InferOptions, TrainConfig, infer, load_checkpoint, save_checkpoint, train

__all__ = [
    "Dataset",
    "InferOptions",
    "MetricReport",
    "ModelConfig",
    "ReferringSample",
    "Segmenter",
    "TrainConfig",
    "VideoClip",
    "WorldConfig",
    "boundary_F",
    "evaluate_dataset",
    "generate_world",
    "infer",
    "load_checkpoint",
    "load_dataset",
    "region_J",
    "save_checkpoint",
    "train",
    "write_dataset",
]
