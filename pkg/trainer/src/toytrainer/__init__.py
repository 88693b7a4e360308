"""Toy-scale trainer for the recistseg segmentation engine.

Trains the same architecture the engine runs, on synthetic ellipsoid
volumes, and exports weights in the engine's LENS format. The two packages
share only file formats: LENS weights and NIfTI case pairs.
"""

from .data import Annotation, TrainCase, make_case, make_dataset, write_case
from .lens import write_lens
from .loss import combined_loss, soft_dice
from .muon import Muon, newton_schulz, split_param_groups
from .net import NetConfig, SegNet, manifest
from .nifti import write_nifti
from .sample import Sample, TrainConfig, pick_case, sample_case
from .train import TrainResult, cosine_factor, export_weights, train

__all__ = [
    "Annotation",
    "Muon",
    "NetConfig",
    "Sample",
    "SegNet",
    "TrainCase",
    "TrainConfig",
    "TrainResult",
    "combined_loss",
    "cosine_factor",
    "export_weights",
    "make_case",
    "make_dataset",
    "manifest",
    "newton_schulz",
    "pick_case",
    "sample_case",
    "soft_dice",
    "split_param_groups",
    "train",
    "write_case",
    "write_lens",
    "write_nifti",
]
