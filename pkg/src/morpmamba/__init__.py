"""Morphological spatial / spatial-spectral Mamba for hyperspectral pixel classification."""

from .ingest import HsiCube, Sample, SplitSpec, extract_patches, load_cube, normalize, save_cube, select_bands, stratified_split, synth_cube
from .model import MorpMamba, ModelConfig, forward, init_params, load_checkpoint, param_count, save_checkpoint
from .train import Metrics, TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "HsiCube",
    "Metrics",
    "ModelConfig",
    "MorpMamba",
    "Sample",
    "SplitSpec",
    "TrainConfig",
    "evaluate",
    "extract_patches",
    "fit",
    "forward",
    "init_params",
    "load_checkpoint",
    "load_cube",
    "normalize",
    "param_count",
    "save_checkpoint",
    "save_cube",
    "select_bands",
    "stratified_split",
    "synth_cube",
]
