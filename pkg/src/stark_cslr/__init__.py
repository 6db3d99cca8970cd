"""Keypoint-based continuous sign language recognition in numpy."""

from .config import StarkConfig, TrainConfig, load_config, parse_config
from .dataio import GlossVocabulary, KeypointSample, load_dataset, save_dataset
from .model import StarkModel
from .prep import PAPER_LAYOUT, StreamLayout

__all__ = [
    "GlossVocabulary",
    "KeypointSample",
    "PAPER_LAYOUT",
    "StarkConfig",
    "StarkModel",
    "StreamLayout",
    "TrainConfig",
    "load_config",
    "load_dataset",
    "parse_config",
    "save_dataset",
]

__version__ = "0.1.0"
