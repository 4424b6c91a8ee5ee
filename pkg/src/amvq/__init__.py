"""Activation-map vector quantization for 360-degree image transmission."""

from .activation_map import HybridSymbolStream, compute_map, defuse, raw_mask, threshold_fuse
from .channel import Bitstream, ChannelConfig, deserialize, serialize, transmit
from .codec import CodecConfig, ConfigError, FeatureGrid
from .harness import ExperimentConfig, RDPoint, rd_sweep, threshold_sweep
from .pipeline import AMVQModel, run_pipeline
from .tensor import Tensor
from .train import TrainConfig, Trainer
from .vq import Codebook, quantize_nearest

__version__ = "0.1.0"

__all__ = [
    "AMVQModel", "Bitstream", "ChannelConfig", "Codebook", "CodecConfig", "ConfigError",
    "ExperimentConfig", "FeatureGrid", "HybridSymbolStream", "RDPoint", "Tensor", "TrainConfig",
    "Trainer", "compute_map", "defuse", "deserialize", "quantize_nearest", "raw_mask", "rd_sweep",
    "run_pipeline", "serialize", "threshold_fuse", "threshold_sweep", "transmit",
]
