"""Token-level adaptive latent chain-of-thought for decoder-only transformers."""

from alcot.config import AdaptiveLossConfig, ModelConfig, TrainConfig
from alcot.halting import HaltingSchedule
from alcot.model import LatentLM, UnrollOutput

__all__ = [
    "AdaptiveLossConfig",
    "HaltingSchedule",
    "LatentLM",
    "ModelConfig",
    "TrainConfig",
    "UnrollOutput",
]

__version__ = "0.1.0"
