"""Multi-agent trajectory prediction with adaptive endpoint heads, on a small numpy autograd."""

from .config import ModelConfig, TrainConfig
from .model import AdaptModel, PredictionSet, predict
from .scene import AgentTrack, LanePolyline, Scene
from .synth import GeneratorConfig, generate_dataset, generate_scene, read_dataset, write_dataset

__all__ = [
    "AdaptModel",
    "AgentTrack",
    "GeneratorConfig",
    "LanePolyline",
    "ModelConfig",
    "PredictionSet",
    "Scene",
    "TrainConfig",
    "generate_dataset",
    "generate_scene",
    "predict",
    "read_dataset",
    "write_dataset",
]
