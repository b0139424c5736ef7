from morphalign.refiner.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from morphalign.refiner.model import (
    RefinerConfig,
    ResidualRefinerNet,
    backward,
    build_model,
    forward,
    refine,
    smooth_l1,
)
from morphalign.refiner.trainer import SampleSet, TrainingError, TrainState, make_synthetic_set, train

__all__ = [
    "CheckpointError", "RefinerConfig", "ResidualRefinerNet", "SampleSet", "TrainState", "TrainingError",
    "backward", "build_model", "forward", "load_checkpoint", "make_synthetic_set", "refine",
    "save_checkpoint", "smooth_l1", "train",
]
