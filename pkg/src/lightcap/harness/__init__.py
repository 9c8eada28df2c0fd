from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .dataset import DatasetError, load_dataset
from .synth import Example, SceneSpec, synth_generate, synth_grid

__all__ = ["CheckpointError", "checkpoint_load", "checkpoint_save", "DatasetError",
           "load_dataset", "Example", "SceneSpec", "synth_generate", "synth_grid"]
