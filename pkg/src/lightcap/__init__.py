"""Conditional-GRU image captioning in numpy."""
from .bpe import BPETokenizer
from .estimator import CaptionGenerator
from .metrics import CiderD, bleu4, cider_d
from .model import CGRUDecoder, ModelConfig, count_params
from .training import TrainConfig

__all__ = ["BPETokenizer", "CaptionGenerator", "CiderD", "bleu4", "cider_d", "CGRUDecoder",
           "ModelConfig", "count_params", "TrainConfig"]
__version__ = "0.1.0"
