"""Two-stage lung CT analysis: STM-BRNet detector and SA-CB-BRSeg segmenter on a numpy autograd core."""

from .models import AuxNet, ModelConfig, SACBBRSeg, STMBRNet, build_aux, build_sa_cb_brseg, build_stm_brnet
from .tensor import GraphError, Tensor, backward, no_grad
from .train import Hyperparams, TrainHistory, TrainingError, load_checkpoint, save_checkpoint, split_dataset

__all__ = [
    "AuxNet",
    "GraphError",
    "Hyperparams",
    "ModelConfig",
    "SACBBRSeg",
    "STMBRNet",
    "Tensor",
    "TrainHistory",
    "TrainingError",
    "backward",
    "build_aux",
    "build_sa_cb_brseg",
    "build_stm_brnet",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "split_dataset",
]
