"""RegNetX002 backbone with ConvLSTM, squeeze-and-excitation and a dense head,
built on a small numpy autodiff core."""

from .convlstm_se import ConvLSTM, ConvLSTMState, SqueezeExcite, convlstm_forward, convlstm_step, se_forward
from .model import ModelGraph, assemble_baseline, assemble_proposed, count_flops, count_params
from .regnet import REGNET_X002, RegNetSpec, build_backbone, generate_widths
from .tensor import Rng, Tensor, grad_check
from .train import TrainConfig, evaluate, fit, split_dataset

__version__ = "0.1.0"
