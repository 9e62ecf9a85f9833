"""Semantic video segmentation by propagating per-frame beliefs along optical flow
through a flow-gated convolutional GRU."""
from .backbone import BackboneParams, backbone_forward, init_backbone, unary_belief
from .evaluation import build_trajectories, miou, temporal_consistency
from .flowdata import Dataset, SceneSpec, VideoSample, generate_clip, make_dataset
from .model import GRFPModel, predict_belief, predict_sequence
from .optim import TrainConfig, adam_step, pretrain_backbone, sgd_momentum_step, train_grfp
from .stgru import (ChainConfig, StgruParams, fuse_bidirectional, init_params,
                    segmentation_loss, stgru_step, unroll)
from .tensor import ContractError, Tape, Tensor, backward, grad_check
from .warp import warp_bilinear, warp_oracle

__version__ = "0.1.0"
