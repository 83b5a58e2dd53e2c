"""Attentional local contrast network and classical multi-scale patch
contrast detection for infrared small targets."""

from .autodiff import Parameter, Tensor, backward, grad_check
from .contrast import MpcmConfig, cyclic_shift, directional_contrast, dlc, mlc, mpcm_bench, mpcm_detect
from .data import Manifest, Sample, SynthConfig, synth_dataset
from .evaluation import MetricReport, diagnose, evaluate, iou, niou, roc
from .fusion import AttentionBottleneck, CrossLayerFuser, fuse, local_attention, m2lc_fuse
from .net import (ArchSpec, BackboneConfig, build_backbone, build_network, load_checkpoint,
                  make_arch, parameter_census, save_checkpoint, total_parameters)
from .objective import Adagrad, TrainConfig, adagrad_step, soft_iou, train, training_loss
from .nn import he_init

__version__ = "0.1.0"
