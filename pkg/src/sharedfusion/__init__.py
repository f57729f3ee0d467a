"""Two-modality lesion classifier toolkit: weight-shared encoder, shared
cross-attention fusion, branch-weighted loss, on a small numpy autodiff core."""

from .data import DatasetSplits, PairedDataset, SyntheticSpec, generate, load_dataset, save_dataset, split
from .encoder import EncoderConfig, Sharing, build_encoder, count_params, encode_pair
from .fusion import AttentionProjections, FusionConfig, FusionMode, count_fusion_params, cross_attend, refine_pair
from .heads import (
    BranchOutputs,
    ClassifierSharing,
    FusionWeightTriple,
    HeadConfig,
    late_fuse,
    search_fusion_weights,
)
from .loss import BranchLosses, LossWeights, biased_total, equal_total, multitask_ce
from .metrics import MetricReport, auc_binary, average_precision, confusion_metrics, report
from .model import Model, ModelConfig, build_model
from .numcore import Tensor, backward, grad_check
from .trainer import TrainConfig, adam_step, cosine_lr, fit, swa_finalize, swa_update

__version__ = "0.1.0"
