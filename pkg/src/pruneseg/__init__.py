"""Progressive train-time pruning for 3D segmentation networks.

The package trains a U-shaped volumetric segmentation model whose stages are
built from parallel redundant branches, monitors a pair of decoupling losses,
and progressively masks, verifies, and removes the branches that contribute
least, yielding a compact task-specific architecture.
"""

from .autograd import Tape, Tensor, backward, no_grad, parameter, tensor
from .config import TrainConfig, load_config
from .convops import conv3, transposed_conv3
from .data import (LabelVolume, PhantomSpec, Volume, generate_dataset,
                   generate_phantom, label_pyramid, read_volume, write_volume)
from .losses import LossBreakdown, LossConfig, binarize, dice_ce_deep_supervision, \
    gt_mask_image, rl_loss, total_loss, tr_loss
from .metrics import dice_score, nsd_score
from .network import (Branch, BranchState, EfficientBlockSpec, ModelConfig, Network,
                      PRM, active_parameter_count, build_network, eb_forward,
                      network_from_descriptor, prm_forward, variant_config)
from .pruning import (CalibrationCache, ControllerState, apply_mask,
                      blockwise_prune_search, build_calibration_cache, commit_prune,
                      controller_step, convergence_check, improvement_check,
                      restore_mask)
from .trainer import TrainArtifacts, evaluate, sliding_window_logits, train

__version__ = "0.1.0"
