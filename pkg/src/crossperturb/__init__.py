"""Cross-perturbation training for single-source domain generalization."""

from .augment import AugmentConfig, color_jitter, horizontal_flip, random_grayscale, strong_augment
from .data import (CorruptionSpec, DatasetContainer, DomainSpec, DOMAINS, apply_corruption,
                   gen_domain_dataset, load_container, save_container)
from .model import CnnConfig, ModelParams, forward, init_params
from .perturb import (PatchPartition, PatchStats, PerturbConfig, UncertaintyStats,
                      apply_adain_patches, dsu_perturb, make_partition, mixpatch,
                      mixstyle_perturb, patch_statistics, perturb_stats, shuffle_stats,
                      stats_uncertainty)
from .tensor import Rng, Tensor, backward, concat, conv2d, matmul, maxpool2d, reduce_mean_std, softmax
from .training import (LossBreakdown, RoutePredictions, TrainConfig, classification_loss,
                       consistency_loss, cosine_lr, cross_entropy, evaluate, fit,
                       four_route_forward, js_divergence, mean_prediction, sgd_step, total_loss)

__version__ = "0.1.0"
