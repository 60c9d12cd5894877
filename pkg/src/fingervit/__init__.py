"""Joint fingerprint recognition and presentation attack detection.

A desk-scale system built on a from-scratch reverse-mode autodiff engine:
a small vision transformer trained for recognition (angular-margin loss),
presentation attack detection (per-block classifier heads), and a unified
single-backbone deployment distilled from the recognition teacher, plus
the full ISO metric suite, a synthetic fingerprint generator, and
parameter/latency benchmarking.
"""

from .autodiff import Tensor, backward, grad_check, no_grad
from .heads import (ArcFaceParams, arcface_logits, cosine_similarity, cross_entropy,
                    mse_distill, pad_head_forward, pad_score)
from .metrics import (MetricReport, ScoreRecord, compute_report, iapmr, im_accuracy,
                      match_rates, pad_rates, threshold_at_bpcer, threshold_at_fmr)
from .optim import OptimState, ScheduleConfig, adamw_step, poly_lr
from .pipeline import (TrainConfig, TrainedSystem, Thresholds, ablate_layers, benchmark,
                       evaluate_joint, sequential_decide, train_frm, train_pad,
                       train_unified, unified_decide)
from .synth import DatasetSplit, Identity, Sample, build_dataset, make_identity, render_impression
from .vit import (FeatureBundle, ModelConfig, forward_features, full_config, param_count,
                  patchify, toy_config)

__version__ = "0.1.0"
