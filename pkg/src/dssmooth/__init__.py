"""Certified dataset watermarking for text classifiers.

Watermarks live in two spaces at once: scaled trigger embeddings
(continuous) and within-group token reorderings (discrete).  Verification
smooths a suspect model with Gaussian embedding noise plus random group
reorderings, compares its watermark robustness against a conformal
threshold calibrated on benign models, and certifies the resulting
ownership decision against the watermark's own perturbation radii.
"""

from .certify import (CertifiedRadii, PPResult, PredictionDistribution,
                      SmoothingConfig, WRResult, certified_radii,
                      certify_sample, estimate_pd, exact_permutation_pd,
                      gaussian_rs_radius, model_classifier,
                      principal_probability, smoothed_predict,
                      watermark_robustness)
from .dual_space import (DualSpaceRep, EmbeddingMatrix, NoiseSpec,
                         PermutationMatrix, apply_dual_noise, apply_emb_noise,
                         apply_perm_noise, compose, composed_mask,
                         emb_distance, perm_distance)
from .errors import (CalibrationError, CheckpointError, DegenerateTriggerError,
                     DegenerateWindowError, DomainError, DSSmoothError,
                     InputError, ParameterError, ParseError, ShapeError,
                     TrainingError, WatermarkBudgetError)
from .harness import (DatasetFile, ExperimentConfig, MetricsReport,
                      benign_accuracy, load_dataset, make_corpus,
                      run_verification_suite, save_dataset,
                      watermark_success_rate)
from .statcore import (RandomStream, clamp_probability, std_normal_cdf,
                       std_normal_inv_cdf)
from .text_model import (ClassifierModel, TokenSeq, TrainConfig, Vocab, embed,
                         encode, fine_tune, forward, grad_wrt_embeddings,
                         load_model, predict, prune, save_model, tokenize,
                         train)
from .verify import (CalibrationSet, VerificationContext, Verdict,
                     VerifyConfig, calibration_threshold, certified_decision,
                     decide_ownership, false_positive_trial)
from .watermark import (ProbeSet, TriggerSpec, WatermarkManifest,
                        WatermarkPlan, WatermarkedSample,
                        build_watermarked_dataset, insert_trigger_text,
                        make_probes, optimize_trigger_scale)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
