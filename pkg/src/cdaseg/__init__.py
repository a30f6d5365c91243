"""Curriculum domain adaptation for pixel-wise segmentation, desk scale.

The package infers easy target-domain properties (whole-image label
distributions and landmark-superpixel one-hots) from source-only models
and uses them to regularize the training of a small segmentation network
on an unlabeled target domain.
"""

__version__ = "0.1.0"

from .raster import (Dataset, Image, LabelMask, load_dataset, load_image,
                     load_mask, load_tensor, save_dataset, save_image,
                     save_mask, save_tensor)
from .scenes import (DomainParams, SceneSample, default_palette,
                     generate_dataset, generate_scene, preset_source,
                     preset_target)
from .distributions import (DistributionRegressor, NearestNeighborDistribution,
                            SourceMeanDistribution, UniformDistribution,
                            chi2_distance, cross_entropy, distribution_from_mask,
                            distribution_from_probs, entropy, global_features,
                            knn_distribution, mean_distribution,
                            uniform_distribution)
from .superpixels import (Landmark, SuperpixelClassifier, SuperpixelPartition,
                          color_prototype_scores, dominant_labels,
                          select_landmarks, slic, superpixel_features)
from .network import (AdaDeltaState, CurriculumSegmenter, SegModel,
                      TargetExample, TrainConfig, adadelta_step, forward,
                      init_model, load_checkpoint, loss_and_grad,
                      save_checkpoint, train)
from .evaluation import (ConfusionCounts, Metrics, accumulate_confusion,
                         evaluate_masks, evaluate_model, iou_from_confusion,
                         predicted_mask)
from .experiments import (infer_target_properties, run_ablation,
                          run_distribution_report, run_gradient_checks)

__all__ = [name for name in dir() if not name.startswith("_")]
