"""Few-shot anomaly detection on pre-extracted patch features.

Queries are scored by how much of their denoised deviation from normality
survives projection onto a small bank of learned deviation directions,
combined with plain nearest-normal matching.
"""

from .features import (Episode, EpisodeManifest, FeatureSet,
                       build_inference_manifest, build_training_episode,
                       downsample_mask, hard_filter, read_feature_file,
                       read_manifest, write_feature_file, write_manifest)
from .deviations import (DeviationField, LocalSubspace, denoise, denoise_query,
                         extract_deviations, local_pca, nearest_normal,
                         residual_deviations, topk_neighbors)
from .encoder import (Checkpoint, DeviationBank, EncoderConfig, EncoderParams,
                      dual_loss, encode_bank, init_bank, init_params,
                      load_checkpoint, save_checkpoint)
from .metrics import (EvalReport, auroc, average_precision, evaluate, f1_max,
                      pro, task_difficulty)
from .scoring import (ScoreMap, image_score, patch_score, project,
                      read_score_map, score_episode, score_query, upsample_map,
                      write_score_map)
from .synthetic import SynthWorld, SynthWorldSpec, generate_world, principal_angles
from .training import TrainConfig, TrainResult, bce_loss, dice_loss, focal_loss, infer, train

__version__ = "0.1.0"
