"""Point-steered virtual try-on testbed: dual-U-Net latent diffusion with
disk-map control points, a synthetic correspondence dataset, a feature
matcher, an evaluation harness, and a generation service."""

from .codec import CodecConfig, LatentCodec, train_codec
from .diffusion import (NoiseSchedule, SamplerConfig, classifier_free_combine,
                        q_sample, sample, training_loss)
from .attention import fused_attention, point_attention
from .points import (DiskMapPair, MAX_POINTS, PointEmbeddingNet, PointPair,
                     PointPairSet, assign_ids, rasterize)
from .synth import (CorrespondenceHandle, FigureSpec, GarmentSpec, TryOnSample,
                    build_dataset, generate_sample, load_split, random_specs)
from .train import (ModelBundle, TrainConfig, augment, apply_condition_dropping,
                    load_checkpoint, point_weight_map, save_checkpoint, train)
from .unet import CondBundle, DualUNet, ModelConfig
from .service import (DragRequest, GenerationRequest, GenerationResult,
                      create_app, drag_to_click, generate)
from .matcher import MatcherConfig, collect_pairs, extract_features, match_point, sample_queries
from .evalbench import (image_metrics, landmark_distance, locate_fiducials,
                        run_landmark_bench, run_strategy_ablation)

__version__ = "0.1.0"
