"""splatcount: prompt-filtered gaussian-splat rendering and fruit counting.

The package covers the full path from a language-augmented splat scene to
an instance count: tile-based rasterization, per-splat semantic codes with
a compression autoencoder, prompt-threshold filtering, density-aware point
sampling, and template-guided cluster counting.
"""

from .autoencoder import (Autoencoder, AutoencoderError,
                          AutoencoderTrainConfig, SemanticTrainConfig,
                          decode, encode, load_autoencoder, reconstruct,
                          save_autoencoder, train_autoencoder)
from .clustering import (ClusterError, CountResult, DbscanParams,
                         SplitConfig, Template, count_instances, dbscan,
                         hausdorff, kmeans, split_cluster)
from .config import ConfigError, get_value, load_config
from .hull import DegenerateHullError, convex_hull_volume
from .metrics import psnr, ssim
from .pipeline import (PipelineConfig, StageError, ValidationError,
                       auto_cameras, eval_counts, run_pipeline)
from .ply import (PlyParseError, SceneFormatWarning, load_cloud_ply,
                  load_ground_truth, load_scene_ply, save_cloud_ply,
                  save_ground_truth, save_scene_ply)
from .pointcloud import (PointCloud, SampleConfig, SampleError,
                         allocate_counts, clean_outliers, estimate_normals,
                         sample_points, sampling_weights)
from .rasterizer import (RenderConfig, RenderError, bin_tiles,
                         compositing_weights, project, render_features,
                         render_rgb, schedule_tiles)
from .scene import (Camera, Gaussian3D, GroundTruth, Scene, SceneError,
                    SyntheticSceneSpec, generate_orchard)
from .semantics import (EmbeddingVocabulary, FilterResult, PromptQuery,
                        SemanticsError, build_vocabulary, filter_gaussians,
                        load_vocabulary, mock_embed,
                        optimize_gaussian_features, query_scene,
                        save_vocabulary, score_prompts, semantic_loss,
                        targets_from_scene)

__version__ = "0.1.0"

__all__ = [
    "Autoencoder", "AutoencoderError", "AutoencoderTrainConfig", "Camera",
    "ClusterError",
    "ConfigError", "CountResult", "DbscanParams", "DegenerateHullError",
    "EmbeddingVocabulary", "FilterResult", "Gaussian3D", "GroundTruth",
    "PipelineConfig", "PlyParseError", "PointCloud", "PromptQuery",
    "RenderConfig", "RenderError", "SampleConfig", "SampleError", "Scene",
    "SceneError", "SceneFormatWarning", "SemanticTrainConfig",
    "SemanticsError", "SplitConfig", "StageError", "SyntheticSceneSpec",
    "Template", "ValidationError", "allocate_counts", "auto_cameras",
    "bin_tiles", "build_vocabulary", "clean_outliers",
    "compositing_weights", "convex_hull_volume", "count_instances",
    "dbscan", "decode", "encode", "estimate_normals", "eval_counts",
    "filter_gaussians", "generate_orchard", "get_value", "hausdorff",
    "kmeans", "load_autoencoder", "load_cloud_ply", "load_config",
    "load_ground_truth", "load_scene_ply", "load_vocabulary", "mock_embed",
    "optimize_gaussian_features", "project", "psnr", "query_scene",
    "reconstruct", "render_features", "render_rgb", "run_pipeline",
    "sample_points",
    "sampling_weights", "save_autoencoder", "save_cloud_ply",
    "save_ground_truth", "save_scene_ply", "save_vocabulary",
    "schedule_tiles", "score_prompts", "semantic_loss", "split_cluster",
    "ssim", "targets_from_scene", "train_autoencoder",
]
