"""Monte Carlo localization on open-vocabulary language-feature voxel maps.

The toolkit builds sparse voxel maps whose cells index a deduplicated
database of unit feature vectors, localizes a camera in them with a
particle filter weighted by ray-traced feature similarity, and seeds
global localization from textual prompts. A deterministic synthetic label
encoder and a dense-grid simulator stand in for real vision-language
models so everything is verifiable at desk scale.
"""

from .errors import (GenerationError, MapCorruptionError, MapFormatError,
                     MapIOError, MapStateError)
from .features import (FeatureDb, FeatureDbBuilder, build_feature_db,
                       cosine_distance, cosine_similarity, encode_label,
                       ground_db, nearest_feature)
from .geometry import (CameraIntrinsics, Pose, load_trajectory, perturb_pose,
                       pixel_rays, save_trajectory)
from .langmap import (OctreeLanguageMap, RayHit, RayHits, from_point_cloud,
                      load_feature_cloud, load_map, save_feature_cloud, save_map)
from .mcl import (MclConfig, ObservationSample, ParticleSet, StepDiagnostics,
                  build_sampling_masks, estimate_pose, init_from_poses,
                  init_gaussian, init_uniform, predict, resample, step,
                  uniform_image_sample, weigh)
from .prompt_init import FloorAlignment, PromptSpec, floor_voxels, \
    prompt_alignment, seed_particles
from .sim import (DenseScene, ObjectClassSpec, RenderedFrame, SceneSpec,
                  generate_scene, generate_trajectory, load_feature_image,
                  parse_scene_config, render_frame, render_observation,
                  save_feature_image, scene_feature_cloud)
from .evaluate import (ApeStats, ConsistencyStats, ape_stats,
                       consistency_metrics, convergence_steps,
                       metrics_from_confusion, translation_errors)
from .experiment import (GlobalResult, PipelineConfig, TrackingResult,
                         build_world, prompt_for_position, run_experiment,
                         run_global, run_tracking)

__version__ = "0.1.0"
