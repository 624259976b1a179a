"""voxfuse: multi-camera LiDAR feature fusion on synthetic scenes.

The library covers the full desk-scale pipeline: camera projection geometry,
dynamic voxelization, a deformable cross-attention fusion operator with
hand-verified gradients, the dense-attention baseline it is benchmarked
against, depth-ordered patch augmentation, image-level camera dropout, and a
deterministic synthetic scene generator that stands in for real sensor data.
"""

from .augment import (
    AugmentConfig,
    ObjectDatabase,
    ObjectSample,
    augment_scene,
    build_object_database,
    composite_patch,
    filter_colliding_boxes,
    patch_window,
)
from .bench import BenchResult, run_complexity_sweep, sweep_summary
from .boxes import Box, bev_overlaps, bev_rect, box_corners, points_in_box
from .fusion import (
    DenseAttentionParams,
    DropoutMask,
    FusedVoxelSet,
    FusionGrads,
    FusionParams,
    PARAM_GROUPS,
    attend_pyramid,
    attend_single_level,
    dense_attention,
    dense_attention_batch,
    fuse_scene,
    get_group,
    grad_group,
    identity_projection_params,
    image_contribution,
    image_contribution_backward,
    image_contribution_batch,
    make_dense_params,
    make_dropout_mask,
    make_params,
    make_token,
    with_group,
)
from .geometry import (
    CameraCalibration,
    CameraRig,
    ProjectionResult,
    ReferencePoints,
    project_point,
    project_point_raw,
    select_camera,
    voxel_center_to_reference,
)
from .nnops import (
    FeatureMap,
    GradCheckReport,
    LinearLayer,
    bilinear_sample,
    bilinear_sample_grad,
    finite_diff_check,
    linear_backward,
    linear_forward,
    sample_grid,
    softmax,
    softmax_backward,
)
from .scenegen import (
    Annotation,
    FeaturePyramid,
    GenerationError,
    SceneConfig,
    SceneSample,
    generate_pyramid,
    generate_scene,
    ring_rig,
)
from .selftest import CheckResult, format_report, run_selftest
from .voxels import PointCloud, VoxelConfig, VoxelSet, voxelize

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "AugmentConfig",
    "BenchResult",
    "Box",
    "CameraCalibration",
    "CameraRig",
    "CheckResult",
    "DenseAttentionParams",
    "DropoutMask",
    "FeatureMap",
    "FeaturePyramid",
    "FusedVoxelSet",
    "FusionGrads",
    "FusionParams",
    "GenerationError",
    "GradCheckReport",
    "LinearLayer",
    "ObjectDatabase",
    "ObjectSample",
    "PARAM_GROUPS",
    "PointCloud",
    "ProjectionResult",
    "ReferencePoints",
    "SceneConfig",
    "SceneSample",
    "VoxelConfig",
    "VoxelSet",
    "attend_pyramid",
    "attend_single_level",
    "augment_scene",
    "bev_overlaps",
    "bev_rect",
    "bilinear_sample",
    "bilinear_sample_grad",
    "box_corners",
    "build_object_database",
    "composite_patch",
    "dense_attention",
    "dense_attention_batch",
    "filter_colliding_boxes",
    "finite_diff_check",
    "format_report",
    "fuse_scene",
    "generate_pyramid",
    "generate_scene",
    "get_group",
    "grad_group",
    "identity_projection_params",
    "image_contribution",
    "image_contribution_backward",
    "image_contribution_batch",
    "linear_backward",
    "linear_forward",
    "make_dense_params",
    "make_dropout_mask",
    "make_params",
    "make_token",
    "patch_window",
    "points_in_box",
    "project_point",
    "project_point_raw",
    "ring_rig",
    "run_complexity_sweep",
    "run_selftest",
    "sample_grid",
    "select_camera",
    "softmax",
    "softmax_backward",
    "sweep_summary",
    "voxel_center_to_reference",
    "voxelize",
    "with_group",
    "__version__",
]
