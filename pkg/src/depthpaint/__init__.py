"""Depth-guided street-scene outpainting: sparse LiDAR depth steers the
extrapolation of RGB content beyond the known image region."""

from .datamodel import (
    FeatureMap,
    LossWeights,
    MaskedRGB,
    SparseDepthMap,
    downsample_mask,
    validate_pair,
)
from .encoders import DepthEncoder, EncoderPyramid, GatedConv2d, PartialConv2d, RgbEncoder
from .fusion import (
    DynamicKernelField,
    FusionStage,
    KernelGenerator,
    OutpaintingGenerator,
    apply_dynamic_kernels,
    make_interaction_feature,
)
from .harness import EvalReport, NumericError, TrainConfig, evaluate, infer, psnr, train
from .ingestion import (
    CameraIntrinsics,
    PointCloud,
    Sample,
    load_sample,
    make_layout,
    project_points,
    save_sample,
    synth_scene,
)
from .losses import (
    Discriminator,
    EdgeMap,
    LossParts,
    attention_map,
    berhu,
    canny_edges,
    cross_modal_loss,
    edge_loss,
    hinge_d_loss,
    hinge_g_loss,
    pixel_loss,
    total_loss,
)

__version__ = "0.1.0"
