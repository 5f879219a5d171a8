"""Pseudo-label generation toolkit: multi-resolution activation-map fusion,
geodesic seed expansion, supervision losses, and segmentation metrics."""

from .fusion import (
    FusionConfig,
    binarize,
    entropy_weight,
    fuse_um_cam,
    grad_cam,
    grid_search_threshold,
    normalize_max,
    upsample_bilinear,
)
from .geodesic import (
    GeodesicConfig,
    PseudoLabel,
    SeedSet,
    build_spl,
    egd_map,
    extract_seeds,
    geodesic_distance,
    spl_to_soft_target,
)
from .gridio import (
    ArrayFormatError,
    DatasetManifest,
    FeatureBlockExport,
    ManifestError,
    load_feature_block,
    load_manifest,
    read_array,
    read_mask,
    write_array,
)
from .losses import LossConfig, binary_cross_entropy, joint_loss
from .metrics import EvalReport, dsc, evaluate_cohort, hd95
from .pipeline import PipelineConfig, run_eval, run_fuse, run_loss_eval, run_spl
from .synth import generate_dataset

__version__ = "0.1.0"
