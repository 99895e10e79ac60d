"""Monte Carlo dropout uncertainty for lesion segmentation and detection."""
from .aggregate import (
    BASELINE_ETA, RocRow, RocTable, Scan, compare_curves, curve, filter_lesions,
    filter_voxels, lesion_eta_for_retention, lesion_uncertainty, rescale_cohort, roc_sweep,
)
from .lesions import (
    BINS, Lesion, LesionSet, binarize, connected_components_18, dilate_18,
    prune_ground_truth, size_bin,
)
from .measures import (
    MEASURES, MissingInputError, UncertaintyMaps, compute_measure, mc_sample_variance,
    mutual_information, predictive_entropy, predictive_variance, uncertainty_maps,
)
from .metrics import DetectionRates, MatchResult, detection_rates, match_lesions
from .phantom import PhantomConfig, PhantomScene, generate_scene, generate_series, scene_statistics
from .volume import (
    Kind, LabelMask, SampleStack, UvolFormatError, VoxelGrid, decode_volume, encode_volume,
    load_volume, mean_prediction, save_volume,
)

__version__ = "0.1.0"

__all__ = [
    "BASELINE_ETA",
    "BINS",
    "DetectionRates",
    "Kind",
    "LabelMask",
    "Lesion",
    "LesionSet",
    "MEASURES",
    "MatchResult",
    "MissingInputError",
    "PhantomConfig",
    "PhantomScene",
    "RocRow",
    "RocTable",
    "SampleStack",
    "Scan",
    "UncertaintyMaps",
    "UvolFormatError",
    "VoxelGrid",
    "binarize",
    "compare_curves",
    "compute_measure",
    "connected_components_18",
    "curve",
    "decode_volume",
    "detection_rates",
    "dilate_18",
    "encode_volume",
    "filter_lesions",
    "filter_voxels",
    "generate_scene",
    "generate_series",
    "lesion_eta_for_retention",
    "lesion_uncertainty",
    "load_volume",
    "match_lesions",
    "mc_sample_variance",
    "mean_prediction",
    "mutual_information",
    "predictive_entropy",
    "predictive_variance",
    "prune_ground_truth",
    "rescale_cohort",
    "roc_sweep",
    "save_volume",
    "scene_statistics",
    "size_bin",
    "uncertainty_maps",
]
