"""Voxel-wise subject-to-template contrast synthesis and intensity-based
3D registration for anisotropic scalar volumes.

The package learns a per-voxel mapping from subject contrast to template
contrast with from-scratch tree ensembles over 10 intensity classes, then
registers the synthesized volume to the template with SSD, NCC, or MI
costs. Landmark thin-plate splines provide ground-truth warps, a landmark
error harness scores recovered transforms, and a phantom generator makes
the whole chain testable without real acquisitions.
"""
from __future__ import annotations

from .config import PipelineConfig, load_config
from .ensemble import (
    BoostedTreesParams,
    RandomForestParams,
    TreeEnsemble,
    load_model,
    predict_class,
    predict_classes,
    predict_scores,
    save_model,
    train_boosted_trees,
    train_random_forest,
)
from .errors import (
    ConfigError,
    CorruptFileError,
    CorruptModelError,
    DegenerateBinsError,
    DegenerateLandmarksError,
    DegenerateStatisticsError,
    DimensionMismatchError,
    EmptyMaskError,
    FormatError,
    GridMismatchError,
    InsufficientLandmarksError,
    InsufficientSamplesError,
    InvalidInitError,
    ModSynthError,
    ParameterError,
)
from .evaluation import (
    ErrorSummary,
    LandmarkErrorRecord,
    emit_report,
    inter_annotator_error,
    landmark_error,
    summarize,
    tally_success,
)
from .features import (
    FeatureExtractor,
    FeatureSpec,
    TrainingSet,
    foreground_mask,
    load_training_set,
    sample_training,
    save_training_set,
)
from .landmarks import Landmark, LandmarkSet, read_landmarks_csv, write_landmarks_csv
from .phantom import (
    PhantomPair,
    PhantomParams,
    apply_intensity_map,
    generate_phantom,
    generate_suite,
    make_template,
)
from .registration import (
    CostKind,
    DeformableOptions,
    FfdTransform,
    RegistrationOptions,
    RegistrationResult,
    cost_mi,
    cost_ncc,
    cost_ssd,
    evaluate_cost,
    joint_histogram,
    mutual_information,
    register_affine,
    register_deformable,
)
from .synth import (
    BinSpec,
    assign_class,
    assign_classes,
    compute_bins,
    compute_bins_from_values,
    load_bins,
    make_label_volume,
    make_training_pair,
    save_bins,
    synthesize,
)
from .volume import (
    Grid,
    PreprocessParams,
    Volume,
    gaussian_smooth,
    percentile,
    percentile_clip,
    preprocess,
    rescale_intensity,
    sample_points,
    sample_trilinear,
)
from .volume_io import load_volume, read_nrrd, save_volume, write_nrrd
from .xform import (
    AffineTransform3D,
    DeformationField,
    TpsTransform,
    affine_is_singular,
    rasterize_field,
    resample,
    resample_with_inbounds,
    tps_apply,
    tps_fit,
    tps_inverse,
)

__version__ = "0.1.0"

__all__ = [
    "AffineTransform3D",
    "BinSpec",
    "BoostedTreesParams",
    "ConfigError",
    "CorruptFileError",
    "CorruptModelError",
    "CostKind",
    "DeformableOptions",
    "DeformationField",
    "DegenerateBinsError",
    "DegenerateLandmarksError",
    "DegenerateStatisticsError",
    "DimensionMismatchError",
    "EmptyMaskError",
    "ErrorSummary",
    "FeatureExtractor",
    "FeatureSpec",
    "FfdTransform",
    "FormatError",
    "Grid",
    "GridMismatchError",
    "InsufficientLandmarksError",
    "InsufficientSamplesError",
    "InvalidInitError",
    "Landmark",
    "LandmarkErrorRecord",
    "LandmarkSet",
    "ModSynthError",
    "ParameterError",
    "PhantomPair",
    "PhantomParams",
    "PipelineConfig",
    "PreprocessParams",
    "RandomForestParams",
    "RegistrationOptions",
    "RegistrationResult",
    "TrainingSet",
    "TpsTransform",
    "TreeEnsemble",
    "Volume",
    "apply_intensity_map",
    "assign_class",
    "assign_classes",
    "affine_is_singular",
    "compute_bins",
    "compute_bins_from_values",
    "cost_mi",
    "cost_ncc",
    "cost_ssd",
    "emit_report",
    "evaluate_cost",
    "foreground_mask",
    "gaussian_smooth",
    "generate_phantom",
    "generate_suite",
    "inter_annotator_error",
    "joint_histogram",
    "landmark_error",
    "load_bins",
    "load_config",
    "load_model",
    "load_training_set",
    "load_volume",
    "make_label_volume",
    "make_template",
    "make_training_pair",
    "mutual_information",
    "percentile",
    "percentile_clip",
    "predict_class",
    "predict_classes",
    "predict_scores",
    "preprocess",
    "rasterize_field",
    "read_landmarks_csv",
    "read_nrrd",
    "register_affine",
    "register_deformable",
    "resample",
    "resample_with_inbounds",
    "rescale_intensity",
    "sample_points",
    "sample_training",
    "sample_trilinear",
    "save_bins",
    "save_model",
    "save_training_set",
    "save_volume",
    "summarize",
    "synthesize",
    "tally_success",
    "tps_apply",
    "tps_fit",
    "tps_inverse",
    "train_boosted_trees",
    "train_random_forest",
    "write_landmarks_csv",
    "write_nrrd",
    "__version__",
]
