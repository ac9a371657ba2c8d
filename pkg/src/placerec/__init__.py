"""Two-stage visual place recognition.

Stage 1 filters the reference database down to N candidate places by
nearest-neighbor voting over compressed convolutional-cube descriptors;
stage 2 re-ranks those candidates by spatial consistency of local feature
matches and picks the final place.
"""

from .descriptor import (
    CubeSpec,
    CubeVectorSet,
    PcaFitAccumulator,
    PcaModel,
    extract_cubes,
    fit_pca,
    load_pca_model,
    normalize_grid,
    project,
    project_cube_set,
    project_many,
    save_pca_model,
)
from .evaluation import (
    EvalReport,
    PrCurve,
    QueryOutcome,
    ToleranceRule,
    pr_curve,
    recall_at_n,
    run_benchmark,
    tolerance_sweep,
    write_report,
)
from .filtering import (
    CandidateList,
    ImageFilterDb,
    build_image_filter_db,
    filter_stage,
    load_image_filter_db,
    nearest_records,
    save_image_filter_db,
)
from .pipeline import (
    PipelineConfig,
    build_reference_databases,
    descriptor_for_grid,
    fit_stage_model,
    prepare_query,
    query_databases,
    slice_model,
)
from .spatial import (
    MatchResult,
    SpatialMatchDb,
    build_spatial_match_db,
    cube_set_to_grid,
    load_spatial_match_db,
    match_score,
    max_score,
    save_spatial_match_db,
    spatial_stage,
)
from .synthetic import SyntheticDataset, generate_synthetic_dataset
from .tensor_io import (
    BadMagicError,
    DatasetManifest,
    FeatureGrid,
    FormatError,
    GroundTruth,
    ManifestEntry,
    ManifestError,
    PayloadSizeError,
    TruncatedPayloadError,
    load_ground_truth,
    load_manifest,
    read_grid,
    write_grid,
)

__version__ = "0.1.0"
