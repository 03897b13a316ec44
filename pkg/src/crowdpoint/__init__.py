"""Crowd localization and counting toolkit, CPU-scale and deterministic.

The pipeline: synthetic scenes (synthcrowd) -> supervision targets
(supervision) -> a small two-head net trained with focal + false-positive
+ density losses (micronet, losses) -> peak decoding (decoder) -> point
matching and count metrics (metrics). The cli module ties the stages into
reproducible commands.
"""

from .core import (
    DataValidationError,
    DenseGrid,
    DivergenceError,
    FormatError,
    ImageRecord,
    PointAnnotation,
    Rng,
    ToolkitError,
    export_pgm,
    export_ppm,
    load_annotations,
    load_grid,
    store_annotations,
    store_grid,
)
from .decoder import (
    DecodeConfig,
    Detection,
    count_from_density,
    decode,
    local_peaks,
    read_detections,
    search_threshold,
    write_detections,
)
from .losses import (
    LossConfig,
    LossResult,
    TotalLoss,
    fp_loss,
    fp_region,
    mse_loss,
    nsf_loss,
    total_loss,
)
from .metrics import (
    CountingScores,
    EvalReport,
    LocalizationScores,
    MatchResult,
    counting_scores,
    evaluate,
    match_points,
    match_radius,
)
from .micronet import (
    Adam,
    MicroNet,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_curve,
)
from .supervision import (
    SupervisionConfig,
    adaptive_sigma,
    make_density,
    make_heatmap,
)
from .synthcrowd import SceneConfig, generate_scene, generate_split

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CountingScores",
    "DataValidationError",
    "DecodeConfig",
    "DenseGrid",
    "Detection",
    "DivergenceError",
    "EvalReport",
    "FormatError",
    "ImageRecord",
    "LocalizationScores",
    "LossConfig",
    "LossResult",
    "MatchResult",
    "MicroNet",
    "PointAnnotation",
    "Rng",
    "SceneConfig",
    "SupervisionConfig",
    "ToolkitError",
    "TotalLoss",
    "TrainConfig",
    "adaptive_sigma",
    "count_from_density",
    "counting_scores",
    "decode",
    "evaluate",
    "export_pgm",
    "export_ppm",
    "fp_loss",
    "fp_region",
    "generate_scene",
    "generate_split",
    "load_annotations",
    "load_checkpoint",
    "load_grid",
    "local_peaks",
    "make_density",
    "make_heatmap",
    "match_points",
    "match_radius",
    "mse_loss",
    "nsf_loss",
    "read_detections",
    "save_checkpoint",
    "search_threshold",
    "store_annotations",
    "store_grid",
    "total_loss",
    "train",
    "write_detections",
    "write_loss_curve",
]
