"""gridtrack: temporally coherent mesh tracking from dynamic point clouds.

A keyframe surface is encoded in multi-resolution latent feature grids
(positions) plus a small orientation grid (normals); a lightweight decoder
turns those features and a time embedding into per-vertex rigid transforms
for every frame. Training minimizes a confidence-weighted Chamfer loss plus
an edge-length preservation term, with low-pass (Sobolev) filtering of the
grid gradients for spatially coherent updates.
"""

__version__ = "0.1.0"

from .geometry import (GeometryError, NormalizationTransform, PointCloud, TriMesh,
                       extract_edges, nearest_neighbor, normalize_sequence,
                       vertex_normals)
from .latent_grid import (GridLevel, GridPreconditioner, LatentGridPyramid,
                          build_laplacian, precondition, sample_level,
                          sample_level_vjp)
from .deform_model import (DeformModelParams, TimeEncoder, apply_transform,
                           assemble_input, map_rotation, map_translation,
                           mlp_forward, model_forward, model_vjp)
from .objective import (ConfidenceState, LossBreakdown, chamfer, confidence_weights,
                        delta_schedule, isometry_loss, omega, total_loss)
from .trainer import (RunResult, TrainConfig, TrainState, init_state, run,
                      select_keyframe, train_epoch)
from .evalsynth import (MetricReport, SyntheticSequence, gen_sequence, metric_cd,
                        metric_corr, metric_fscore, metric_nc)

__all__ = [
    "GeometryError", "NormalizationTransform", "PointCloud", "TriMesh",
    "extract_edges", "nearest_neighbor", "normalize_sequence", "vertex_normals",
    "GridLevel", "GridPreconditioner", "LatentGridPyramid", "build_laplacian",
    "precondition", "sample_level", "sample_level_vjp",
    "DeformModelParams", "TimeEncoder", "apply_transform", "assemble_input",
    "map_rotation", "map_translation", "mlp_forward", "model_forward", "model_vjp",
    "ConfidenceState", "LossBreakdown", "chamfer", "confidence_weights",
    "delta_schedule", "isometry_loss", "omega", "total_loss",
    "RunResult", "TrainConfig", "TrainState", "init_state", "run",
    "select_keyframe", "train_epoch",
    "MetricReport", "SyntheticSequence", "gen_sequence", "metric_cd",
    "metric_corr", "metric_fscore", "metric_nc",
]
