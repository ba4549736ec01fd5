"""Optimization loop: joint fitting of grid features and decoder weights.

One epoch is one full-batch gradient step over every frame and vertex:
forward all frames, refresh the detached per-frame Chamfer values and
confidence weights, backpropagate the total loss, low-pass filter the grid
gradients, then apply per-group Adam updates. Grid levels, the normal grid,
the decoder, and a learned time encoder each form their own parameter group
with its own learning rate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import deform_model as dm
from . import latent_grid as lg
from .geometry import (GeometryError, NormalizationTransform, PointCloud, TriMesh,
                       normalize_sequence, occupancy_count)
from .objective import (ConfidenceState, LossBreakdown, keyframe_edge_lengths,
                        total_loss)

DEFAULT_EPOCHS_FAST = 250
DEFAULT_EPOCHS_FULL = 1000


@dataclass
class TrainConfig:
    epochs: int = DEFAULT_EPOCHS_FAST
    mlp_lr: float = 1e-3
    grid_lr_base: float = lg.GRID_LR_BASE
    grid_lr_growth: float = lg.GRID_LR_GROWTH
    lambda_base: float = lg.LAMBDA_BASE
    lambda_growth: float = lg.LAMBDA_GROWTH
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    w_iso: float = 100.0
    levels: int = lg.DEFAULT_LEVELS
    base_resolution: int = lg.DEFAULT_BASE_RESOLUTION
    resolution_step: int = lg.DEFAULT_RESOLUTION_STEP
    position_channels: int = lg.POSITION_CHANNELS
    normal_resolution: int = lg.NORMAL_RESOLUTION
    normal_channels: int = lg.NORMAL_CHANNELS
    hidden_width: int = dm.DEFAULT_HIDDEN_WIDTH
    hidden_layers: int = 3
    leaky_slope: float = dm.DEFAULT_LEAKY_SLOPE
    translation_scale: float = dm.TRANSLATION_SCALE
    time_encoding: str = "fourier"
    time_frequencies: int = dm.DEFAULT_FREQUENCIES
    rotation: str = "quaternion"
    delta_variant: str = "default"
    omega_variant: str = "default"
    exp_rate: float = 5.0
    chamfer_truncation: float = np.inf
    use_preconditioning: bool = True
    use_normal_latent: bool = True
    use_isometry: bool = True
    precond_backend: str = "spectral"
    # where the low-pass filter acts: "update" smooths the optimizer step
    # (Adam's per-coordinate normalization would otherwise cancel the
    # filter's amplitude attenuation and the large fine-level rates diverge);
    # "gradient" smooths before the optimizer sees the gradient
    precond_order: str = "update"
    grid_optimizer: str = "adam"
    seed: int = 0
    precision: str = "f32"
    threads: int = 1
    keyframe_occupancy_resolution: int = 128
    keyframe_alpha: float = 0.001
    keyframe_override: int = 0  # 0 = automatic selection

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.precond_order not in ("gradient", "update"):
            raise ValueError(f"precond_order must be gradient or update, got {self.precond_order!r}")
        if self.grid_optimizer not in ("adam", "sgd"):
            raise ValueError(f"grid_optimizer must be adam or sgd, got {self.grid_optimizer!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def grid_lambdas(self) -> list[float]:
        return lg.level_lambdas(self.levels, self.lambda_base, self.lambda_growth)

    def grid_learning_rates(self) -> list[float]:
        return lg.level_learning_rates(self.levels, self.grid_lr_base, self.grid_lr_growth)


class AdamGroup:
    """Adam moments for one list of parameter arrays, updated in place.

    `transform`, when given, reshapes the already-scaled update before it is
    subtracted (used to low-pass filter grid steps).
    """

    def __init__(self, params: list[np.ndarray], beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float,
             transform=None) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p -= transform(update) if transform is not None else update


class SgdGroup:
    """Plain gradient-descent group with the same step interface."""

    def __init__(self, params: list[np.ndarray], *_):
        self.m = []
        self.v = []
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float,
             transform=None) -> None:
        self.t += 1
        for p, g in zip(params, grads):
            update = lr * g
            p -= transform(update) if transform is not None else update


def select_keyframe(clouds: list[PointCloud], occupancy_resolution: int = 128,
                    alpha: float = 0.001) -> tuple[int, np.ndarray]:
    """Keyframe = frame maximizing midpoint-biased voxel occupancy.

    Scores are exp(-alpha * (i - T/2)^2) * occupancy over 0-based frame
    offsets i; the returned index is 1-based and ties resolve to the earlier
    frame. Expects a normalized sequence.
    """
    if not clouds:
        raise GeometryError("cannot select a keyframe from an empty sequence")
    t = len(clouds)
    occ = np.array([occupancy_count(c.points, occupancy_resolution) for c in clouds],
                   dtype=np.float64)
    offsets = np.arange(t, dtype=np.float64) - t / 2.0
    scores = np.exp(-alpha * offsets ** 2) * occ
    return int(np.argmax(scores)) + 1, scores


@dataclass
class TrainState:
    config: TrainConfig
    pyramid: lg.LatentGridPyramid
    model: dm.DeformModelParams
    time_encoder: dm.TimeEncoder
    transform: NormalizationTransform
    t_key: int
    reference: TriMesh
    ref_vertices: np.ndarray  # reference vertices/normals in the run dtype
    ref_normals: np.ndarray
    clouds: list[np.ndarray]
    cloud_trees: list[cKDTree]
    key_edge_lengths: np.ndarray
    confidence: ConfidenceState
    adam: dict = field(default_factory=dict)
    epoch: int = 0
    pos_samplers: list = field(default_factory=list)
    normal_sampler: tuple | None = None
    preconditioners: list = field(default_factory=list)
    normal_preconditioner: object = None

    @property
    def frame_count(self) -> int:
        return len(self.clouds)

    @property
    def vertex_count(self) -> int:
        return len(self.ref_vertices)


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Derive independent generators from the run seed.

    Children of SeedSequence(seed), in order: 0 decoder init, 1 time-encoder
    init, 2 synthetic-data generation, 3 spare.
    """
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("model", "time_encoder", "synthetic", "spare")
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def init_state(clouds: list[PointCloud], reference: TriMesh, cfg: TrainConfig,
               transform: NormalizationTransform, t_key: int) -> TrainState:
    """Zero grids, random hidden layers, zero decoder head: the decoded
    deformation starts as the identity on every frame."""
    if not 1 <= t_key <= len(clouds):
        raise ValueError(f"keyframe {t_key} outside 1..{len(clouds)}")
    dtype = cfg.dtype
    rngs = seed_streams(cfg.seed)
    pyramid = lg.LatentGridPyramid.create(
        levels=cfg.levels, base_resolution=cfg.base_resolution,
        resolution_step=cfg.resolution_step, position_channels=cfg.position_channels,
        normal_resolution=cfg.normal_resolution, normal_channels=cfg.normal_channels,
        lambda_base=cfg.lambda_base, lambda_growth=cfg.lambda_growth,
        lr_base=cfg.grid_lr_base, lr_growth=cfg.grid_lr_growth, dtype=dtype)
    encoder = dm.TimeEncoder.create(cfg.time_encoding, cfg.time_frequencies,
                                    rngs["time_encoder"], slope=cfg.leaky_slope, dtype=dtype)
    input_dim = cfg.normal_channels + cfg.position_channels + encoder.output_dim
    model = dm.DeformModelParams.create(
        input_dim, rngs["model"], hidden_width=cfg.hidden_width,
        hidden_layers=cfg.hidden_layers, rotation_variant=cfg.rotation,
        translation_scale=cfg.translation_scale, slope=cfg.leaky_slope, dtype=dtype)

    verts = reference.vertices.astype(dtype)
    normals = reference.vertex_normals.astype(dtype)
    cloud_arrays = [c.points.astype(dtype) for c in clouds]
    state = TrainState(
        config=cfg, pyramid=pyramid, model=model, time_encoder=encoder,
        transform=transform, t_key=t_key, reference=reference,
        ref_vertices=verts, ref_normals=normals,
        clouds=cloud_arrays,
        cloud_trees=[cKDTree(c) for c in cloud_arrays],
        key_edge_lengths=keyframe_edge_lengths(verts, reference.edges).astype(dtype),
        confidence=ConfidenceState(t_key=t_key, delta_variant=cfg.delta_variant,
                                   omega_variant=cfg.omega_variant, exp_rate=cfg.exp_rate),
    )
    # query points never move, so interpolation stencils are fixed for the run
    state.pos_samplers = [level.interp_weights(verts) for level in pyramid.position_levels]
    lengths = np.linalg.norm(normals.astype(np.float64), axis=1)
    if np.abs(lengths - 1.0).max() > 1e-6:
        raise GeometryError("reference vertex normals are not unit length")
    state.normal_sampler = pyramid.normal_level.interp_weights(normals)

    lams = cfg.grid_lambdas()
    if cfg.use_preconditioning:
        state.preconditioners = [
            lg.GridPreconditioner(level.resolution, lam, backend=cfg.precond_backend)
            for level, lam in zip(pyramid.position_levels, lams)]
        state.normal_preconditioner = lg.GridPreconditioner(
            pyramid.normal_level.resolution, pyramid.normal_lambda,
            backend=cfg.precond_backend)

    beta = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    grid_group = AdamGroup if cfg.grid_optimizer == "adam" else SgdGroup
    state.adam["mlp"] = AdamGroup(_flatten_layers(model.layers), *beta)
    for l, level in enumerate(pyramid.position_levels):
        state.adam[f"grid_p{l}"] = grid_group([level.features], *beta)
    state.adam["grid_n"] = grid_group([pyramid.normal_level.features], *beta)
    if encoder.learned_params is not None:
        state.adam["time_encoder"] = AdamGroup(_flatten_layers(encoder.learned_params), *beta)
    return state


def _flatten_layers(layers) -> list[np.ndarray]:
    return [arr for pair in layers for arr in pair]


def _latents(state: TrainState) -> tuple[np.ndarray, np.ndarray]:
    levels = state.pyramid.position_levels
    z_p = None
    for level, (idx, w) in zip(levels, state.pos_samplers):
        part = np.einsum("nkc,nk->nc", level.features[idx], w)
        z_p = part if z_p is None else z_p + part
    z_p /= len(levels)
    if state.config.use_normal_latent:
        idx, w = state.normal_sampler
        z_n = np.einsum("nkc,nk->nc", state.pyramid.normal_level.features[idx], w)
    else:
        z_n = np.zeros((state.vertex_count, state.config.normal_channels),
                       dtype=state.config.dtype)
    return z_n, z_p


def forward_all(state: TrainState, want_cache: bool = False):
    """Predict all frames: (T, N, 3), optionally with the reverse-mode cache."""
    t, n = state.frame_count, state.vertex_count
    dtype = state.config.dtype
    z_n, z_p = _latents(state)
    gamma = state.time_encoder.encode_all(t, dtype=dtype)
    y_zn = np.tile(z_n, (t, 1))
    y_zp = np.tile(z_p, (t, 1))
    y_gamma = np.repeat(gamma, n, axis=0)
    points = np.tile(state.ref_vertices, (t, 1))
    pred, cache = dm.model_forward(state.model, y_zn, y_zp, y_gamma, points)
    pred = pred.reshape(t, n, 3)
    if want_cache:
        return pred, cache
    return pred


def _grid_step(state: TrainState, group: str, params: list[np.ndarray],
               grad: np.ndarray, lr: float, preconditioner) -> None:
    """Optimizer step for one grid, honoring the configured filter placement."""
    order = state.config.precond_order
    if preconditioner is None:
        state.adam[group].step(params, [grad], lr)
    elif order == "gradient":
        state.adam[group].step(params, [preconditioner.apply(grad)], lr)
    else:
        state.adam[group].step(params, [grad], lr, transform=preconditioner.apply)


def train_epoch(state: TrainState) -> LossBreakdown:
    """One full optimization step; see the module docstring for the phases."""
    cfg = state.config
    t, n = state.frame_count, state.vertex_count
    e_bar = state.epoch / cfg.epochs if cfg.epochs > 0 else 0.0
    pred, cache = forward_all(state, want_cache=True)

    try:
        breakdown, dpred = total_loss(
            pred, state.clouds, state.confidence, state.reference.edges,
            state.key_edge_lengths, e_bar, w_iso=cfg.w_iso,
            truncation=cfg.chamfer_truncation, cloud_trees=state.cloud_trees,
            workers=cfg.threads, use_isometry=cfg.use_isometry)
    except FloatingPointError as exc:
        bad = [f + 1 for f in range(t) if not np.isfinite(pred[f]).all()]
        raise FloatingPointError(
            f"epoch {state.epoch}: {exc} (non-finite frames: {bad or 'none'})") from exc

    mlp_grads, dzn_rows, dzp_rows, dgamma_rows = dm.model_vjp(
        state.model, cache, dpred.reshape(t * n, 3),
        cfg.normal_channels, cfg.position_channels)

    dz_p = dzp_rows.reshape(t, n, -1).sum(axis=0)
    dz_n = dzn_rows.reshape(t, n, -1).sum(axis=0)
    dgamma = dgamma_rows.reshape(t, n, -1).sum(axis=1)

    rates = cfg.grid_learning_rates()
    scale = 1.0 / cfg.levels
    for l, (level, (idx, w)) in enumerate(zip(state.pyramid.position_levels,
                                              state.pos_samplers)):
        grad = np.zeros_like(level.features)
        np.add.at(grad, idx, w[:, :, None] * (scale * dz_p)[:, None, :])
        _grid_step(state, f"grid_p{l}", [level.features], grad,
                   rates[l], state.preconditioners[l] if cfg.use_preconditioning else None)

    if cfg.use_normal_latent:
        idx, w = state.normal_sampler
        grad_n = np.zeros_like(state.pyramid.normal_level.features)
        np.add.at(grad_n, idx, w[:, :, None] * dz_n[:, None, :])
        _grid_step(state, "grid_n", [state.pyramid.normal_level.features], grad_n,
                   state.pyramid.normal_learning_rate,
                   state.normal_preconditioner if cfg.use_preconditioning else None)

    state.adam["mlp"].step(_flatten_layers(state.model.layers),
                           _flatten_layers(mlp_grads), cfg.mlp_lr)

    enc_grads = state.time_encoder.backward(dgamma)
    if enc_grads is not None:
        state.adam["time_encoder"].step(_flatten_layers(state.time_encoder.learned_params),
                                        _flatten_layers(enc_grads), cfg.mlp_lr)

    state.epoch += 1
    return breakdown


@dataclass
class RunResult:
    state: TrainState
    history: list[LossBreakdown]
    frames_normalized: np.ndarray  # (T, N, 3) in the canonical cube
    meshes: list[TriMesh]          # deformed meshes in input coordinates
    wall_seconds: float
    keyframe_scores: np.ndarray


def run(clouds: list[PointCloud], reference: TriMesh | None, cfg: TrainConfig,
        progress: bool = False) -> RunResult:
    """Normalize, select a keyframe, optimize for cfg.epochs, decode outputs.

    `reference` is the keyframe surface in input coordinates. With epochs=0
    the outputs equal the reference at every frame.
    """
    if reference is None:
        raise GeometryError("a reference mesh is required (pass one or use synthetic data)")
    start = time.perf_counter()
    normalized, transform = normalize_sequence(clouds)
    if cfg.keyframe_override > 0:
        t_key, scores = cfg.keyframe_override, np.zeros(len(clouds))
    else:
        t_key, scores = select_keyframe(normalized, cfg.keyframe_occupancy_resolution,
                                        cfg.keyframe_alpha)
    ref_normalized = TriMesh(transform.apply(reference.vertices), reference.faces)
    state = init_state(normalized, ref_normalized, cfg, transform, t_key)

    history: list[LossBreakdown] = []
    for epoch in range(cfg.epochs):
        breakdown = train_epoch(state)
        history.append(breakdown)
        if progress and (epoch % 25 == 0 or epoch == cfg.epochs - 1):
            print(f"epoch {epoch + 1}/{cfg.epochs}  total {breakdown.total:.6e}  "
                  f"cd {breakdown.cd_per_frame.mean():.6e}")

    pred = forward_all(state)
    meshes = [state.reference.with_vertices(transform.invert(pred[f].astype(np.float64)))
              for f in range(state.frame_count)]
    return RunResult(state=state, history=history,
                     frames_normalized=pred.astype(np.float64), meshes=meshes,
                     wall_seconds=time.perf_counter() - start, keyframe_scores=scores)


def fast_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(), epochs=DEFAULT_EPOCHS_FAST, **overrides)


def full_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(), epochs=DEFAULT_EPOCHS_FULL, **overrides)
