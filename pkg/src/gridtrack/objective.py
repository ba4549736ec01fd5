"""Training objective: confidence-weighted Chamfer alignment plus edge-length
preservation.

The Chamfer term treats nearest-neighbor assignments as fixed within a step;
per-frame detached Chamfer values feed a confidence weight that discounts
frames fitting worse than the keyframe, with a catch-up exponent that decays
over training so late epochs weight all frames evenly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

DELTA_SCHEDULES = ("default", "constant", "linear", "exponential", "interpolated")
OMEGA_VARIANTS = ("default", "constant", "delta", "single")
DEFAULT_EXP_RATE = 5.0
DEFAULT_W_ISO = 100.0


class ObjectiveError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Chamfer distance


def chamfer_assignments(a: np.ndarray, b: np.ndarray, tree_b: cKDTree | None = None,
                        tree_a: cKDTree | None = None, workers: int = 1):
    """Nearest-neighbor index maps (a -> b, b -> a)."""
    if len(a) == 0 or len(b) == 0:
        raise ObjectiveError("chamfer requires two nonempty point sets")
    tree_b = tree_b if tree_b is not None else cKDTree(b)
    tree_a = tree_a if tree_a is not None else cKDTree(a)
    _, idx_ab = tree_b.query(a, workers=workers)
    _, idx_ba = tree_a.query(b, workers=workers)
    return idx_ab, idx_ba


def chamfer_fixed(a: np.ndarray, b: np.ndarray, idx_ab: np.ndarray, idx_ba: np.ndarray,
                  truncation: float = np.inf, want_grad: bool = True):
    """Chamfer value (and gradient w.r.t. `a`) under fixed assignments.

    value = mean_a rho(|a - b(a)|^2) + mean_b rho(|b - a(b)|^2) with
    rho(s) = min(s, truncation^2); the default truncation is infinite, i.e.
    the plain squared Chamfer distance. Both directions contribute gradient
    to `a` (the second through points of `a` selected by some b).
    """
    diff_ab = a - b[idx_ab]
    sq_ab = (diff_ab ** 2).sum(axis=1)
    diff_ba = a[idx_ba] - b
    sq_ba = (diff_ba ** 2).sum(axis=1)
    cap = truncation ** 2
    value = float(np.minimum(sq_ab, cap).mean() + np.minimum(sq_ba, cap).mean())
    if not want_grad:
        return value, None
    grad = np.zeros_like(a)
    live_ab = sq_ab < cap if np.isfinite(cap) else slice(None)
    grad[live_ab] = (2.0 / len(a)) * diff_ab[live_ab]
    if np.isfinite(cap):
        live_ba = sq_ba < cap
        np.add.at(grad, idx_ba[live_ba], (2.0 / len(b)) * diff_ba[live_ba])
    else:
        np.add.at(grad, idx_ba, (2.0 / len(b)) * diff_ba)
    return value, grad


def chamfer(a: np.ndarray, b: np.ndarray, truncation: float = np.inf,
            tree_b: cKDTree | None = None, workers: int = 1):
    """Bidirectional Chamfer distance and its gradient w.r.t. `a`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    idx_ab, idx_ba = chamfer_assignments(a, b, tree_b=tree_b, workers=workers)
    return chamfer_fixed(a, b, idx_ab, idx_ba, truncation=truncation)


# ---------------------------------------------------------------------------
# confidence weighting


def omega(cd_t: float, cd_key: float, variant: str = "default") -> float:
    """Per-frame fit quality relative to the keyframe, in (0, 1].

    default/single: 1 / (1 + max(0, cd_t - cd_key)); constant: 1;
    delta: 0.5. ("single" shares the formula but is applied non-cumulatively
    by `confidence_weights`.)
    """
    if variant in ("default", "single"):
        return 1.0 / (1.0 + max(0.0, cd_t - cd_key))
    if variant == "constant":
        return 1.0
    if variant == "delta":
        return 0.5
    raise ObjectiveError(f"unknown omega variant {variant!r}")


def delta_schedule(e_bar: float, variant: str = "default", exp_rate: float = DEFAULT_EXP_RATE) -> float:
    """Catch-up exponent over normalized epoch e_bar in [0, 1].

    default: 1 - sqrt(e_bar); constant: 1; linear: 1 - e_bar; exponential:
    exp(-rate * e_bar). The "interpolated" variant does not use an exponent
    (confidence_weights blends omega with 1 directly); its returned value is
    the blend coordinate e_bar itself.
    """
    if not 0.0 <= e_bar <= 1.0:
        raise ObjectiveError(f"normalized epoch {e_bar} outside [0, 1]")
    if variant == "default":
        return 1.0 - np.sqrt(e_bar)
    if variant == "constant":
        return 1.0
    if variant == "linear":
        return 1.0 - e_bar
    if variant == "exponential":
        return float(np.exp(-exp_rate * e_bar))
    if variant == "interpolated":
        return e_bar
    raise ObjectiveError(f"unknown delta schedule {variant!r}")


@dataclass
class ConfidenceState:
    """Detached per-frame Chamfer values and the weights derived from them."""

    t_key: int  # 1-based keyframe index
    delta_variant: str = "default"
    omega_variant: str = "default"
    exp_rate: float = DEFAULT_EXP_RATE
    cd: np.ndarray | None = None
    cd_key: float = 0.0
    delta: float = 1.0
    weights: np.ndarray | None = None
    e_bar: float = 0.0

    def refresh(self, cd_values: np.ndarray, e_bar: float) -> np.ndarray:
        """Recompute weights from freshly detached Chamfer values."""
        self.cd = np.asarray(cd_values, dtype=np.float64)
        self.cd_key = float(self.cd[self.t_key - 1])
        self.e_bar = float(e_bar)
        self.delta = delta_schedule(e_bar, self.delta_variant, self.exp_rate)
        self.weights = confidence_weights(self)
        return self.weights


def confidence_weights(state: ConfidenceState) -> np.ndarray:
    """Per-frame weights w(t) with w(t_key) = 1 under every variant.

    Default form: the product of omega(tau)^delta over frames between the
    keyframe and t (inclusive), running forward for t > t_key and backward
    for t < t_key. The "single" omega variant drops the product and uses
    omega(t)^delta directly; the "interpolated" delta variant uses
    (1 - e_bar) * omega(t) + e_bar.
    """
    cd = state.cd
    t0 = state.t_key - 1
    om = np.array([omega(float(c), state.cd_key, state.omega_variant) for c in cd])
    om[t0] = 1.0  # the keyframe is the reference; full confidence by definition
    if state.delta_variant == "interpolated":
        w = (1.0 - state.e_bar) * om + state.e_bar
        w[t0] = 1.0
        return w
    if state.omega_variant == "single":
        return om ** state.delta
    w = np.ones_like(om)
    run = 1.0
    for t in range(t0 + 1, len(om)):
        run *= om[t] ** state.delta
        w[t] = run
    run = 1.0
    for t in range(t0 - 1, -1, -1):
        run *= om[t] ** state.delta
        w[t] = run
    return w


# ---------------------------------------------------------------------------
# isometry loss


def keyframe_edge_lengths(vertices: np.ndarray, edges: np.ndarray,
                          warn: bool = True) -> np.ndarray:
    lengths = np.linalg.norm(vertices[edges[:, 1]] - vertices[edges[:, 0]], axis=1)
    if warn and (lengths == 0.0).any():
        import warnings
        warnings.warn(f"{int((lengths == 0).sum())} zero-length keyframe edges")
    return lengths


def isometry_loss(frames: np.ndarray, edges: np.ndarray, key_lengths: np.ndarray,
                  want_grad: bool = True):
    """Mean absolute edge-length deviation from detached keyframe lengths.

    frames: (T, N, 3). Returns (value, grad) with grad shaped like frames.
    The subgradient at exact length equality (and at zero-length edges,
    whose direction is undefined) is 0.
    """
    t, _, _ = frames.shape
    if len(edges) == 0:
        raise ObjectiveError("isometry loss needs a nonempty edge set")
    vec = frames[:, edges[:, 1], :] - frames[:, edges[:, 0], :]  # (T, E, 3)
    lengths = np.linalg.norm(vec, axis=2)
    dev = lengths - key_lengths[None, :]
    value = float(np.abs(dev).mean())
    if not want_grad:
        return value, None
    sign = np.sign(dev)
    safe = np.where(lengths == 0.0, 1.0, lengths)
    unit = np.where(lengths[:, :, None] > 0.0, vec / safe[:, :, None], 0.0)
    coeff = sign[:, :, None] * unit / (t * len(edges))
    grad = np.zeros_like(frames)
    for f in range(t):
        np.add.at(grad[f], edges[:, 1], coeff[f])
        np.add.at(grad[f], edges[:, 0], -coeff[f])
    return value, grad


# ---------------------------------------------------------------------------
# total objective


@dataclass
class LossBreakdown:
    total: float
    deformation: float
    isometry: float
    cd_per_frame: np.ndarray
    weights: np.ndarray
    w_iso: float = DEFAULT_W_ISO

    def csv_row(self, epoch: int) -> list:
        return [epoch, self.total, self.deformation, self.isometry] + list(self.cd_per_frame)


def total_loss(frames: np.ndarray, clouds: list[np.ndarray], state: ConfidenceState,
               edges: np.ndarray, key_lengths: np.ndarray, e_bar: float,
               w_iso: float = DEFAULT_W_ISO, truncation: float = np.inf,
               cloud_trees: list[cKDTree] | None = None, workers: int = 1,
               use_isometry: bool = True) -> tuple[LossBreakdown, np.ndarray]:
    """Confidence-weighted Chamfer plus weighted isometry, with gradients.

    Detached per-frame Chamfer values are recomputed from the current
    predictions first, the confidence state is refreshed with them, and only
    then is the weighted loss assembled, so the weights act as constants of
    the differentiation.
    """
    t, _, _ = frames.shape
    if len(clouds) != t:
        raise ObjectiveError(f"{t} predicted frames vs {len(clouds)} clouds")
    per_frame = []
    for f in range(t):
        a = frames[f]
        b = clouds[f]
        tree_b = cloud_trees[f] if cloud_trees is not None else None
        idx_ab, idx_ba = chamfer_assignments(a, b, tree_b=tree_b, workers=workers)
        per_frame.append((idx_ab, idx_ba))
    cd_values = np.array([
        chamfer_fixed(frames[f], clouds[f], *per_frame[f], truncation=truncation,
                      want_grad=False)[0]
        for f in range(t)
    ])
    weights = state.refresh(cd_values, e_bar)

    grad = np.zeros_like(frames)
    deformation = 0.0
    for f in range(t):
        value, g = chamfer_fixed(frames[f], clouds[f], *per_frame[f], truncation=truncation)
        deformation += weights[f] * value
        grad[f] = (weights[f] / t) * g
    deformation /= t

    if use_isometry:
        iso_value, iso_grad = isometry_loss(frames, edges, key_lengths)
        grad += w_iso * iso_grad
        effective_w_iso = w_iso
    else:
        # still reported in the breakdown, but carries no weight or gradient
        iso_value = isometry_loss(frames, edges, key_lengths, want_grad=False)[0] \
            if len(edges) else 0.0
        effective_w_iso = 0.0

    total = deformation + effective_w_iso * iso_value
    breakdown = LossBreakdown(total=total, deformation=deformation, isometry=iso_value,
                              cd_per_frame=cd_values, weights=weights, w_iso=effective_w_iso)
    if not np.isfinite(total):
        raise FloatingPointError("non-finite total loss")
    return breakdown, grad
