"""Per-vertex, per-frame rigid deformation decoder.

Latent position/normal features are concatenated with a time embedding and
pushed through a small MLP that emits 7 numbers per (vertex, frame): 4 raw
rotation parameters and 3 raw translation parameters. Raw rotations map to
SO(3) through one of three parameterizations, raw translations are squashed
by tanh, and the resulting rigid transform is applied to the reference
vertex. All gradients here are hand-written reverse mode; finite-difference
tests pin them down.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

TIME_ENCODINGS = ("fourier", "polynomial", "gaussian", "learned")
ROTATION_VARIANTS = ("quaternion", "cayley", "exponential")

DEFAULT_FREQUENCIES = 4
DEFAULT_HIDDEN_WIDTH = 512
DEFAULT_LEAKY_SLOPE = 0.01
TRANSLATION_SCALE = 0.1
LEARNED_ENCODER_HIDDEN = 64

# skew-symmetric basis: skew(w) = w0*E0 + w1*E1 + w2*E2, skew(w) @ v == cross(w, v)
_SKEW_BASIS = np.zeros((3, 3, 3))
_SKEW_BASIS[0, 1, 2], _SKEW_BASIS[0, 2, 1] = -1.0, 1.0
_SKEW_BASIS[1, 0, 2], _SKEW_BASIS[1, 2, 0] = 1.0, -1.0
_SKEW_BASIS[2, 0, 1], _SKEW_BASIS[2, 1, 0] = -1.0, 1.0


def _skew(w: np.ndarray) -> np.ndarray:
    """Batched skew matrices, (S, 3) -> (S, 3, 3)."""
    return np.einsum("sk,kij->sij", w, _SKEW_BASIS.astype(w.dtype))


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                    slope: float, dtype) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    out = x.copy()
    np.multiply(out, x.dtype.type(slope), where=x < 0, out=out)
    return out


def leaky_relu_backward(pre: np.ndarray, delta: np.ndarray, slope: float) -> np.ndarray:
    """Scale `delta` in place by the activation derivative at `pre`."""
    np.multiply(delta, delta.dtype.type(slope), where=pre < 0, out=delta)
    return delta


# ---------------------------------------------------------------------------
# time encodings


@dataclass
class TimeEncoder:
    """Maps a frame index to a 2M-dimensional temporal code.

    variant "fourier" interleaves (sin, cos) pairs at octave frequencies;
    "polynomial" uses monomials of the normalized time; "gaussian" draws M
    frequencies from a standard normal once at construction and freezes them;
    "learned" is a trainable two-layer network.
    """

    variant: str
    frequencies: int = DEFAULT_FREQUENCIES
    gaussian_b: np.ndarray | None = None
    learned_params: list | None = None  # [(W1, b1), (W2, b2)]
    slope: float = DEFAULT_LEAKY_SLOPE
    _cache: tuple | None = field(default=None, repr=False)

    @property
    def output_dim(self) -> int:
        return 2 * self.frequencies

    @classmethod
    def create(cls, variant: str, frequencies: int, rng: np.random.Generator,
               slope: float = DEFAULT_LEAKY_SLOPE, dtype=np.float64) -> "TimeEncoder":
        if variant not in TIME_ENCODINGS:
            raise ValueError(f"unknown time encoding {variant!r}")
        enc = cls(variant=variant, frequencies=frequencies, slope=slope)
        if variant == "gaussian":
            enc.gaussian_b = rng.standard_normal(frequencies).astype(dtype)
        elif variant == "learned":
            h = LEARNED_ENCODER_HIDDEN
            enc.learned_params = [
                (kaiming_uniform(rng, 1, h, slope, dtype), np.zeros(h, dtype=dtype)),
                (kaiming_uniform(rng, h, 2 * frequencies, slope, dtype),
                 np.zeros(2 * frequencies, dtype=dtype)),
            ]
        return enc

    @staticmethod
    def normalized_times(frame_count: int, dtype=np.float64) -> np.ndarray:
        """(t - 1) / (T - 1) for t = 1..T; a single frame maps to 0."""
        if frame_count < 1:
            raise ValueError("frame count must be >= 1")
        if frame_count == 1:
            warnings.warn("single-frame sequence: normalized time defined as 0")
            return np.zeros(1, dtype=dtype)
        return (np.arange(frame_count, dtype=dtype)) / (frame_count - 1)

    def encode_all(self, frame_count: int, dtype=np.float64) -> np.ndarray:
        """Codes for every frame, shape (T, 2M)."""
        tt = self.normalized_times(frame_count, dtype=dtype)
        m = self.frequencies
        if self.variant == "fourier":
            freqs = (2.0 ** np.arange(m)).astype(dtype)
            phase = np.pi * tt[:, None] * freqs[None, :]
            out = np.empty((frame_count, 2 * m), dtype=dtype)
            out[:, 0::2] = np.sin(phase)
            out[:, 1::2] = np.cos(phase)
            return out
        if self.variant == "polynomial":
            powers = np.arange(1, 2 * m + 1)
            return (tt[:, None] ** powers[None, :]).astype(dtype)
        if self.variant == "gaussian":
            phase = 2.0 * np.pi * tt[:, None] * self.gaussian_b[None, :].astype(dtype)
            out = np.empty((frame_count, 2 * m), dtype=dtype)
            out[:, 0::2] = np.sin(phase)
            out[:, 1::2] = np.cos(phase)
            return out
        if self.variant == "learned":
            (w1, b1), (w2, b2) = self.learned_params
            pre = tt[:, None] * w1[0][None, :] + b1[None, :]
            hidden = leaky_relu(pre, self.slope)
            self._cache = (tt, pre, hidden)
            return hidden @ w2 + b2[None, :]
        raise ValueError(f"unknown time encoding {self.variant!r}")

    def encode(self, t: int, frame_count: int, dtype=np.float64) -> np.ndarray:
        """Code for one 1-based frame index."""
        if not 1 <= t <= frame_count:
            raise ValueError(f"t={t} outside 1..{frame_count}")
        return self.encode_all(frame_count, dtype=dtype)[t - 1]

    def backward(self, upstream: np.ndarray) -> list | None:
        """Parameter gradients for the learned variant, None otherwise."""
        if self.variant != "learned":
            return None
        if self._cache is None:
            raise RuntimeError("encode_all must run before backward")
        tt, pre, hidden = self._cache
        (w1, _), (w2, _) = self.learned_params
        dw2 = hidden.T @ upstream
        db2 = upstream.sum(axis=0)
        dpre = leaky_relu_backward(pre, upstream @ w2.T, self.slope)
        dw1 = (tt[None, :] @ dpre).reshape(1, -1)
        db1 = dpre.sum(axis=0)
        return [(dw1, db1), (dw2, db2)]


def assemble_input(z_n: np.ndarray, z_p: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Concatenate (z_n, z_p, gamma) in that order along the last axis."""
    parts = [np.atleast_2d(z_n), np.atleast_2d(z_p), np.atleast_2d(gamma)]
    if len({p.shape[0] for p in parts}) != 1:
        raise ValueError("z_n, z_p, gamma batch sizes differ")
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class DeformModelParams:
    """Decoder weights plus the variant selectors baked into the model.

    layers: list of (W, b) with W shaped (fan_in, fan_out). The final layer
    is zero at initialization so the decoded deformation starts as identity.
    """

    layers: list
    rotation_variant: str = "quaternion"
    translation_scale: float = TRANSLATION_SCALE
    slope: float = DEFAULT_LEAKY_SLOPE

    @classmethod
    def create(cls, input_dim: int, rng: np.random.Generator,
               hidden_width: int = DEFAULT_HIDDEN_WIDTH, hidden_layers: int = 3,
               rotation_variant: str = "quaternion",
               translation_scale: float = TRANSLATION_SCALE,
               slope: float = DEFAULT_LEAKY_SLOPE, dtype=np.float64) -> "DeformModelParams":
        if rotation_variant not in ROTATION_VARIANTS:
            raise ValueError(f"unknown rotation variant {rotation_variant!r}")
        dims = [input_dim] + [hidden_width] * hidden_layers
        layers = [
            (kaiming_uniform(rng, dims[i], dims[i + 1], slope, dtype),
             np.zeros(dims[i + 1], dtype=dtype))
            for i in range(hidden_layers)
        ]
        layers.append((np.zeros((hidden_width, 7), dtype=dtype), np.zeros(7, dtype=dtype)))
        return cls(layers=layers, rotation_variant=rotation_variant,
                   translation_scale=translation_scale, slope=slope)

    def check_finite(self):
        for w, b in self.layers:
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise FloatingPointError("non-finite model parameters")


def mlp_forward(params: DeformModelParams, y: np.ndarray,
                want_cache: bool = False):
    """Affine/LeakyReLU chain; returns ((q_raw, d_raw), cache?).

    No activation after the final layer; the 7 outputs split into the first
    4 (raw rotation) and last 3 (raw translation).
    """
    params.check_finite()
    x = np.atleast_2d(y)
    pres = []
    for w, b in params.layers[:-1]:
        pre = x @ w + b[None, :]
        pres.append(pre)
        x = leaky_relu(pre, params.slope)
    w, b = params.layers[-1]
    out = x @ w + b[None, :]
    q_raw, d_raw = out[:, :4], out[:, 4:]
    if want_cache:
        return (q_raw, d_raw), (np.atleast_2d(y), pres)
    return q_raw, d_raw


def mlp_backward(params: DeformModelParams, cache, dout: np.ndarray):
    """Gradients of the MLP: (per-layer [(dW, db)], input gradient)."""
    y, pres = cache
    acts = [y]
    for pre in pres:
        acts.append(leaky_relu(pre, params.slope))
    grads = [None] * len(params.layers)
    delta = dout
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        delta = delta @ w.T
        if i > 0:
            delta = leaky_relu_backward(pres[i - 1], delta, params.slope)
    return grads, delta


# ---------------------------------------------------------------------------
# rotation parameterizations


class RotationError(ValueError):
    pass


def _quaternion_matrices(q_hat: np.ndarray) -> np.ndarray:
    """Hamilton-convention rotation matrices from unit quaternions (w, x, y, z)."""
    w = q_hat[:, 0]
    u = q_hat[:, 1:]
    ucross = _skew(u)
    uu = np.einsum("si,sj->sij", u, u)
    eye = np.eye(3, dtype=q_hat.dtype)
    unorm2 = (u * u).sum(axis=1)
    return (eye[None] + 2.0 * w[:, None, None] * ucross
            + 2.0 * (uu - unorm2[:, None, None] * eye[None]))


def map_rotation(q_raw: np.ndarray, variant: str = "quaternion") -> np.ndarray:
    """Raw network outputs -> rotation matrices, (S, 4) -> (S, 3, 3).

    quaternion: offset the scalar part by 1, normalize, convert (so zero raw
    output is exactly the identity). cayley: R = (I-S)^-1 (I+S) on the last
    three components. exponential: axis-angle via the Rodrigues formula on
    the last three components. Note the small-rotation scale differs between
    families: quaternion/cayley produce angle 2*atan(|w|) while exponential
    produces |w|; swapping the variant rescales what the decoder must emit.
    """
    q = np.atleast_2d(q_raw)
    if variant == "quaternion":
        v = q.copy()
        v[:, 0] += 1.0
        n = np.linalg.norm(v, axis=1)
        if (n < 1e-12).any():
            raise RotationError("quaternion norm underflow (raw scalar near -1)")
        return _quaternion_matrices(v / n[:, None])
    if variant == "cayley":
        wvec = q[:, 1:]
        s = _skew(wvec)
        ww = np.einsum("si,sj->sij", wvec, wvec)
        denom = 1.0 + (wvec * wvec).sum(axis=1)
        eye = np.eye(3, dtype=q.dtype)
        inv = (eye[None] + s + ww) / denom[:, None, None]  # (I - S)^-1 in closed form
        return np.einsum("sij,sjk->sik", inv, eye[None] + s)
    if variant == "exponential":
        return _rodrigues(q[:, 1:])
    raise RotationError(f"unknown rotation variant {variant!r}")


def _rodrigues(wvec: np.ndarray) -> np.ndarray:
    theta2 = (wvec * wvec).sum(axis=1)
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
                     np.sin(theta) / theta)
        b = np.where(small, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
                     (1.0 - np.cos(theta)) / theta2)
    k = _skew(wvec)
    k2 = np.einsum("sij,sjk->sik", k, k)
    eye = np.eye(3, dtype=wvec.dtype)
    return eye[None] + a[:, None, None] * k + b[:, None, None] * k2


def rotation_vjp(q_raw: np.ndarray, variant: str, upstream: np.ndarray) -> np.ndarray:
    """Gradient of <upstream, R(q_raw)> w.r.t. the raw 4-vector, (S, 4)."""
    q = np.atleast_2d(q_raw)
    dr = upstream
    out = np.zeros_like(q)
    if variant == "quaternion":
        v = q.copy()
        v[:, 0] += 1.0
        n = np.linalg.norm(v, axis=1)
        q_hat = v / n[:, None]
        w, u = q_hat[:, 0], q_hat[:, 1:]
        ucross = _skew(u)
        eye = np.eye(3, dtype=q.dtype)
        dq_hat = np.empty_like(q_hat)
        dq_hat[:, 0] = 2.0 * np.einsum("sij,sij->s", dr, ucross)
        for k in range(3):
            ek = _SKEW_BASIS[k].astype(q.dtype)
            col = np.zeros((len(q), 3, 3), dtype=q.dtype)
            col[:, k, :] += u
            col[:, :, k] += u
            part = (2.0 * w[:, None, None] * ek[None]
                    + 2.0 * (col - 2.0 * u[:, k, None, None] * eye[None]))
            dq_hat[:, 1 + k] = np.einsum("sij,sij->s", dr, part)
        radial = (dq_hat * q_hat).sum(axis=1)
        out = (dq_hat - radial[:, None] * q_hat) / n[:, None]
        return out
    if variant == "cayley":
        wvec = q[:, 1:]
        s = _skew(wvec)
        ww = np.einsum("si,sj->sij", wvec, wvec)
        denom = 1.0 + (wvec * wvec).sum(axis=1)
        eye = np.eye(3, dtype=q.dtype)
        inv = (eye[None] + s + ww) / denom[:, None, None]
        r = np.einsum("sij,sjk->sik", inv, eye[None] + s)
        rplus = r + eye[None]
        for k in range(3):
            ek = _SKEW_BASIS[k].astype(q.dtype)
            # dR = (I-S)^-1 dS (R + I)
            jac = np.einsum("sij,jk,skl->sil", inv, ek, rplus)
            out[:, 1 + k] = np.einsum("sij,sij->s", dr, jac)
        return out
    if variant == "exponential":
        wvec = q[:, 1:]
        theta2 = (wvec * wvec).sum(axis=1)
        r = _rodrigues(wvec)
        eye = np.eye(3, dtype=q.dtype)
        small = theta2 < 1e-8
        k = _skew(wvec)
        for i in range(3):
            ei = _SKEW_BASIS[i].astype(q.dtype)
            # series branch: d exp(K)/dw_i ~ E_i + (E_i K + K E_i)/2 near zero
            jac_small = ei[None] + 0.5 * (np.einsum("ij,sjk->sik", ei, k)
                                          + np.einsum("sij,jk->sik", k, ei))
            col = (eye[None] - r)[:, :, i]
            cross_term = _skew(np.cross(wvec, col))
            with np.errstate(invalid="ignore", divide="ignore"):
                coeff = (wvec[:, i, None, None] * k + cross_term) / np.where(
                    small, 1.0, theta2)[:, None, None]
            jac_big = np.einsum("sij,sjk->sik", coeff, r)
            jac = np.where(small[:, None, None], jac_small, jac_big)
            out[:, 1 + i] = np.einsum("sij,sij->s", dr, jac)
        return out
    raise RotationError(f"unknown rotation variant {variant!r}")


def map_translation(d_raw: np.ndarray, scale: float = TRANSLATION_SCALE) -> np.ndarray:
    """Componentwise tanh(scale * d_raw); every output lies strictly in (-1, 1).

    tanh rounds to exactly +-1.0 for huge inputs, so the result is clamped to
    the largest float below 1 to keep the interval open.
    """
    out = np.tanh(scale * np.asarray(d_raw))
    sat = np.nextafter(out.dtype.type(1.0), out.dtype.type(0.0))
    return np.clip(out, -sat, sat)


def map_translation_vjp(d_hat: np.ndarray, upstream: np.ndarray,
                        scale: float = TRANSLATION_SCALE) -> np.ndarray:
    return scale * (1.0 - d_hat ** 2) * upstream


def apply_transform(x: np.ndarray, rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    """Rigid application about the canonical-space origin: R @ x + d."""
    x2 = np.atleast_2d(x)
    return np.einsum("sij,sj->si", rotation, x2) + translation


# ---------------------------------------------------------------------------
# full decoder


@dataclass
class ModelCache:
    y: np.ndarray
    mlp_cache: tuple
    q_raw: np.ndarray
    d_raw: np.ndarray
    rotations: np.ndarray
    d_hat: np.ndarray
    points: np.ndarray


def model_forward(params: DeformModelParams, z_n: np.ndarray, z_p: np.ndarray,
                  gamma_rows: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, ModelCache]:
    """Decode deformed positions for a batch of (vertex, frame) samples.

    z_n (S, Cn), z_p (S, Cp), gamma_rows (S, 2M), points (S, 3) are aligned
    per sample. Returns the deformed positions (S, 3) and the cache needed
    by `model_vjp`.
    """
    y = assemble_input(z_n, z_p, gamma_rows)
    (q_raw, d_raw), mlp_cache = mlp_forward(params, y, want_cache=True)
    rot = map_rotation(q_raw, params.rotation_variant)
    d_hat = map_translation(d_raw, params.translation_scale)
    pred = apply_transform(points, rot, d_hat)
    return pred, ModelCache(y, mlp_cache, q_raw, d_raw, rot, d_hat, np.atleast_2d(points))


def model_vjp(params: DeformModelParams, cache: ModelCache, upstream: np.ndarray,
              z_n_dim: int, z_p_dim: int):
    """Reverse-mode pass from position gradients to parameter/latent gradients.

    Returns (mlp_grads, dz_n, dz_p, dgamma_rows), each aligned with the
    forward batch. Latent gradients must still be scattered into the grids
    by the caller.
    """
    if not np.isfinite(upstream).all():
        raise FloatingPointError("non-finite upstream gradient")
    drot = np.einsum("si,sj->sij", upstream, cache.points)
    dd_hat = upstream
    dq_raw = rotation_vjp(cache.q_raw, params.rotation_variant, drot)
    dd_raw = map_translation_vjp(cache.d_hat, dd_hat, params.translation_scale)
    dout = np.concatenate([dq_raw, dd_raw], axis=1)
    mlp_grads, dy = mlp_backward(params, cache.mlp_cache, dout)
    dz_n = dy[:, :z_n_dim]
    dz_p = dy[:, z_n_dim:z_n_dim + z_p_dim]
    dgamma = dy[:, z_n_dim + z_p_dim:]
    return mlp_grads, dz_n, dz_p, dgamma
