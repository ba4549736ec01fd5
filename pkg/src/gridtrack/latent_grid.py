"""Multi-resolution latent feature grids with smoothed gradient updates.

A grid level stores one learnable feature vector per lattice node of a
resolution^3 lattice spanning [-1, 1]^3 and is sampled by trilinear
interpolation. The position pyramid averages its per-level samples into one
feature; a small single-level grid indexed by unit normals supplies
orientation features. Gradients w.r.t. node features can be low-pass
filtered by solving (I + lam*L)^2 p = g with L the 6-connected lattice
Laplacian, which couples neighboring nodes and damps high-frequency updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DEFAULT_LEVELS = 8
DEFAULT_BASE_RESOLUTION = 2
DEFAULT_RESOLUTION_STEP = 3
POSITION_CHANNELS = 30
NORMAL_CHANNELS = 2
NORMAL_RESOLUTION = 4
LAMBDA_BASE = 0.4
LAMBDA_GROWTH = 1.5
GRID_LR_BASE = 0.005
GRID_LR_GROWTH = 2.5


def level_resolutions(levels: int, base: int = DEFAULT_BASE_RESOLUTION,
                      step: int = DEFAULT_RESOLUTION_STEP) -> list[int]:
    """Arithmetic resolution ladder, e.g. 2, 5, 8, ..., 23 for 8 levels."""
    return [base + step * l for l in range(levels)]


def level_lambdas(levels: int, base: float = LAMBDA_BASE, growth: float = LAMBDA_GROWTH) -> list[float]:
    """Per-level smoothing weights, 1-based exponent: base * growth^l for l = 1..levels."""
    return [base * growth ** l for l in range(1, levels + 1)]


def level_learning_rates(levels: int, base: float = GRID_LR_BASE,
                         growth: float = GRID_LR_GROWTH) -> list[float]:
    """Per-level learning rates, 1-based exponent like `level_lambdas`."""
    return [base * growth ** l for l in range(1, levels + 1)]


def node_coordinates(resolution: int) -> np.ndarray:
    """Axis node positions in [-1, 1]; exact inverse of `_grid_coords` for
    resolutions up to 23 (verified in tests)."""
    h = (resolution - 1) / 2.0
    return (np.arange(resolution, dtype=np.float64) - h) / h


def _grid_coords(points: np.ndarray, resolution: int) -> np.ndarray:
    h = (resolution - 1) / 2.0
    return points * h + h


@dataclass
class GridLevel:
    """Dense feature lattice: `features` has shape (resolution^3, channels).

    Node k = (ix, iy, iz) maps to flat index (ix*R + iy)*R + iz. Features are
    zero at construction so the representation starts inert.
    """

    resolution: int
    channels: int
    features: np.ndarray = field(default=None)  # type: ignore[assignment]
    dtype: np.dtype = np.float64
    clamped_queries: int = 0

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("grid resolution must be >= 2")
        if self.features is None:
            self.features = np.zeros((self.resolution ** 3, self.channels), dtype=self.dtype)
        else:
            self.features = np.asarray(self.features, dtype=self.dtype)
            expected = (self.resolution ** 3, self.channels)
            if self.features.shape != expected:
                raise ValueError(f"features must be {expected}, got {self.features.shape}")

    def interp_weights(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear corner indices and weights for query points.

        Returns (idx, w): idx is (N, 8) int64 flat node indices, w is (N, 8)
        nonnegative weights summing to 1 per row. Out-of-cube queries are
        clamped componentwise and counted in `clamped_queries`.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=self.features.dtype))
        out_of_cube = (pts < -1.0) | (pts > 1.0)
        if out_of_cube.any():
            self.clamped_queries += int(out_of_cube.any(axis=1).sum())
            pts = np.clip(pts, -1.0, 1.0)
        r = self.resolution
        g = _grid_coords(pts, r)
        i0 = np.floor(g).astype(np.int64)
        np.clip(i0, 0, r - 2, out=i0)
        f = g - i0
        idx = np.empty((len(pts), 8), dtype=np.int64)
        w = np.empty((len(pts), 8), dtype=self.features.dtype)
        corner = 0
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1.0 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1.0 - f[:, 2]
                    idx[:, corner] = ((i0[:, 0] + dx) * r + (i0[:, 1] + dy)) * r + (i0[:, 2] + dz)
                    w[:, corner] = wx * wy * wz
                    corner += 1
        return idx, w

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear feature lookup, shape (N, channels)."""
        idx, w = self.interp_weights(points)
        return np.einsum("nkc,nk->nc", self.features[idx], w)

    def sample_vjp(self, points: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """Scatter of upstream feature gradients back onto node features.

        Returns an array shaped like `features`; the contribution of each
        query lands on its 8 interpolation corners with its forward weights.
        """
        idx, w = self.interp_weights(points)
        up = np.atleast_2d(np.asarray(upstream, dtype=self.features.dtype))
        grad = np.zeros_like(self.features)
        np.add.at(grad, idx, w[:, :, None] * up[:, None, :])
        return grad


def sample_level(level: GridLevel, point: np.ndarray) -> np.ndarray:
    """Single-point trilinear sample (C-vector)."""
    return level.sample(np.atleast_2d(point))[0]


def sample_level_vjp(level: GridLevel, point: np.ndarray, upstream: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """Scatter contributions of one query: list of (node index, weight*upstream)."""
    idx, w = level.interp_weights(np.atleast_2d(point))
    up = np.asarray(upstream, dtype=level.features.dtype)
    return [(int(i), wk * up) for i, wk in zip(idx[0], w[0])]


@dataclass
class LatentGridPyramid:
    """Position grid hierarchy plus the single-level normal-direction grid."""

    position_levels: list[GridLevel]
    normal_level: GridLevel
    lambdas: list[float]
    learning_rates: list[float]
    normal_lambda: float
    normal_learning_rate: float

    @classmethod
    def create(cls, levels: int = DEFAULT_LEVELS,
               base_resolution: int = DEFAULT_BASE_RESOLUTION,
               resolution_step: int = DEFAULT_RESOLUTION_STEP,
               position_channels: int = POSITION_CHANNELS,
               normal_resolution: int = NORMAL_RESOLUTION,
               normal_channels: int = NORMAL_CHANNELS,
               lambda_base: float = LAMBDA_BASE, lambda_growth: float = LAMBDA_GROWTH,
               lr_base: float = GRID_LR_BASE, lr_growth: float = GRID_LR_GROWTH,
               dtype=np.float64) -> "LatentGridPyramid":
        resolutions = level_resolutions(levels, base_resolution, resolution_step)
        lams = level_lambdas(levels, lambda_base, lambda_growth)
        rates = level_learning_rates(levels, lr_base, lr_growth)
        return cls(
            position_levels=[GridLevel(r, position_channels, dtype=dtype) for r in resolutions],
            normal_level=GridLevel(normal_resolution, normal_channels, dtype=dtype),
            lambdas=lams,
            learning_rates=rates,
            # the normal grid has no published schedule; reuse the coarsest level's
            normal_lambda=lams[0],
            normal_learning_rate=rates[0],
        )

    @property
    def levels(self) -> int:
        return len(self.position_levels)

    def aggregate_position(self, points: np.ndarray) -> np.ndarray:
        """Mean of per-level samples: (N, position_channels)."""
        acc = self.position_levels[0].sample(points)
        for level in self.position_levels[1:]:
            acc += level.sample(points)
        return acc / self.levels

    def sample_normal(self, normals: np.ndarray) -> np.ndarray:
        """Normal-direction features: the grid is queried at the unit normal
        itself, so antipodal orientations read different features."""
        normals = np.atleast_2d(normals)
        lengths = np.linalg.norm(normals, axis=1)
        if np.abs(lengths - 1.0).max() > 1e-6:
            raise ValueError("sample_normal expects unit normals")
        return self.normal_level.sample(normals)


def aggregate_position(pyramid: LatentGridPyramid, point: np.ndarray) -> np.ndarray:
    """Single-point version of the pyramid's position aggregation."""
    return pyramid.aggregate_position(np.atleast_2d(point))[0]


def sample_normal(pyramid: LatentGridPyramid, normal: np.ndarray) -> np.ndarray:
    """Single-point version of the normal-direction lookup."""
    return pyramid.sample_normal(np.atleast_2d(normal))[0]


def build_laplacian(resolution: int) -> sp.csr_matrix:
    """Combinatorial graph Laplacian of the 6-connected resolution^3 lattice.

    Symmetric positive semidefinite; rows sum to zero; diagonal equals node
    degree and each lattice neighbor contributes -1.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    r = resolution
    n = r ** 3
    ids = np.arange(n).reshape(r, r, r)
    rows, cols = [], []
    for axis in range(3):
        lo = np.take(ids, np.arange(r - 1), axis=axis).ravel()
        hi = np.take(ids, np.arange(1, r), axis=axis).ravel()
        rows += [lo, hi]
        cols += [hi, lo]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    deg = sp.diags(np.asarray(adj.sum(axis=1)).ravel())
    return (deg - adj).tocsr()


class PreconditionerError(RuntimeError):
    """Raised when a smoothing solve fails to meet its residual contract."""


class GridPreconditioner:
    """Applies (I + lam*L)^-2 to per-node gradient fields of one level.

    backend "spectral" (default) diagonalizes the lattice Laplacian exactly
    with an orthonormal DCT-II per axis (L is a Kronecker sum of 1D path
    Laplacians, eigenvalues 4 sin^2(pi k / 2R)); "direct" factorizes
    I + lam*L once; "cg" runs Jacobi-scaled conjugate gradients. Every apply
    is verified against the sparse operator to a relative residual
    <= `check_tol`, else PreconditionerError. lam == 0 is an exact identity.
    """

    def __init__(self, resolution: int, lam: float, backend: str = "spectral",
                 tol: float = 1e-10, check_tol: float = 1e-8, maxiter: int = 2000):
        if lam < 0:
            raise ValueError("lam must be >= 0")
        self.resolution = resolution
        self.lam = float(lam)
        self.backend = backend
        self.tol = tol
        self.check_tol = check_tol
        self.maxiter = maxiter
        if lam > 0:
            lap = build_laplacian(resolution)
            self.operator = (sp.identity(lap.shape[0], format="csr") + lam * lap).tocsc()
            self._solve_lu = spla.factorized(self.operator) if backend == "direct" else None
            mu_axis = 4.0 * np.sin(np.pi * np.arange(resolution) / (2 * resolution)) ** 2
            self._mu = (mu_axis[:, None, None] + mu_axis[None, :, None]
                        + mu_axis[None, None, :])
        else:
            self.operator = None
            self._solve_lu = None

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        """One (I + lam*L)^-1 application with residual verification."""
        if self.backend == "spectral":
            r = self.resolution
            spec = sfft.dctn(rhs.reshape(r, r, r, -1), type=2, norm="ortho", axes=(0, 1, 2))
            spec /= (1.0 + self.lam * self._mu)[..., None]
            out = sfft.idctn(spec, type=2, norm="ortho", axes=(0, 1, 2)).reshape(rhs.shape)
        elif self.backend == "direct":
            out = self._solve_lu(rhs)
        elif self.backend == "cg":
            diag_inv = sp.diags(1.0 / self.operator.diagonal())
            out = np.empty_like(rhs)
            for c in range(rhs.shape[1]):
                x, info = spla.cg(self.operator, rhs[:, c], rtol=self.tol,
                                  maxiter=self.maxiter, M=diag_inv)
                if info != 0:
                    raise PreconditionerError(
                        f"cg did not converge (info={info}) at resolution {self.resolution}")
                out[:, c] = x
        else:
            raise ValueError(f"unknown preconditioner backend {self.backend!r}")
        norm_rhs = np.linalg.norm(rhs)
        if norm_rhs > 0:
            residual = np.linalg.norm(self.operator @ out - rhs) / norm_rhs
            if residual > self.check_tol:
                raise PreconditionerError(
                    f"solve residual {residual:.3e} exceeds {self.check_tol:.1e}")
        return out

    def apply(self, raw_grad: np.ndarray) -> np.ndarray:
        """Filtered gradient, same shape/dtype as `raw_grad`."""
        if not np.isfinite(raw_grad).all():
            raise ValueError("raw gradient contains non-finite values")
        if self.lam == 0.0:
            return raw_grad.copy()
        g = np.asarray(raw_grad, dtype=np.float64)
        squeeze = g.ndim == 1
        if squeeze:
            g = g[:, None]
        filtered = self._solve(self._solve(g))
        if squeeze:
            filtered = filtered[:, 0]
        return filtered.astype(raw_grad.dtype, copy=False)


def precondition(level: GridLevel, raw_grad: np.ndarray, lam: float,
                 backend: str = "spectral") -> np.ndarray:
    """One-shot (I + lam*L)^-2 filter for a level-shaped gradient field."""
    return GridPreconditioner(level.resolution, lam, backend=backend).apply(raw_grad)
