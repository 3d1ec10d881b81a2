"""Affine magnetometer distortion estimation and compensation.

A distorted sensor reports ``b_meas = gain @ b_true + bias``. Given paired
(true, measured) readings the (gain, bias) pair is recovered by linear
regression; four solvers of increasing robustness are provided:

  * ordinary least squares,
  * total least squares via truncated SVD of the stacked data matrix,
  * its ridge-regularized variant,
  * the weighted ridge-regularized variant, whose closed form is
    ``A = Yb' W^2 Xb (Xb' W^2 Xb + ridge*I)^-1`` on the rank-truncated
    reconstructions Yb, Xb of the observations and the design.

The homogeneous column of the design carries no noise, so after rank
truncation it is re-imposed exactly (the bias estimate would otherwise
absorb reconstruction error).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import as_mat3, as_vec3

VARIANCE_FLOOR = 1e-6  # uT^2, applied before inverting GP variances into weights
DEFAULT_LAMBDA_GRID = np.logspace(-8.0, 2.0, 16)


class RegressionError(ValueError):
    """Regression input is degenerate or a solve failed."""


@dataclass(frozen=True, eq=False)
class AffineDistortion:
    """The multiplicative/additive corruption of a magnetometer.

    ``gain`` is the 3x3 soft-iron/misalignment composite (unitless) and
    ``bias`` the additive hard-iron offset in uT. ``gain`` must stay
    invertible so readings can be compensated.
    """

    gain: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gain", as_mat3(self.gain, "gain"))
        object.__setattr__(self, "bias", as_vec3(self.bias, "bias"))
        if abs(np.linalg.det(self.gain)) <= 1e-9:
            raise RegressionError("gain matrix is numerically singular")

    @classmethod
    def identity(cls) -> "AffineDistortion":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, b_true) -> np.ndarray:
        """Distort a true reading: gain @ b + bias."""
        return self.gain @ as_vec3(b_true, "reading") + self.bias

    def apply_many(self, b_true: np.ndarray) -> np.ndarray:
        b = np.asarray(b_true, float).reshape(-1, 3)
        return b @ self.gain.T + self.bias


def compensate(dist: AffineDistortion, b_meas) -> np.ndarray:
    """Undo a distortion: gain^-1 (b_meas - bias)."""
    cond = np.linalg.cond(dist.gain)
    if not np.isfinite(cond) or cond > 1e12:
        raise RegressionError(f"gain matrix is near-singular (cond={cond:.3g})")
    return np.linalg.solve(dist.gain, as_vec3(b_meas, "reading") - dist.bias)


def compensate_many(dist: AffineDistortion, b_meas: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(dist.gain)
    if not np.isfinite(cond) or cond > 1e12:
        raise RegressionError(f"gain matrix is near-singular (cond={cond:.3g})")
    b = np.asarray(b_meas, float).reshape(-1, 3)
    return np.linalg.solve(dist.gain, (b - dist.bias).T).T


def weights_from_variance(variances: np.ndarray,
                          measurement_noise: float = 0.0) -> np.ndarray:
    """Per-sample weights from GP predictive variances.

    One scalar per sample: the inverse of the summed per-axis map variance
    plus the calibration data's own measurement noise (3 axes worth). The
    noise term keeps the weight spread honest where the map is very
    confident; the floor guards the noise-free limit.
    """
    var = np.asarray(variances, float)
    total = var.sum(axis=-1) if var.ndim == 2 else var
    total = total + 3.0 * measurement_noise**2
    return 1.0 / np.maximum(total, VARIANCE_FLOOR)


@dataclass(frozen=True, eq=False)
class RegressionProblem:
    """Paired readings arranged for the affine solvers.

    ``design`` rows are [b_true_x, b_true_y, b_true_z, 1]; ``observed`` rows
    are the matching distorted readings. ``weights`` are per-sample scalars
    (already inverse-variance); ``ridge`` the regularization factor; and
    ``tsvd_rank`` the rank kept when denoising the stacked data matrix.
    """

    design: np.ndarray
    observed: np.ndarray
    weights: np.ndarray
    ridge: float = 0.0
    tsvd_rank: int = 4

    def __post_init__(self):
        design = np.asarray(self.design, float)
        observed = np.asarray(self.observed, float)
        if design.ndim != 2 or design.shape[1] != 4:
            raise RegressionError(f"design must be (N, 4), got {design.shape}")
        if observed.shape != (design.shape[0], 3):
            raise RegressionError(
                f"observed must be (N, 3) matching design, got {observed.shape}")
        if design.shape[0] < 5:
            raise RegressionError("need at least 5 reading pairs")
        weights = np.asarray(self.weights, float).reshape(-1)
        if weights.shape[0] != design.shape[0]:
            raise RegressionError("weights length must match sample count")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise RegressionError("weights must be finite and > 0")
        if not (np.all(np.isfinite(design)) and np.all(np.isfinite(observed))):
            raise RegressionError("readings must be finite")
        if self.ridge < 0:
            raise RegressionError("ridge must be >= 0")
        if not 1 <= int(self.tsvd_rank) <= 7:
            raise RegressionError("tsvd_rank must be in [1, 7]")
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_pairs(cls, b_true: np.ndarray, b_meas: np.ndarray,
                   weights: np.ndarray | None = None, ridge: float = 0.0,
                   tsvd_rank: int = 4) -> "RegressionProblem":
        b_true = np.asarray(b_true, float).reshape(-1, 3)
        design = np.hstack([b_true, np.ones((b_true.shape[0], 1))])
        if weights is None:
            weights = np.ones(b_true.shape[0])
        return cls(design, np.asarray(b_meas, float).reshape(-1, 3),
                   weights, ridge, tsvd_rank)

    @property
    def n_samples(self) -> int:
        return self.design.shape[0]

    def with_ridge(self, ridge: float) -> "RegressionProblem":
        return RegressionProblem(self.design, self.observed, self.weights,
                                 ridge, self.tsvd_rank)


@dataclass(frozen=True)
class SolverDiagnostics:
    """Conditioning and fit-quality summary of one regression solve."""

    condition_number: float
    singular_values: np.ndarray
    residual_rms: float
    ridge: float


def _stacked(prob: RegressionProblem) -> np.ndarray:
    """Observations and design side by side: (N, 7) = [observed | design]."""
    return np.hstack([prob.observed, prob.design])


def tsvd_reconstruct(matrix: np.ndarray, rank: int) -> np.ndarray:
    """Best rank-``rank`` reconstruction of ``matrix`` in the Frobenius norm."""
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    rank = min(rank, s.size)
    return (u[:, :rank] * s[:rank]) @ vt[:rank]


def _truncated_parts(prob: RegressionProblem):
    """Rank-truncated (observed, design) with the exact ones column restored."""
    recon = tsvd_reconstruct(_stacked(prob), int(prob.tsvd_rank))
    obs_bar = recon[:, :3]
    design_bar = recon[:, 3:].copy()
    design_bar[:, 3] = 1.0  # the homogeneous coordinate carries no noise
    return obs_bar, design_bar


def solve_ols(prob: RegressionProblem) -> AffineDistortion:
    """Ordinary least squares; ignores weights and the ridge factor."""
    coeffs, _, rank, sv = np.linalg.lstsq(prob.design, prob.observed, rcond=None)
    if rank < 4:
        cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        raise RegressionError(f"design matrix is rank deficient (cond={cond:.3g})")
    a = coeffs.T  # (3, 4)
    return AffineDistortion(a[:, :3], a[:, 3])


def solve_tls(prob: RegressionProblem) -> AffineDistortion:
    """Total least squares via the truncated-SVD nullspace partition.

    Noise in both the design and the observations is absorbed by finding the
    closest low-rank stacked matrix and reading the gain off the trailing
    right-singular subspace. The homogeneous column carries no noise, so it
    is projected out first (both sides are mean-centered, mixed LS-TLS) and
    the bias follows from the means; the centered stack keeps rank
    ``tsvd_rank - 1``.
    """
    if prob.n_samples < 7:
        raise RegressionError("total least squares needs at least 7 samples")
    rank = int(prob.tsvd_rank)
    if rank > 4:
        raise RegressionError(
            "tsvd_rank > 4 leaves fewer than 3 trailing singular directions; "
            "the gain cannot be identified")
    x_mean = prob.design[:, :3].mean(axis=0)
    y_mean = prob.observed.mean(axis=0)
    centered = np.hstack([prob.observed - y_mean, prob.design[:, :3] - x_mean])
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    trailing = vt[max(rank - 1, 1):].T   # (6, >=3)
    top = trailing[:3]                   # observation rows
    bottom = trailing[3:]                # design rows
    if np.linalg.matrix_rank(top, tol=1e-12) < 3:
        raise RegressionError(
            "degenerate trailing singular subspace; TLS solution is not unique")
    mix, _, _, _ = np.linalg.lstsq(top, -np.eye(3), rcond=None)
    gain = (bottom @ mix).T              # (3, 3)
    bias = y_mean - gain @ x_mean
    return AffineDistortion(gain, bias)


def solve_wrrtls(prob: RegressionProblem) -> AffineDistortion:
    """Weighted ridge-regularized total least squares (closed form).

    Operating on the rank-truncated reconstructions, solves
    ``min ||W (Xb A^T - Yb)||_F^2 + ridge ||A||_F^2``. With unit weights this
    is the ridge-regularized TLS baseline; with additionally ridge=0 and
    tsvd_rank=7 it reduces to ordinary least squares.
    """
    obs_bar, design_bar = _truncated_parts(prob)
    w = prob.weights
    xw = design_bar * w[:, None]
    yw = obs_bar * w[:, None]
    normal = xw.T @ xw + prob.ridge * np.eye(4)
    rhs = xw.T @ yw  # (4, 3)
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond > 1e14:
        raise RegressionError(
            f"weighted normal matrix is numerically singular (cond={cond:.3g}); "
            "increase the ridge factor")
    a = np.linalg.solve(normal, rhs).T  # (3, 4)
    return AffineDistortion(a[:, :3], a[:, 3])


def solve_rrtls(prob: RegressionProblem) -> AffineDistortion:
    """Ridge-regularized TLS: the weighted solver with uniform weights."""
    uniform = RegressionProblem(prob.design, prob.observed,
                                np.ones(prob.n_samples), prob.ridge, prob.tsvd_rank)
    return solve_wrrtls(uniform)


def _lcurve_point(prob: RegressionProblem, ridge: float):
    dist = solve_wrrtls(prob.with_ridge(ridge))
    obs_bar, design_bar = _truncated_parts(prob)
    a = np.hstack([dist.gain, dist.bias[:, None]])
    resid = (design_bar @ a.T - obs_bar) * prob.weights[:, None]
    return np.linalg.norm(resid), np.linalg.norm(a)


def _smooth(values: np.ndarray, half_width: int) -> np.ndarray:
    if half_width < 1:
        return values
    kernel = np.ones(2 * half_width + 1)
    kernel /= kernel.sum()
    padded = np.concatenate([np.repeat(values[0], half_width), values,
                             np.repeat(values[-1], half_width)])
    return np.convolve(padded, kernel, mode="valid")


def select_lambda(prob: RegressionProblem, grid: np.ndarray | None = None) -> float:
    """Pick the ridge factor at the L-curve corner.

    The corner is the maximum-curvature point of the (log residual norm,
    log solution norm) curve of the weighted problem. The curve is traced on
    a dense internal sweep spanning the requested grid (the handful of grid
    points alone make a noisy curvature estimate) and the corner is snapped
    back to the nearest grid value. A curve with no usable corner falls back
    to the smallest grid value.
    """
    grid = DEFAULT_LAMBDA_GRID if grid is None else np.asarray(grid, float)
    grid = np.sort(grid)
    if grid.size == 1:
        return float(grid[0])
    if grid.size < 3:
        warnings.warn("lambda grid too short for corner detection; using smallest",
                      RuntimeWarning)
        return float(grid[0])

    dense = np.logspace(np.log10(grid[0]), np.log10(grid[-1]), 160)
    pts = [_lcurve_point(prob, lam) for lam in dense]
    log_rho = _smooth(np.log(np.maximum([p[0] for p in pts], 1e-300)), 3)
    log_eta = _smooth(np.log(np.maximum([p[1] for p in pts], 1e-300)), 3)
    if np.ptp(log_eta) < np.log(3.0):
        # solution norm never blows up: well conditioned, no regularization needed
        return float(grid[0])
    dx = np.gradient(log_rho)
    dy = np.gradient(log_eta)
    ddx = np.gradient(dx)
    ddy = np.gradient(dy)
    denom = (dx * dx + dy * dy) ** 1.5
    with np.errstate(divide="ignore", invalid="ignore"):
        curvature = (dx * ddy - dy * ddx) / denom
    curvature[~np.isfinite(curvature)] = -np.inf
    interior = curvature[5:-5]
    if interior.size == 0 or np.max(interior) <= 0:
        warnings.warn("L-curve has no corner; using smallest lambda", RuntimeWarning)
        return float(grid[0])
    corner_lam = dense[5 + int(np.argmax(interior))]
    snapped = grid[int(np.argmin(np.abs(np.log10(grid) - np.log10(corner_lam))))]
    return float(snapped)


def problem_diagnostics(prob: RegressionProblem,
                        dist: AffineDistortion) -> SolverDiagnostics:
    """Conditioning of the weighted design and the residual RMS of a fit."""
    _, design_bar = _truncated_parts(prob)
    weighted = design_bar * prob.weights[:, None]
    sv = np.linalg.svd(weighted, compute_uv=False)
    retained = sv[sv > sv[0] * 1e-15] if sv[0] > 0 else sv
    cond = float(sv[0] / retained[-1]) if retained.size else np.inf
    resid = prob.design @ np.hstack([dist.gain, dist.bias[:, None]]).T - prob.observed
    rms = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return SolverDiagnostics(max(cond, 1.0), retained, rms, prob.ridge)
