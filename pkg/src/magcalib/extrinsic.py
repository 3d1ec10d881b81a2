"""Two-step joint calibration: closed-form intrinsic solve inside an outer
Gauss-Newton iteration over the sensor's lever arm.

Each outer iteration projects the magnetometer to map coordinates using the
current lever-arm estimate, queries the field map (mean and confidence),
rotates the prediction back into the LiDAR frame, refits the affine
distortion in closed form, and then takes a damped Gauss-Newton step on the
lever arm using the analytic map gradient. Samples that project outside the
mapped volume are skipped (with an abort threshold) or abort the run,
depending on configuration.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .intrinsic import (
    AffineDistortion,
    RegressionProblem,
    select_lambda,
    solve_ols,
    solve_rrtls,
    solve_wrrtls,
    weights_from_variance,
)

_COST_SLACK = 1e-9       # accepted steps may not raise the cost by more than this
_COND_DAMPING = 1e8      # normal-system condition number that triggers damping
_MAX_REJECTS = 25
_FLAT_NORMAL = 1e-9      # trace(J'J) below this means the field carries no signal


class CalibrationError(RuntimeError):
    """Calibration could not run (bad input, too many samples off the map)."""


class NonConvergenceError(CalibrationError):
    """The normal system stayed singular even after damping escalation."""


@dataclass(frozen=True)
class CalibrationConfig:
    """Optimizer knobs.

    ``lambda_policy`` is ``"fixed"`` (use ``lambda_value``) or ``"l_curve"``
    (re-select the ridge factor every iteration). ``intrinsic_solver`` picks
    the inner closed-form solver: ``wrrtls`` (weighted, default), ``rrtls``
    (unweighted), or ``ols``. ``out_of_map_policy`` is ``skip_sample`` or
    ``abort``.
    """

    max_iterations: int = 100
    step_tolerance: float = 1e-5
    damping: float = 0.0
    lambda_policy: str = "fixed"
    lambda_value: float = 1e-6
    tsvd_rank: int = 4
    out_of_map_policy: str = "skip_sample"
    intrinsic_solver: str = "wrrtls"
    measurement_noise: float = 0.1  # uT, folded into the per-sample weights

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.lambda_policy not in ("fixed", "l_curve"):
            raise ValueError(f"unknown lambda_policy {self.lambda_policy!r}")
        if self.out_of_map_policy not in ("skip_sample", "abort"):
            raise ValueError(f"unknown out_of_map_policy {self.out_of_map_policy!r}")
        if self.intrinsic_solver not in ("wrrtls", "rrtls", "ols"):
            raise ValueError(f"unknown intrinsic_solver {self.intrinsic_solver!r}")


@dataclass(frozen=True, eq=False)
class CalibrationInput:
    """Everything one sensor's calibration needs.

    ``field_map`` is any object with ``query_many``/``gradient_many`` (the GP
    map or the multilinear baseline); ``lidar_poses`` the per-sample LiDAR
    poses (lidar -> map); ``measurements`` the (N, 3) raw magnetometer
    readings in uT; ``initial_translation`` the lever-arm starting guess [m].
    """

    field_map: object
    lidar_poses: list
    measurements: np.ndarray
    initial_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        meas = np.asarray(self.measurements, float).reshape(-1, 3)
        object.__setattr__(self, "measurements", meas)
        object.__setattr__(self, "initial_translation",
                           np.asarray(self.initial_translation, float).reshape(3))
        if len(self.lidar_poses) != meas.shape[0]:
            raise CalibrationError("lidar_poses and measurements must pair up")
        if meas.shape[0] < 5:
            raise CalibrationError("need at least 5 samples to calibrate")

    def rotations(self) -> np.ndarray:
        return np.array([p.rotation for p in self.lidar_poses])

    def translations(self) -> np.ndarray:
        return np.array([p.translation for p in self.lidar_poses])


@dataclass
class CalibrationResult:
    """Output of :func:`calibrate`.

    ``translation`` is the estimated lever arm [m], ``distortion`` the
    estimated affine corruption, ``trace`` the per-iteration list of
    (lever-arm copy, total squared residual). ``skipped_samples`` counts
    off-map samples at the final iterate.
    """

    translation: np.ndarray
    distortion: AffineDistortion
    converged: bool
    iterations: int
    final_rms: float
    trace: list
    skipped_samples: int = 0
    message: str = ""


def classify_success(t_hat, t_gt) -> str:
    """Bucket an extrinsic estimate by distance to truth: within 2 cm is
    ``small``, within 5 cm ``medium``, otherwise ``failure``."""
    dist = float(np.linalg.norm(np.asarray(t_hat, float) - np.asarray(t_gt, float)))
    if dist <= 0.02:
        return "small"
    if dist <= 0.05:
        return "medium"
    return "failure"


# ---------------------------------------------------------------------------
# one evaluation of the two-step model at a fixed lever arm


@dataclass
class _EvalState:
    inside: np.ndarray          # (N,) bool
    predicted_ref: np.ndarray   # (n_in, 3) lidar-frame map prediction
    weights: np.ndarray         # (n_in,)
    distortion: AffineDistortion
    residuals: np.ndarray       # (n_in, 3)
    cost: float                 # total squared residual
    ridge: float

    @property
    def mean_cost(self) -> float:
        return self.cost / max(self.residuals.shape[0], 1)


def _query_masked(field_map, positions: np.ndarray, policy: str):
    means, variances, inside = field_map.query_many(positions, allow_outside=True)
    n_in = int(inside.sum())
    if n_in == 0:
        raise CalibrationError("all samples project outside the mapped volume")
    if policy == "abort" and n_in < positions.shape[0]:
        raise CalibrationError(
            f"{positions.shape[0] - n_in} samples project outside the map "
            "(out_of_map_policy=abort)")
    if n_in < 0.5 * positions.shape[0]:
        raise CalibrationError(
            f"more than half the samples ({positions.shape[0] - n_in}/"
            f"{positions.shape[0]}) project outside the mapped volume")
    return means, variances, inside


def _evaluate(inp: CalibrationInput, rotations, translations, t: np.ndarray,
              config: CalibrationConfig,
              distortion: AffineDistortion | None = None) -> _EvalState:
    positions = rotations @ t + translations
    means, variances, inside = _query_masked(inp.field_map, positions,
                                             config.out_of_map_policy)
    rot_in = rotations[inside]
    predicted_ref = np.einsum("nji,nj->ni", rot_in, means[inside])
    measured = inp.measurements[inside]

    if variances is None or config.intrinsic_solver != "wrrtls":
        weights = np.ones(predicted_ref.shape[0])
    else:
        weights = weights_from_variance(variances[inside], config.measurement_noise)

    ridge = config.lambda_value
    if distortion is None:
        prob = RegressionProblem.from_pairs(predicted_ref, measured, weights,
                                            ridge, config.tsvd_rank)
        if config.intrinsic_solver == "ols":
            distortion = solve_ols(prob)
        elif config.intrinsic_solver == "rrtls":
            if config.lambda_policy == "l_curve":
                ridge = select_lambda(prob)
                prob = prob.with_ridge(ridge)
            distortion = solve_rrtls(prob)
        else:
            if config.lambda_policy == "l_curve":
                ridge = select_lambda(prob)
                prob = prob.with_ridge(ridge)
            distortion = solve_wrrtls(prob)

    residuals = predicted_ref @ distortion.gain.T + distortion.bias - measured
    cost = float(np.sum(residuals**2))
    return _EvalState(inside, predicted_ref, weights, distortion, residuals,
                      cost, ridge)


def residual(inp: CalibrationInput, t, distortion: AffineDistortion,
             config: CalibrationConfig | None = None) -> np.ndarray:
    """Per-sample residuals (n_in, 3): distorted map prediction minus
    measurement, at lever arm ``t`` with a fixed distortion."""
    config = config or CalibrationConfig()
    state = _evaluate(inp, inp.rotations(), inp.translations(),
                      np.asarray(t, float).reshape(3), config, distortion)
    return state.residuals


def jacobian(inp: CalibrationInput, t, distortion: AffineDistortion,
             config: CalibrationConfig | None = None) -> np.ndarray:
    """Stacked (3*n_in, 3) derivative of the residuals in the lever arm.

    Per sample: gain @ R^T @ (map gradient at the projected position) @ R,
    the chain of the rotate-back step with the map-frame projection.
    """
    config = config or CalibrationConfig()
    rotations = inp.rotations()
    translations = inp.translations()
    tvec = np.asarray(t, float).reshape(3)
    positions = rotations @ tvec + translations
    _, _, inside = _query_masked(inp.field_map, positions, config.out_of_map_policy)
    grads, _ = inp.field_map.gradient_many(positions[inside], allow_outside=False)
    rot_in = rotations[inside]
    blocks = np.einsum("ab,nbc,ncd,nde->nae",
                       distortion.gain, rot_in.transpose(0, 2, 1), grads, rot_in)
    return blocks.reshape(-1, 3)


def gauss_newton_step(jac: np.ndarray, residuals: np.ndarray,
                      damping: float = 0.0) -> np.ndarray:
    """Solve the 3x3 normal system for the lever-arm increment.

    Levenberg damping is applied automatically when the normal matrix is
    ill-conditioned, escalating tenfold until solvable; a system that stays
    singular raises :class:`NonConvergenceError`.
    """
    jac = np.asarray(jac, float).reshape(-1, 3)
    e = np.asarray(residuals, float).reshape(-1)
    if jac.shape[0] != e.shape[0]:
        raise ValueError("jacobian and residual sizes disagree")
    normal = jac.T @ jac
    gradient = jac.T @ e
    mu = float(damping)
    base = max(np.trace(normal) / 3.0, np.finfo(float).tiny) * 1e-6
    if mu == 0.0 and np.linalg.cond(normal) > _COND_DAMPING:
        mu = base
    for _ in range(60):
        try:
            step = np.linalg.solve(normal + mu * np.eye(3), -gradient)
        except np.linalg.LinAlgError:
            mu = base if mu == 0.0 else mu * 10.0
            continue
        if np.all(np.isfinite(step)):
            return step
        mu = base if mu == 0.0 else mu * 10.0
    raise NonConvergenceError("normal system is singular even after damping escalation")


def calibrate(inp: CalibrationInput, config: CalibrationConfig | None = None) -> CalibrationResult:
    """Run the full two-step optimization from ``inp.initial_translation``.

    Iterates until the lever-arm increment drops below
    ``config.step_tolerance`` or ``config.max_iterations`` is hit. Steps that
    would raise the cost are rejected and retried with escalated Levenberg
    damping; a flat field (no usable gradient) or exhausted damping reports
    ``converged=False`` rather than raising.
    """
    config = config or CalibrationConfig()
    rotations = inp.rotations()
    translations = inp.translations()
    t = np.array(inp.initial_translation, float)

    state = _evaluate(inp, rotations, translations, t, config)
    trace = [(t.copy(), state.cost)]
    converged = False
    message = ""
    mu = float(config.damping)
    iterations = 0

    for _ in range(config.max_iterations):
        positions = rotations @ t + translations
        grads, _ = inp.field_map.gradient_many(positions[state.inside],
                                               allow_outside=False)
        rot_in = rotations[state.inside]
        jac = np.einsum("ab,nbc,ncd,nde->nae",
                        state.distortion.gain, rot_in.transpose(0, 2, 1),
                        grads, rot_in).reshape(-1, 3)
        normal = jac.T @ jac
        gradient_vec = jac.T @ state.residuals.reshape(-1)
        if np.trace(normal) < _FLAT_NORMAL:
            message = "field gradient is degenerate; lever arm is unobservable"
            break

        base = np.trace(normal) / 3.0 * 1e-6
        if mu == 0.0 and np.linalg.cond(normal) > _COND_DAMPING:
            mu = base

        accepted = False
        step = np.zeros(3)
        for _reject in range(_MAX_REJECTS):
            try:
                step = np.linalg.solve(normal + mu * np.eye(3), -gradient_vec)
            except np.linalg.LinAlgError:
                mu = base if mu == 0.0 else mu * 10.0
                continue
            candidate = t + step
            try:
                cand_state = _evaluate(inp, rotations, translations, candidate, config)
            except CalibrationError:
                mu = base if mu == 0.0 else mu * 10.0
                continue
            slack = _COST_SLACK / max(cand_state.residuals.shape[0], 1)
            if cand_state.mean_cost <= state.mean_cost + slack:
                accepted = True
                break
            mu = base if mu == 0.0 else mu * 10.0
        if not accepted:
            message = "damping escalation exhausted without a descent step"
            break

        t = t + step
        state = cand_state
        iterations += 1
        trace.append((t.copy(), state.cost))
        mu = 0.0 if mu <= base else mu * 0.1
        if np.linalg.norm(step) < config.step_tolerance:
            converged = True
            break
    else:
        message = "max_iterations reached"

    n_in = state.residuals.shape[0]
    final_rms = float(np.sqrt(state.cost / max(n_in, 1)))
    skipped = int(state.inside.size - state.inside.sum())
    if skipped:
        warnings.warn(f"{skipped} samples projected outside the map at the final "
                      "iterate", RuntimeWarning)
    return CalibrationResult(
        translation=t,
        distortion=state.distortion,
        converged=converged,
        iterations=iterations,
        final_rms=final_rms,
        trace=trace,
        skipped_samples=skipped,
        message=message,
    )
