"""Error-state EKF with IMU prediction and an IRLS M-estimation update.

State is position, velocity, and world-from-body rotation; the 9x9
covariance tracks the error state [dp, dv, dtheta] with a right-multiplied
rotation error (C = C_nominal @ exp(skew(dtheta))). The measurement update
replaces the quadratic cost with a robust one (Geman-McClure by default)
solved by a fixed small number of reweighting iterations, which keeps the
per-update cost bounded for embedded-style deployment.

All operations are pure: they return a new :class:`FilterState`. A stream
of predict/update calls on one state sequence must be serialized by the
caller; the bias model passed to :func:`correct_measurement` is only read.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .biasnet import MlpModel, forward
from .geometry import Pose

DEFAULT_IRLS_ITERATIONS = 2

_COST_IDS = {"quadratic": _kernels.COST_QUADRATIC, "gm": _kernels.COST_GM,
             "huber": _kernels.COST_HUBER, "cauchy": _kernels.COST_CAUCHY}


class CovarianceDegenerate(RuntimeError):
    """Prior covariance is not positive definite (Cholesky failed)."""


@dataclass(slots=True)
class FilterState:
    """Nominal state plus error-state covariance."""

    p: np.ndarray
    v: np.ndarray
    C: np.ndarray
    P: np.ndarray

    @classmethod
    def create(cls, p=(0.0, 0.0, 0.0), v=(0.0, 0.0, 0.0), C=None, P=None,
               pos_std=0.1, vel_std=0.1, att_std=0.05) -> "FilterState":
        """Validated construction with a diagonal covariance default."""
        p = np.asarray(p, dtype=float).reshape(3)
        v = np.asarray(v, dtype=float).reshape(3)
        C = np.eye(3) if C is None else np.asarray(C, dtype=float).reshape(3, 3)
        if P is None:
            P = np.diag([pos_std**2] * 3 + [vel_std**2] * 3 + [att_std**2] * 3)
        else:
            P = np.asarray(P, dtype=float).reshape(9, 9)
        if np.max(np.abs(C.T @ C - np.eye(3))) > 1e-6:
            raise ValueError("C must be a rotation matrix")
        if np.max(np.abs(P - P.T)) > 1e-9:
            raise ValueError("P must be symmetric")
        return cls(p=p, v=v, C=C, P=0.5 * (P + P.T))


@dataclass(frozen=True)
class ImuSample:
    """Body-frame specific force and angular rate at one timestamp."""

    accel: np.ndarray
    gyro: np.ndarray
    timestamp: float

    def __post_init__(self):
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float))


@dataclass(frozen=True)
class RobustCost:
    """Robust cost selector: quadratic, Geman-McClure, Huber, or Cauchy."""

    kind: str
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in _COST_IDS:
            raise ValueError(f"unknown robust cost {self.kind!r}")
        if self.kind in ("huber", "cauchy") and self.param <= 0.0:
            raise ValueError(f"{self.kind} parameter must be positive")

    @classmethod
    def quadratic(cls):
        return cls("quadratic")

    @classmethod
    def gm(cls):
        return cls("gm")

    @classmethod
    def huber(cls, delta: float = 1.345):
        return cls("huber", delta)

    @classmethod
    def cauchy(cls, c: float = 2.3849):
        return cls("cauchy", c)


@dataclass(frozen=True)
class NoiseConfig:
    """Process and measurement noise levels.

    ``accel_density``/``gyro_density`` are white-noise densities
    ((m/s^2)/sqrt(Hz), (rad/s)/sqrt(Hz)); the per-step process noise is
    built from them at each dt unless ``q_matrix`` provides an explicit
    9x9 per-step covariance.
    """

    accel_density: float = 0.02
    gyro_density: float = 0.002
    sigma_uwb: float = 0.1
    q_matrix: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.sigma_uwb <= 0.0:
            raise ValueError("sigma_uwb must be positive")
        if self.q_matrix is not None:
            Q = np.asarray(self.q_matrix, dtype=float)
            if Q.shape != (9, 9):
                raise ValueError("q_matrix must be 9x9")
            if np.max(np.abs(Q - Q.T)) > 1e-9 or np.linalg.eigvalsh(Q).min() < -1e-12:
                raise ValueError("q_matrix must be symmetric PSD")
            object.__setattr__(self, "q_matrix", 0.5 * (Q + Q.T))


_ZERO_Q = np.zeros((9, 9))

# Local bindings keep the per-call dispatch cost of the hot path low.
_predict_kernel = _kernels.predict_kernel
_irls_update_kernel = _kernels.irls_update_kernel


def robust_weight(cost: RobustCost, e):
    """IRLS weight w(e) = rho'(e)/e for the selected cost; w(0) = 1."""
    e = np.asarray(e, dtype=float)
    if cost.kind == "gm":
        w = 1.0 / (1.0 + e * e) ** 2
    elif cost.kind == "huber":
        ae = np.abs(e)
        w = np.where(ae <= cost.param, 1.0, cost.param / np.maximum(ae, 1e-300))
    elif cost.kind == "cauchy":
        w = 1.0 / (1.0 + (e / cost.param) ** 2)
    else:
        w = np.ones_like(e)
    return float(w) if w.ndim == 0 else w


def predict(state: FilterState, imu: ImuSample, dt: float,
            noise: NoiseConfig) -> FilterState:
    """Propagate the state through one IMU sample over ``dt`` seconds."""
    if dt <= 0.0:
        raise ValueError("invalid step: dt must be positive")
    qm = noise.q_matrix
    p, v, C, P, status = _predict_kernel(
        state.p, state.v, state.C, state.P,
        imu.accel, imu.gyro, dt,
        noise.accel_density * noise.accel_density,
        noise.gyro_density * noise.gyro_density,
        _ZERO_Q if qm is None else qm, qm is not None,
    )
    if status:
        raise ValueError("invalid input: non-finite IMU sample")
    return FilterState(p, v, C, P)


def correct_measurement(d_raw: float, model: MlpModel, chi) -> float:
    """Subtract the network's predicted bias from a raw TDOA value."""
    return float(d_raw) - forward(model, chi)


def m_update(prior: FilterState, meas, corrected: float,
             anchors: tuple[Pose, Pose], noise: NoiseConfig,
             cost: RobustCost, iterations: int = DEFAULT_IRLS_ITERATIONS,
             ) -> FilterState:
    """Robust scalar-TDOA measurement update.

    Runs ``iterations`` reweighting passes (the prior covariance is
    Cholesky-factored once; only the robust weights change), then applies
    the final weighted gain to the prior innovation ``corrected - g(prior)``.
    With the quadratic cost this reduces exactly to the textbook EKF update
    for any iteration count.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    p, v, C, P, status = _irls_update_kernel(
        prior.p, prior.v, prior.C, prior.P,
        float(corrected),
        anchors[0].position, anchors[1].position,
        noise.sigma_uwb,
        _COST_IDS[cost.kind], cost.param,
        iterations,
    )
    if status:
        if status == _kernels.STATUS_NOT_PD:
            raise CovarianceDegenerate(
                "covariance degenerate: prior not positive definite")
        if status == _kernels.STATUS_SINGULAR:
            raise ValueError("singular geometry: tag coincides with an anchor")
        raise ValueError("invalid input: non-finite measurement")
    return FilterState(p, v, C, P)
