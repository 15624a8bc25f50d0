"""Deterministic flight, IMU, and TDOA data generation.

Everything here is seeded and reproducible: trajectories are analytic
(sums of products of sinusoids, so velocity and acceleration are exact),
IMU streams are the inverse of the filter's motion model plus seeded white
noise, and TDOA streams carry a known ground-truth bias from a smooth
synthetic antenna-pattern stand-in, plus optional multipath-style outliers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .estimator import ImuSample
from .geometry import (
    GRAVITY,
    Pose,
    quat_to_rotation,
    rotation_to_ypr,
    ypr_to_rotation,
    yaw_rotation,
)
from .tdoa import MEASUREMENT_SLACK

DEFAULT_ARENA = ((-3.5, -4.0, 0.0), (3.5, 4.0, 3.0))  # 7m x 8m x 3m

DATASET_HEADER = ("t,anchor_i,anchor_j,d_raw,tag_px,tag_py,tag_pz,"
                  "tag_qw,tag_qx,tag_qy,tag_qz,bias_true,is_outlier")

# Feature column layout shared with the bias model input.
COL_DP_I = slice(0, 3)
COL_DP_J = slice(3, 6)
COL_ALPHA = slice(6, 10)   # [alpha_Ai, alpha_Aj, alpha_Ti, alpha_Tj]
COL_BETA = slice(10, 14)   # [beta_Ai, beta_Aj, beta_Ti, beta_Tj]


# ---------------------------------------------------------------------------
# Synthetic bias oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiasParams:
    """Gains of the synthetic pose-dependent bias (meters)."""

    k1: float = 0.15
    k2: float = 0.10
    k3: float = 0.05

    @classmethod
    def zero(cls) -> "BiasParams":
        return cls(0.0, 0.0, 0.0)


def synth_bias_batch(X: np.ndarray, params: BiasParams) -> np.ndarray:
    """Ground-truth bias for each row of a (N, 14) feature matrix.

    Smooth, bounded (|b| <= 2*k1 + 2*k2 + k3), and antisymmetric under
    swapping the anchor roles, like a range-difference bias must be.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    a_ai, a_aj = X[:, 6], X[:, 7]
    b_ai, b_aj = X[:, 10], X[:, 11]
    b_ti, b_tj = X[:, 12], X[:, 13]
    ri = np.linalg.norm(X[:, COL_DP_I], axis=1)
    rj = np.linalg.norm(X[:, COL_DP_J], axis=1)
    return (params.k1 * (np.sin(b_ai) * np.cos(a_ai) - np.sin(b_aj) * np.cos(a_aj))
            + params.k2 * (np.sin(2.0 * b_ti) - np.sin(2.0 * b_tj))
            + params.k3 * (ri - rj) / (1.0 + ri + rj))


def synth_bias(chi, params: BiasParams = BiasParams()) -> float:
    """Scalar ground-truth bias for one feature vector."""
    x = chi.as_array() if hasattr(chi, "as_array") else np.asarray(chi, dtype=float)
    return float(synth_bias_batch(x[None, :], params)[0])


# ---------------------------------------------------------------------------
# Anchor constellations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constellation:
    """Named set of anchors with surveyed poses."""

    anchors: tuple[tuple[int, Pose], ...]
    name: str = "unnamed"

    def __post_init__(self):
        ids = [a[0] for a in self.anchors]
        if len(set(ids)) != len(ids):
            raise ValueError("anchor ids must be unique")

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def ids(self) -> list[int]:
        return [a[0] for a in self.anchors]

    def pose(self, anchor_id: int) -> Pose:
        for aid, pose in self.anchors:
            if aid == anchor_id:
                return pose
        raise KeyError(f"unknown anchor id {anchor_id}")

    def positions(self) -> np.ndarray:
        return np.array([p.position for _, p in self.anchors])

    def rotations(self) -> np.ndarray:
        return np.array([p.rotation for _, p in self.anchors])

    def round_robin_pairs(self) -> list[tuple[int, int]]:
        """Adjacent index pairs (0,1),(1,2),...,(m-1,0) as anchor ids."""
        ids = self.ids
        m = len(ids)
        return [(ids[k], ids[(k + 1) % m]) for k in range(m)]


def save_constellation(constellation: Constellation, path) -> None:
    """Write the plain-text anchor survey (positions in m, angles in deg)."""
    lines = ["# tdoaloc constellation: id x y z yaw_deg pitch_deg roll_deg",
             f"name {constellation.name}"]
    for aid, pose in constellation.anchors:
        yaw, pitch, roll = rotation_to_ypr(pose.rotation)
        vals = [*pose.position, math.degrees(yaw), math.degrees(pitch),
                math.degrees(roll)]
        lines.append(f"anchor {aid} " + " ".join(format(v, ".17g") for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_constellation(path) -> Constellation:
    name = "unnamed"
    anchors = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if fields[0] == "name":
                name = fields[1] if len(fields) > 1 else name
            elif fields[0] == "anchor":
                if len(fields) != 8:
                    raise ValueError(f"{path}:{ln}: anchor line needs 7 values")
                aid = int(fields[1])
                x, y, z, yaw, pitch, roll = (float(v) for v in fields[2:])
                rot = ypr_to_rotation(math.radians(yaw), math.radians(pitch),
                                      math.radians(roll))
                anchors.append((aid, Pose(position=(x, y, z), rotation=rot)))
            else:
                raise ValueError(f"{path}:{ln}: unknown directive {fields[0]!r}")
    if len(anchors) < 4:
        warnings.warn(f"constellation {name!r} has {len(anchors)} anchors; "
                      "3-D localization needs at least 4")
    return Constellation(anchors=tuple(anchors), name=name)


def random_constellation(rng, n_anchors: int = 8, arena=DEFAULT_ARENA,
                         name: str = "random") -> Constellation:
    """Anchors around the arena walls, roughly facing the center.

    Varied heights, inward yaw with some scatter, modest pitch/roll
    mounting error.
    """
    if n_anchors < 4:
        raise ValueError("need at least 4 anchors for 3-D observability")
    rng = np.random.default_rng(rng)
    lo, hi = np.asarray(arena[0]), np.asarray(arena[1])
    center = 0.5 * (lo + hi)
    anchors = []
    for k in range(n_anchors):
        ang = 2.0 * math.pi * (k + rng.uniform(-0.2, 0.2)) / n_anchors
        px = center[0] + 0.48 * (hi[0] - lo[0]) * math.cos(ang)
        py = center[1] + 0.48 * (hi[1] - lo[1]) * math.sin(ang)
        pz = rng.uniform(lo[2] + 0.1, hi[2] - 0.1)
        yaw = math.atan2(center[1] - py, center[0] - px) + rng.uniform(-0.6, 0.6)
        pitch = rng.uniform(-0.4, 0.4)
        roll = rng.uniform(-0.3, 0.3)
        anchors.append((k, Pose(position=(px, py, pz),
                                rotation=ypr_to_rotation(yaw, pitch, roll))))
    return Constellation(anchors=tuple(anchors), name=name)


def corner_constellation(rng, name: str = "corners", z_low: float = 0.3,
                         z_high: float = 2.8, yaw_scatter: float = 0.5,
                         pitch_scatter: float = 0.35,
                         roll_scatter: float = 0.25,
                         arena=DEFAULT_ARENA) -> Constellation:
    """Classic LPS install: 8 anchors, one low and one high per corner.

    The narrow vertical separation between the two anchor planes makes z
    the weakest estimated axis, which is where measurement bias shows up
    the most. Anchors face roughly inward; the scatter arguments widen the
    mounting-orientation spread (yaw_scatter >= pi makes yaw fully random).
    """
    rng = np.random.default_rng(rng)
    lo, hi = np.asarray(arena[0]), np.asarray(arena[1])
    cx, cy = 0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])
    anchors = []
    k = 0
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            for z in (z_low + rng.uniform(0.0, 0.2),
                      z_high - rng.uniform(0.0, 0.2)):
                px = cx + sx * 0.47 * (hi[0] - lo[0]) + rng.uniform(-0.15, 0.15)
                py = cy + sy * 0.47 * (hi[1] - lo[1]) + rng.uniform(-0.15, 0.15)
                yaw = math.atan2(cy - py, cx - px) \
                    + rng.uniform(-yaw_scatter, yaw_scatter)
                rot = ypr_to_rotation(
                    yaw, rng.uniform(-pitch_scatter, pitch_scatter),
                    rng.uniform(-roll_scatter, roll_scatter))
                anchors.append((k, Pose(position=(px, py, z), rotation=rot)))
                k += 1
    return Constellation(anchors=tuple(anchors), name=name)


# ---------------------------------------------------------------------------
# Analytic trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SinusoidTerm:
    """amplitude * prod_k sin(2*pi*t/period_k + phase_k)."""

    amplitude: float
    periods: tuple[float, ...]
    phases: tuple[float, ...]

    def __post_init__(self):
        if len(self.periods) != len(self.phases) or not self.periods:
            raise ValueError("periods and phases must be parallel and non-empty")
        if any(T <= 0.0 for T in self.periods):
            raise ValueError("periods must be positive")


@dataclass(frozen=True)
class AxisProfile:
    offset: float = 0.0
    terms: tuple[SinusoidTerm, ...] = ()

    def amplitude_bound(self) -> float:
        return sum(abs(t.amplitude) for t in self.terms)


@dataclass(frozen=True)
class YawProfile:
    offset: float = 0.0
    rate: float = 0.0  # rad/s linear drift on top of the sinusoid terms
    terms: tuple[SinusoidTerm, ...] = ()


@dataclass(frozen=True)
class TrajectorySpec:
    x: AxisProfile
    y: AxisProfile
    z: AxisProfile
    yaw: YawProfile = YawProfile()
    duration: float = 30.0
    rate: float = 50.0
    arena: tuple = DEFAULT_ARENA

    def __post_init__(self):
        if self.duration <= 0.0 or self.rate <= 0.0:
            raise ValueError("duration and rate must be positive")


def _eval_terms(terms, t: np.ndarray):
    """Value and first two derivatives of a sum of sinusoid products."""
    val = np.zeros_like(t)
    d1 = np.zeros_like(t)
    d2 = np.zeros_like(t)
    for term in terms:
        f = np.full_like(t, term.amplitude)
        f1 = np.zeros_like(t)
        f2 = np.zeros_like(t)
        for T, phase in zip(term.periods, term.phases):
            w = 2.0 * math.pi / T
            arg = w * t + phase
            g = np.sin(arg)
            g1 = w * np.cos(arg)
            g2 = -w * w * g
            f, f1, f2 = (f * g,
                         f1 * g + f * g1,
                         f2 * g + 2.0 * f1 * g1 + f * g2)
        val += f
        d1 += f1
        d2 += f2
    return val, d1, d2


@dataclass(frozen=True)
class TrajectorySample:
    """Vectorized ground truth at the requested times."""

    t: np.ndarray
    pos: np.ndarray       # (N, 3)
    vel: np.ndarray       # (N, 3)
    acc: np.ndarray       # (N, 3)
    yaw: np.ndarray       # (N,)
    yaw_rate: np.ndarray  # (N,)

    def pose(self, k: int) -> Pose:
        return Pose(position=self.pos[k], rotation=yaw_rotation(float(self.yaw[k])))


@dataclass(frozen=True)
class Trajectory:
    spec: TrajectorySpec

    def times(self) -> np.ndarray:
        n = int(round(self.spec.duration * self.spec.rate))
        return np.arange(1, n + 1) / self.spec.rate

    def at(self, t) -> TrajectorySample:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        cols = []
        for axis in (self.spec.x, self.spec.y, self.spec.z):
            v, d1, d2 = _eval_terms(axis.terms, t)
            cols.append((axis.offset + v, d1, d2))
        pos = np.stack([c[0] for c in cols], axis=1)
        vel = np.stack([c[1] for c in cols], axis=1)
        acc = np.stack([c[2] for c in cols], axis=1)
        yv, yd, _ = _eval_terms(self.spec.yaw.terms, t)
        yaw = self.spec.yaw.offset + self.spec.yaw.rate * t + yv
        yaw_rate = self.spec.yaw.rate + yd
        return TrajectorySample(t=t, pos=pos, vel=vel, acc=acc,
                                yaw=yaw, yaw_rate=yaw_rate)

    def pose_at(self, t: float) -> Pose:
        s = self.at(t)
        return Pose(position=s.pos[0], rotation=yaw_rotation(float(s.yaw[0])))


def gen_trajectory(spec: TrajectorySpec) -> Trajectory:
    """Validate the spec against its arena box and wrap it for evaluation."""
    lo, hi = (np.asarray(a, dtype=float) for a in spec.arena)
    for axis, lo_k, hi_k, label in ((spec.x, lo[0], hi[0], "x"),
                                    (spec.y, lo[1], hi[1], "y"),
                                    (spec.z, lo[2], hi[2], "z")):
        bound = axis.amplitude_bound()
        if axis.offset - bound < lo_k or axis.offset + bound > hi_k:
            raise ValueError(
                f"trajectory exceeds arena on {label}: offset {axis.offset} "
                f"+- {bound} outside [{lo_k}, {hi_k}]")
    return Trajectory(spec=spec)


def random_trajectory_spec(rng, arena=DEFAULT_ARENA, duration: float = 30.0,
                           rate: float = 50.0) -> TrajectorySpec:
    """Randomized sums of sinusoid products covering the arena, varied yaw."""
    rng = np.random.default_rng(rng)
    lo, hi = np.asarray(arena[0]), np.asarray(arena[1])
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    axes = []
    for k in range(3):
        n_terms = int(rng.integers(1, 4))
        raw = []
        for _ in range(n_terms):
            n_fac = int(rng.integers(1, 3))
            periods = tuple(float(rng.uniform(5.0, 25.0)) for _ in range(n_fac))
            phases = tuple(float(rng.uniform(0.0, 2.0 * math.pi))
                           for _ in range(n_fac))
            raw.append(SinusoidTerm(float(rng.uniform(0.3, 1.0)), periods, phases))
        total = sum(t.amplitude for t in raw)
        scale = 0.85 * half[k] / total
        terms = tuple(replace(t, amplitude=t.amplitude * scale) for t in raw)
        offset = float(center[k] + rng.uniform(-0.1, 0.1) * half[k])
        axes.append(AxisProfile(offset=offset, terms=terms))
    yaw = YawProfile(
        offset=float(rng.uniform(-math.pi, math.pi)),
        rate=float(rng.uniform(-0.3, 0.3)),
        terms=(SinusoidTerm(float(rng.uniform(0.2, 1.2)),
                            (float(rng.uniform(6.0, 20.0)),),
                            (float(rng.uniform(0.0, 2.0 * math.pi)),)),),
    )
    return TrajectorySpec(x=axes[0], y=axes[1], z=axes[2], yaw=yaw,
                          duration=duration, rate=rate, arena=arena)


def circle_spec(radius: float = 1.5, period: float = 12.0, z0: float = 1.2,
                z_amp: float = 0.0, z_period: float = 7.0,
                duration: float = 30.0, rate: float = 50.0,
                yaw_rate: float = 0.2, arena=DEFAULT_ARENA) -> TrajectorySpec:
    """Planar circle, optionally with sinusoidal height."""
    cx = 0.5 * (arena[0][0] + arena[1][0])
    cy = 0.5 * (arena[0][1] + arena[1][1])
    z_terms = ()
    if z_amp != 0.0:
        z_terms = (SinusoidTerm(z_amp, (z_period,), (0.0,)),)
    return TrajectorySpec(
        x=AxisProfile(cx, (SinusoidTerm(radius, (period,), (0.5 * math.pi,)),)),
        y=AxisProfile(cy, (SinusoidTerm(radius, (period,), (0.0,)),)),
        z=AxisProfile(z0, z_terms),
        yaw=YawProfile(offset=0.0, rate=yaw_rate),
        duration=duration, rate=rate, arena=arena)


# ---------------------------------------------------------------------------
# IMU synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImuStream:
    """Column-oriented IMU samples; sample k drives the step ending at
    timestamps[k] (values are taken at the step midpoint)."""

    timestamps: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, k: int) -> ImuSample:
        return ImuSample(accel=self.accel[k], gyro=self.gyro[k],
                         timestamp=float(self.timestamps[k]))

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]


def synth_imu(trajectory: Trajectory, accel_density: float = 0.0,
              gyro_density: float = 0.0, rate: float = 100.0,
              seed=0) -> ImuStream:
    """Invert the motion model: body-frame specific force and angular rate.

    Midpoint sampling keeps one-step strapdown integration second-order
    accurate. Noise standard deviation per sample is density * sqrt(rate).
    """
    rng = np.random.default_rng(seed)
    dt = 1.0 / rate
    n = int(round(trajectory.spec.duration * rate))
    t_end = np.arange(1, n + 1) * dt
    s = trajectory.at(t_end - 0.5 * dt)
    cy = np.cos(s.yaw)
    sy = np.sin(s.yaw)
    f = s.acc - GRAVITY  # specific force in world frame
    accel = np.empty((n, 3))
    accel[:, 0] = cy * f[:, 0] + sy * f[:, 1]
    accel[:, 1] = -sy * f[:, 0] + cy * f[:, 1]
    accel[:, 2] = f[:, 2]
    gyro = np.zeros((n, 3))
    gyro[:, 2] = -s.yaw_rate  # Cdot = C skew(omega) with skew(w)c = c x w
    if accel_density > 0.0:
        accel += accel_density * math.sqrt(rate) * rng.standard_normal((n, 3))
    if gyro_density > 0.0:
        gyro += gyro_density * math.sqrt(rate) * rng.standard_normal((n, 3))
    return ImuStream(timestamps=t_end, accel=accel, gyro=gyro)


# ---------------------------------------------------------------------------
# TDOA synthesis and dataset handling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OutlierConfig:
    """Multipath-style gross errors: occasional large shifts, mostly positive."""

    probability: float = 0.0
    min_shift: float = 1.0
    max_shift: float = 3.0
    positive_fraction: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.probability < 1.0 and self.probability != 1.0:
            raise ValueError("probability must lie in [0, 1]")
        if self.min_shift >= self.max_shift:
            raise ValueError("min_shift must be below max_shift")


@dataclass(frozen=True)
class DatasetRecord:
    timestamp: float
    anchor_i: int
    anchor_j: int
    d_raw: float
    tag: Pose
    bias_true: float
    is_outlier: bool


@dataclass(frozen=True)
class TdoaDataset:
    """Column-oriented TDOA records bound to their constellation."""

    constellation: Constellation
    t: np.ndarray
    anchor_i: np.ndarray
    anchor_j: np.ndarray
    d_raw: np.ndarray
    tag_pos: np.ndarray    # (N, 3)
    tag_quat: np.ndarray   # (N, 4) wxyz
    bias_true: np.ndarray
    is_outlier: np.ndarray
    skipped_singular: int = 0

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> DatasetRecord:
        return DatasetRecord(
            timestamp=float(self.t[k]),
            anchor_i=int(self.anchor_i[k]),
            anchor_j=int(self.anchor_j[k]),
            d_raw=float(self.d_raw[k]),
            tag=Pose(position=self.tag_pos[k],
                     rotation=quat_to_rotation(self.tag_quat[k])),
            bias_true=float(self.bias_true[k]),
            is_outlier=bool(self.is_outlier[k]),
        )

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def _anchor_arrays(self):
        ids = self.constellation.ids
        index = {aid: k for k, aid in enumerate(ids)}
        pos = self.constellation.positions()
        rot = self.constellation.rotations()
        ii = np.array([index[a] for a in self.anchor_i])
        jj = np.array([index[a] for a in self.anchor_j])
        return pos[ii], rot[ii], pos[jj], rot[jj]

    def ideal_values(self) -> np.ndarray:
        """Vectorized noise-free TDOA at the ground-truth tag positions."""
        pos_i, _, pos_j, _ = self._anchor_arrays()
        ri = np.linalg.norm(self.tag_pos - pos_i, axis=1)
        rj = np.linalg.norm(self.tag_pos - pos_j, axis=1)
        return ri - rj

    def features(self) -> np.ndarray:
        """(N, 14) feature matrix matching geometry.extract_features."""
        pos_i, rot_i, pos_j, rot_j = self._anchor_arrays()
        tag_rot = _quat_to_rot_batch(self.tag_quat)
        dp_i = pos_i - self.tag_pos
        dp_j = pos_j - self.tag_pos
        a_ai, b_ai = _batch_azel(rot_i, pos_i, self.tag_pos)
        a_aj, b_aj = _batch_azel(rot_j, pos_j, self.tag_pos)
        a_ti, b_ti = _batch_azel(tag_rot, self.tag_pos, pos_i)
        a_tj, b_tj = _batch_azel(tag_rot, self.tag_pos, pos_j)
        return np.column_stack([dp_i, dp_j, a_ai, a_aj, a_ti, a_tj,
                                b_ai, b_aj, b_ti, b_tj])

    def labels(self) -> np.ndarray:
        """Regression target: measured minus ideal (bias plus noise)."""
        return self.d_raw - self.ideal_values()


def _quat_to_rot_batch(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _batch_azel(rot: np.ndarray, obs_pos: np.ndarray, target: np.ndarray):
    """Vectorized azimuth/elevation, same conventions as geometry."""
    d = target - obs_pos
    v = np.einsum("nji,nj->ni", rot, d)
    horiz = np.hypot(v[:, 0], v[:, 1])
    alpha = np.where(horiz == 0.0, 0.0, np.arctan2(v[:, 1], v[:, 0]))
    alpha = np.where(alpha == -math.pi, math.pi, alpha)
    beta = np.arctan2(v[:, 2], horiz)
    return alpha, beta


def synth_tdoa(trajectory: Trajectory, constellation: Constellation,
               bias: BiasParams = BiasParams(), sigma: float = 0.1,
               outliers: OutlierConfig | None = None, rate: float = 50.0,
               seed=0) -> TdoaDataset:
    """Round-robin TDOA stream with bias, noise, and labeled outliers.

    ``sigma = 0`` is allowed for exactness tests (noise-free streams).
    """
    if sigma < 0.0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    n = int(round(trajectory.spec.duration * rate))
    t = np.arange(1, n + 1) / rate
    s = trajectory.at(t)
    pairs = constellation.round_robin_pairs()
    pair_idx = np.arange(n) % len(pairs)
    anchor_i = np.array([pairs[k][0] for k in pair_idx])
    anchor_j = np.array([pairs[k][1] for k in pair_idx])
    yaw = s.yaw
    half = 0.5 * yaw
    tag_quat = np.column_stack([np.cos(half), np.zeros(n), np.zeros(n),
                                np.sin(half)])
    ds = TdoaDataset(constellation=constellation, t=t, anchor_i=anchor_i,
                     anchor_j=anchor_j, d_raw=np.zeros(n), tag_pos=s.pos,
                     tag_quat=tag_quat, bias_true=np.zeros(n),
                     is_outlier=np.zeros(n, dtype=bool))
    pos_i, _, pos_j, _ = ds._anchor_arrays()
    ri = np.linalg.norm(s.pos - pos_i, axis=1)
    rj = np.linalg.norm(s.pos - pos_j, axis=1)
    ok = (ri > 0.0) & (rj > 0.0)
    skipped = int(np.sum(~ok))

    bias_true = synth_bias_batch(ds.features(), bias)
    d_raw = (ri - rj) + bias_true + sigma * rng.standard_normal(n)
    is_outlier = np.zeros(n, dtype=bool)
    if outliers is not None and outliers.probability > 0.0:
        is_outlier = rng.random(n) < outliers.probability
        shift = rng.uniform(outliers.min_shift, outliers.max_shift, size=n)
        sign = np.where(rng.random(n) < outliers.positive_fraction, 1.0, -1.0)
        d_raw = np.where(is_outlier, d_raw + sign * shift, d_raw)

    baseline = np.linalg.norm(pos_i - pos_j, axis=1)
    bad = np.abs(d_raw[ok]) > baseline[ok] + MEASUREMENT_SLACK
    if np.any(bad):
        raise ValueError(
            f"{int(bad.sum())} measurements exceed the magnitude bound "
            f"(baseline + {MEASUREMENT_SLACK} m); check noise/outlier config")

    return replace(
        ds,
        t=t[ok], anchor_i=anchor_i[ok], anchor_j=anchor_j[ok],
        d_raw=d_raw[ok], tag_pos=s.pos[ok], tag_quat=tag_quat[ok],
        bias_true=bias_true[ok], is_outlier=is_outlier[ok],
        skipped_singular=skipped)


@dataclass(frozen=True)
class Split:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):  # allows tuple-style unpacking into (X, y)
        yield self.features
        yield self.labels


@dataclass(frozen=True)
class DatasetSplits:
    train: Split
    val: Split
    test: Split


def build_dataset(datasets, seed=0, outlier_cut: float = 1.0,
                  feature_slice: slice | None = None) -> DatasetSplits:
    """Filter, shuffle, and 70/15/15-split labeled records.

    ``datasets`` is one TdoaDataset or a sequence of them (e.g. several
    training constellations). Records whose measured-minus-ideal error
    exceeds ``outlier_cut`` are dropped before splitting, mirroring how
    gross NLOS errors are excluded from bias training data.
    """
    if isinstance(datasets, TdoaDataset):
        datasets = [datasets]
    feats, labels = [], []
    for ds in datasets:
        feats.append(ds.features())
        labels.append(ds.labels())
    X = np.concatenate(feats, axis=0)
    y = np.concatenate(labels, axis=0)
    keep = np.abs(y) <= outlier_cut
    X, y = X[keep], y[keep]
    if len(y) == 0:
        raise ValueError("no records left after outlier filtering")
    if feature_slice is not None:
        X = X[:, feature_slice]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    X, y = X[order], y[order]
    n_train = int(0.70 * len(y))
    n_val = int(0.15 * len(y))
    return DatasetSplits(
        train=Split(X[:n_train], y[:n_train]),
        val=Split(X[n_train:n_train + n_val], y[n_train:n_train + n_val]),
        test=Split(X[n_train + n_val:], y[n_train + n_val:]),
    )


# ---------------------------------------------------------------------------
# Dataset CSV
# ---------------------------------------------------------------------------

def save_dataset_csv(dataset: TdoaDataset, path) -> None:
    """One record per row; floats carry 17 significant digits."""
    with open(path, "w") as fh:
        fh.write(DATASET_HEADER + "\n")
        for k in range(len(dataset)):
            vals = [format(dataset.t[k], ".17g"),
                    str(int(dataset.anchor_i[k])),
                    str(int(dataset.anchor_j[k])),
                    format(dataset.d_raw[k], ".17g")]
            vals += [format(v, ".17g") for v in dataset.tag_pos[k]]
            vals += [format(v, ".17g") for v in dataset.tag_quat[k]]
            vals.append(format(dataset.bias_true[k], ".17g"))
            vals.append(str(int(dataset.is_outlier[k])))
            fh.write(",".join(vals) + "\n")


def load_dataset_csv(path, constellation: Constellation) -> TdoaDataset:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != DATASET_HEADER:
            raise ValueError(f"unexpected dataset header in {path}")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    if not rows:
        raise ValueError(f"dataset {path} is empty")
    M = np.array([[float(v) for v in row] for row in rows])
    return TdoaDataset(
        constellation=constellation,
        t=M[:, 0],
        anchor_i=M[:, 1].astype(int),
        anchor_j=M[:, 2].astype(int),
        d_raw=M[:, 3],
        tag_pos=M[:, 4:7],
        tag_quat=M[:, 7:11],
        bias_true=M[:, 11],
        is_outlier=M[:, 12] != 0.0,
    )
