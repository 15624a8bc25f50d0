"""Robust UWB TDOA localization: learned bias correction plus an
M-estimation IRLS extended Kalman filter, with a deterministic simulator."""

from .biasnet import MlpModel, TrainConfig, backward, forward, load_model, save_model, train
from .estimator import (
    CovarianceDegenerate,
    FilterState,
    ImuSample,
    NoiseConfig,
    RobustCost,
    correct_measurement,
    m_update,
    predict,
    robust_weight,
)
from .geometry import (
    FeatureVector,
    Pose,
    azimuth_elevation,
    extract_features,
    integrate_orientation,
    skew,
)
from .simulator import (
    BiasParams,
    Constellation,
    OutlierConfig,
    TrajectorySpec,
    build_dataset,
    gen_trajectory,
    synth_bias,
    synth_imu,
    synth_tdoa,
)
from .tdoa import TdoaMeasurement, tdoa_ideal, tdoa_jacobian, twr_range

__version__ = "0.1.0"
