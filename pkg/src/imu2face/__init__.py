"""IMU-driven facial landmark regression and 3D face fitting.

Earphone IMU streams are calibrated, filtered and turned into per-frame
time/frequency features; a CNN + Transformer regressor maps 10-frame windows
to 51 normalized landmarks, which a blendshape rig then lifts to 3D meshes.
"""
from .exceptions import ConfigError, DataError, GeometryError, NumericalError
from .face3d import BlendshapeRig, CameraParams, FaceFitter, FaceParams, fit_camera, fit_parameters
from .landmarks import LandmarkNormalizer, MetricConfig, mae, nme
from .model import IMUTwinTransConfig, WingLossParams, forward, init_weights, wing_loss
from .signal import ImuFeaturizer, ImuStream, preprocess_stream
from .synth import LinearOracle, generate_rig, generate_session, generate_sessions
from .training import IMUTwinTransRegressor, Session, TrainConfig, evaluate, fine_tune, train

__version__ = "0.1.0"

__all__ = [
    "BlendshapeRig",
    "CameraParams",
    "ConfigError",
    "DataError",
    "FaceFitter",
    "FaceParams",
    "GeometryError",
    "IMUTwinTransConfig",
    "IMUTwinTransRegressor",
    "ImuFeaturizer",
    "ImuStream",
    "LandmarkNormalizer",
    "LinearOracle",
    "MetricConfig",
    "NumericalError",
    "Session",
    "TrainConfig",
    "WingLossParams",
    "evaluate",
    "fine_tune",
    "fit_camera",
    "fit_parameters",
    "forward",
    "generate_rig",
    "generate_session",
    "generate_sessions",
    "init_weights",
    "mae",
    "nme",
    "preprocess_stream",
    "train",
    "wing_loss",
]
