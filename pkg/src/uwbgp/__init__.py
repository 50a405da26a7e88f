"""UWB anchor self-calibration with Gaussian-process range regression,
continuous-time B-spline trajectories and range-gated place recognition."""

__version__ = "0.1.0"

from .calibration import (
    AnchorEstimate,
    CalibrationConfig,
    CalibrationFailure,
    GPAnchorCalibrator,
    LeastSquaresAnchor,
    calibrate_all,
    calibrate_anchor,
    cuboid_grid,
    stratified_subsample,
    trilaterate_ls,
)
from .exceptions import *  # noqa: F401,F403
from .gp import KernelParams, MaternGPRegressor
from .localization import (
    DescriptorField,
    DescriptorStore,
    ZoneLocalizer,
    build_index,
    candidates,
    evaluate,
    match,
)
from .metrics import anchor_ape, render_report
from .simulator import Box, RangingModel, Scene, generate_trajectory, random_scene, simulate_ranges
from .spline import PoseSpline, SplineTrajectory, fit_spline, make_spline, pair_samples
