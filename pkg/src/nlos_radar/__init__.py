"""FMCW Doppler radar simulation with non-line-of-sight detection and tracking."""
from .errors import (AmbiguousHalfPlaneError, MissingInputError, NlosRadarError, NoIntersectionError,
                     ScenarioError, ShapeMismatchError, UnreliableVelocityError)
from .scene import (ArcTrajectory, HiddenObject, PolylineTrajectory, Pose2D, Scenario, SensorConfig, WallSegment,
                    dump_scenario, load_scenario, loads_scenario)
from .simulator import RawFrame, enumerate_paths, synthesize_frame
from .dsp import PointCloud, RadarCube, RadarPoint, cfar_detect, process_frame, range_doppler_angle_transform
from .geometry import (LidarBev, estimate_walls, reconstruct_cloud, reconstruct_detection, reconstruct_position,
                       reconstruct_velocity, wall_intersection)
from .detection import DetectorParams, OrientedBox, detect
from .tracking import Track, Tracker, TrackerParams, predict_future, track_update
from .evaluation import MetricsReport, average_precision, clear_mot, evaluate, oriented_iou

__version__ = "0.1.0"

__all__ = [
    "AmbiguousHalfPlaneError", "MissingInputError", "NlosRadarError", "NoIntersectionError", "ScenarioError",
    "ShapeMismatchError", "UnreliableVelocityError",
    "ArcTrajectory", "HiddenObject", "PolylineTrajectory", "Pose2D", "Scenario", "SensorConfig", "WallSegment",
    "dump_scenario", "load_scenario", "loads_scenario",
    "RawFrame", "enumerate_paths", "synthesize_frame",
    "PointCloud", "RadarCube", "RadarPoint", "cfar_detect", "process_frame", "range_doppler_angle_transform",
    "LidarBev", "estimate_walls", "reconstruct_cloud", "reconstruct_detection", "reconstruct_position",
    "reconstruct_velocity", "wall_intersection",
    "DetectorParams", "OrientedBox", "detect",
    "Track", "Tracker", "TrackerParams", "predict_future", "track_update",
    "MetricsReport", "average_precision", "clear_mot", "evaluate", "oriented_iou",
]
