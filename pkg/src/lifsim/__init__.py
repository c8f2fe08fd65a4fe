"""Multi-agent BEV detection simulator with bandwidth-aware detection sharing."""
from .comms import CommPolicy, DetectionMessage, decode, encode, payload_bytes
from .geometry import CameraRig, GridSpec
from .head import HeadParams, TrainConfig, load_params, save_params
from .metrics import EvalReport, evaluate
from .pipeline import Strategy, run_frame, run_suite, simulate_frame, train_pipeline
from .scenario import Scenario, load_benchmark, load_scenario

__version__ = "0.1.0"

__all__ = [
    "CameraRig", "CommPolicy", "DetectionMessage", "EvalReport", "GridSpec", "HeadParams",
    "Scenario", "Strategy", "TrainConfig", "decode", "encode", "evaluate", "load_benchmark",
    "load_params", "load_scenario", "payload_bytes", "run_frame", "run_suite", "save_params",
    "simulate_frame", "train_pipeline",
]
