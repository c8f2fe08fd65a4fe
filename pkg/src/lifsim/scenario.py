"""Scenario files: JSON documents describing a frame suite.

Top-level keys (all optional except ``schema_version``)::

    schema_version   1
    name             free text
    seed             base seed of the evaluation frames
    frames           number of evaluation frames
    train_seed       base seed of the training frames
    train_frames     number of training frames
    channels         BEV feature channels C
    grid             {extent_min: [x, y], extent_max: [x, y], resolution}
    scene            SceneConfig fields; ``cameras`` is a list of CameraSpec objects
    detector         DetectorProfile fields shared by every agent;
                     ``confidence_calibration`` is a ScoreCalibration object
    agent_detectors  {"<agent id>": {DetectorProfile overrides}}
    comm             {policy, phi_i, phi_dem, budget_bytes, background_priority,
                      background_margin, ego_uncertain, train_phi_dem}
    train            TrainConfig fields
    decode           {peak_threshold}
    dedupe_radius    metres
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional

from .comms import CommPolicy
from .geometry import GridSpec
from .head import TrainConfig
from .scene import CameraSpec, DetectorProfile, SceneConfig, ScoreCalibration

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    seed: int = 0
    frames: int = 20
    train_seed: int = 10_000
    train_frames: int = 20
    channels: int = 16
    grid: GridSpec = field(default_factory=lambda: GridSpec((-51.2, -51.2), (51.2, 51.2), 0.8))
    scene: SceneConfig = field(default_factory=SceneConfig)
    detector: DetectorProfile = field(default_factory=DetectorProfile)
    agent_detectors: Dict[int, DetectorProfile] = field(default_factory=dict)
    comm: CommPolicy = field(default_factory=CommPolicy)
    train_phi_dem: float = 0.0
    train: TrainConfig = field(default_factory=TrainConfig)
    peak_threshold: float = 0.05
    dedupe_radius: float = 1.0

    def profile(self, agent_id: int) -> DetectorProfile:
        return self.agent_detectors.get(agent_id, self.detector)


def _build(cls, data: Dict[str, Any], where: str):
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def _tuples(d: Dict[str, Any], *keys):
    return {k: (tuple(v) if k in keys and isinstance(v, list) else v) for k, v in d.items()}


def _profile(data: Dict[str, Any], base: Optional[DetectorProfile], where: str) -> DetectorProfile:
    data = dict(data)
    if "confidence_calibration" in data:
        data["confidence_calibration"] = _build(ScoreCalibration, data["confidence_calibration"],
                                                f"{where}.confidence_calibration")
    if "occluded_sectors" in data:
        data["occluded_sectors"] = tuple(tuple(s) for s in data["occluded_sectors"])
    if base is not None:
        try:
            return replace(base, **data)
        except TypeError as exc:
            raise ScenarioError(f"{where}: {exc}") from exc
    return _build(DetectorProfile, data, where)


def scenario_from_dict(doc: Dict[str, Any]) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    known = {"schema_version", "name", "seed", "frames", "train_seed", "train_frames", "channels",
             "grid", "scene", "detector", "agent_detectors", "comm", "train", "decode", "dedupe_radius"}
    unknown = set(doc) - known
    if unknown:
        raise ScenarioError(f"unknown top-level keys {sorted(unknown)}")

    kw: Dict[str, Any] = {}
    for key in ("name", "seed", "frames", "train_seed", "train_frames", "channels", "dedupe_radius"):
        if key in doc:
            kw[key] = doc[key]
    if "grid" in doc:
        g = doc["grid"]
        try:
            kw["grid"] = GridSpec(tuple(g["extent_min"]), tuple(g["extent_max"]), g["resolution"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"grid: {exc}") from exc
    if "scene" in doc:
        s = _tuples(dict(doc["scene"]), "altitude_range", "size_mean")
        if "cameras" in s:
            s["cameras"] = tuple(_build(CameraSpec, c, "scene.cameras") for c in s["cameras"])
        kw["scene"] = _build(SceneConfig, s, "scene")
    detector = _profile(doc.get("detector", {}), None, "detector")
    kw["detector"] = detector
    kw["agent_detectors"] = {int(k): _profile(v, detector, f"agent_detectors.{k}")
                             for k, v in doc.get("agent_detectors", {}).items()}
    if "comm" in doc:
        c = dict(doc["comm"])
        if "train_phi_dem" in c:
            kw["train_phi_dem"] = float(c.pop("train_phi_dem"))
        if "policy" in c:
            c["kind"] = c.pop("policy")
        if c.get("kind", "uncertainty") not in ("uncertainty", "objectness"):
            raise ScenarioError(f"comm.policy must be 'uncertainty' or 'objectness', got {c['kind']!r}")
        kw["comm"] = _build(CommPolicy, c, "comm")
    if "train" in doc:
        kw["train"] = _build(TrainConfig, doc["train"], "train")
    if "decode" in doc:
        d = dict(doc["decode"])
        kw["peak_threshold"] = float(d.pop("peak_threshold", 0.05))
        if d:
            raise ScenarioError(f"decode: unknown keys {sorted(d)}")
    sc = Scenario(**kw)
    if sc.frames < 1 or sc.train_frames < 1:
        raise ScenarioError("frames and train_frames must be positive")
    half = min(sc.grid.extent_max[0] - sc.grid.extent_min[0], sc.grid.extent_max[1] - sc.grid.extent_min[1]) / 2
    if sc.scene.box_half_extent > half + sc.scene.agent_half_extent:
        raise ScenarioError("scene.box_half_extent places boxes beyond every agent's grid")
    return sc


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ScenarioError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    return scenario_from_dict(doc)


def benchmark_path() -> Path:
    return Path(str(resources.files("lifsim") / "data" / "benchmark.json"))


def load_benchmark() -> Scenario:
    return load_scenario(benchmark_path())
