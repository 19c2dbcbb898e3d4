"""JSON run-configuration files.

Top-level keys (all optional except ``stages``)::

    seed        int     model init, batch order and triplet sampling (default 0)
    output_dir  str     where checkpoints, logs and metrics go
    data        object  n_train (50000), n_test (5000), seed (0), grid (16),
                        splat_sigma (0.75, grid cells), jitter (0.0, px),
                        bbox_margin (0.1), appearance_amplitude (0.3),
                        camera {focal, principal_point, distance, azimuth_deg,
                        elevation_deg, target_jitter}, skeleton (full skeleton dict)
    model       object  any ModelConfig field (n_joints, embed_dim, width, ...)
    eval        object  probe_size (512)
    stages      object  "1", "2", "3": a StageConfig override block, or null to
                        disable that stage; every stage must be listed

Unknown keys anywhere raise a :class:`ConfigError`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, fields, replace
from pathlib import Path

from .losses import ConfigError
from .models import ModelConfig
from .pipeline import PipelineConfig, StageConfig
from .synthdata import CameraSpec, DataSpec, SkeletonSpec

TOP_KEYS = {"seed", "output_dir", "data", "model", "eval", "stages"}
DATA_KEYS = {"n_train", "n_test", "seed", "grid", "splat_sigma", "jitter", "bbox_margin",
             "appearance_amplitude", "camera", "skeleton"}
EVAL_KEYS = {"probe_size"}


def _reject_unknown(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def parse_config(doc: dict) -> PipelineConfig:
    _reject_unknown(doc, TOP_KEYS, "config")
    if "stages" not in doc:
        raise ConfigError("config needs a 'stages' block listing stages 1, 2 and 3 (null disables one)")
    stages_doc = doc["stages"]
    _reject_unknown(stages_doc, {"1", "2", "3"}, "stages")
    missing = sorted({"1", "2", "3"} - set(stages_doc))
    if missing:
        raise ConfigError(f"stages {missing} are neither configured nor disabled (use null)")

    data = dict(doc.get("data", {}))
    _reject_unknown(data, DATA_KEYS, "data")
    spec = DataSpec()
    if "camera" in data:
        cam = data.pop("camera")
        _reject_unknown(cam, {f.name for f in fields(CameraSpec)}, "data.camera")
        spec.camera = CameraSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in cam.items()})
    if "skeleton" in data:
        try:
            spec.skeleton = SkeletonSpec.from_dict(data.pop("skeleton"))
        except (KeyError, ValueError, TypeError) as e:
            raise ConfigError(f"invalid skeleton block ({e})") from None
    for key in ("grid", "splat_sigma", "jitter", "bbox_margin", "appearance_amplitude"):
        if key in data:
            setattr(spec, key, type(getattr(spec, key))(data.pop(key)))

    model_doc = doc.get("model", {})
    _reject_unknown(model_doc, {f.name for f in fields(ModelConfig)}, "model")
    try:
        model = ModelConfig.from_dict(model_doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model block ({e})") from None
    if model.grid != spec.grid:
        model = replace(model, grid=spec.grid)
    if model.n_joints != spec.skeleton.n_joints:
        model = replace(model, n_joints=spec.skeleton.n_joints)

    ev = doc.get("eval", {})
    _reject_unknown(ev, EVAL_KEYS, "eval")

    stages = {}
    for key in ("1", "2", "3"):
        block = stages_doc[key]
        if block is None or block is False:
            stages[int(key)] = None
            continue
        _reject_unknown(block, {f.name for f in fields(StageConfig)}, f"stages.{key}")
        block = dict(block, stage=int(key))
        try:
            stages[int(key)] = StageConfig.from_dict(block)
        except TypeError as e:
            raise ConfigError(f"invalid stages.{key} block ({e})") from None

    cfg = PipelineConfig(
        seed=int(doc.get("seed", 0)),
        n_train=int(data.get("n_train", 50000)),
        n_test=int(data.get("n_test", 5000)),
        data_seed=int(data.get("seed", 0)),
        probe_size=int(ev.get("probe_size", 512)),
        model=model,
        stages=stages,
        output_dir=doc.get("output_dir"),
        data_spec=spec,
    )
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(doc)


def dump_config(cfg: PipelineConfig) -> dict:
    spec = cfg.data_spec
    d = cfg.to_dict()
    cam = asdict(spec.camera)
    return {
        "seed": d["seed"],
        "output_dir": d["output_dir"],
        "data": {"n_train": d["n_train"], "n_test": d["n_test"], "seed": d["data_seed"], "grid": spec.grid,
                 "splat_sigma": spec.splat_sigma, "jitter": spec.jitter, "bbox_margin": spec.bbox_margin,
                 "appearance_amplitude": spec.appearance_amplitude,
                 "camera": {k: list(v) if isinstance(v, tuple) else v for k, v in cam.items()}},
        "model": d["model"],
        "eval": {"probe_size": d["probe_size"]},
        "stages": {k: ({kk: vv for kk, vv in v.items() if kk != "stage"} if v else None)
                   for k, v in d["stages"].items()},
    }
