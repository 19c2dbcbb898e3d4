"""scikit-learn style front end: ``fit`` runs the staged schedule, ``transform``
embeds one modality, ``predict`` lifts 2D poses to 3D."""
from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .metrics import joint_errors
from .models import ModelConfig, make_batch
from .numkit import ValidationError
from .pipeline import (MissingPretrainingWarning, PipelineConfig, StageConfig, embed_dataset, evaluate,
                       run_pipeline)
from .synthdata import ArrayDataset, DataSpec, SampleRecord, to_arrays

MODALITIES = ("img", "2d", "3d")


def check_dataset(X, spec: DataSpec | None = None) -> ArrayDataset:
    """Accept an :class:`ArrayDataset` or a sequence of :class:`SampleRecord`."""
    if isinstance(X, ArrayDataset):
        ds = X
    elif isinstance(X, (list, tuple)) and X and all(isinstance(r, SampleRecord) for r in X):
        ds = to_arrays(X, spec)
    else:
        raise ValidationError("expected an ArrayDataset or a non-empty list of SampleRecord")
    if len(ds) == 0:
        raise ValidationError("dataset is empty")
    if not (np.all(np.isfinite(ds.pose3d)) and np.all(np.isfinite(ds.pose2d_norm)) and np.all(np.isfinite(ds.bbox))):
        raise ValidationError("dataset contains non-finite values")
    return ds


def check_modality(modality: str) -> str:
    if modality not in MODALITIES:
        raise ValidationError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    return modality


class TriModalAligner(BaseEstimator, TransformerMixin):
    """Aligns image, 2D and 3D pose encoders into one embedding space.

    ``iterations`` (if set) replaces the per-stage iteration count, which is
    handy for quick experiments; everything else follows the stage defaults.
    """

    def __init__(self, seed: int = 0, iterations: int | None = None, embed_dim: int = 64,
                 pose_encoder: str = "transformer", decoder: str = "mlp", use_triplet: bool = True,
                 use_modality_token: bool = True, pretrain: bool = True, eval_interval: int = 500):
        self.seed = seed
        self.iterations = iterations
        self.embed_dim = embed_dim
        self.pose_encoder = pose_encoder
        self.decoder = decoder
        self.use_triplet = use_triplet
        self.use_modality_token = use_modality_token
        self.pretrain = pretrain
        self.eval_interval = eval_interval

    def _pipeline_config(self, n_joints: int, grid: int) -> PipelineConfig:
        model = ModelConfig(n_joints=n_joints, grid=grid, embed_dim=self.embed_dim, pose_encoder=self.pose_encoder,
                            decoder=self.decoder, use_modality_token=self.use_modality_token)
        stages = {}
        for s in (1, 2, 3):
            if s < 3 and not self.pretrain:
                stages[s] = None
                continue
            kw = {"eval_interval": self.eval_interval}
            if s > 1:
                kw["use_triplet"] = self.use_triplet
            if self.iterations is not None:
                kw["iterations"] = int(self.iterations)
            stages[s] = StageConfig.default(s, **kw)
        return PipelineConfig(seed=self.seed, model=model, stages=stages)

    def fit(self, X, y=None, eval_set=None):
        ds = check_dataset(X)
        cfg = self._pipeline_config(ds.n_joints, ds.grid)
        bs = min(len(ds), max(c.batch_size for c in cfg.stages.values() if c is not None))
        if bs < max(c.batch_size for c in cfg.stages.values() if c is not None):
            cfg = cfg.with_stage_overrides(batch_size=bs)
        holdout = check_dataset(eval_set) if eval_set is not None else ds
        with warnings.catch_warnings():
            if not self.pretrain:
                warnings.simplefilter("ignore", MissingPretrainingWarning)
            res = run_pipeline(cfg, ds, holdout)
        self.model_ = res.model
        self.logs_ = res.logs
        self.report_ = res.report
        self.n_features_in_ = ds.n_joints
        return self

    def transform(self, X, modality: str = "2d") -> np.ndarray:
        check_is_fitted(self, "model_")
        ds = check_dataset(X)
        return embed_dataset(self.model_, ds, (check_modality(modality),))[modality]

    def predict(self, X) -> np.ndarray:
        """Lifted 3D poses (mm, pelvis-relative) from the 2D branch."""
        check_is_fitted(self, "model_")
        ds = check_dataset(X)
        emb = embed_dataset(self.model_, ds, ("2d",))["2d"]
        out = []
        for s in range(0, len(ds), 256):
            idx = np.arange(s, min(s + 256, len(ds)))
            out.append(self.model_.predict_3d(emb[idx], "2d", make_batch(ds, idx)))
        return np.concatenate(out)

    def score(self, X, y=None) -> float:
        """Negative lifting MPJPE in mm (higher is better)."""
        ds = check_dataset(X)
        return -float(joint_errors(self.predict(ds), ds.pose3d).mean())

    def evaluate(self, X):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_dataset(X))
