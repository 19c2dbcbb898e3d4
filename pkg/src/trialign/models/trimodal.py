"""The three encoders, two decoders and shared temperature as one object."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..autograd import Parameter, Tensor
from ..losses import EmbeddingBatch, Temperature
from ..numkit import Rng
from ..synthdata import ArrayDataset
from .checkpoint import load_checkpoint, save_checkpoint
from .decoders import MlpDecoder, ScoreDecoder
from .encoders import MlpEncoder, PoseTransformerEncoder
from .layers import Module

IMAGE_SCALE = 4.0
BBOX_SCALE = 4.0
METRES = 1000.0


@dataclass
class ModelConfig:
    n_joints: int = 16
    grid: int = 16
    embed_dim: int = 64
    width: int = 64
    heads: int = 2
    ff_width: int = 128
    n_layers: int = 3
    mlp_width: int = 128
    n_blocks: int = 3
    decoder_blocks: int = 3
    pose_encoder: str = "transformer"   # transformer | mlp
    decoder: str = "mlp"                # mlp | diffusion
    use_modality_token: bool = True
    decoder_bbox: bool = True
    diffusion_steps: int = 1000

    def __post_init__(self):
        if self.pose_encoder not in ("transformer", "mlp"):
            raise ValueError(f"pose_encoder must be 'transformer' or 'mlp', got {self.pose_encoder!r}")
        if self.decoder not in ("mlp", "diffusion"):
            raise ValueError(f"decoder must be 'mlp' or 'diffusion', got {self.decoder!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        return cls(**d)


@dataclass
class Batch:
    """Network-ready inputs for one minibatch."""

    images: np.ndarray     # (B, (J+1)*G*G)
    pose2d: np.ndarray     # (B, J, 2) in [-1, 1] around the bbox centre
    bbox: np.ndarray       # (B, 4) camera-normalised bbox features
    pose3d_m: np.ndarray   # (B, J, 3) metres
    pose3d: np.ndarray     # (B, J, 3) mm, for metrics
    pose2d_norm: np.ndarray
    bbox_px: np.ndarray

    def __len__(self):
        return len(self.pose3d)


def bbox_features(bbox: np.ndarray, focal: np.ndarray, pp: np.ndarray) -> np.ndarray:
    """Bbox centre offset and size in focal-length units, so the box carries distance cues."""
    f = np.asarray(focal, dtype=np.float64)[:, None]
    centre = (bbox[:, :2] - pp) / f
    size = bbox[:, 2:] / f
    return BBOX_SCALE * np.concatenate([centre, size], axis=1)


def make_batch(ds: ArrayDataset, index) -> Batch:
    index = np.asarray(index)
    uv = ds.pose2d_norm[index]
    p3 = ds.pose3d[index]
    return Batch(
        images=IMAGE_SCALE * ds.images(index),
        pose2d=(uv - 0.5) * 2.0,
        bbox=bbox_features(ds.bbox[index], ds.focal[index], ds.pp[index]),
        pose3d_m=p3 / METRES,
        pose3d=p3,
        pose2d_norm=uv,
        bbox_px=ds.bbox[index],
    )


class TriModalModel(Module):
    """Image, 2D and 3D encoders into one unit sphere, 2D and 3D decoders, shared temperature."""

    GROUPS = ("enc_img", "enc_2d", "enc_3d", "dec_2d", "dec_3d", "temperature")

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, tau0: float = 1 / 14,
                 tau_range=(1e-2, 1e4)):
        super().__init__("")
        self.config = cfg = config or ModelConfig()
        rng = Rng(seed).child("init")
        j, d = cfg.n_joints, cfg.embed_dim
        img_in = (j + 1) * cfg.grid * cfg.grid
        self.enc_img = self.add_module("enc_img", MlpEncoder("enc_img", img_in, d, rng.child("enc_img"),
                                                             cfg.mlp_width, cfg.n_blocks))
        if cfg.pose_encoder == "transformer":
            kw = dict(width=cfg.width, heads=cfg.heads, ff_width=cfg.ff_width, n_layers=cfg.n_layers)
            self.enc_2d = PoseTransformerEncoder("enc_2d", j, 2, d, rng.child("enc_2d"), use_bbox=True, **kw)
            self.enc_3d = PoseTransformerEncoder("enc_3d", j, 3, d, rng.child("enc_3d"), use_bbox=False, **kw)
        else:
            self.enc_2d = MlpEncoder("enc_2d", 2 * j + 4, d, rng.child("enc_2d"), cfg.mlp_width, cfg.n_blocks)
            self.enc_3d = MlpEncoder("enc_3d", 3 * j, d, rng.child("enc_3d"), cfg.mlp_width, cfg.n_blocks)
        self.add_module("enc_2d", self.enc_2d)
        self.add_module("enc_3d", self.enc_3d)
        dec_kw = dict(width=cfg.mlp_width, n_blocks=cfg.decoder_blocks, use_bbox=cfg.decoder_bbox,
                      use_modality_token=cfg.use_modality_token)
        if cfg.decoder == "diffusion":
            dec_kw["steps"] = cfg.diffusion_steps
            dec_cls = ScoreDecoder
        else:
            dec_cls = MlpDecoder
        self.dec_2d = self.add_module("dec_2d", dec_cls("dec_2d", d, j, 2, rng.child("dec_2d"), **dec_kw))
        self.dec_3d = self.add_module("dec_3d", dec_cls("dec_3d", d, j, 3, rng.child("dec_3d"), **dec_kw))
        self.pose_scale = self.add_param("pose_scale", np.array(300.0), trainable=False)
        self.mean_pose = self.add_param("mean_pose", np.zeros((j, 3)), trainable=False)
        self.history: list[int] = []  # stages completed so far
        self.temperature = Temperature(tau0, tau_range)
        self._params["temperature"] = self.temperature.param

    # ------------------------------------------------------------------ groups
    def group(self, name: str) -> list[Parameter]:
        if name == "temperature":
            return [self.temperature.param]
        if name not in self.GROUPS:
            raise KeyError(f"unknown module group {name!r}; expected one of {self.GROUPS}")
        return getattr(self, name).parameters()

    def freeze(self, names) -> None:
        for n in names:
            for p in self.group(n):
                p.trainable = False

    def unfreeze_all(self) -> None:
        for n in self.GROUPS:
            for p in self.group(n):
                p.trainable = True
        self.pose_scale.trainable = False
        if isinstance(self.dec_2d, ScoreDecoder):
            self.dec_2d.data_sigma.trainable = False
            self.dec_3d.data_sigma.trainable = False

    def calibrate(self, ds: ArrayDataset) -> None:
        """Fix the pose normaliser (and the diffusion data spread) from training data."""
        rms = float(np.sqrt(np.mean(ds.pose3d ** 2)))
        self.pose_scale.value = np.array(rms)
        self.mean_pose.value = ds.pose3d.mean(axis=0)
        if isinstance(self.dec_3d, ScoreDecoder):
            self.dec_3d.data_sigma.value = np.array(float(np.std(ds.pose3d / rms)))
            self.dec_2d.data_sigma.value = np.array(float(np.std((ds.pose2d_norm - 0.5) * 2.0)))

    # ------------------------------------------------------------------ encoders
    def encode_img(self, batch: Batch) -> Tensor:
        return self.enc_img(batch.images)

    def encode_2d(self, batch: Batch) -> Tensor:
        return self.enc_2d(batch.pose2d, batch.bbox)

    def encode_3d(self, batch: Batch) -> Tensor:
        return self.enc_3d(batch.pose3d_m)

    def encode(self, batch: Batch, modalities=("img", "2d", "3d")) -> EmbeddingBatch:
        get = {"img": self.encode_img, "2d": self.encode_2d, "3d": self.encode_3d}
        out = {m: get[m](batch) if m in modalities else None for m in ("img", "2d", "3d")}
        return EmbeddingBatch(out["img"], out["2d"], out["3d"])

    # ------------------------------------------------------------------ decoders
    def _dec_bbox(self, batch: Batch):
        return batch.bbox if self.config.decoder_bbox else None

    def decoder_loss_3d(self, emb, modality: str, batch: Batch, rng: Rng | None = None) -> Tensor:
        target = batch.pose3d / float(self.pose_scale.value)
        return self.dec_3d.loss(target, emb, modality, self._dec_bbox(batch), rng)

    def decoder_loss_2d(self, emb, modality: str, batch: Batch, rng: Rng | None = None) -> Tensor:
        return self.dec_2d.loss(batch.pose2d, emb, modality, self._dec_bbox(batch), rng)

    def predict_3d(self, emb, modality: str, batch: Batch, rng: Rng | None = None) -> np.ndarray:
        """Pelvis-relative 3D joints in mm."""
        out = self.dec_3d.predict(_data(emb), modality, self._dec_bbox(batch), rng)
        return out * float(self.pose_scale.value)

    def predict_2d(self, emb, modality: str, batch: Batch, rng: Rng | None = None) -> np.ndarray:
        """Bbox-normalised 2D joints in [0, 1]."""
        out = self.dec_2d.predict(_data(emb), modality, self._dec_bbox(batch), rng)
        return out / 2.0 + 0.5

    # ------------------------------------------------------------------ persistence
    def save(self, path, meta: dict | None = None):
        info = {"model_config": self.config.to_dict(), "tau0": self.temperature.tau0,
                "tau_range": list(self.temperature.clamp_range), "history": list(self.history)}
        info.update(meta or {})
        return save_checkpoint(path, self.state_dict(), info)

    @classmethod
    def load(cls, path) -> tuple["TriModalModel", dict]:
        state, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["model_config"]), tau0=meta["tau0"], tau_range=meta["tau_range"])
        model.load_state_dict(state)
        model.history = list(meta.get("history", []))
        return model, meta


def _data(x):
    return x.data if isinstance(x, Tensor) else x
