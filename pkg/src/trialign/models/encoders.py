from __future__ import annotations

import numpy as np

from ..autograd import Tensor, lift, ops
from ..numkit import Rng
from .layers import LayerNorm, Linear, MlpBlockStack, Module, TransformerLayer


class MlpEncoder(Module):
    """Residual MLP over a flat input, projected to the shared space and unit-normalised."""

    def __init__(self, prefix: str, n_in: int, embed_dim: int, rng: Rng, width: int = 128, n_blocks: int = 3):
        super().__init__(prefix)
        self.n_in = n_in
        self.embed_dim = embed_dim
        self.stack = self.add_module("stack", MlpBlockStack(self._name("stack"), n_in, width, embed_dim, rng, n_blocks))

    def __call__(self, x, bbox=None) -> Tensor:
        x = lift(x)
        if x.ndim > 2:
            x = ops.reshape(x, (x.shape[0], -1))
        if bbox is not None:
            x = ops.concat([x, lift(bbox)], axis=1)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"{self.prefix}: expected input width {self.n_in}, got {x.shape[-1]}")
        return ops.l2_normalize(self.stack(x))


class PoseTransformerEncoder(Module):
    """Keypoint tokens + learned position embeddings, a [CLS] token and (for 2D
    input) a bounding-box token, through pre-norm transformer layers. The
    [CLS] output is projected to ``embed_dim`` and unit-normalised.
    """

    def __init__(self, prefix: str, n_joints: int, in_dim: int, embed_dim: int, rng: Rng, width: int = 64,
                 heads: int = 2, ff_width: int = 128, n_layers: int = 3, use_bbox: bool = False):
        super().__init__(prefix)
        self.n_joints, self.in_dim, self.width = n_joints, in_dim, width
        self.embed_dim = embed_dim
        self.use_bbox = use_bbox
        self.patch = self.add_module("patch", Linear(self._name("patch"), in_dim, width, rng.child("patch")))
        self.pos = self.add_param("pos", rng.child("pos").normal(0.0, 0.02, size=(n_joints, width)))
        self.cls = self.add_param("cls", rng.child("cls").normal(0.0, 0.02, size=(width,)))
        if use_bbox:
            self.bbox_proj = self.add_module("bbox", Linear(self._name("bbox"), 4, width, rng.child("bbox")))
        self.layers = [
            self.add_module(f"layers.{i}", TransformerLayer(self._name(f"layers.{i}"), width, heads, ff_width,
                                                            rng.child("layer", i)))
            for i in range(n_layers)
        ]
        self.ln_out = self.add_module("ln_out", LayerNorm(self._name("ln_out"), width))
        self.head = self.add_module("head", Linear(self._name("head"), width, embed_dim, rng.child("head")))

    @property
    def token_count(self) -> int:
        return self.n_joints + (2 if self.use_bbox else 1)

    def tokens(self, pose, bbox=None) -> Tensor:
        pose = lift(pose)
        if pose.ndim != 3 or pose.shape[1:] != (self.n_joints, self.in_dim):
            raise ValueError(f"{self.prefix}: expected (B, {self.n_joints}, {self.in_dim}) pose, got {pose.shape}")
        if self.use_bbox and bbox is None:
            raise ValueError(f"{self.prefix}: this encoder needs a bounding box")
        if not self.use_bbox and bbox is not None:
            raise ValueError(f"{self.prefix}: this encoder takes no bounding box")
        b = pose.shape[0]
        patches = ops.add(self.patch(pose), self.pos)
        seq = [ops.add(np.zeros((b, 1, self.width)), self.cls)]
        if self.use_bbox:
            bbox = lift(bbox)
            seq.append(ops.reshape(self.bbox_proj(bbox), (b, 1, self.width)))
        seq.append(patches)
        return ops.concat(seq, axis=1)

    def __call__(self, pose, bbox=None) -> Tensor:
        x = self.tokens(pose, bbox)
        for layer in self.layers:
            x = layer(x)
        cls_out = ops.gather(self.ln_out(x), (slice(None), 0))
        return ops.l2_normalize(self.head(cls_out))
