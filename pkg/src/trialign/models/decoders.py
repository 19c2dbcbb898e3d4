from __future__ import annotations

import numpy as np

from ..autograd import Tensor, lift, ops
from ..numkit import Rng
from .layers import Linear, MlpBlockStack, Module

MODALITY_INDEX = {"img": 0, "2d": 1, "3d": 2}


def modality_index(modality, batch: int) -> np.ndarray:
    if isinstance(modality, str):
        if modality not in MODALITY_INDEX:
            raise ValueError(f"unknown modality {modality!r}; expected one of {sorted(MODALITY_INDEX)}")
        return np.full(batch, MODALITY_INDEX[modality], dtype=np.int64)
    idx = np.broadcast_to(np.asarray(modality, dtype=np.int64), (batch,))
    if idx.min() < 0 or idx.max() > 2:
        raise ValueError(f"modality indices must be in 0..2, got {np.unique(idx)}")
    return idx


class _Conditioned(Module):
    """Shared conditioning: embedding + modality token (+ bbox token)."""

    def _init_conditioning(self, embed_dim: int, rng: Rng, use_bbox: bool, use_modality_token: bool):
        self.embed_dim = embed_dim
        self.use_bbox = use_bbox
        self.use_modality_token = use_modality_token
        self.modality_tokens = self.add_param("modality_tokens", rng.child("tokens").normal(0.0, 0.1, size=(3, embed_dim)))
        if use_bbox:
            self.bbox_proj = self.add_module("bbox", Linear(self._name("bbox"), 4, embed_dim, rng.child("bbox")))

    def condition(self, embedding, modality, bbox=None) -> Tensor:
        emb = lift(embedding)
        if emb.ndim != 2 or emb.shape[1] != self.embed_dim:
            raise ValueError(f"{self.prefix}: expected (B, {self.embed_dim}) embeddings, got {emb.shape}")
        b = emb.shape[0]
        idx = modality_index(modality, b)
        cond = emb
        if self.use_modality_token:
            cond = ops.add(cond, ops.gather(lift(self.modality_tokens), idx))
        if self.use_bbox:
            if bbox is None:
                raise ValueError(f"{self.prefix}: this decoder needs a bounding box")
            cond = ops.add(cond, self.bbox_proj(bbox))
        return cond


class MlpDecoder(_Conditioned):
    """Residual MLP from a conditioned embedding to ``(B, J, out_dim)`` pose units."""

    def __init__(self, prefix: str, embed_dim: int, n_joints: int, out_dim: int, rng: Rng, width: int = 128,
                 n_blocks: int = 3, use_bbox: bool = False, use_modality_token: bool = True):
        super().__init__(prefix)
        self._init_conditioning(embed_dim, rng, use_bbox, use_modality_token)
        self.n_joints, self.out_dim = n_joints, out_dim
        self.stack = self.add_module(
            "stack", MlpBlockStack(self._name("stack"), embed_dim, width, n_joints * out_dim, rng.child("stack"), n_blocks)
        )

    def __call__(self, embedding, modality, bbox=None) -> Tensor:
        cond = self.condition(embedding, modality, bbox)
        return ops.reshape(self.stack(cond), (cond.shape[0], self.n_joints, self.out_dim))

    def loss(self, target, embedding, modality, bbox=None, rng=None) -> Tensor:
        return ops.mse(self(embedding, modality, bbox), target)

    def predict(self, embedding, modality, bbox=None, rng=None) -> np.ndarray:
        return self(embedding, modality, bbox).data


def sinusoidal_embedding(t: np.ndarray, dim: int = 32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    arg = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class ScoreDecoder(_Conditioned):
    """Denoising score-matching decoder on a geometric (variance-exploding) noise schedule.

    The network outputs a denoised pose ``D(x, sigma)`` as
    ``c_skip * x + c_out * F(c_in * x, cond)`` and the score is
    ``(D - x) / sigma^2``. ``data_sigma`` (the spread of the training poses)
    sets ``c_skip`` and ``c_out``; when it is zero the network predicts the clean
    pose outright.
    """

    def __init__(self, prefix: str, embed_dim: int, n_joints: int, out_dim: int, rng: Rng, width: int = 128,
                 n_blocks: int = 3, use_bbox: bool = False, use_modality_token: bool = True,
                 sigma_min: float = 0.01, sigma_max: float = 5.0, steps: int = 1000, time_dim: int = 32):
        super().__init__(prefix)
        self._init_conditioning(embed_dim, rng, use_bbox, use_modality_token)
        self.n_joints, self.out_dim = n_joints, out_dim
        self.sigma_min, self.sigma_max, self.steps, self.time_dim = sigma_min, sigma_max, steps, time_dim
        self.data_sigma = self.add_param("data_sigma", np.array(1.0), trainable=False)
        self.time_proj = self.add_module("time", Linear(self._name("time"), time_dim, embed_dim, rng.child("time")))
        n = n_joints * out_dim
        self.net = self.add_module("net", MlpBlockStack(self._name("net"), n + embed_dim, width, n, rng.child("net"), n_blocks))

    def sigma(self, t):
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** np.asarray(t, dtype=np.float64)

    def _coefficients(self, sigma: np.ndarray):
        sd2 = float(self.data_sigma.value) ** 2
        s2 = sigma * sigma
        c_skip = sd2 / (s2 + sd2)
        c_out = sigma / np.sqrt(s2 + sd2)
        c_in = 1.0 / np.sqrt(s2 + max(sd2, 1.0))
        return c_skip, c_out, c_in

    def denoise(self, x, t: np.ndarray, cond: Tensor) -> Tensor:
        """Denoised estimate for noisy flat poses ``x`` (B, J*k) at times ``t`` (B,)."""
        x = lift(x)
        sig = self.sigma(t)
        c_skip, c_out, c_in = self._coefficients(sig)
        h = ops.add(cond, self.time_proj(sinusoidal_embedding(t, self.time_dim)))
        f = self.net(ops.concat([ops.mul(x, c_in[:, None]), h], axis=1))
        return ops.add(ops.mul(x, c_skip[:, None]), ops.mul(f, c_out[:, None]))

    def score(self, x, t: np.ndarray, cond: Tensor) -> Tensor:
        sig = self.sigma(t)
        return ops.mul(ops.sub(self.denoise(x, t, cond), x), (1.0 / (sig * sig))[:, None])

    def loss(self, target, embedding, modality, bbox=None, rng: Rng | None = None,
             t: np.ndarray | None = None, noise: np.ndarray | None = None) -> Tensor:
        """Denoising score matching with weight ``sigma(t)^2``; ``t`` and ``noise`` may be frozen."""
        x0 = lift(target)
        b = x0.shape[0]
        flat = x0.data.reshape(b, -1)
        if t is None:
            t = 1.0 - rng.uniform(0.0, 1.0, size=b)  # Uniform(0, 1]
        if noise is None:
            noise = rng.normal(size=flat.shape)
        sig = self.sigma(t)
        xt = flat + sig[:, None] * noise
        cond = self.condition(embedding, modality, bbox)
        s = self.score(xt, t, cond)
        # sigma^2 * |s + z / sigma|^2
        resid = ops.add(ops.mul(s, sig[:, None]), noise)
        return ops.mean(ops.square(resid))

    def sample(self, embedding, modality, rng: Rng, bbox=None, steps: int | None = None) -> np.ndarray:
        """Reverse-time Euler-Maruyama from N(0, sigma_max^2), then one denoising step at sigma_min."""
        steps = steps or self.steps
        cond = self.condition(lift(embedding).data, modality, None if bbox is None else lift(bbox).data)
        cond = Tensor(cond.data)
        b = cond.shape[0]
        n = self.n_joints * self.out_dim
        x = rng.normal(0.0, self.sigma_max, size=(b, n))
        log_ratio = np.log(self.sigma_max / self.sigma_min)
        dt = 1.0 / steps
        for i in range(steps):
            t = 1.0 - i * dt
            tv = np.full(b, t)
            g2 = 2.0 * self.sigma(t) ** 2 * log_ratio
            s = self.score(x, tv, cond).data
            x = x + g2 * s * dt + np.sqrt(g2 * dt) * rng.normal(size=x.shape)
        x = self.denoise(x, np.zeros(b), cond).data
        return x.reshape(b, self.n_joints, self.out_dim)

    def predict(self, embedding, modality, bbox=None, rng: Rng | None = None) -> np.ndarray:
        return self.sample(embedding, modality, rng or Rng(0), bbox)
