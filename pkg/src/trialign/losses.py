"""Contrastive objectives for aligning image, 2D-pose and 3D-pose embeddings.

Pairwise InfoNCE over cosine logits, and the triplet InfoNCE whose logits are
the top eigenvalue of the 3x3 Gram matrix of a stacked (image, 2D, 3D)
embedding triplet. Both share a single learnable temperature.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autograd import Parameter, Tensor, lift, ops
from .numkit import Rng, ValidationError, check_unit_rows

MODALITIES = ("img", "2d", "3d")
PAIRS = ("img-2d", "img-3d", "2d-3d")


class ConfigError(ValueError):
    pass


class Temperature:
    """Learnable softmax temperature stored as ``log(1 / tau)``; clamped on ``tau``."""

    def __init__(self, tau0: float, clamp_range=(1e-2, 1e4), name: str = "temperature.log_inv_tau"):
        lo, hi = float(clamp_range[0]), float(clamp_range[1])
        if not (0 < lo <= hi):
            raise ConfigError(f"invalid temperature clamp range [{lo}, {hi}]")
        if not (lo <= tau0 <= hi):
            raise ConfigError(f"tau0={tau0} outside clamp range [{lo}, {hi}]")
        self.tau0 = float(tau0)
        self.clamp_range = (lo, hi)
        self.param = Parameter(name, np.log(1.0 / tau0))

    @property
    def tau(self) -> float:
        return float(np.exp(-self.param.value))

    @tau.setter
    def tau(self, value: float):
        self.param.value = np.array(np.log(1.0 / float(value)))

    def inverse(self) -> Tensor:
        """``1 / tau`` as a tensor on the active tape."""
        return ops.exp(lift(self.param))

    def reset(self, tau0: float | None = None, clamp_range=None):
        if clamp_range is not None:
            lo, hi = float(clamp_range[0]), float(clamp_range[1])
            if not (0 < lo <= hi):
                raise ConfigError(f"invalid temperature clamp range [{lo}, {hi}]")
            self.clamp_range = (lo, hi)
        if tau0 is not None:
            lo, hi = self.clamp_range
            if not (lo <= tau0 <= hi):
                raise ConfigError(f"tau0={tau0} outside clamp range [{lo}, {hi}]")
            self.tau0 = float(tau0)
        self.tau = self.tau0

    def __repr__(self):
        return f"Temperature(tau={self.tau:.5g}, range={self.clamp_range})"


def clamp_temperature(temp: Temperature) -> Temperature:
    lo, hi = temp.clamp_range
    if lo > hi:
        raise ConfigError(f"invalid temperature clamp range [{lo}, {hi}]")
    tau = temp.tau
    if tau < lo:
        temp.tau = lo
    elif tau > hi:
        temp.tau = hi
    return temp


def _inv_tau(temp) -> Tensor:
    if isinstance(temp, Temperature):
        return temp.inverse()
    if isinstance(temp, Tensor):
        return temp
    return lift(np.asarray(1.0 / float(temp)))


@dataclass
class EmbeddingBatch:
    """Unit-norm embeddings of one batch; a modality may be ``None`` when unused."""

    x_img: Tensor | None
    x_2d: Tensor | None
    x_3d: Tensor | None

    def __post_init__(self):
        self.x_img, self.x_2d, self.x_3d = (None if x is None else lift(x) for x in (self.x_img, self.x_2d, self.x_3d))
        shapes = {x.shape for x in (self.x_img, self.x_2d, self.x_3d) if x is not None}
        if len(shapes) > 1:
            raise ValidationError(f"embedding shapes differ: {sorted(shapes)}")
        for x in (self.x_img, self.x_2d, self.x_3d):
            if x is not None:
                if x.ndim != 2:
                    raise ValidationError(f"embeddings must be BxD, got {x.shape}")
                check_unit_rows(x.data)

    def get(self, modality: str) -> Tensor:
        x = {"img": self.x_img, "2d": self.x_2d, "3d": self.x_3d}[modality]
        if x is None:
            raise ValidationError(f"modality {modality!r} is missing from the batch")
        return x

    @property
    def batch_size(self) -> int:
        return next(x.shape[0] for x in (self.x_img, self.x_2d, self.x_3d) if x is not None)


def info_nce_pair(x_s, x_t, temp, symmetric: bool = True) -> Tensor:
    """InfoNCE with cosine logits and the diagonal as positives.

    ``symmetric`` averages the source->target and target->source directions.
    """
    x_s, x_t = lift(x_s), lift(x_t)
    if x_s.shape != x_t.shape or x_s.ndim != 2:
        raise ValidationError(f"pair embeddings must share a BxD shape, got {x_s.shape} and {x_t.shape}")
    b = x_s.shape[0]
    if b < 2:
        raise ValidationError("InfoNCE needs a batch of at least 2 (no negatives otherwise)")
    logits = ops.mul(ops.matmul(x_s, ops.swapaxes(x_t, 0, 1)), _inv_tau(temp))
    labels = np.arange(b)
    loss = ops.cross_entropy(logits, labels)
    if symmetric:
        loss = ops.scale(ops.add(loss, ops.cross_entropy(ops.swapaxes(logits, 0, 1), labels)), 0.5)
    return loss


def sample_triplet_indices(batch_size: int, rng: Rng, reject_collisions: bool = False) -> np.ndarray:
    """Random negative-triplet index list of shape (B, B, 3).

    ``[b, i, j]`` is the sample whose modality-``j`` embedding enters anchor
    ``b``'s ``i``-th triplet. Slot 0 is the positive triplet, the image column
    is pinned to the anchor, and for every slot ``i >= 1`` the 2D and 3D columns
    are independent random permutations of the batch.

    With ``reject_collisions`` a slot whose permutations reproduce some
    anchor's positive triplet is redrawn.
    """
    b = int(batch_size)
    if b < 1:
        raise ValidationError(f"batch size must be >= 1, got {b}")
    idx = np.empty((b, b, 3), dtype=np.int64)
    arange = np.arange(b)
    idx[:, :, 0] = arange[:, None]
    idx[:, 0, :] = arange[:, None]
    if b == 1:
        return idx
    perms = rng.generator.permuted(np.broadcast_to(arange, (b - 1, 2, b)).copy(), axis=-1)
    if reject_collisions:
        for i in range(b - 1):
            while np.any((perms[i, 0] == arange) & (perms[i, 1] == arange)):
                perms[i] = rng.generator.permuted(perms[i], axis=-1)
    # perms[i - 1, j - 1, anchor] -> idx[anchor, i, j]
    idx[:, 1:, 1:] = np.transpose(perms, (2, 0, 1))
    return idx


def anchor_triplet_count(batch_size: int) -> int:
    """Triplets in a batch containing at least one embedding of a given anchor frame."""
    b = int(batch_size)
    return 3 * b * b - 3 * b + 1


def triplet_gram(x_img, x_2d, x_3d, idx: np.ndarray) -> Tensor:
    """Gram matrices ``M M^T`` of the stacked triplets selected by ``idx``, shape (B, B, 3, 3).

    Entries are read off the three BxB cross-modal similarity matrices, which
    equals stacking each 3xD triplet explicitly without materialising
    a (B, B, 3, D) array.
    """
    xs = [lift(x) for x in (x_img, x_2d, x_3d)]
    b = xs[0].shape[0]
    idx = np.asarray(idx)
    if idx.ndim != 3 or idx.shape[2] != 3 or idx.shape[0] != b:
        raise ValidationError(f"index list of shape {idx.shape} does not match batch size {b}")
    if idx.min() < 0 or idx.max() >= b:
        raise ValidationError("index list refers to samples outside the batch")
    a0, a1, a2 = idx[..., 0], idx[..., 1], idx[..., 2]
    sq = [ops.sum(ops.mul(x, x), axis=1) for x in xs]
    s01 = ops.matmul(xs[0], ops.swapaxes(xs[1], 0, 1))
    s02 = ops.matmul(xs[0], ops.swapaxes(xs[2], 0, 1))
    s12 = ops.matmul(xs[1], ops.swapaxes(xs[2], 0, 1))
    g00, g11, g22 = ops.gather(sq[0], a0), ops.gather(sq[1], a1), ops.gather(sq[2], a2)
    g01 = ops.gather(s01, (a0, a1))
    g02 = ops.gather(s02, (a0, a2))
    g12 = ops.gather(s12, (a1, a2))
    rows = [
        ops.stack([g00, g01, g02], axis=-1),
        ops.stack([g01, g11, g12], axis=-1),
        ops.stack([g02, g12, g22], axis=-1),
    ]
    return ops.stack(rows, axis=-2)


def triplet_lambda_logits(batch: EmbeddingBatch, idx: np.ndarray) -> Tensor:
    """BxB top eigenvalues of the selected triplets' Gram matrices; column 0 is the positive."""
    gram = triplet_gram(batch.get("img"), batch.get("2d"), batch.get("3d"), idx)
    return ops.top_eig(gram)


def info_nce_triplet(lambda_logits, temp) -> Tensor:
    lam = lift(lambda_logits)
    if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
        raise ValidationError(f"expected BxB eigenvalue logits, got {lam.shape}")
    logits = ops.mul(lam, _inv_tau(temp))
    return ops.cross_entropy(logits, np.zeros(lam.shape[0], dtype=np.int64))


def _pair_modalities(pair: str) -> tuple[str, str]:
    if pair not in PAIRS:
        raise ConfigError(f"unknown modality pair {pair!r}; expected one of {PAIRS}")
    s, t = pair.split("-")
    return s, t


def contrastive_terms(
    batch: EmbeddingBatch,
    temp,
    alpha: float,
    rng: Rng | None,
    active_pairs: Iterable[str],
    use_triplet: bool,
    symmetric: bool = True,
    reject_collisions: bool = False,
) -> dict[str, Tensor]:
    """Individual loss terms keyed ``pair_<pair>`` and ``triplet`` (the latter unweighted)."""
    pairs = list(active_pairs)
    if not pairs:
        raise ConfigError("contrastive loss needs at least one active modality pair")
    terms = {}
    for pair in pairs:
        s, t = _pair_modalities(pair)
        terms[f"pair_{pair}"] = info_nce_pair(batch.get(s), batch.get(t), temp, symmetric=symmetric)
    if use_triplet:
        if rng is None:
            raise ConfigError("triplet loss needs an rng for index sampling")
        idx = sample_triplet_indices(batch.batch_size, rng, reject_collisions=reject_collisions)
        terms["triplet"] = info_nce_triplet(triplet_lambda_logits(batch, idx), temp)
    return terms


def contrastive_loss(
    batch: EmbeddingBatch,
    temp,
    alpha: float,
    rng: Rng | None,
    active_pairs: Iterable[str],
    use_triplet: bool,
    symmetric: bool = True,
    reject_collisions: bool = False,
) -> Tensor:
    """Sum of the active pairwise InfoNCE terms plus ``alpha`` times the triplet term."""
    terms = contrastive_terms(batch, temp, alpha, rng, active_pairs, use_triplet, symmetric, reject_collisions)
    return combine_terms(terms, alpha)


def combine_terms(terms: dict[str, Tensor], alpha: float) -> Tensor:
    total = None
    for key, value in terms.items():
        v = ops.scale(value, alpha) if key == "triplet" else value
        total = v if total is None else ops.add(total, v)
    return total
