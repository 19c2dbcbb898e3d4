"""Pose-estimation metrics and embedding-alignment diagnostics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .numkit import ValidationError, procrustes_align


def _pair(pred, gt, k: int | None = None):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if pred.ndim < 2 or (k is not None and pred.shape[-1] != k):
        raise ValidationError(f"expected (..., J, {k or 'k'}) joints, got {pred.shape}")
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    """Per-joint Euclidean distances, same leading shape as the inputs."""
    pred, gt = _pair(pred, gt)
    return np.sqrt(np.sum((pred - gt) ** 2, axis=-1))


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error (units of the input, mm for poses)."""
    pred, gt = _pair(pred, gt, 3)
    return float(joint_errors(pred, gt).mean())


def pa_align(pred, gt) -> np.ndarray:
    """``pred`` after similarity Procrustes alignment onto ``gt`` (per sample)."""
    pred, gt = _pair(pred, gt, 3)
    flat_p = pred.reshape(-1, *pred.shape[-2:])
    flat_g = gt.reshape(-1, *gt.shape[-2:])
    out = np.empty_like(flat_p)
    for i, (p, g) in enumerate(zip(flat_p, flat_g)):
        out[i] = procrustes_align(p, g).apply(p)
    return out.reshape(pred.shape)


def pa_mpjpe_per_sample(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt, 3)
    return joint_errors(pa_align(pred, gt), gt).mean(axis=-1)


def pa_mpjpe(pred, gt) -> float:
    """MPJPE after scale-including Procrustes alignment."""
    return float(np.mean(pa_mpjpe_per_sample(pred, gt)))


def bbox_diagonal(bbox) -> np.ndarray:
    bbox = np.asarray(bbox, dtype=np.float64)
    return np.hypot(bbox[..., 2], bbox[..., 3])


def pck(pred, gt, threshold: float = 0.05, reference=None, bbox=None) -> float:
    """Fraction of 2D joints closer than ``threshold * reference``.

    The reference defaults to the bbox diagonal (pixels, pass ``bbox``); for
    bbox-normalised joints and no bbox it is the unit square diagonal.
    Explicit ``reference`` values (scalar or one per sample) override both.
    """
    pred, gt = _pair(pred, gt, 2)
    if reference is None:
        reference = bbox_diagonal(bbox) if bbox is not None else math.sqrt(2.0)
    ref = np.asarray(reference, dtype=np.float64)
    if np.any(ref <= 0):
        raise ValidationError("PCK reference length must be positive")
    err = joint_errors(pred, gt)
    if ref.ndim:
        ref = ref.reshape(ref.shape + (1,) * (err.ndim - ref.ndim))
    return float(np.mean(err < threshold * ref))


def epe(pred, gt, bbox=None, in_pixels: bool = True) -> float:
    """Mean 2D end-point error; bbox-normalised inputs are scaled back to pixels by default."""
    pred, gt = _pair(pred, gt, 2)
    if in_pixels:
        if bbox is None:
            raise ValidationError("EPE in pixels needs the bounding boxes")
        wh = np.asarray(bbox, dtype=np.float64)[..., 2:4]
        wh = wh.reshape(wh.shape[:-1] + (1,) * (pred.ndim - wh.ndim) + (2,))
        pred, gt = pred * wh, gt * wh
    return float(joint_errors(pred, gt).mean())


def mean_positive_cosine(x_a, x_b) -> float:
    """Mean inner product of matching rows (rows assumed unit-norm)."""
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x_a.shape != x_b.shape:
        raise ValidationError(f"embedding shapes differ: {x_a.shape} vs {x_b.shape}")
    return float(np.einsum("bd,bd->b", x_a, x_b).mean())


def retrieval_top1(x_a, x_b, chunk: int = 512) -> float:
    """Fraction of rows of ``x_a`` whose most similar row of ``x_b`` has the same index."""
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x_a.shape != x_b.shape or len(x_a) < 2:
        raise ValidationError(f"need matching (B >= 2, D) embeddings, got {x_a.shape} and {x_b.shape}")
    hits = 0
    for s in range(0, len(x_a), chunk):
        sim = x_a[s:s + chunk] @ x_b.T
        hits += int(np.sum(np.argmax(sim, axis=1) == np.arange(s, s + len(sim))))
    return hits / len(x_a)


UNITS = {
    "mpjpe": "mm", "pa_mpjpe": "mm", "pck": "fraction", "epe": "px",
    "cos": "cosine", "top1": "fraction", "mean_pose": "mm",
}


def unit_for(name: str) -> str:
    for key, unit in UNITS.items():
        if key in name:
            return unit
    return ""


@dataclass
class MetricReport:
    values: dict[str, float]
    n_samples: int
    fingerprint: str = ""
    units: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValidationError("a metric report needs at least one sample")
        bad = [k for k, v in self.values.items() if not math.isfinite(v)]
        if bad:
            raise ValidationError(f"non-finite metric values: {bad}")
        self.values = {k: float(v) for k, v in self.values.items()}
        for k in self.values:
            self.units.setdefault(k, unit_for(k))

    def __getitem__(self, key):
        return self.values[key]

    def header(self) -> list[str]:
        return list(self.values) + ["n_samples", "fingerprint"]

    def row(self) -> list:
        return [repr(v) for v in self.values.values()] + [self.n_samples, self.fingerprint]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerow(self.row())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"values": self.values, "units": self.units, "n_samples": self.n_samples,
                "fingerprint": self.fingerprint}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(dict(d["values"]), int(d["n_samples"]), d.get("fingerprint", ""), dict(d.get("units", {})))


def reports_to_csv(reports: list[MetricReport], labels: list[dict] | None = None) -> str:
    """One CSV row per report, label columns first."""
    if not reports:
        return ""
    labels = labels or [{} for _ in reports]
    label_keys = list(labels[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(label_keys + reports[0].header())
    for lab, rep in zip(labels, reports):
        w.writerow([lab[k] for k in label_keys] + rep.row())
    return buf.getvalue()
