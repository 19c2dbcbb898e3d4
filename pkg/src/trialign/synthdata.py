"""Synthetic tri-modal samples: articulated 3D skeletons, pinhole 2D projections
with bounding boxes, and rasterised pseudo-images.

Conventions
-----------
* Body/world frame: y up, subject faces +z, subject's left is +x, pelvis at origin.
* Camera frame (OpenCV): x right, y down, z forward; ``X_cam = R @ X_world + t``.
  Because the pelvis sits at the world origin, ``t`` is the pelvis position in
  the camera frame and ``pose3d + t`` recovers the camera-frame joints.
* ``pose3d`` is pelvis-relative and expressed in camera axes, in millimetres.
* ``bbox`` is ``(cx, cy, w, h)`` in pixels; ``pose2d_norm = (uv - (c - wh/2)) / wh``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numkit import Rng, ValidationError

DEG = np.pi / 180.0


@dataclass
class SkeletonSpec:
    """Kinematic tree with rest-pose bone directions, length ranges (mm) and
    per-bone Euler angle ranges (radians, XYZ about the parent frame)."""

    names: list[str]
    parents: list[int]
    rest_dirs: np.ndarray
    length_range: np.ndarray
    angle_range: np.ndarray

    def __post_init__(self):
        self.rest_dirs = np.asarray(self.rest_dirs, dtype=np.float64)
        self.length_range = np.asarray(self.length_range, dtype=np.float64)
        self.angle_range = np.asarray(self.angle_range, dtype=np.float64)
        self.order = _topological_order(self.parents)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "parents": list(self.parents),
            "rest_dirs": self.rest_dirs.tolist(),
            "length_range": self.length_range.tolist(),
            "angle_range": self.angle_range.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        return cls(d["names"], d["parents"], d["rest_dirs"], d["length_range"], d["angle_range"])


def _topological_order(parents: Sequence[int]) -> list[int]:
    n = len(parents)
    if n == 0 or parents[0] != -1:
        raise ValidationError("joint 0 must be the root (parent -1)")
    order, state = [], [0] * n  # 0 new, 1 visiting, 2 done

    def visit(j):
        if state[j] == 2:
            return
        if state[j] == 1:
            raise ValidationError(f"skeleton topology has a cycle through joint {j}")
        state[j] = 1
        p = parents[j]
        if p >= 0:
            if not 0 <= p < n:
                raise ValidationError(f"joint {j} has invalid parent {p}")
            visit(p)
        elif j != 0:
            raise ValidationError(f"joint {j} is a second root")
        state[j] = 2
        order.append(j)

    for j in range(n):
        visit(j)
    return order


def default_skeleton() -> SkeletonSpec:
    """16-joint human skeleton (pelvis, legs, spine, head, arms)."""
    names, parents, dirs, lengths, angles = [], [], [], [], []

    def bone(name, parent, direction, length, ax=(0, 0), ay=(0, 0), az=(0, 0)):
        names.append(name)
        parents.append(parent)
        d = np.asarray(direction, dtype=float)
        dirs.append(d / (np.linalg.norm(d) or 1.0))
        lengths.append(length)
        angles.append([[a * DEG for a in ax], [a * DEG for a in ay], [a * DEG for a in az]])

    def mirror(r):
        # reflection through the sagittal plane flips y and z rotations
        return (-r[1], -r[0])

    bone("pelvis", -1, (0, 0, 0), (0, 0))
    for side, sx in (("r", -1.0), ("l", 1.0)):
        m = (lambda r: r) if sx > 0 else mirror
        hip = len(names)
        bone(f"{side}_hip", 0, (sx, 0, 0), (110, 140))
        bone(f"{side}_knee", hip, (0, -1, 0), (400, 460), ax=(-80, 20), ay=m((-15, 15)), az=m((-5, 25)))
        bone(f"{side}_ankle", hip + 1, (0, -1, 0), (380, 440), ax=(0, 110))
    bone("spine", 0, (0, 1, 0), (220, 260), ax=(-10, 35), ay=(-25, 25), az=(-15, 15))
    bone("neck", 7, (0, 1, 0), (230, 270), ax=(-10, 20), ay=(-10, 10), az=(-10, 10))
    bone("head", 8, (0, 1, 0), (110, 140), ax=(-25, 30), ay=(-40, 40), az=(-15, 15))
    for side, sx in (("l", 1.0), ("r", -1.0)):
        m = (lambda r: r) if sx > 0 else mirror
        sh = len(names)
        bone(f"{side}_shoulder", 8, (sx, -0.15, 0), (150, 190), az=m((-10, 10)))
        bone(f"{side}_elbow", sh, (sx, 0, 0), (260, 310), ay=m((-60, 80)), az=m((-75, 45)))
        bone(f"{side}_wrist", sh + 1, (sx, 0, 0), (230, 270), ay=m((-130, 0)))
    return SkeletonSpec(names, parents, np.array(dirs), np.array(lengths, dtype=float), np.array(angles))


def _euler_xyz(angles: np.ndarray) -> np.ndarray:
    ax, ay, az = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def forward_kinematics(spec: SkeletonSpec, lengths: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Joint positions (J, 3) in the body frame for given bone lengths and joint angles."""
    j = spec.n_joints
    pos = np.zeros((j, 3))
    rot = np.zeros((j, 3, 3))
    rot[0] = np.eye(3)
    for k in spec.order:
        p = spec.parents[k]
        if p < 0:
            continue
        rot[k] = rot[p] @ _euler_xyz(angles[k])
        pos[k] = pos[p] + rot[k] @ (spec.rest_dirs[k] * lengths[k])
    return pos


def generate_skeleton(rng: Rng, spec: SkeletonSpec | None = None) -> np.ndarray:
    """Random pelvis-centred 3D pose (J, 3) in the body frame, millimetres."""
    spec = spec or default_skeleton()
    lo, hi = spec.length_range[:, 0], spec.length_range[:, 1]
    lengths = rng.uniform(lo, hi)
    alo, ahi = spec.angle_range[..., 0], spec.angle_range[..., 1]
    angles = rng.uniform(alo, ahi)
    return forward_kinematics(spec, lengths, angles)


def rest_pose(spec: SkeletonSpec | None = None) -> np.ndarray:
    spec = spec or default_skeleton()
    return forward_kinematics(spec, spec.length_range.mean(axis=1), np.zeros((spec.n_joints, 3)))


def bone_lengths(spec: SkeletonSpec, pose: np.ndarray) -> np.ndarray:
    out = np.zeros(spec.n_joints)
    for k, p in enumerate(spec.parents):
        if p >= 0:
            out[k] = np.linalg.norm(pose[k] - pose[p])
    return out


# --------------------------------------------------------------------------
# camera / projection
# --------------------------------------------------------------------------


@dataclass
class CameraParams:
    f: float
    pp: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.f = float(self.f)
        self.pp = np.asarray(self.pp, dtype=np.float64).reshape(2)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def to_dict(self) -> dict:
        return {"f": self.f, "pp": self.pp.tolist(), "R": self.R.reshape(-1).tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(d["f"], d["pp"], d["R"], d["t"])


@dataclass
class CameraSpec:
    focal: float = 1000.0
    principal_point: tuple[float, float] = (500.0, 500.0)
    distance: tuple[float, float] = (4000.0, 6000.0)
    azimuth_deg: tuple[float, float] = (-180.0, 180.0)
    elevation_deg: tuple[float, float] = (-10.0, 25.0)
    target_jitter: float = 150.0


def look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera rotation for a camera at ``position`` looking at ``target`` (world y up)."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


def sample_camera(rng: Rng, spec: CameraSpec | None = None) -> CameraParams:
    spec = spec or CameraSpec()
    az = rng.uniform(*spec.azimuth_deg) * DEG
    el = rng.uniform(*spec.elevation_deg) * DEG
    dist = rng.uniform(*spec.distance)
    center = dist * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    target = rng.normal(0.0, spec.target_jitter, size=3)
    rot = look_at(center, target)
    return CameraParams(spec.focal, np.array(spec.principal_point), rot, -rot @ center)


def project_points(cam: CameraParams, points_cam: np.ndarray) -> np.ndarray:
    z = points_cam[:, 2]
    bad = np.flatnonzero(z <= 0)
    if bad.size:
        raise ValidationError(f"joint {int(bad[0])} is behind the camera (depth {z[bad[0]]:.3f} mm)")
    return cam.f * points_cam[:, :2] / z[:, None] + cam.pp


def tight_bbox(uv: np.ndarray, margin: float = 0.1) -> np.ndarray:
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    size = np.maximum((hi - lo) * (1.0 + 2.0 * margin), 1.0)
    return np.concatenate([(lo + hi) / 2.0, size])


def normalize_to_bbox(uv: np.ndarray, bbox: np.ndarray) -> np.ndarray:
    corner = bbox[:2] - bbox[2:] / 2.0
    return (uv - corner) / bbox[2:]


def denormalize_from_bbox(uv_norm: np.ndarray, bbox: np.ndarray) -> np.ndarray:
    bbox = np.asarray(bbox)
    corner = bbox[..., None, :2] - bbox[..., None, 2:] / 2.0
    return uv_norm * bbox[..., None, 2:] + corner


@dataclass
class Pose2D:
    joints: np.ndarray
    bbox: np.ndarray
    pixels: np.ndarray = field(repr=False, default=None)


def project_to_2d(pose3d: np.ndarray, cam: CameraParams, jitter: float = 0.0, rng: Rng | None = None,
                  margin: float = 0.1) -> Pose2D:
    """Perspective projection of a pelvis-relative camera-axes pose, then bbox normalisation."""
    uv = project_points(cam, np.asarray(pose3d) + cam.t)
    if jitter > 0:
        if rng is None:
            raise ValidationError("pixel jitter needs an rng")
        uv = uv + rng.normal(0.0, jitter, size=uv.shape)
    bbox = tight_bbox(uv, margin)
    return Pose2D(normalize_to_bbox(uv, bbox), bbox, uv)


# --------------------------------------------------------------------------
# pseudo-images
# --------------------------------------------------------------------------


def _axis_profiles(points_grid: np.ndarray, grid: int, sigma: float):
    c = np.arange(grid) + 0.5
    gx = np.exp(-0.5 * ((c - points_grid[..., 0:1]) / sigma) ** 2)
    gy = np.exp(-0.5 * ((c - points_grid[..., 1:2]) / sigma) ** 2)
    return gx, gy


def joint_heatmaps(points_grid: np.ndarray, grid: int, sigma: float) -> np.ndarray:
    """One unit-mass isotropic Gaussian per point: ``(..., K, G, G)`` indexed ``[y, x]``."""
    gx, gy = _axis_profiles(np.asarray(points_grid, dtype=np.float64), grid, sigma)
    return np.einsum("...y,...x->...yx", gy, gx) / (2.0 * np.pi * sigma * sigma)


def splat(points_grid: np.ndarray, grid: int, sigma: float) -> np.ndarray:
    """Sum of unit-mass isotropic Gaussians centred at ``points_grid`` (grid units)."""
    return joint_heatmaps(points_grid, grid, sigma).sum(axis=-3)


def appearance_field(rng: Rng, grid: int = 16, amplitude: float = 0.3, n_blobs: int = 4) -> np.ndarray:
    """Smooth per-sample random field (a few broad blobs) standing in for appearance."""
    field_ = np.zeros((grid, grid))
    if amplitude <= 0:
        return field_
    centers = rng.uniform(0.0, grid, size=(n_blobs, 2))
    widths = rng.uniform(grid / 8.0, grid / 4.0, size=n_blobs)
    amps = rng.uniform(0.2, 1.0, size=n_blobs) * amplitude
    for cxy, w, a in zip(centers, widths, amps):
        field_ += a * 2.0 * np.pi * w * w * splat(cxy[None], grid, w)
    return field_


def rasterize_pseudo_image(pose2d_norm: np.ndarray, grid: int = 16, splat_sigma: float = 0.75,
                           appearance_rng: Rng | None = None, appearance_amplitude: float = 0.3,
                           n_blobs: int = 4) -> np.ndarray:
    """``(J + 1, G, G)`` stand-in for an RGB crop.

    Channels ``0..J-1`` hold one unit-mass Gaussian splat per keypoint (their
    sum is the plain splat raster); the last channel is the appearance field.
    Keeping keypoints in separate channels is what lets a linear read-out tell
    joints apart, much as part-specific features do in a real backbone.
    """
    if grid < 4:
        raise ValidationError(f"grid size must be >= 4, got {grid}")
    pose2d_norm = np.asarray(pose2d_norm, dtype=np.float64)
    img = np.zeros((len(pose2d_norm) + 1, grid, grid))
    img[:-1] = joint_heatmaps(pose2d_norm * grid, grid, splat_sigma)
    if appearance_rng is not None:
        img[-1] = appearance_field(appearance_rng, grid, appearance_amplitude, n_blobs)
    return img


# --------------------------------------------------------------------------
# records and datasets
# --------------------------------------------------------------------------


@dataclass
class DataSpec:
    skeleton: SkeletonSpec = field(default_factory=default_skeleton)
    camera: CameraSpec = field(default_factory=CameraSpec)
    grid: int = 16
    splat_sigma: float = 0.75
    jitter: float = 0.0
    bbox_margin: float = 0.1
    appearance_amplitude: float = 0.3


@dataclass
class SampleRecord:
    id: int
    seed: int
    pose3d: np.ndarray
    pose2d_norm: np.ndarray
    bbox: np.ndarray
    camera: CameraParams

    def to_json(self) -> str:
        return json.dumps({
            "id": int(self.id),
            "seed": int(self.seed),
            "pose3d": self.pose3d.tolist(),
            "pose2d_norm": self.pose2d_norm.tolist(),
            "bbox": self.bbox.tolist(),
            "camera": self.camera.to_dict(),
        })

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(
            int(d["id"]), int(d["seed"]),
            np.asarray(d["pose3d"], dtype=np.float64),
            np.asarray(d["pose2d_norm"], dtype=np.float64),
            np.asarray(d["bbox"], dtype=np.float64),
            CameraParams.from_dict(d["camera"]),
        )

    def image(self, spec: DataSpec | None = None) -> np.ndarray:
        spec = spec or DataSpec()
        return rasterize_pseudo_image(self.pose2d_norm, spec.grid, spec.splat_sigma,
                                      Rng(self.seed).child("appearance"), spec.appearance_amplitude)

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (self.id == other.id and self.seed == other.seed
                and np.array_equal(self.pose3d, other.pose3d)
                and np.array_equal(self.pose2d_norm, other.pose2d_norm)
                and np.array_equal(self.bbox, other.bbox)
                and np.array_equal(self.camera.R, other.camera.R)
                and np.array_equal(self.camera.t, other.camera.t)
                and np.array_equal(self.camera.pp, other.camera.pp)
                and self.camera.f == other.camera.f)


def make_record(sample_id: int, seed: int, spec: DataSpec | None = None) -> SampleRecord:
    spec = spec or DataSpec()
    rng = Rng(seed)
    body = generate_skeleton(rng.child("skeleton"), spec.skeleton)
    cam = sample_camera(rng.child("camera"), spec.camera)
    pose3d = body @ cam.R.T  # pelvis at origin, so rotation alone gives pelvis-relative camera coords
    p2 = project_to_2d(pose3d, cam, spec.jitter, rng.child("jitter"), spec.bbox_margin)
    return SampleRecord(sample_id, seed, pose3d, p2.joints, p2.bbox, cam)


def make_dataset(n: int, rng: Rng | int, spec: DataSpec | None = None, start_id: int = 0) -> list[SampleRecord]:
    if n < 1:
        raise ValidationError(f"dataset size must be >= 1, got {n}")
    rng = rng if isinstance(rng, Rng) else Rng(rng)
    spec = spec or DataSpec()
    return [make_record(start_id + i, rng.derive_seed("record", i), spec) for i in range(n)]


def write_jsonl(records: Iterable[SampleRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json())
            fh.write("\n")


def read_jsonl(path) -> list[SampleRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(SampleRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise ValidationError(f"{Path(path).name}:{lineno}: malformed record ({e})") from None
    return out


@dataclass
class ArrayDataset:
    """Column view of a record list, ready for batching.

    Pseudo-images are rebuilt per batch from the stored 2D joints and the
    cached appearance channel, so memory stays at ``N * G * G`` floats.
    """

    pose3d: np.ndarray       # (N, J, 3) mm
    pose2d_norm: np.ndarray  # (N, J, 2)
    bbox: np.ndarray         # (N, 4) px
    focal: np.ndarray        # (N,)
    pp: np.ndarray           # (N, 2)
    appearance: np.ndarray   # (N, G, G)
    ids: np.ndarray
    splat_sigma: float = 0.75

    def __len__(self):
        return len(self.ids)

    @property
    def n_joints(self) -> int:
        return self.pose3d.shape[1]

    @property
    def grid(self) -> int:
        return self.appearance.shape[-1]

    @property
    def image_size(self) -> int:
        return (self.n_joints + 1) * self.grid * self.grid

    def images(self, index=slice(None)) -> np.ndarray:
        """Flattened ``(n, (J + 1) * G * G)`` pseudo-images for the selected rows."""
        uv = self.pose2d_norm[index]
        heat = joint_heatmaps(uv * self.grid, self.grid, self.splat_sigma)
        img = np.concatenate([heat, self.appearance[index][:, None].astype(np.float64)], axis=1)
        return img.reshape(len(uv), -1)

    def subset(self, index) -> "ArrayDataset":
        return ArrayDataset(self.pose3d[index], self.pose2d_norm[index], self.bbox[index], self.focal[index],
                            self.pp[index], self.appearance[index], self.ids[index], self.splat_sigma)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.pose3d, self.pose2d_norm, self.bbox, self.ids):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def to_arrays(records: Sequence[SampleRecord], spec: DataSpec | None = None) -> ArrayDataset:
    spec = spec or DataSpec()
    return ArrayDataset(
        pose3d=np.stack([r.pose3d for r in records]),
        pose2d_norm=np.stack([r.pose2d_norm for r in records]),
        bbox=np.stack([r.bbox for r in records]),
        focal=np.array([r.camera.f for r in records], dtype=np.float64),
        pp=np.stack([r.camera.pp for r in records]),
        appearance=np.stack([
            appearance_field(Rng(r.seed).child("appearance"), spec.grid, spec.appearance_amplitude)
            for r in records
        ]),
        ids=np.array([r.id for r in records], dtype=np.int64),
        splat_sigma=spec.splat_sigma,
    )
