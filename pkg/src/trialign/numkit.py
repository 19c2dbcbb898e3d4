"""Small dense numerics shared by every other module.

Everything here works on float64 numpy arrays. The 3x3 symmetric
eigensolver is vectorised over leading batch dimensions because the triplet
loss solves ``B * B`` of them per step.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

SYMMETRY_TOL = 1e-12
UNIT_NORM_TOL = 1e-6
DEGENERACY_RTOL = 1e-10


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------


class Rng:
    """Seeded counter-based generator (Philox) with deterministic splitting.

    Children are derived from the parent's seed and a key path, never from the
    parent's stream position, so ``Rng(7).child("data", 3)`` is the same no
    matter how many numbers the parent already produced.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def split(self, n: int) -> list["Rng"]:
        return [self.child(i) for i in range(n)]

    def derive_seed(self, *keys) -> int:
        """A 63-bit integer seed derived from this generator's identity."""
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=self.path + tuple(_key_to_int(k) for k in keys)
        )
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

    # thin pass-throughs, enough for the rest of the package
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    # stable across interpreter runs (unlike hash())
    return zlib.crc32(str(key).encode("utf-8"))


# --------------------------------------------------------------------------
# symmetric 3x3 eigensolver
# --------------------------------------------------------------------------


@dataclass
class EigenResult3:
    """Eigenpairs sorted descending; ``eigenvectors[..., :, k]`` pairs with ``eigenvalues[..., k]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    degenerate: np.ndarray = field(default=None)


def _check_symmetric(a: np.ndarray) -> None:
    if a.shape[-2:] != (3, 3):
        raise ValidationError(f"expected (..., 3, 3) matrices, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix contains NaN or Inf")
    asym = np.abs(a - np.swapaxes(a, -1, -2))
    if asym.size and asym.max() > SYMMETRY_TOL * max(1.0, np.abs(a).max()):
        raise ValidationError(f"matrix is not symmetric (max |a_ij - a_ji| = {asym.max():.3e})")


def _cross(a, b):
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _eigvec_isolated(a, lam):
    # eigenvector of a simple eigenvalue: largest cross product of rows of (A - lam I)
    m = a - lam[..., None, None] * np.eye(3)
    r0, r1, r2 = m[..., 0, :], m[..., 1, :], m[..., 2, :]
    c = np.stack([_cross(r0, r1), _cross(r0, r2), _cross(r1, r2)], axis=-2)
    n2 = np.sum(c * c, axis=-1)
    pick = np.argmax(n2, axis=-1)
    best = np.take_along_axis(c, pick[..., None, None], axis=-2)[..., 0, :]
    bn = np.sqrt(np.take_along_axis(n2, pick[..., None], axis=-1))[..., 0]
    ok = bn > 0
    out = np.where(ok[..., None], best / np.where(ok, bn, 1.0)[..., None], np.array([1.0, 0.0, 0.0]))
    return out


def _orthogonal_complement(w):
    use_x = np.abs(w[..., 0]) > np.abs(w[..., 1])
    inv_a = 1.0 / np.sqrt(w[..., 0] ** 2 + w[..., 2] ** 2 + (~use_x))
    inv_b = 1.0 / np.sqrt(w[..., 1] ** 2 + w[..., 2] ** 2 + use_x)
    zero = np.zeros_like(w[..., 0])
    ua = np.stack([-w[..., 2] * inv_a, zero, w[..., 0] * inv_a], axis=-1)
    ub = np.stack([zero, w[..., 2] * inv_b, -w[..., 1] * inv_b], axis=-1)
    u = np.where(use_x[..., None], ua, ub)
    v = _cross(w, u)
    return u, v


def _eigvec_in_complement(a, w, lam):
    # solve the 2x2 problem restricted to the plane orthogonal to w
    u, v = _orthogonal_complement(w)
    au = np.einsum("...ij,...j->...i", a, u)
    av = np.einsum("...ij,...j->...i", a, v)
    m00 = _dot(u, au) - lam
    m01 = _dot(u, av)
    m11 = _dot(v, av) - lam
    a00, a01, a11 = np.abs(m00), np.abs(m01), np.abs(m11)

    with np.errstate(divide="ignore", invalid="ignore"):
        # branch A: |m00| >= |m11|
        ra = np.where(a00 >= a01, m01 / m00, m00 / m01)
        sa = 1.0 / np.sqrt(1.0 + ra * ra)
        ca0 = np.where(a00 >= a01, sa, ra * sa)  # coefficient pairs (p, q): vec = q*u - p*v
        ca1 = np.where(a00 >= a01, ra * sa, sa)
        vec_a = ca1[..., None] * u - ca0[..., None] * v
        # branch B: |m11| > |m00|
        rb = np.where(a11 >= a01, m01 / m11, m11 / m01)
        sb = 1.0 / np.sqrt(1.0 + rb * rb)
        cb1 = np.where(a11 >= a01, sb, rb * sb)
        cb0 = np.where(a11 >= a01, rb * sb, sb)
        vec_b = cb1[..., None] * u - cb0[..., None] * v

    max_a = np.maximum(a00, a01)
    max_b = np.maximum(a11, a01)
    vec_a = np.where((max_a > 0)[..., None], vec_a, u)
    vec_b = np.where((max_b > 0)[..., None], vec_b, u)
    return np.where((a00 >= a11)[..., None], vec_a, vec_b)


def jacobi_eig3(a: np.ndarray, sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations on one symmetric 3x3 matrix. Returns (w, V) ascending-unsorted."""
    a = np.array(a, dtype=np.float64)
    v = np.eye(3)
    for _ in range(sweeps):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off <= 1e-300 or off <= (np.finfo(float).eps * np.abs(a).max()) ** 2 * 1e-4:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if a[p, q] == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
            t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    return np.diag(a).copy(), v


def sym_eig3(a: np.ndarray, check: bool = True) -> EigenResult3:
    """Eigen-decomposition of symmetric 3x3 matrices, batched over leading axes.

    Closed-form trigonometric eigenvalues, eigenvectors built starting from
    whichever extreme eigenvalue is better separated, eigenvalues refined as
    Rayleigh quotients. Matrices with ``lambda_1 - lambda_2`` below
    ``1e-10 * scale`` are re-solved with Jacobi rotations and flagged.
    """
    a = np.asarray(a, dtype=np.float64)
    if check:
        _check_symmetric(a)
    batch_shape = a.shape[:-2]
    a = a.reshape(-1, 3, 3)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))

    scale = np.abs(a).max(axis=(-1, -2))
    safe = np.where(scale > 0, scale, 1.0)
    s = a / safe[:, None, None]

    q = np.trace(s, axis1=-2, axis2=-1) / 3.0
    off = s[:, 0, 1] ** 2 + s[:, 0, 2] ** 2 + s[:, 1, 2] ** 2
    p2 = (s[:, 0, 0] - q) ** 2 + (s[:, 1, 1] - q) ** 2 + (s[:, 2, 2] - q) ** 2 + 2.0 * off
    p = np.sqrt(p2 / 6.0)
    psafe = np.where(p > 0, p, 1.0)
    bmat = (s - q[:, None, None] * np.eye(3)) / psafe[:, None, None]
    half_det = np.clip(np.linalg.det(bmat) / 2.0, -1.0, 1.0)
    phi = np.arccos(half_det) / 3.0
    beta_hi = 2.0 * np.cos(phi)
    beta_lo = 2.0 * np.cos(phi + 2.0 * np.pi / 3.0)
    beta_mid = -(beta_hi + beta_lo)
    lam = q[:, None] + p[:, None] * np.stack([beta_hi, beta_mid, beta_lo], axis=-1)

    # start from the better-isolated extreme eigenvalue
    top_first = half_det >= 0
    first_lam = np.where(top_first, lam[:, 0], lam[:, 2])
    v_first = _eigvec_isolated(s, first_lam)
    v_mid = _eigvec_in_complement(s, v_first, lam[:, 1])
    v_last = _cross(v_first, v_mid)
    v_top = np.where(top_first[:, None], v_first, v_last)
    v_bot = np.where(top_first[:, None], v_last, v_first)
    vecs = np.stack([v_top, v_mid, v_bot], axis=-1)

    # isotropic matrices (p == 0): any basis works
    iso = p <= 0
    if np.any(iso):
        vecs[iso] = np.eye(3)

    lam = np.einsum("nik,nij,njk->nk", vecs, s, vecs)
    order = np.argsort(-lam, axis=-1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=-1)
    vecs = np.take_along_axis(vecs, order[:, None, :], axis=-1)

    degenerate = (lam[:, 0] - lam[:, 1]) < DEGENERACY_RTOL * np.maximum(np.abs(lam).max(axis=-1), 1e-300)
    degenerate &= ~iso
    for n in np.flatnonzero(degenerate):
        w, v = jacobi_eig3(s[n])
        o = np.argsort(-w, kind="stable")
        lam[n], vecs[n] = w[o], v[:, o]
    degenerate |= iso

    # deterministic sign: largest-magnitude component of each vector positive
    idx = np.argmax(np.abs(vecs), axis=-2)
    sign = np.sign(np.take_along_axis(vecs, idx[:, None, :], axis=-2))
    vecs = vecs * np.where(sign == 0, 1.0, sign)

    lam = lam * safe[:, None]
    return EigenResult3(
        eigenvalues=lam.reshape(batch_shape + (3,)),
        eigenvectors=vecs.reshape(batch_shape + (3, 3)),
        degenerate=degenerate.reshape(batch_shape),
    )


# --------------------------------------------------------------------------
# rows, singular values
# --------------------------------------------------------------------------


def l2_normalize_rows(m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    bad = np.argwhere(norms[..., 0] <= eps)
    if bad.size:
        raise ValidationError(f"row {tuple(int(i) for i in bad[0]) if bad.shape[1] > 1 else int(bad[0, 0])} has norm <= {eps}")
    return m / norms


def check_unit_rows(m: np.ndarray, tol: float = UNIT_NORM_TOL) -> None:
    norms = np.linalg.norm(m, axis=-1)
    dev = np.abs(norms - 1.0)
    if dev.size and dev.max() > tol:
        i = np.unravel_index(np.argmax(dev), dev.shape)
        raise ValidationError(f"row {i} is not unit-norm (norm={norms[i]:.8f})")


def top_singular_value(m: np.ndarray) -> tuple[float, float]:
    """Largest singular value of a 3xD matrix with unit rows, via its 3x3 Gram matrix.

    Returns ``(sigma_1, lambda_1)`` with ``lambda_1 = sigma_1 ** 2``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != 3:
        raise ValidationError(f"expected a 3xD matrix, got shape {m.shape}")
    check_unit_rows(m)
    gram = m @ m.T
    gram = 0.5 * (gram + gram.T)
    lam1 = float(sym_eig3(gram).eigenvalues[0])
    return float(np.sqrt(max(lam1, 0.0))), lam1


# --------------------------------------------------------------------------
# Procrustes
# --------------------------------------------------------------------------


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    degenerate: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def procrustes_align(source: np.ndarray, target: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity transform mapping ``source`` onto ``target`` (both Jx3).

    Closed form from the SVD of the 3x3 cross-covariance with a reflection
    correction, so the rotation always has determinant +1.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValidationError(f"expected matching Jx3 arrays, got {src.shape} and {tgt.shape}")
    if src.shape[0] < 3:
        raise ValidationError(f"need at least 3 joints, got {src.shape[0]}")

    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    xs = src - mu_s
    xt = tgt - mu_t
    var_s = np.sum(xs * xs)
    cov = xt.T @ xs
    u, sv, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = u @ np.diag(d) @ vt

    degenerate = bool(sv[1] <= 1e-12 * max(sv[0], 1e-300)) or var_s <= 0
    scale = float(np.sum(sv * d) / var_s) if var_s > 0 else 1.0
    if scale <= 0:
        degenerate = True
        scale = max(scale, np.finfo(float).tiny)
    trans = mu_t - scale * rot @ mu_s
    return SimilarityTransform(scale=scale, rotation=rot, translation=trans, degenerate=degenerate)
