"""Point clouds, rigid-transform augmentation and distance targets."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class PointCloud:
    """An ordered set of ``L`` points in ``n`` dimensions."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ValueError("points must be an (L, n) array with L >= 1")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")

    @property
    def L(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[1]

    def distances(self) -> np.ndarray:
        return pairwise_distances(self.points)


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        n = r.shape[0]
        if r.shape != (n, n):
            raise ValueError("rotation must be square")
        if not np.allclose(r.T @ r, np.eye(n), atol=1e-12, rtol=0):
            raise ValueError("rotation is not orthogonal")
        if abs(np.linalg.det(r) - 1.0) > 1e-12:
            raise ValueError("rotation must have determinant +1")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        self.rotation = r
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(n)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix over the last two axes, (..., L, n) -> (..., L, L)."""
    diff = points[..., :, None, :] - points[..., None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def generate_clouds(count: int, L: int, n: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """``count`` clouds of ``L`` i.i.d. uniform points, stacked as (count, L, n)."""
    if hi <= lo:
        raise ValueError("need hi > lo")
    if count < 1 or L < 1 or n < 1:
        raise ValueError("count, L and n must be positive")
    return rng.uniform(lo, hi, size=(count, L, n))


# -- rotations ----------------------------------------------------------------


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) in (w, x, y, z) order to rotation matrices (..., 3, 3)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def rotation_quaternion(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    # a normalised 4-d Gaussian is uniform on S^3, which double-covers SO(3) uniformly
    q = rng.standard_normal((1 if size is None else size, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    r = quaternion_to_matrix(q)
    return r[0] if size is None else r


def rotation_qr(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar rotation via QR of a Gaussian matrix (Mezzadri's sign fix)."""
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def sample_rotation(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return np.ones((1, 1))
    if n == 3:
        return rotation_quaternion(rng)
    return rotation_qr(n, rng)


def sample_rotations(count: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 1:
        return np.ones((count, 1, 1))
    if n == 3:
        return rotation_quaternion(rng, count)
    return np.stack([rotation_qr(n, rng) for _ in range(count)])


# -- augmentation and targets -------------------------------------------------


def augment_batch(points: np.ndarray, scale: float, rotate: bool, rng: np.random.Generator) -> np.ndarray:
    """Recentre each cloud, optionally rotate it at random, then rescale.

    ``points`` is (B, L, n); each cloud gets its own rotation.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    x = points - points.mean(axis=-2, keepdims=True)
    if rotate:
        r = sample_rotations(x.shape[0], x.shape[-1], rng)
        x = x @ np.swapaxes(r, -1, -2)
    return x * scale


def augment(cloud: PointCloud, scale: float, rotate: bool, rng: np.random.Generator) -> PointCloud:
    return PointCloud(augment_batch(cloud.points[None], scale, rotate, rng)[0])


def target_matrix(points, p: float, s: float) -> np.ndarray:
    """exp(-(d_ij / s)^p) from pairwise distances of the given coordinates."""
    if p <= 0 or s <= 0:
        raise ValueError("p and s must be positive")
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    return np.exp(-((pairwise_distances(pts) / s) ** p))


def se3_divergence(model, clouds: np.ndarray, trials: int, rng: np.random.Generator, scale: float = 1.0 / 16.0) -> float:
    """Mean l1 gap between outputs for independently rotated copies of each cloud.

    ``model`` is any callable taking (B, L, n) coordinates and returning
    (B, L, L) outputs. Averaged over clouds and unordered pairs of trials.
    """
    return float(se3_divergence_per_cloud(model, clouds, trials, rng, scale).mean())


def se3_divergence_per_cloud(model, clouds, trials: int, rng: np.random.Generator, scale: float = 1.0 / 16.0) -> np.ndarray:
    if trials < 2:
        raise ValueError("need at least 2 trials")
    clouds = np.asarray(clouds, dtype=np.float64)
    if clouds.ndim == 2:
        clouds = clouds[None]
    copies = [augment_batch(clouds, scale, True, rng) for _ in range(trials)]
    with no_grad():
        outs = []
        for x in copies:
            y = model(x)
            outs.append(y.data if isinstance(y, Tensor) else np.asarray(y))
    pairs = list(itertools.combinations(range(trials), 2))
    per_cloud = np.zeros(clouds.shape[0])
    for a, b in pairs:
        per_cloud += np.abs(outs[a] - outs[b]).mean(axis=(-2, -1))
    return per_cloud / len(pairs)


# -- text format --------------------------------------------------------------

_HEADER = "# distattn point clouds v1"


def save_clouds(path, clouds) -> Path:
    """Write clouds as whitespace-separated text.

    Layout: the header line, then ``# count=C L=L n=N``, then one block per
    structure separated by a blank line, one point per line.
    """
    arr = np.asarray([c.points if isinstance(c, PointCloud) else c for c in clouds], dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count, L, n = arr.shape
    lines = [_HEADER, f"# count={count} L={L} n={n}"]
    for cloud in arr:
        lines.append("")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in cloud)
    path.write_text("\n".join(lines) + "\n")
    return path


def load_clouds(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != _HEADER:
        raise ValueError(f"{path}: missing point-cloud header")
    meta = dict(kv.split("=") for kv in text[1].lstrip("# ").split())
    count, L, n = int(meta["count"]), int(meta["L"]), int(meta["n"])
    rows = [[float(v) for v in line.split()] for line in text[2:] if line.strip()]
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape != (count * L, n):
        raise ValueError(f"{path}: expected {count * L} rows of {n} values, got {arr.shape}")
    return arr.reshape(count, L, n)
