"""Coordinate-value sets: the data representation used by every other module.

An image becomes ``N = H*W`` pairs of (pixel-center coordinate in [-1, 1]^2,
RGB value in [-1, 1]^3). A point cloud becomes N pairs whose coordinate and
value are both the 3D point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .errors import ConfigError, ContractError, DataError, FormatError

DATASET_KINDS = ("gaussian_blobs_2d", "checkerboard_2d", "mnist_idx", "parametric_shapes_3d")
SHAPE_FAMILIES = ("sphere", "torus", "box")


@dataclass
class FieldSample:
    coords: np.ndarray  # (N, d_in)
    values: np.ndarray  # (N, d_out)
    condition: Optional[int] = None
    sample_id: str = ""

    def __post_init__(self):
        if self.coords.ndim != 2 or self.values.ndim != 2:
            raise ContractError("coords and values must be 2D arrays")
        if len(self.coords) != len(self.values) or len(self.coords) == 0:
            raise ContractError(
                f"coords ({len(self.coords)}) and values ({len(self.values)}) need equal non-zero length"
            )

    @property
    def num_points(self) -> int:
        return len(self.coords)


@dataclass
class DatasetSpec:
    kind: str
    resolution_or_points: int
    count: int
    seed: int = 0
    blob_count: tuple = (1, 3)
    frequency_range: tuple = (1, 4)
    shape_weights: dict = field(default_factory=lambda: {"sphere": 1.0, "torus": 1.0, "box": 1.0})
    random_transform: bool = True
    images_path: Optional[str] = None
    labels_path: Optional[str] = None

    def validate(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"kind: unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if self.kind == "mnist_idx":
            if not self.images_path or not self.labels_path:
                raise ConfigError("mnist_idx needs images_path and labels_path")
            return
        if self.count < 1:
            raise ConfigError(f"count must be positive, got {self.count}")
        if self.resolution_or_points < 1:
            raise ConfigError(f"resolution_or_points must be positive, got {self.resolution_or_points}")
        if self.kind.endswith("_2d"):
            side = math.isqrt(self.resolution_or_points)
            if side * side != self.resolution_or_points:
                raise ConfigError(
                    f"resolution_or_points={self.resolution_or_points} is not a perfect square"
                )
        lo, hi = self.blob_count
        if not 1 <= lo <= hi:
            raise ConfigError(f"blob_count must satisfy 1 <= lo <= hi, got {self.blob_count}")
        flo, fhi = self.frequency_range
        if not 1 <= flo <= fhi:
            raise ConfigError(f"frequency_range must satisfy 1 <= lo <= hi, got {self.frequency_range}")
        unknown = set(self.shape_weights) - set(SHAPE_FAMILIES)
        if unknown:
            raise ConfigError(f"shape_weights: unknown shape families {sorted(unknown)}")
        w = [self.shape_weights.get(s, 0.0) for s in SHAPE_FAMILIES]
        if min(w) < 0 or sum(w) <= 0:
            raise ConfigError("shape_weights must be non-negative with a positive sum")


@dataclass
class FourierEmbeddingConfig:
    num_bands: int = 8
    max_frequency: float = 16.0
    include_input: bool = True

    def output_dim(self, d_in: int) -> int:
        return d_in * (2 * self.num_bands + int(self.include_input))


def grid_coords(side: int, dim: int = 2) -> np.ndarray:
    """Pixel-center coordinates of a regular ``side**dim`` grid over [-1, 1]^dim, row-major."""
    centers = -1.0 + (2.0 * np.arange(side) + 1.0) / side
    mesh = np.meshgrid(*([centers] * dim), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def normalize_per_sample(values):
    """Map a point set into [-1, 1] using its bounding box.

    Returns ``(normalized, center, scale)`` where ``center`` is the box midpoint
    and ``scale`` half of the largest box extent. A set with zero extent maps
    to zeros with scale 1.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or len(values) == 0:
        raise ContractError("values must be a non-empty (N, d) array")
    if not np.all(np.isfinite(values)):
        raise DataError("cannot normalize non-finite values")
    lo, hi = values.min(axis=0), values.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = 0.5 * float(np.max(hi - lo))
    if scale == 0.0:
        scale = 1.0
    return (values - center) / scale, center, scale


def denormalize(normalized, center, scale):
    return np.asarray(normalized) * scale + np.asarray(center)


def fourier_frequencies(cfg: FourierEmbeddingConfig) -> np.ndarray:
    if cfg.num_bands == 0:
        return np.zeros(0)
    return np.geomspace(1.0, cfg.max_frequency, cfg.num_bands)


def fourier_embed(coords, cfg: FourierEmbeddingConfig):
    """Sin/cos features of each coordinate at geometrically spaced frequencies.

    Works on numpy arrays and torch tensors (returns the same type). Output
    layout along the last axis: all sines, all cosines, then the raw input.
    """
    if cfg.num_bands < 0 or cfg.max_frequency <= 0:
        raise ConfigError("num_bands must be >= 0 and max_frequency > 0")
    if cfg.num_bands == 0 and not cfg.include_input:
        raise ConfigError("fourier embedding would be empty: num_bands=0 and include_input=False")
    if isinstance(coords, np.ndarray):
        return fourier_embed(torch.from_numpy(coords), cfg).numpy()
    freqs = torch.as_tensor(fourier_frequencies(cfg) * math.pi, dtype=coords.dtype, device=coords.device)
    angles = coords[..., :, None] * freqs  # (..., d_in, bands)
    parts = [angles.sin().flatten(-2), angles.cos().flatten(-2)]
    if cfg.include_input:
        parts.append(coords)
    return torch.cat(parts, dim=-1)


# -- synthetic datasets -----------------------------------------------------------------


def _blob_image(coords, rng, lo, hi):
    n_blobs = int(rng.integers(lo, hi + 1))
    img = np.broadcast_to(rng.uniform(-1, 1, 3), (len(coords), 3)).copy()
    for _ in range(n_blobs):
        center = rng.uniform(-0.6, 0.6, 2)
        sigma = rng.uniform(0.15, 0.35)
        color = rng.uniform(-1, 1, 3)
        w = np.exp(-np.sum((coords - center) ** 2, axis=1) / (2 * sigma**2))[:, None]
        img = img * (1 - w) + w * color
    return img, n_blobs - lo


def _checkerboard_image(coords, rng, lo, hi):
    freq = int(rng.integers(lo, hi + 1))
    theta = rng.uniform(0, math.pi / 2)
    phase = rng.uniform(0, 2 * math.pi, 2)
    color_a, color_b = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    u = coords @ rot.T
    s = np.sin(freq * math.pi * u[:, 0] + phase[0]) * np.sin(freq * math.pi * u[:, 1] + phase[1])
    w = (0.5 * (1 + np.tanh(6 * s)))[:, None]
    return w * color_a + (1 - w) * color_b, freq - lo


def sample_shape_surface(family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly sample ``n`` points on the surface of a canonical shape.

    sphere: unit radius. torus: major radius 1, minor 0.4. box: random half
    extents in [0.4, 1].
    """
    if family == "sphere":
        p = rng.standard_normal((n, 3))
        return p / np.linalg.norm(p, axis=1, keepdims=True)
    if family == "torus":
        big, small = 1.0, 0.4
        out = np.empty((0, 3))
        while len(out) < n:
            u = rng.uniform(0, 2 * math.pi, 2 * n)
            v = rng.uniform(0, 2 * math.pi, 2 * n)
            # area element is proportional to (R + r cos v)
            keep = rng.uniform(0, big + small, 2 * n) < big + small * np.cos(v)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
        return out[:n]
    if family == "box":
        ext = rng.uniform(0.4, 1.0, 3)
        # face pairs perpendicular to x, y, z
        areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        p = rng.uniform(-1, 1, (n, 3)) * ext
        sign = rng.choice([-1.0, 1.0], size=n)
        p[np.arange(n), axis] = sign * ext[axis]
        return p
    raise ConfigError(f"unknown shape family {family!r}")


def generate_dataset(spec: DatasetSpec) -> list[FieldSample]:
    """Build ``spec.count`` samples, bit-identical for a given (spec, seed)."""
    spec.validate()
    if spec.kind == "mnist_idx":
        return load_mnist_idx(spec.images_path, spec.labels_path)[: spec.count]
    rng = np.random.default_rng(spec.seed)
    samples = []
    if spec.kind.endswith("_2d"):
        coords = grid_coords(math.isqrt(spec.resolution_or_points), 2)
        make = _blob_image if spec.kind == "gaussian_blobs_2d" else _checkerboard_image
        lo, hi = spec.blob_count if spec.kind == "gaussian_blobs_2d" else spec.frequency_range
        for i in range(spec.count):
            values, label = make(coords, rng, lo, hi)
            samples.append(FieldSample(coords.copy(), values, label, f"{spec.kind}-{spec.seed}-{i:06d}"))
        return samples

    weights = np.array([spec.shape_weights.get(s, 0.0) for s in SHAPE_FAMILIES], dtype=float)
    weights /= weights.sum()
    for i in range(spec.count):
        label = int(rng.choice(len(SHAPE_FAMILIES), p=weights))
        pts = sample_shape_surface(SHAPE_FAMILIES[label], spec.resolution_or_points, rng)
        if spec.random_transform:
            pts = Rotation.random(random_state=rng).apply(pts) * rng.uniform(0.5, 1.5)
        pts, _, _ = normalize_per_sample(pts)
        samples.append(FieldSample(pts.copy(), pts, label, f"{spec.kind}-{spec.seed}-{i:06d}"))
    return samples


def stack_samples(samples: Sequence[FieldSample]):
    """Stack samples sharing N into ``(coords, values, conditions)`` arrays.

    ``conditions`` is None when no sample carries a label; unlabeled samples
    in a mixed batch get -1 (the null condition).
    """
    if not samples:
        raise ContractError("empty batch")
    n = samples[0].num_points
    if any(s.num_points != n for s in samples):
        raise ContractError("all samples in a batch must share the same number of points")
    coords = np.stack([s.coords for s in samples])
    values = np.stack([s.values for s in samples])
    if all(s.condition is None for s in samples):
        return coords, values, None
    cond = np.array([-1 if s.condition is None else s.condition for s in samples], dtype=np.int64)
    return coords, values, cond


# -- MNIST IDX ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, magic, ndim):
    data = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    found = int.from_bytes(data[:4], "big")
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    dims = tuple(int.from_bytes(data[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    size = math.prod(dims)
    if len(data) - header < size:
        raise FormatError(
            f"{path}: truncated payload, need {size} bytes after header, have {len(data) - header}",
            offset=len(data),
        )
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> list[FieldSample]:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels", offset=4
        )
    _, rows, cols = images.shape
    if rows == cols:
        coords = grid_coords(rows, 2)
    else:
        r = -1.0 + (2.0 * np.arange(rows) + 1.0) / rows
        c = -1.0 + (2.0 * np.arange(cols) + 1.0) / cols
        rr, cc = np.meshgrid(r, c, indexing="ij")
        coords = np.stack([rr.ravel(), cc.ravel()], -1)
    samples = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        gray = img.reshape(-1, 1).astype(np.float64) / 127.5 - 1.0
        samples.append(FieldSample(coords.copy(), np.repeat(gray, 3, axis=1), int(lab), f"mnist-{i:06d}"))
    return samples
