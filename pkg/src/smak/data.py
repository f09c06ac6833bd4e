"""Dataset IO (MNIST IDX format) and the synthetic digit-glyph dataset.

The IDX reader/writer follows the classic MNIST container: big-endian
magic + dimensions, unsigned bytes. Pixels are scaled to [0,1] float64 on
load. Files may be plain or gzip-compressed (".gz").

The synthetic dataset renders ten stroke-skeleton glyphs at 56x56 with
random affine jitter, stroke width, blur and noise, then box-downsamples
to 28x28. It exists because the benchmark needs a ten-class image problem
that small CNNs learn to high accuracy while still disagreeing enough
across architectures for transfer experiments to be meaningful.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images as [N,1,H,W] float64 in [0,1]; integer labels [N]."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise DataError("dataset images must be [N,C,H,W] with matching labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def _open(path, mode="rb"):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_idx_images(path) -> np.ndarray:
    """Read an IDX image file into [N,1,H,W] float64 scaled to [0,1]."""
    try:
        with _open(path) as fh:
            magic, n, h, w = struct.unpack(">IIII", fh.read(16))
            if magic != IDX_IMAGES_MAGIC:
                raise DataError(f"{path}: bad IDX image magic 0x{magic:08x}")
            raw = fh.read(n * h * w)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) != n * h * w:
        raise DataError(f"{path}: truncated image data")
    imgs = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)
    return imgs.astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    try:
        with _open(path) as fh:
            magic, n = struct.unpack(">II", fh.read(8))
            if magic != IDX_LABELS_MAGIC:
                raise DataError(f"{path}: bad IDX label magic 0x{magic:08x}")
            raw = fh.read(n)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) != n:
        raise DataError(f"{path}: truncated label data")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write [N,1,H,W] floats in [0,1] as 8-bit IDX."""
    n, _, h, w = images.shape
    quant = np.clip(np.rint(images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(quant.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_dataset(data_dir, split: str) -> Dataset:
    """Load the train/test split from `data_dir`, accepting .gz variants."""
    if split not in _SPLIT_FILES:
        raise DataError(f"unknown split {split!r}, expected 'train' or 'test'")
    data_dir = Path(data_dir)
    paths = []
    for stem in _SPLIT_FILES[split]:
        plain, gz = data_dir / stem, data_dir / (stem + ".gz")
        if plain.exists():
            paths.append(plain)
        elif gz.exists():
            paths.append(gz)
        else:
            raise DataError(f"missing dataset file {plain} (or .gz)")
    images = read_idx_images(paths[0])
    labels = read_idx_labels(paths[1])
    if len(images) != len(labels):
        raise DataError(f"{paths[0]}: image/label counts differ")
    return Dataset(images, labels)


def write_dataset(ds: Dataset, data_dir, split: str) -> None:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    img_name, lbl_name = _SPLIT_FILES[split]
    write_idx_images(data_dir / img_name, ds.images)
    write_idx_labels(data_dir / lbl_name, ds.labels)


# ---------------------------------------------------------------------------
# synthetic glyphs
# ---------------------------------------------------------------------------

# stroke skeletons in unit coordinates (x right, y down): line segments and
# rings roughly shaped like the ten digits
_SEGMENTS = {
    0: [],
    1: [(0.35, 0.28, 0.56, 0.10), (0.56, 0.10, 0.56, 0.90), (0.36, 0.90, 0.76, 0.90)],
    2: [(0.26, 0.30, 0.50, 0.12), (0.50, 0.12, 0.74, 0.30), (0.74, 0.30, 0.26, 0.88), (0.26, 0.88, 0.78, 0.88)],
    3: [(0.28, 0.14, 0.68, 0.14), (0.68, 0.14, 0.46, 0.46), (0.46, 0.46, 0.72, 0.70), (0.72, 0.70, 0.46, 0.90), (0.46, 0.90, 0.24, 0.80)],
    4: [(0.64, 0.90, 0.64, 0.10), (0.64, 0.10, 0.24, 0.62), (0.24, 0.62, 0.80, 0.62)],
    5: [(0.72, 0.12, 0.32, 0.12), (0.32, 0.12, 0.30, 0.48), (0.30, 0.48, 0.62, 0.44), (0.62, 0.44, 0.74, 0.64), (0.74, 0.64, 0.58, 0.88), (0.58, 0.88, 0.28, 0.84)],
    6: [(0.62, 0.10, 0.40, 0.48)],
    7: [(0.24, 0.12, 0.76, 0.12), (0.76, 0.12, 0.42, 0.90)],
    8: [],
    9: [(0.70, 0.42, 0.54, 0.90)],
}
# rings: (cx, cy, rx, ry)
_RINGS = {
    0: [(0.50, 0.50, 0.26, 0.38)],
    6: [(0.48, 0.66, 0.22, 0.22)],
    8: [(0.50, 0.30, 0.18, 0.18), (0.50, 0.72, 0.22, 0.20)],
    9: [(0.52, 0.34, 0.21, 0.22)],
}


def _render_skeleton(cls: int, grid: np.ndarray, thickness: float, soft: float) -> np.ndarray:
    """Max-blend soft strokes over a [H,W,2] coordinate grid."""
    canvas = np.zeros(grid.shape[:2])
    for x1, y1, x2, y2 in _SEGMENTS.get(cls, []):
        a = np.array([x1, y1])
        d = np.array([x2 - x1, y2 - y1])
        rel = grid - a
        t = np.clip((rel @ d) / (d @ d), 0.0, 1.0)
        dist = np.linalg.norm(rel - t[..., None] * d, axis=-1)
        canvas = np.maximum(canvas, np.clip((thickness - dist) / soft, 0.0, 1.0))
    for cx, cy, rx, ry in _RINGS.get(cls, []):
        rel = (grid - [cx, cy]) / [rx, ry]
        # distance from the ellipse ring, approximated in scaled coordinates
        dist = np.abs(np.linalg.norm(rel, axis=-1) - 1.0) * min(rx, ry)
        canvas = np.maximum(canvas, np.clip((thickness - dist) / soft, 0.0, 1.0))
    return canvas


def synthesize_dataset(n: int, seed: int, image_size: int = 28) -> Dataset:
    """Deterministic ten-class glyph dataset, `n` images at `image_size`.

    Heavy per-image jitter (affine + elastic warp + clutter + noise) keeps
    trained models off the 100%-confidence regime so that perturbation
    budgets comparable to the MNIST literature behave comparably.
    """
    rng = np.random.default_rng(np.random.SeedSequence((0x5DA7A, seed)))
    hi = image_size * 2
    ax = (np.arange(hi) + 0.5) / hi
    grid = np.stack(np.meshgrid(ax, ax, indexing="xy"), axis=-1)  # [y,x,(x,y)]
    labels = rng.integers(0, 10, size=n)
    images = np.empty((n, 1, image_size, image_size))
    center = hi / 2.0
    yy, xx = np.meshgrid(np.arange(hi, dtype=float), np.arange(hi, dtype=float), indexing="ij")
    for i in range(n):
        cls = int(labels[i])
        thickness = rng.uniform(0.04, 0.10)
        glyph = _render_skeleton(cls, grid, thickness, soft=0.035)

        # random affine about the glyph center: rotation, scale, shear, shift
        ang = rng.uniform(-0.35, 0.35)
        sx = np.exp(rng.uniform(-0.2, 0.2))
        sy = np.exp(rng.uniform(-0.2, 0.2))
        shear = rng.uniform(-0.25, 0.25)
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        mat = rot @ np.array([[sx, shear * sx], [0.0, sy]])
        inv = np.linalg.inv(mat)
        shift = rng.uniform(-0.08, 0.08, size=2) * hi
        offset = center - inv @ (center + shift)
        warped = ndimage.affine_transform(glyph, inv, offset=offset, order=1, mode="constant")

        # elastic warp: smoothed random displacement field
        amp = rng.uniform(2.0, 6.0)
        dy = ndimage.gaussian_filter(rng.standard_normal((hi, hi)), 8.0) * amp
        dx = ndimage.gaussian_filter(rng.standard_normal((hi, hi)), 8.0) * amp
        warped = ndimage.map_coordinates(warped, [yy + dy, xx + dx], order=1, mode="constant")

        # faint background clutter strokes
        for _ in range(rng.integers(0, 3)):
            p1 = rng.uniform(0.0, 1.0, 2)
            p2 = np.clip(p1 + rng.uniform(-0.3, 0.3, 2), 0.0, 1.0)
            d = p2 - p1
            if (d @ d) < 1e-4:
                continue
            rel = grid - p1
            t = np.clip((rel @ d) / (d @ d), 0.0, 1.0)
            dist = np.linalg.norm(rel - t[..., None] * d, axis=-1)
            stroke = np.clip((0.03 - dist) / 0.03, 0.0, 1.0) * rng.uniform(0.2, 0.5)
            warped = np.maximum(warped, stroke)

        blurred = ndimage.gaussian_filter(warped, sigma=rng.uniform(0.6, 1.5))
        small = blurred.reshape(image_size, 2, image_size, 2).mean(axis=(1, 3))
        small = small * rng.uniform(0.7, 1.0) + rng.normal(0.0, 0.09, small.shape)
        images[i, 0] = np.clip(small, 0.0, 1.0)
    return Dataset(images, labels)
