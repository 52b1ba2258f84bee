"""Deterministic synthetic multi-class segmentation data and its file format.

Each sample places one simple structure per foreground class (an ellipse for
class 1, a convex polygon for class 2, alternating for further classes) with
randomized position, scale and per-class intensity band, plus additive
Gaussian noise. Labels are rendered exactly from the generating shapes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Rng


class DatasetFormatError(ValueError):
    pass


@dataclass
class SegSample:
    image: np.ndarray     # C x H x W float32 in [0, 1]
    labels: np.ndarray    # H x W uint8


@dataclass
class SegDataset:
    samples: list
    classes: int
    H: int
    W: int
    C: int
    split: str = "train"
    seed: int = 0

    def __len__(self):
        return len(self.samples)


# Intensity bands keep classes separable by construction: background lowest,
# each foreground class in its own band.
def _class_intensity(c, classes, rng):
    lo = 0.15 + 0.7 * c / classes
    return rng.uniform(lo, lo + 0.1, None)


def gen_synthetic(classes, count, H, W, rng_or_seed, difficulty=0.5, C=1,
                  split="train"):
    """Seed-deterministic dataset of `count` samples with `classes-1`
    foreground structures each; noise sigma = 0.08 * difficulty."""
    if classes < 2:
        raise ValueError("need classes >= 2")
    if count < 1:
        raise ValueError("need count >= 1")
    if H < 12 or W < 12:
        raise ValueError(f"grid {H}x{W} too small to place structures")
    rng = rng_or_seed if isinstance(rng_or_seed, Rng) else Rng(rng_or_seed)
    seed = rng.seed
    sigma = 0.08 * difficulty
    yy, xx = np.mgrid[0:H, 0:W]
    samples = []
    for _ in range(count):
        labels = np.zeros((H, W), dtype=np.uint8)
        image = np.full((H, W), 0.1)
        image += rng.uniform(-0.03, 0.03, None)
        for c in range(1, classes):
            # retry placements that would be tiny or erase an earlier class
            for _ in range(20):
                mask = _place_shape(c, H, W, yy, xx, rng)
                if mask.sum() < 12:
                    continue
                trial = labels.copy()
                trial[mask] = c
                if all((trial == k).sum() >= 12 for k in range(1, c)):
                    break
            labels[mask] = c
            image[mask] = _class_intensity(c, classes, rng)
        if sigma > 0:
            image = image + rng.normal((H, W), scale=sigma)
        image = np.clip(image, 0.0, 1.0)
        img = np.broadcast_to(image[None].astype(np.float32), (C, H, W)).copy()
        samples.append(SegSample(image=img, labels=labels))
    return SegDataset(samples=samples, classes=classes, H=H, W=W, C=C,
                      split=split, seed=seed)


def _place_shape(c, H, W, yy, xx, rng):
    cy = rng.uniform(0.25 * H, 0.75 * H, None)
    cx = rng.uniform(0.25 * W, 0.75 * W, None)
    if c % 2 == 1:  # ellipse
        ry = rng.uniform(0.10 * H, 0.22 * H, None)
        rx = rng.uniform(0.10 * W, 0.22 * W, None)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # convex polygon: triangle with random vertices around the center
    r = rng.uniform(0.14 * min(H, W), 0.26 * min(H, W), None)
    base = rng.uniform(0, 2 * np.pi, None)
    angles = base + np.array([0.0, 2, 4]) * np.pi / 3 + \
        rng.uniform(-0.5, 0.5, 3)
    vy = cy + r * np.sin(angles)
    vx = cx + r * np.cos(angles)
    mask = np.ones((H, W), dtype=bool)
    for i in range(3):
        y0, x0 = vy[i], vx[i]
        y1, x1 = vy[(i + 1) % 3], vx[(i + 1) % 3]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        # vertex order from sorted angles is counter-clockwise
        mask &= cross >= 0
    return mask


# ---- file format -------------------------------------------------------------

DATASET_MAGIC = b"L2GS"
DATASET_VERSION = 1


def save_dataset(ds, path):
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<II", DATASET_VERSION, len(ds.samples)))
        f.write(struct.pack("<HHHH", ds.H, ds.W, ds.C, ds.classes))
        f.write(struct.pack("<Q", ds.seed))
        for s in ds.samples:
            f.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DATASET_MAGIC:
        raise DatasetFormatError("bad magic")
    if len(blob) < 28:
        raise DatasetFormatError("truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    H, W, C, classes = struct.unpack_from("<HHHH", blob, 12)
    (seed,) = struct.unpack_from("<Q", blob, 20)
    off = 28
    img_bytes = C * H * W * 4
    lbl_bytes = H * W
    samples = []
    for i in range(count):
        if off + img_bytes + lbl_bytes > len(blob):
            raise DatasetFormatError(f"truncated file at sample {i}")
        img = np.frombuffer(blob, dtype="<f4", count=C * H * W,
                            offset=off).reshape(C, H, W).copy()
        off += img_bytes
        lbl = np.frombuffer(blob, dtype=np.uint8, count=H * W,
                            offset=off).reshape(H, W).copy()
        off += lbl_bytes
        samples.append(SegSample(image=img, labels=lbl))
    return SegDataset(samples=samples, classes=classes, H=H, W=W, C=C,
                      seed=seed)
