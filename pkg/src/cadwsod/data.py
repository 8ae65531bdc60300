"""Synthetic scenes, grid proposals and the on-disk dataset layout.

A dataset directory holds ``meta.txt`` (``key=value`` lines), one
``images/<id>.npy`` float64 array of shape 3×H×W per scene, and one
``annotations/<id>.txt`` per scene with a ``class_id x1 y1 x2 y2`` line per
object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .metrics import GroundTruth, Box

COLORS = np.array([
    [0.90, 0.12, 0.10],   # red
    [0.10, 0.80, 0.20],   # green
    [0.15, 0.25, 0.95],   # blue
    [0.90, 0.85, 0.10],   # yellow
])
SHAPES = ("square", "disk", "octagon", "frame")
BODY_GAIN = 0.6
MARKER_GAIN = 1.0
SIZE_RANGE = (18, 30)


def class_style(c: int, num_classes: int) -> tuple[str, np.ndarray]:
    """Shape name and RGB color of class ``c`` (classes are shape×color)."""
    n_colors = max(1, math.ceil(math.sqrt(num_classes)))
    shape, color = divmod(c, n_colors)
    if shape >= len(SHAPES) or color >= len(COLORS):
        raise ValueError(f"at most {len(SHAPES) * len(COLORS)} synthetic classes")
    return SHAPES[shape], COLORS[color]


@dataclass
class SyntheticScene:
    image: np.ndarray                       # 3×H×W in [0, 1]
    objects: list = field(default_factory=list)   # (class_id, Box)
    num_classes: int = 4

    @property
    def image_labels(self) -> np.ndarray:
        y = np.zeros(self.num_classes)
        for c, _ in self.objects:
            y[c] = 1.0
        return y

    @property
    def boxes(self) -> np.ndarray:
        return np.array([b for _, b in self.objects], dtype=np.float64).reshape(-1, 4)

    def flipped(self) -> "SyntheticScene":
        w = self.image.shape[2]
        objs = [(c, Box(w - b.x2, b.y1, w - b.x1, b.y2)) for c, b in self.objects]
        return SyntheticScene(self.image[:, :, ::-1].copy(), objs, self.num_classes)


def shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disk":
        return (xx - c) ** 2 + (yy - c) ** 2 <= c * c
    if shape == "octagon":
        cut = size * 0.29
        return (np.abs(xx - c) + np.abs(yy - c)) <= 2 * c - cut
    if shape == "frame":
        t = max(2, size // 5)
        inner = (xx > t) & (xx < size - t) & (yy > t) & (yy < size - t)
        return ~inner
    raise ValueError(f"unknown shape {shape!r}")


def _marker_mask(shape: str, size: int) -> np.ndarray:
    """Bright sub-part in the upper-left quarter, always inside the shape."""
    m = np.zeros((size, size), dtype=bool)
    k = max(3, size // 4)
    off = {"square": 1, "frame": 0}.get(shape, size // 4 - k // 2 + 1)
    m[off:off + k, off:off + k] = True
    return m & shape_mask(shape, size)


def generate_scene(rng: np.random.Generator, num_classes: int = 4, height: int = 64,
                   width: int = 64, size_range: Optional[tuple] = None, max_objects: int = 3,
                   noise: float = 0.06) -> SyntheticScene:
    if height < 32 or width < 32 or height % 4 or width % 4:
        raise ValueError("scene size must be at least 32×32 and divisible by 4")
    img = np.clip(0.15 + noise * rng.standard_normal((3, height, width)), 0.0, 1.0)
    n_obj = int(rng.integers(1, max_objects + 1))
    objects: list = []
    lo, hi = size_range or SIZE_RANGE
    hi = min(hi, height - 2, width - 2)
    for _ in range(n_obj):
        for _attempt in range(50):
            s = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, width - s + 1))
            y0 = int(rng.integers(0, height - s + 1))
            cand = Box(float(x0), float(y0), float(x0 + s), float(y0 + s))
            # keep objects apart so every box stays mostly its own color
            if all(_gap(cand, b) >= 2 for _, b in objects):
                break
        else:
            continue
        c = int(rng.integers(0, num_classes))
        shape, color = class_style(c, num_classes)
        body = shape_mask(shape, s)
        mark = _marker_mask(shape, s)
        patch = img[:, y0:y0 + s, x0:x0 + s]
        patch[:, body] = (BODY_GAIN * color)[:, None]
        patch[:, mark] = (MARKER_GAIN * color)[:, None]
        objects.append((c, cand))
    return SyntheticScene(img, objects, num_classes)


def _gap(a: Box, b: Box) -> float:
    dx = max(b.x1 - a.x2, a.x1 - b.x2)
    dy = max(b.y1 - a.y2, a.y1 - b.y2)
    return max(dx, dy)


def generate_scenes(n: int, seed: int, num_classes: int = 4, height: int = 64,
                    width: int = 64) -> list[SyntheticScene]:
    rng = np.random.default_rng(seed)
    return [generate_scene(rng, num_classes, height, width) for _ in range(n)]


def grid_proposals(height: int, width: int, scales: Sequence[float] = (16, 24, 32, 40),
                   aspect_ratios: Sequence[float] = (1.0,), stride: int = 4) -> np.ndarray:
    """Sliding-window boxes (R×4), clipped to the image and de-duplicated.

    For aspect ratio ``a`` the window is ``s·sqrt(a)`` wide and ``s/sqrt(a)``
    tall, rounded to whole pixels.
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    out = []
    for s in scales:
        for a in aspect_ratios:
            bw = max(1, int(round(s * math.sqrt(a))))
            bh = max(1, int(round(s / math.sqrt(a))))
            nx = (width - bw) // stride + 1 if bw <= width else 1
            ny = (height - bh) // stride + 1 if bh <= height else 1
            for iy in range(ny):
                for ix in range(nx):
                    x1, y1 = ix * stride, iy * stride
                    out.append((x1, y1, min(x1 + bw, width), min(y1 + bh, height)))
    boxes = np.array(out, dtype=np.float64).reshape(-1, 4)
    boxes = boxes[(boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])]
    if len(boxes) == 0:
        raise ValueError("proposal parameters produce no boxes")
    _, first = np.unique(boxes, axis=0, return_index=True)
    return boxes[np.sort(first)]


def save_dataset(path, scenes: Sequence[SyntheticScene]) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    h, w = scenes[0].image.shape[1:] if scenes else (0, 0)
    num_classes = scenes[0].num_classes if scenes else 0
    with open(root / "meta.txt", "w") as fh:
        fh.write(f"count={len(scenes)}\nclasses={num_classes}\nheight={h}\nwidth={w}\n")
    for i, sc in enumerate(scenes):
        np.save(root / "images" / f"{i:06d}.npy", sc.image)
        with open(root / "annotations" / f"{i:06d}.txt", "w") as fh:
            for c, b in sc.objects:
                fh.write(f"{c} {b.x1:.17g} {b.y1:.17g} {b.x2:.17g} {b.y2:.17g}\n")


def read_annotations(path) -> list:
    objs = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            c, *coords = line.split()
            objs.append((int(c), Box(*map(float, coords))))
    return objs


def load_dataset(path) -> list[SyntheticScene]:
    root = Path(path)
    meta_file = root / "meta.txt"
    if not meta_file.is_file():
        raise FileNotFoundError(f"{meta_file} not found")
    meta = dict(line.strip().split("=", 1) for line in open(meta_file) if "=" in line)
    n, num_classes = int(meta["count"]), int(meta["classes"])
    scenes = []
    for i in range(n):
        ann = root / "annotations" / f"{i:06d}.txt"
        if not ann.is_file():
            raise FileNotFoundError(f"missing annotation file {ann}")
        img = np.load(root / "images" / f"{i:06d}.npy")
        scenes.append(SyntheticScene(img, read_annotations(ann), num_classes))
    return scenes


def ground_truths(scenes: Sequence[SyntheticScene]) -> list[GroundTruth]:
    return [GroundTruth(i, c, b) for i, sc in enumerate(scenes) for c, b in sc.objects]
