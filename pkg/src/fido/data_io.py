"""Synthetic shapes corpus, IDX ingestion, and artifact persistence (PNG / CSV)."""
from __future__ import annotations

import csv
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .boxes import BoundingBox

SHAPE_CLASSES = ("square", "circle", "triangle", "cross")
BACKGROUNDS = ("noise", "gradient", "checker")


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (n, 3, h, w) in [0, 1]
    labels: np.ndarray
    boxes: Optional[List[BoundingBox]] = None
    split: str = "train"
    class_names: Tuple[str, ...] = ()
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.boxes is not None:
            if len(self.boxes) != len(self.images):
                raise ValueError("boxes and images differ in length")
            h, w = self.images.shape[2:]
            for b in self.boxes:
                if not b.within(h, w):
                    raise ValueError(f"box {b.as_tuple()} outside {w}x{h} image")
        if not self.ids:
            self.ids = [f"{self.split}-{i:05d}" for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)

    @property
    def class_count(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max()) + 1

    def subset(self, idx) -> "LabeledImageSet":
        idx = list(idx)
        return LabeledImageSet(self.images[idx], self.labels[idx],
                               None if self.boxes is None else [self.boxes[i] for i in idx],
                               self.split, self.class_names, [self.ids[i] for i in idx])

    def channel_means(self) -> np.ndarray:
        return self.images.mean(axis=(0, 2, 3))


@dataclass
class ShapesConfig:
    side: int = 32
    classes: Tuple[str, ...] = SHAPE_CLASSES
    # object side as a fraction of the image side; keeps box area in [4%, 50%]
    scale_range: Tuple[float, float] = (0.3, 0.68)
    background: str = "mixed"
    count: int = 1000
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        if self.side < 16:
            raise ValueError("side must be at least 16")
        if len(self.classes) < 2 or any(c not in SHAPE_CLASSES for c in self.classes):
            raise ValueError(f"classes must be >=2 of {SHAPE_CLASSES}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("invalid scale_range")
        if self.background not in BACKGROUNDS + ("mixed",):
            raise ValueError(f"unknown background {self.background!r}")


def shape_mask(kind: str, d: int) -> np.ndarray:
    """Boolean d x d stencil of a shape filling its box."""
    ii, jj = np.mgrid[0:d, 0:d]
    if kind == "square":
        return np.ones((d, d), bool)
    if kind == "circle":
        c = (d - 1) / 2.0
        return (ii - c) ** 2 + (jj - c) ** 2 <= (d / 2.0) ** 2
    if kind == "triangle":
        half = (ii + 1) / d * (d / 2.0)
        return np.abs(jj - (d - 1) / 2.0) <= half
    if kind == "cross":
        t = max(1, int(round(d / 3.0)))
        lo = (d - t) // 2
        band = (ii >= lo) & (ii < lo + t)
        return band | ((jj >= lo) & (jj < lo + t))
    raise ValueError(f"unknown shape {kind!r}")


def _background(kind: str, side: int, rng: np.random.Generator) -> np.ndarray:
    a, b = rng.uniform(0.15, 0.85, size=(2, 3))
    if kind == "noise":
        img = a[:, None, None] + rng.normal(0.0, 0.06, size=(3, side, side))
    elif kind == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
        t = (np.cos(ang) * xx + np.sin(ang) * yy)
        t = (t - t.min()) / (t.max() - t.min())
        b = np.clip(a + rng.uniform(-0.25, 0.25, 3), 0, 1)
        img = a[:, None, None] * (1 - t) + b[:, None, None] * t
    else:
        cell = int(rng.integers(3, 7))
        yy, xx = np.mgrid[0:side, 0:side]
        check = ((yy // cell + xx // cell) % 2).astype(float)
        b = np.clip(a + rng.uniform(-0.15, 0.15, 3), 0, 1)
        img = a[:, None, None] * (1 - check) + b[:, None, None] * check
    return img


def gen_shapes(cfg: ShapesConfig) -> LabeledImageSet:
    """One shape per image over a textured background, with its tight box.

    Labels are assigned round-robin, so classes are balanced to within one.
    """
    rng = np.random.default_rng(cfg.seed)
    s = cfg.side
    images = np.empty((cfg.count, 3, s, s))
    labels = np.arange(cfg.count) % len(cfg.classes)
    boxes = []
    lo = max(3, int(np.ceil(cfg.scale_range[0] * s)))
    hi = max(lo, int(np.floor(cfg.scale_range[1] * s)))
    for n in range(cfg.count):
        kind = cfg.background if cfg.background != "mixed" else BACKGROUNDS[rng.integers(3)]
        img = _background(kind, s, rng)
        d = int(rng.integers(lo, hi + 1))
        y0, x0 = rng.integers(0, s - d + 1, size=2)
        bg_mean = img.mean(axis=(1, 2))
        while True:
            color = rng.uniform(0, 1, 3)
            if np.abs(color - bg_mean).sum() >= 0.6:
                break
        m = shape_mask(cfg.classes[labels[n]], d)
        full = np.zeros((s, s), bool)
        full[y0:y0 + d, x0:x0 + d] = m
        img = np.where(full[None], color[:, None, None], img)
        images[n] = np.clip(img, 0.0, 1.0)
        rows, cols = np.nonzero(full)
        boxes.append(BoundingBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1))
    return LabeledImageSet(images, labels, boxes, cfg.split, tuple(cfg.classes))


SPLITS = ("train", "heldout", "eval")


def shapes_split(split: str, count: int, seed: int = 0, side: int = 32) -> LabeledImageSet:
    """One split of the standard corpus; each split gets its own generator seed."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    return gen_shapes(ShapesConfig(side=side, count=count, split=split, seed=seed * 1000 + SPLITS.index(split)))


def standard_splits(seed: int = 0, side: int = 32, train: int = 20000, heldout: int = 400,
                    eval_count: int = 200) -> Dict[str, LabeledImageSet]:
    """Train / heldout / eval shapes splits with decorrelated seeds."""
    counts = {"train": train, "heldout": heldout, "eval": eval_count}
    return {split: shapes_split(split, counts[split], seed, side) for split in SPLITS}


# --------------------------------------------------------------------------
# IDX (big-endian header: two zero bytes, dtype code, ndim, then u32 dims)

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated header at byte offset {len(data)}")
    zero, code, ndim = struct.unpack_from(">HBB", data, 0)
    if zero != 0 or code not in _IDX_TYPES:
        raise ValueError(f"{path}: bad IDX magic number at byte offset 0")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise ValueError(f"{path}: truncated header at byte offset {len(data)}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    dtype = np.dtype(_IDX_TYPES[code])
    need = header_end + int(np.prod(dims)) * dtype.itemsize
    if len(data) < need:
        raise ValueError(f"{path}: truncated payload at byte offset {len(data)} (expected {need} bytes)")
    if len(data) > need:
        raise ValueError(f"{path}: {len(data) - need} trailing bytes after offset {need}")
    return np.frombuffer(data, dtype=dtype, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> LabeledImageSet:
    """Grayscale IDX images become 3-channel [0, 1] tensors."""
    imgs = read_idx(images_path)
    labels = read_idx(labels_path)
    if imgs.ndim != 3:
        raise ValueError(f"{images_path}: expected 3-D image array, got {imgs.ndim}-D")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: expected 1-D label array")
    if len(labels) != len(imgs):
        raise ValueError(f"label count {len(labels)} does not match image count {len(imgs)}")
    x = imgs.astype(np.float64)
    if imgs.dtype.kind == "u":
        x /= 255.0
    x = np.repeat(x[:, None], 3, axis=1)
    return LabeledImageSet(np.clip(x, 0, 1), labels.astype(np.int64), None, split)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = {np.dtype("uint8"): 0x08}.get(array.dtype)
    if code is None:
        raise ValueError("only uint8 IDX writing is supported")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# --------------------------------------------------------------------------
# images


def to_uint8(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    """Write a (3, h, w) or (h, w) array in [0, 1] as PNG."""
    arr = to_uint8(image)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1) if arr.ndim == 3 else arr


def colormap_red_blue(saliency: np.ndarray) -> np.ndarray:
    """1 -> pure red, 0 -> pure blue; linear in between."""
    s = np.clip(saliency, 0.0, 1.0)
    return np.stack([s, np.zeros_like(s), 1.0 - s])


def render_heatmap(saliency: np.ndarray, x: np.ndarray, out_path) -> Tuple[Path, Path]:
    """Write ``<out>.png`` (grayscale saliency) and ``<out>_overlay.png``."""
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.min() < 0 or saliency.max() > 1:
        raise ValueError("saliency must lie in [0, 1]")
    out = Path(out_path)
    base = out.with_suffix("") if out.suffix == ".png" else out
    gray = base.with_name(base.name + ".png")
    overlay = base.with_name(base.name + "_overlay.png")
    save_png(gray, saliency)
    save_png(overlay, 0.5 * colormap_red_blue(saliency) + 0.5 * np.asarray(x))
    return gray, overlay


# --------------------------------------------------------------------------
# CSV artifacts


def save_saliency_csv(theta: np.ndarray, path, header_comment: str = "") -> None:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2:
        raise ValueError("saliency must be 2-D")
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        f.write(f"shape,{theta.shape[0]},{theta.shape[1]}\n")
        for row in theta:
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_saliency_csv(path) -> np.ndarray:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty saliency file")
    head = lines[0].split(",")
    if len(head) != 3 or head[0] != "shape":
        raise ValueError(f"{path}: missing shape header")
    h, w = int(head[1]), int(head[2])
    rows = lines[1:]
    if len(rows) != h:
        raise ValueError(f"{path}: header says {h} rows, found {len(rows)}")
    out = np.empty((h, w))
    for i, row in enumerate(rows):
        vals = row.split(",")
        if len(vals) != w:
            raise ValueError(f"{path}: row {i} has {len(vals)} values, header says {w}")
        out[i] = [float(v) for v in vals]
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{path}: non-finite value in saliency file")
    return out


def load_boxes_csv(path, image_size: Optional[Tuple[int, int]] = None) -> Dict[str, List[BoundingBox]]:
    """Rows ``image_id,x_min,y_min,x_max,y_max``; several rows per id are kept.

    ``image_size`` is (height, width) for bounds checking.
    """
    boxes: Dict[str, List[BoundingBox]] = defaultdict(list)
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].startswith("#") or row[0] == "image_id":
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                coords = [int(v) for v in row[1:]]
                box = BoundingBox(*coords)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if image_size is not None and not box.within(*image_size):
                raise ValueError(f"{path}:{lineno}: box {box.as_tuple()} out of bounds")
            boxes[row[0]].append(box)
    return dict(boxes)


def save_boxes_csv(path, ids: Sequence[str], boxes: Sequence[BoundingBox]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for i, b in zip(ids, boxes):
            w.writerow([i, *b.as_tuple()])
