"""Quantitative checks for saliency maps: pixel flipping, localisation, Saliency Metric."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import classifier as clf
from .boxes import BoundingBox
from .infill import InfillStrategy, compose, infill

FLIP_TARGETS = (0.5, 0.75, 0.9)
AREA_FLOOR = 0.05
ALPHA_GRID = tuple(round(0.2 * k, 10) for k in range(26))   # 0, 0.2, ..., 5.0
MODES = ("map", "alpha_mean")


class DegenerateCurveError(ArithmeticError):
    pass


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


# --------------------------------------------------------------------------
# pixel flipping


@dataclass
class FlippingCurve:
    order: np.ndarray                 # flat pixel indices, most salient first
    counts: np.ndarray                # altered-pixel count at each evaluation
    scores: np.ndarray                # log-odds at each evaluation
    suppression: np.ndarray
    pixels_at: Dict[float, Optional[int]] = field(default_factory=dict)   # None means never


def flip_order(saliency: np.ndarray) -> np.ndarray:
    """Descending saliency, ties broken by row-major index."""
    return np.argsort(-np.asarray(saliency, dtype=np.float64).ravel(), kind="stable")


def flip_counts(total: int, step_fraction: float) -> np.ndarray:
    n = int(math.ceil(1.0 / step_fraction - 1e-9))
    return np.unique(np.round(np.arange(n + 1) * total / n).astype(np.int64))


def pixels_needed(counts: np.ndarray, suppression: np.ndarray, target: float) -> Optional[int]:
    """Smallest pixel count reaching ``target``, interpolating linearly between steps."""
    hits = np.nonzero(suppression >= target)[0]
    if len(hits) == 0:
        return None
    j = int(hits[0])
    if j == 0:
        return int(counts[0])
    s0, s1 = suppression[j - 1], suppression[j]
    k0, k1 = counts[j - 1], counts[j]
    k = k0 + (target - s0) / (s1 - s0) * (k1 - k0)
    return int(min(k1, math.ceil(k - 1e-9)))


def flipping_curve(model, c: int, x: np.ndarray, saliency: np.ndarray, infiller: InfillStrategy,
                   step_fraction: float = 0.01, seed: int = 0, image_id: str = "?",
                   targets: Sequence[float] = FLIP_TARGETS) -> FlippingCurve:
    """Drop pixels in saliency order, infill them, and track the normalised log-odds drop."""
    if not 0 < step_fraction <= 0.1:
        raise ValueError("step fraction must lie in (0, 0.1]")
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[1:]
    if np.shape(saliency) != (h, w):
        raise ValueError(f"saliency shape {np.shape(saliency)} does not match image {(h, w)}")
    order = flip_order(saliency)
    counts = flip_counts(h * w, step_fraction)
    rng = np.random.default_rng(seed)
    batch = np.empty((len(counts),) + x.shape)
    for j, k in enumerate(counts):
        z = np.ones(h * w)
        z[order[:k]] = 0.0
        z = z.reshape(h, w)
        batch[j] = x if k == 0 else compose(x, infill(infiller, x, z, rng), z)
    scores = clf.log_odds_node(model, c, ad.constant(batch)).value
    span = scores[0] - scores[-1]
    if not abs(span) > 1e-12:
        raise DegenerateCurveError(f"image {image_id}: score unchanged after infilling every pixel")
    supp = (scores[0] - scores) / span
    supp[0], supp[-1] = 0.0, 1.0
    return FlippingCurve(order, counts, scores, supp,
                         {t: pixels_needed(counts, supp, t) for t in targets})


# --------------------------------------------------------------------------
# localisation


def normalize01(saliency: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map counts as uniformly salient."""
    s = np.asarray(saliency, dtype=np.float64)
    lo, hi = s.min(), s.max()
    return (s - lo) / (hi - lo) if hi > lo else np.ones_like(s)


def binarize(saliency: np.ndarray, mode: str = "map", alpha: float = 1.0) -> np.ndarray:
    """MAP: s > 0.5.  alpha_mean: normalised s > alpha * mean(normalised s)."""
    if mode == "map":
        return np.asarray(saliency) > 0.5
    if mode == "alpha_mean":
        s = normalize01(saliency)
        return s > alpha * s.mean()
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def enclosing_box(mask: np.ndarray) -> Optional[BoundingBox]:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def wsl_verdict(saliency, boxes: Sequence[BoundingBox], mode: str = "map", alpha: float = 1.0,
                image_id: str = "?") -> Tuple[bool, float, Optional[BoundingBox]]:
    """(correct, best IoU, predicted box).  An empty salient set is incorrect."""
    if not boxes:
        raise ValueError(f"image {image_id} has no ground-truth boxes")
    box = enclosing_box(binarize(saliency, mode, alpha))
    if box is None:
        return False, 0.0, None
    best = max(iou(box, g) for g in boxes)
    return best > 0.5, best, box


def wsl_error(saliencies, boxes, mode: str = "map", alpha: float = 1.0) -> Tuple[List[bool], float]:
    verdicts = [wsl_verdict(s, b, mode, alpha)[0] for s, b in zip(saliencies, boxes)]
    if not verdicts:
        raise ValueError("no images to score")
    return verdicts, 1.0 - sum(verdicts) / len(verdicts)


def choose_alpha(saliencies, boxes, grid: Sequence[float] = ALPHA_GRID) -> Tuple[float, float]:
    """Alpha with the lowest alpha-mean WSL error (smallest alpha on ties)."""
    best = None
    for a in grid:
        err = wsl_error(saliencies, boxes, "alpha_mean", a)[1]
        if best is None or err < best[1]:
            best = (float(a), err)
    return best


# --------------------------------------------------------------------------
# Saliency Metric


def sm_value(area_fraction: float, prob: float) -> float:
    p = min(max(prob, clf.PROB_EPS), 1.0)
    return math.log(max(area_fraction, AREA_FLOOR)) - math.log(p)


def crop_and_upscale(x: np.ndarray, box: BoundingBox) -> np.ndarray:
    h, w = x.shape[1:]
    crop = x[:, box.y_min:box.y_max, box.x_min:box.x_max]
    mh = ad.bilinear_matrix(crop.shape[1], h)
    mw = ad.bilinear_matrix(crop.shape[2], w)
    return mh @ crop @ mw.T


@dataclass
class SaliencyMetricResult:
    value: float
    area: float
    prob: float
    empty: bool       # salient set was empty and the full image was used


def saliency_metric_parts(saliency, model, c: int, x: np.ndarray, mode: str = "map",
                          alpha: float = 1.0) -> SaliencyMetricResult:
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[1:]
    box = enclosing_box(binarize(saliency, mode, alpha))
    empty = box is None
    if empty:
        box = BoundingBox(0, 0, w, h)
    area = box.area / float(h * w)
    p = float(clf.predict_probs(model, crop_and_upscale(x, box))[c])
    return SaliencyMetricResult(sm_value(area, p), area, p, empty)


def saliency_metric(saliency, model, c: int, x: np.ndarray, mode: str = "map", alpha: float = 1.0) -> float:
    """log max(area, 0.05) - log p(c | crop of the salient box upscaled); lower is better."""
    return saliency_metric_parts(saliency, model, c, x, mode, alpha).value


# --------------------------------------------------------------------------
# infill quality probe


def infill_quality(model, dataset, infillers: Dict[str, InfillStrategy], drop_fraction: float = 0.25,
                   trials: int = 1, seed: int = 0) -> Dict[str, dict]:
    """In-class probability after dropping a random pixel subset and infilling it.

    The same dropped subsets are shared by every infiller.  Returns per
    infiller the raw probabilities plus median and quartiles.
    """
    if not 0 < drop_fraction < 1:
        raise ValueError("drop fraction must lie in (0, 1)")
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    n, _, h, w = images.shape
    k = int(round(drop_fraction * h * w))
    out = {}
    for name, strategy in infillers.items():
        fill_rng = np.random.default_rng([seed, 1])
        mask_rng = np.random.default_rng([seed, 0])
        filled = np.empty((n * trials,) + images.shape[1:])
        for t in range(trials):
            for i in range(n):
                z = np.ones(h * w)
                z[mask_rng.choice(h * w, size=k, replace=False)] = 0.0
                z = z.reshape(h, w)
                filled[t * n + i] = compose(images[i], infill(strategy, images[i], z, fill_rng), z)
        probs = clf.predict_probs(model, filled)
        p = probs[np.arange(n * trials), np.tile(labels, trials)]
        q1, med, q3 = np.percentile(p, [25, 50, 75])
        out[name] = {"median": float(med), "q1": float(q1), "q3": float(q3), "values": p}
    return out


# --------------------------------------------------------------------------
# baselines


def center_map(height: int, width: int) -> np.ndarray:
    """Indicator of the centred box covering about half the image."""
    sh, sw = int(round(height / math.sqrt(2))), int(round(width / math.sqrt(2)))
    top, left = (height - sh) // 2, (width - sw) // 2
    m = np.zeros((height, width))
    m[top:top + sh, left:left + sw] = 1.0
    return m


def baselines(model, c: int, x: np.ndarray) -> Dict[str, np.ndarray]:
    h, w = np.shape(x)[1:]
    g = clf.grad_saliency(model, c, x)
    peak = g.max()
    return {
        "max": np.ones((h, w)),
        "center": center_map(h, w),
        "grad": g / peak if peak > 0 else g,
    }


# --------------------------------------------------------------------------
# records


RECORD_COLUMNS = ("image_id", "method", "wsl_correct", "iou", "saliency_metric",
                  "px_at_50", "px_at_75", "px_at_90")
SUMMARY_COLUMNS = ("method", "wsl_error", "saliency_metric", "px50", "px75", "px90")


@dataclass
class EvaluationRecord:
    image_id: str
    method: str
    wsl_correct: bool
    iou: float
    saliency_metric: float
    px_at: Dict[float, Optional[int]]

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"IoU {self.iou} outside [0, 1]")

    def row(self) -> List[str]:
        px = ["never" if self.px_at.get(t) is None else str(self.px_at[t]) for t in FLIP_TARGETS]
        return [self.image_id, self.method, str(int(self.wsl_correct)), f"{self.iou:.6f}",
                f"{self.saliency_metric:.6f}"] + px


def write_records(path, records: Sequence[EvaluationRecord], header_comment: str = "") -> None:
    rows = sorted(records, key=lambda r: (r.image_id, r.method))
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(RECORD_COLUMNS)
        for r in rows:
            wr.writerow(r.row())


def _median_px(values) -> float:
    # never-reached counts sort last
    v = np.array([np.inf if p is None else p for p in values], dtype=np.float64)
    return float(np.median(v)) if len(v) else float("nan")


def summarize(records: Sequence[EvaluationRecord]) -> List[dict]:
    """Per-method WSL error, mean Saliency Metric and median px counts, sorted by method."""
    by: Dict[str, List[EvaluationRecord]] = {}
    for r in records:
        by.setdefault(r.method, []).append(r)
    out = []
    for method in sorted(by):
        rs = by[method]
        out.append({
            "method": method,
            "wsl_error": 1.0 - sum(r.wsl_correct for r in rs) / len(rs),
            "saliency_metric": float(np.mean([r.saliency_metric for r in rs])),
            "px50": _median_px([r.px_at.get(0.5) for r in rs]),
            "px75": _median_px([r.px_at.get(0.75) for r in rs]),
            "px90": _median_px([r.px_at.get(0.9) for r in rs]),
        })
    return out


def write_summary(path, rows: Sequence[dict], header_comment: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SUMMARY_COLUMNS)
        for r in rows:
            wr.writerow([r["method"]] + [f"{r[k]:.6f}" for k in SUMMARY_COLUMNS[1:]])
