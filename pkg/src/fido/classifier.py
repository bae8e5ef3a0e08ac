"""Small convolutional classifier p(c|x) built on :mod:`fido.autodiff`.

The architecture is a list of layer dicts; it alone determines every
parameter shape, so a model file only needs the descriptor and the raw
parameter arrays.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .optim import Adam, linear_decay

PROB_EPS = 1e-7
MODEL_MAGIC = b"FIDOCNN\x00"
MODEL_VERSION = 1


@dataclass
class ClassifierModel:
    arch: List[dict]
    input_shape: Tuple[int, int, int]
    class_count: int
    params: List[np.ndarray] = field(default_factory=list)
    meta: Dict[str, str] = field(default_factory=dict)     # provenance, stored in the descriptor

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shapes = parameter_shapes(self.arch, self.input_shape)
        if self.params and [p.shape for p in self.params] != shapes:
            raise ValueError("parameter shapes do not match the architecture")
        if shapes and self.arch[-1].get("out") != self.class_count:
            raise ValueError("last dense layer must emit class_count logits")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.003
    seed: int = 0
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError(f"invalid training config: {self}")


def default_architecture(input_shape=(3, 32, 32), class_count=4) -> List[dict]:
    c, h, w = input_shape
    return [
        {"type": "offset", "value": -0.5},
        {"type": "conv", "in": c, "out": 8, "k": 3, "pad": 1},
        {"type": "relu"},
        {"type": "avg_pool", "size": 2},
        {"type": "conv", "in": 8, "out": 16, "k": 3, "pad": 1},
        {"type": "relu"},
        {"type": "avg_pool", "size": 2},
        {"type": "dense", "in": 16 * (h // 4) * (w // 4), "out": class_count},
    ]


def tiny_architecture(input_shape=(3, 4, 4), class_count=2) -> List[dict]:
    c, h, w = input_shape
    return [
        {"type": "offset", "value": -0.5},
        {"type": "conv", "in": c, "out": 4, "k": 3, "pad": 1},
        {"type": "relu"},
        {"type": "avg_pool", "size": 2},
        {"type": "dense", "in": 4 * (h // 2) * (w // 2), "out": class_count},
    ]


def parameter_shapes(arch: Sequence[dict], input_shape) -> List[Tuple[int, ...]]:
    c, h, w = input_shape
    shapes = []
    flat = None
    for layer in arch:
        kind = layer["type"]
        if kind == "conv":
            if flat is not None or layer["in"] != c:
                raise ValueError(f"conv layer {layer} does not fit input with {c} channels")
            k, pad = layer["k"], layer.get("pad", 0)
            shapes += [(layer["out"], c, k, k), (layer["out"],)]
            c, h, w = layer["out"], h + 2 * pad - k + 1, w + 2 * pad - k + 1
        elif kind in ("avg_pool", "max_pool"):
            s = layer["size"]
            if h % s or w % s:
                raise ValueError(f"pool size {s} does not divide {h}x{w}")
            h, w = h // s, w // s
        elif kind in ("relu", "offset"):
            pass
        elif kind == "dense":
            n_in = c * h * w if flat is None else flat
            if layer["in"] != n_in:
                raise ValueError(f"dense layer expects {layer['in']} inputs, got {n_in}")
            shapes += [(n_in, layer["out"]), (layer["out"],)]
            flat = layer["out"]
        else:
            raise ValueError(f"unknown layer type {kind!r}")
    return shapes


def init_model(arch, input_shape, class_count, seed=0) -> ClassifierModel:
    rng = np.random.default_rng(seed)
    params = []
    for shape in parameter_shapes(arch, input_shape):
        if len(shape) == 1:
            params.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    return ClassifierModel(list(arch), tuple(input_shape), class_count, params)


def _check_input(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None]
    if x.ndim == 4 and x.shape[1:] == model.input_shape:
        return x
    raise ad.ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")


def logits_node(model: ClassifierModel, images: Node, params: Optional[Sequence[Node]] = None) -> Node:
    """Forward pass on a batch node of shape (n, c, h, w), returning (n, classes) logits."""
    if params is None:
        params = [ad.constant(p) for p in model.params]
    h = images
    it = iter(params)
    for layer in model.arch:
        kind = layer["type"]
        if kind == "conv":
            w, b = next(it), next(it)
            h = ad.conv2d(h, w, b, padding=layer.get("pad", 0))
        elif kind == "offset":
            h = h + float(layer["value"])
        elif kind == "relu":
            h = ad.relu(h)
        elif kind == "avg_pool":
            h = ad.avg_pool(h, layer["size"])
        elif kind == "max_pool":
            h = ad.max_pool(h, layer["size"])
        elif kind == "dense":
            w, b = next(it), next(it)
            if len(h.shape) != 2:
                h = ad.reshape(h, (h.shape[0], -1))
            h = ad.bias_add(h @ w, b)
    return h


def probs_node(model: ClassifierModel, images: Node) -> Node:
    return ad.softmax(logits_node(model, images), axis=-1)


def log_odds_node(model: ClassifierModel, c: int, images: Node, clamp: bool = True) -> Node:
    """Per-image log-odds log p_c - log(1 - p_c), shape (n,).

    Computed from logits as l_c - logsumexp_{j != c} l_j, which avoids the
    cancellation in 1 - p_c for confident predictions, then clamped to the
    log-odds of p_c in [PROB_EPS, 1 - PROB_EPS] unless ``clamp`` is false.
    """
    _check_class(model, c)
    logits = logits_node(model, images)
    n, k = logits.shape
    if k < 2:
        raise ValueError("log-odds need at least two classes")
    others = np.ones((k, 1))
    others[c] = 0.0
    rest = np.delete(logits.value, c, axis=1)
    shift = rest.max(axis=1)
    e = ad.exp(logits - ad.constant(np.repeat(shift[:, None], k, axis=1)))
    lse = ad.log(ad.reshape(e @ ad.constant(others), (n,))) + ad.constant(shift)
    raw = ad.take(logits, c) - lse
    if not clamp:
        return raw
    bound = float(np.log1p(-PROB_EPS) - np.log(PROB_EPS))
    return ad.clip(raw, -bound, bound)


def _check_class(model: ClassifierModel, c: int) -> None:
    if not 0 <= int(c) < model.class_count:
        raise ValueError(f"class index {c} out of range [0, {model.class_count})")


def predict_probs(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one image (returns (classes,)) or a batch ((n, classes))."""
    batch = _check_input(model, x)
    p = probs_node(model, ad.constant(batch)).value
    return p[0] if np.ndim(x) == 3 else p


def log_odds(model: ClassifierModel, c: int, x: np.ndarray) -> float:
    x = _check_input(model, x)
    if x.shape[0] != 1:
        raise ad.ShapeError("log_odds takes a single image")
    return log_odds_node(model, c, ad.constant(x)).item()


def input_gradient(model: ClassifierModel, c: int, x: np.ndarray, clamp: bool = False) -> np.ndarray:
    """Gradient of the log-odds of class ``c`` with respect to the image.

    Unclamped by default: the clamp is flat, so a confidently classified image
    would otherwise get an all-zero gradient.
    """
    batch = _check_input(model, x)
    leaf = ad.parameter(batch)
    out = ad.sum_(log_odds_node(model, c, leaf, clamp))
    ad.backward(out)
    g = np.zeros_like(batch) if leaf.grad is None else leaf.grad
    return g[0] if np.ndim(x) == 3 else g


def grad_saliency(model: ClassifierModel, c: int, x: np.ndarray) -> np.ndarray:
    """Simonyan-style map: channel-max absolute input gradient."""
    return np.abs(input_gradient(model, c, x)).max(axis=0)


def accuracy(model: ClassifierModel, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    if len(images) == 0:
        raise ValueError("empty dataset")
    correct = 0
    for i in range(0, len(images), batch):
        p = predict_probs(model, images[i:i + batch])
        correct += int((p.argmax(axis=1) == labels[i:i + batch]).sum())
    return correct / len(images)


def train(dataset, cfg: TrainConfig = TrainConfig(), arch: Optional[List[dict]] = None) -> ClassifierModel:
    """Fit a classifier with mini-batch cross-entropy and Adam (linearly decayed lr).

    ``dataset`` needs ``images`` (n, c, h, w) and integer ``labels``; its
    ``class_count`` attribute is used when present.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    k = int(getattr(dataset, "class_count", labels.max() + 1))
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    input_shape = images.shape[1:]
    arch = arch or default_architecture(input_shape, k)
    model = init_model(arch, input_shape, k, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    eye = np.eye(k)
    per_epoch = -(-len(images) // cfg.batch_size)
    total = cfg.epochs * per_epoch
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), cfg.batch_size):
            opt.lr = linear_decay(cfg.learning_rate, step, total)
            step += 1
            idx = order[start:start + cfg.batch_size]
            nodes = [ad.parameter(p) for p in model.params]
            probs = ad.softmax(logits_node(model, ad.constant(images[idx]), nodes))
            p_true = ad.sum_(probs * ad.constant(eye[labels[idx]]), axis=1)
            loss = -ad.mean(ad.log(ad.clip(p_true, 1e-12, 1.0)))
            ad.backward(loss)
            opt.step([n.grad for n in nodes])
    return model


# --------------------------------------------------------------------------
# model file: MAGIC | u32 version | u32 descriptor length | descriptor JSON |
#             per parameter: u32 ndim | u32 dims... | float64 LE data


def model_to_bytes(model: ClassifierModel) -> bytes:
    fields = {"arch": model.arch, "input_shape": list(model.input_shape), "class_count": model.class_count}
    if model.meta:
        fields["meta"] = model.meta
    desc = json.dumps(fields, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<II", MODEL_VERSION, len(desc)))
    buf.write(desc)
    for p in model.params:
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> ClassifierModel:
    if not data.startswith(MODEL_MAGIC):
        raise ValueError("not a model file (bad magic)")
    pos = len(MODEL_MAGIC)

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"model file truncated at byte {pos}")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    version, desc_len = read("<II")
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {version}")
    desc = json.loads(read(f"<{desc_len}s")[0])
    shapes = parameter_shapes(desc["arch"], desc["input_shape"])
    params = []
    for expected in shapes:
        (ndim,) = read("<I")
        shape = read(f"<{ndim}I")
        if tuple(shape) != tuple(expected):
            raise ValueError(f"parameter shape {shape} does not match descriptor {expected}")
        count = int(np.prod(shape))
        params.append(np.array(read(f"<{count}d"), dtype=np.float64).reshape(shape))
    if pos != len(data):
        raise ValueError(f"trailing bytes after offset {pos}")
    return ClassifierModel(desc["arch"], tuple(desc["input_shape"]), desc["class_count"], params,
                           dict(desc.get("meta", {})))


def save_model(model: ClassifierModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ClassifierModel:
    return model_from_bytes(Path(path).read_bytes())


def model_digest(model: ClassifierModel) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()[:16]
