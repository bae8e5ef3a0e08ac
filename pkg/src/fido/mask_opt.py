"""Mask search: FIDO (Bernoulli dropout with a Concrete relaxation) and BBMP.

Masks use the retention convention: ``z == 1`` keeps the original pixel and
``z == 0`` hands it to the infiller.  θ is the per-cell probability of
retention at coarse resolution and is bilinearly upsampled to image size.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .infill import InfillStrategy, infill
from .optim import Adam, linear_decay

THETA_MIN = 1e-4
# The sparsity norm is a per-pixel mean times this constant.  Calibrated once
# on the shapes corpus so that lambda = 1e-3 gives object-sized SSR masks.
L1_SCALE = 4096.0
OBJECTIVES = ("ssr", "sdr")
SPARSITY_CONVENTIONS = ("region", "literal")

ScoreFn = Callable[[Node], Node]


def classifier_score(model, c: int) -> ScoreFn:
    """Score function (batch node -> (n,) log-odds node) for class ``c``."""
    from .classifier import log_odds_node

    return lambda images: log_odds_node(model, c, images)


@dataclass
class ObjectiveConfig:
    score: Optional[ScoreFn] = None
    infill: InfillStrategy = field(default_factory=lambda: InfillStrategy("harmonic"))
    objective: str = "ssr"
    lam: float = 1e-3
    tv_weight: float = 0.01
    temperature: float = 0.1
    batch_size: int = 8
    steps: int = 300
    learning_rate: float = 0.05
    upsample: Optional[int] = None      # coarse side; None means image side / 4
    seed: int = 0
    l1_scale: float = L1_SCALE
    # "region" penalises the area the objective searches for (retained under
    # SSR, deleted under SDR); "literal" swaps the two
    sparsity: str = "region"

    def __post_init__(self):
        self.objective = self.objective.lower()
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.lam < 0 or self.tv_weight < 0 or self.l1_scale < 0:
            raise ValueError("lambda, tv weight and l1 scale must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch size and steps must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.upsample is not None and self.upsample < 1:
            raise ValueError("upsample size must be positive")
        if self.sparsity not in SPARSITY_CONVENTIONS:
            raise ValueError(f"sparsity convention must be one of {SPARSITY_CONVENTIONS}")

    def coarse_shape(self, height: int, width: int) -> Tuple[int, int]:
        if self.upsample is None:
            return max(1, height // 4), max(1, width // 4)
        if self.upsample > min(height, width):
            raise ValueError(f"upsample size {self.upsample} exceeds image size {height}x{width}")
        side = self.upsample
        return side, max(1, int(round(side * width / height)))


@dataclass
class SaliencyParams:
    theta: np.ndarray
    upsample_to: Tuple[int, int]
    objective: str = "ssr"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 2:
            raise ValueError(f"theta must be 2-D, got shape {self.theta.shape}")
        h, w = self.upsample_to
        if h < self.theta.shape[0] or w < self.theta.shape[1]:
            raise ValueError(f"cannot upsample {self.theta.shape} to {self.upsample_to}")

    def upsampled(self) -> np.ndarray:
        return upsample_np(self.theta, self.upsample_to)

    def saliency(self) -> np.ndarray:
        """Full-resolution map where larger means more important."""
        up = self.upsampled()
        return up if self.objective == "ssr" else 1.0 - up


@dataclass
class OptimTrace:
    rows: List[Tuple[int, float, float, float, float]] = field(default_factory=list)

    COLUMNS = ("step", "objective", "score", "sparsity", "tv")

    def append(self, step, objective, score, sparsity, tv) -> None:
        self.rows.append((int(step), float(objective), float(score), float(sparsity), float(tv)))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[self.COLUMNS.index(name)] for r in self.rows])

    def to_csv(self, path, header_comment: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r[0]] + [repr(v) for v in r[1:]])

    @classmethod
    def from_csv(cls, path) -> "OptimTrace":
        with open(path) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.reader(lines)
        if tuple(next(reader)) != cls.COLUMNS:
            raise ValueError(f"{path}: unexpected trace header")
        tr = cls()
        for r in reader:
            tr.append(int(r[0]), *map(float, r[1:]))
        return tr


# --------------------------------------------------------------------------
# building blocks


def upsample_np(a: np.ndarray, size) -> np.ndarray:
    mh = ad.bilinear_matrix(a.shape[-2], size[0])
    mw = ad.bilinear_matrix(a.shape[-1], size[1])
    return mh @ a @ mw.T


def _logit(a: Node) -> Node:
    return ad.log(a) - ad.log(1.0 - a)


def _tile(a: Node, n: int) -> Node:
    """Stack ``n`` copies of a 2-D node along a new leading axis."""
    h, w = a.shape
    flat = ad.reshape(a, (1, h * w))
    return ad.reshape(ad.constant(np.ones((n, 1))) @ flat, (n, h, w))


def _relax(logit_theta: Node, u: np.ndarray, temperature: float) -> Node:
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("uniform samples must lie strictly inside (0, 1)")
    if logit_theta.shape != u.shape:
        if u.shape[1:] != logit_theta.shape:
            raise ad.ShapeError(f"uniform shape {u.shape} does not match theta {logit_theta.shape}")
        logit_theta = _tile(logit_theta, u.shape[0])
    noise = np.log(u) - np.log1p(-u)
    return ad.sigmoid((logit_theta + ad.constant(noise)) * (1.0 / temperature))


def concrete_sample(theta, u, temperature: float) -> Node:
    """Binary Concrete sample σ((logit θ + logit u) / t), differentiable in θ.

    ``theta`` is a node or array of shape (h, w); ``u`` is either the same
    shape or a batch (n, h, w).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    theta = theta if isinstance(theta, Node) else ad.constant(theta)
    return _relax(_logit(theta), u, temperature)


def sparsity_term(z, objective: str = "ssr", convention: str = "region"):
    """Per-pixel sparsity mean for a retention mask ``z``.

    "region": SSR penalises the retained area mean(z), SDR the deleted area
    mean(1 - z).  "literal": SSR mean(1 - z), SDR mean(z).  Accepts an array
    (returns float) or a node (returns a node).
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    if convention not in SPARSITY_CONVENTIONS:
        raise ValueError(f"unknown sparsity convention {convention!r}")
    keep = (objective == "ssr") == (convention == "region")
    if isinstance(z, Node):
        return ad.mean(z) if keep else ad.mean(1.0 - z)
    z = np.asarray(z, dtype=np.float64)
    return float(z.mean() if keep else (1.0 - z).mean())


def _difference_matrix(n: int) -> np.ndarray:
    d = np.zeros((max(n - 1, 0), n))
    for i in range(n - 1):
        d[i, i], d[i, i + 1] = -1.0, 1.0
    return d


def tv_penalty(theta_up):
    """Mean squared difference over right and down neighbour pairs of a 2-D map."""
    node = theta_up if isinstance(theta_up, Node) else ad.constant(theta_up)
    if len(node.shape) != 2:
        raise ad.ShapeError(f"tv_penalty expects a 2-D map, got {node.shape}")
    h, w = node.shape
    pairs = (h - 1) * w + h * (w - 1)
    if pairs == 0:
        out = ad.constant(0.0)
    else:
        total = ad.constant(0.0)
        if h > 1:
            total = total + ad.sum_(ad.square(ad.constant(_difference_matrix(h)) @ node))
        if w > 1:
            total = total + ad.sum_(ad.square(node @ ad.constant(_difference_matrix(w).T)))
        out = total * (1.0 / pairs)
    return out if isinstance(theta_up, Node) else out.item()


@dataclass
class ObjectiveParts:
    total: Node
    score: Node        # per-sample s_M, shape (n,)
    sparsity: Node
    tv: Node


def objective_parts(cfg: ObjectiveConfig, x: np.ndarray, z_batch, xhat_batch, theta=None) -> ObjectiveParts:
    """Mini-batch objective for coarse masks ``z_batch`` (n, h', w').

    ``xhat_batch`` (n, C, H, W) is a constant.  The TV term is taken on the
    upsampled ``theta`` (defaults to the batch mean of ``z_batch``).
    """
    if cfg.score is None:
        raise ValueError("objective config has no score function")
    x = np.asarray(x, dtype=np.float64)
    z_batch = z_batch if isinstance(z_batch, Node) else ad.constant(z_batch)
    xhat_batch = np.asarray(xhat_batch, dtype=np.float64)
    n = z_batch.shape[0]
    if n == 0:
        raise ValueError("empty mask batch")
    if xhat_batch.shape != (n,) + x.shape:
        raise ad.ShapeError(f"reference batch shape {xhat_batch.shape} does not match {(n,) + x.shape}")
    size = x.shape[1:]
    z_up = ad.bilinear_upsample(z_batch, size)
    phi = ad.elementwise_mix(ad.constant(np.broadcast_to(x, xhat_batch.shape)), ad.constant(xhat_batch), z_up)
    s = cfg.score(phi)
    s_mean = ad.mean(s)
    sign = -1.0 if cfg.objective == "ssr" else 1.0
    sparsity = sparsity_term(z_up, cfg.objective, cfg.sparsity)
    if theta is None:
        theta = ad.mean(z_batch, axis=0)
    elif not isinstance(theta, Node):
        theta = ad.constant(theta)
    tv = tv_penalty(ad.bilinear_upsample(theta, size))
    total = s_mean * sign + sparsity * (cfg.lam * cfg.l1_scale) + tv * cfg.tv_weight
    return ObjectiveParts(total, s, sparsity, tv)


def objective_value(cfg: ObjectiveConfig, x, z_batch, xhat_batch, theta=None) -> Node:
    return objective_parts(cfg, x, z_batch, xhat_batch, theta).total


def infill_mask(z_coarse: np.ndarray, size, threshold: float = 0.5) -> np.ndarray:
    """Binary observed-pixel mask handed to the infiller: upsample, then z > threshold."""
    return (upsample_np(z_coarse, size) > threshold).astype(np.float64)


def exact_objective(cfg: ObjectiveConfig, x: np.ndarray, mask: np.ndarray) -> float:
    """Deterministic objective of one binary coarse mask (brute-force oracle)."""
    mask = np.asarray(mask, dtype=np.float64)
    xhat = infill(cfg.infill, x, infill_mask(mask, x.shape[1:]), np.random.default_rng(cfg.seed))
    return objective_value(cfg, x, mask[None], xhat[None], mask).item()


def map_mask(params: SaliencyParams) -> np.ndarray:
    """Upsampled θ thresholded strictly above 0.5."""
    return params.upsampled() > 0.5


# --------------------------------------------------------------------------
# optimisers


def _rngs(seed: int):
    mask_ss, fill_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(mask_ss), np.random.default_rng(fill_ss)


def _open_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniforms on the grid k / 2^53, k = 1 .. 2^53 - 1, so never 0 or 1."""
    return rng.integers(1, 2 ** 53, size=shape) / float(2 ** 53)


def _check_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ad.ShapeError(f"expected one (C, H, W) image, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ad.NumericError("image contains non-finite values")
    return x


def _checked(parts: ObjectiveParts, step: int) -> float:
    v = parts.total.item()
    if not np.isfinite(v):
        raise ad.NumericError(f"objective became non-finite at step {step}")
    return v


def fido_optimize(cfg: ObjectiveConfig, x: np.ndarray, callback=None) -> Tuple[SaliencyParams, OptimTrace]:
    """Fit the factorised Bernoulli retention probabilities θ.

    θ starts at 0.5 and is parameterised as σ(ℓ); each step draws
    ``batch_size`` Concrete samples, one reference image per sample, and takes
    an Adam step on ℓ with a learning rate decaying linearly to 0.
    ``callback(step, theta)`` sees θ after every update.
    """
    x = _check_image(x)
    size = x.shape[1:]
    shape = cfg.coarse_shape(*size)
    mask_rng, fill_rng = _rngs(cfg.seed)
    lo = np.log(THETA_MIN) - np.log1p(-THETA_MIN) + 1e-9
    ell = np.zeros(shape)
    opt = Adam([ell], lr=cfg.learning_rate)
    trace = OptimTrace()
    for step in range(cfg.steps):
        opt.lr = linear_decay(cfg.learning_rate, step, cfg.steps)
        leaf = ad.parameter(ell.copy())
        theta = ad.sigmoid(leaf)
        u = _open_uniform(mask_rng, (cfg.batch_size,) + shape)
        z = _relax(leaf, u, cfg.temperature)
        xhat = np.stack([infill(cfg.infill, x, infill_mask(zi, size), fill_rng) for zi in z.value])
        parts = objective_parts(cfg, x, z, xhat, theta)
        value = _checked(parts, step)
        ad.backward(parts.total)
        opt.step([leaf.grad])
        np.clip(ell, lo, -lo, out=ell)
        trace.append(step, value, parts.score.value.mean(), parts.sparsity.item(), parts.tv.item())
        if callback is not None:
            callback(step, 1.0 / (1.0 + np.exp(-ell)))
    theta = np.clip(1.0 / (1.0 + np.exp(-ell)), THETA_MIN, 1.0 - THETA_MIN)
    return SaliencyParams(theta, size, cfg.objective), trace


def _continuous(cfg: ObjectiveConfig, x: np.ndarray, tau: Optional[float], callback=None):
    x = _check_image(x)
    size = x.shape[1:]
    shape = cfg.coarse_shape(*size)
    _, fill_rng = _rngs(cfg.seed)
    z = np.full(shape, 0.5)
    opt = Adam([z], lr=cfg.learning_rate)
    trace = OptimTrace()
    fixed = None
    if tau is None and not cfg.infill.is_stochastic:
        fixed = infill(cfg.infill, x, np.ones(size), fill_rng)
    for step in range(cfg.steps):
        opt.lr = linear_decay(cfg.learning_rate, step, cfg.steps)
        if tau is not None:
            xhat = infill(cfg.infill, x, infill_mask(z, size, tau), fill_rng)
        elif fixed is None:
            xhat = infill(cfg.infill, x, np.ones(size), fill_rng)
        else:
            xhat = fixed
        leaf = ad.parameter(z[None].copy())
        parts = objective_parts(cfg, x, leaf, xhat[None])
        value = _checked(parts, step)
        ad.backward(parts.total)
        opt.step([leaf.grad[0]])
        np.clip(z, 0.0, 1.0, out=z)
        trace.append(step, value, parts.score.value.mean(), parts.sparsity.item(), parts.tv.item())
        if callback is not None:
            callback(step, z.copy())
    return SaliencyParams(z.copy(), size, cfg.objective), trace


def bbmp_optimize(cfg: ObjectiveConfig, x: np.ndarray, callback=None) -> Tuple[SaliencyParams, OptimTrace]:
    """Directly optimise one continuous mask in [0, 1] against a heuristic reference.

    The reference is computed once (mean, blur) or redrawn every step
    (random).  Returns the mask wrapped as :class:`SaliencyParams`.
    """
    if cfg.infill.is_generative:
        raise ValueError("BBMP takes a heuristic infiller; use bbmp_ca for generative ones")
    return _continuous(cfg, x, None, callback)


def bbmp_ca(cfg: ObjectiveConfig, x: np.ndarray, tau: float, callback=None) -> Tuple[SaliencyParams, OptimTrace]:
    """BBMP with a generative infiller conditioned on the region I(upsample(z) > τ)."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if not cfg.infill.is_generative:
        raise ValueError("BBMP-CA needs a generative infiller (local or harmonic)")
    return _continuous(cfg, x, float(tau), callback)
