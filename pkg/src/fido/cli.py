"""``fido`` command line: train, explain, evaluate, ablate, flip.

Configuration is a flat ``key = value`` file (``#`` starts a comment);
command-line flags override file keys.  The merged configuration is echoed
to ``<out>/config.txt`` and its hash is written into every artifact header.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import classifier as clf
from . import data_io
from . import evaluation as ev
from . import mask_opt as mo
from .boxes import BoundingBox
from .infill import GENERATIVE, KINDS, InfillStrategy

log = logging.getLogger("fido")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("train", "explain", "evaluate", "ablate", "flip")
METHODS = ("fido", "bbmp", "bbmp_ca")
TAU_GRID = (1.0, 0.7, 0.5, 0.3, 0.1, 0.0)
LAMBDA_GRID = (5e-4, 1e-3, 2e-3, 5e-3)


class ConfigError(Exception):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _choice(options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return parse


# key -> (parser, default)
SCHEMA: Dict[str, Tuple[Callable, str]] = {
    "seed": (int, "0"),
    "out": (str, "runs"),
    "model": (str, ""),                 # empty: <out>/model.bin
    "dataset": (_choice(("shapes", "idx")), "shapes"),
    "train_images": (str, ""),
    "train_labels": (str, ""),
    "eval_images": (str, ""),
    "eval_labels": (str, ""),
    "eval_boxes": (str, ""),
    "side": (int, "32"),
    "train_count": (int, "20000"),
    "heldout_count": (int, "400"),
    "eval_count": (int, "200"),
    "data_seed": (int, "0"),
    "epochs": (int, "10"),
    "train_batch": (int, "32"),
    "train_lr": (float, "0.003"),
    "method": (_choice(METHODS), "fido"),
    "objective": (_choice(mo.OBJECTIVES), "ssr"),
    "infill": (_choice(KINDS), "harmonic"),
    "lambda": (float, "0.001"),
    "tv": (float, "0.01"),
    "temperature": (float, "0.1"),
    "batch": (int, "8"),
    "steps": (int, "300"),
    "lr": (float, "0.05"),
    "upsample": (int, "0"),             # coarse side; 0 means image side / 4
    "tau": (float, "0.5"),
    "l1_scale": (float, repr(mo.L1_SCALE)),
    "sparsity": (_choice(mo.SPARSITY_CONVENTIONS), "region"),
    "image": (int, "0"),                # index into the eval split
    "image_path": (str, ""),
    "target": (str, "predicted"),       # predicted, label, or a class index
    "methods": (str, "fido_harmonic,fido_mean,bbmp_blur,max,center,grad,bbox"),
    "images": (int, "50"),
    "correct_only": (_bool, "true"),
    "flip_step": (float, "0.01"),
    "flip_infill": (_choice(KINDS), "harmonic"),
    "alpha_images": (int, "50"),
    "mask_alpha_rows": (_bool, "true"),  # also score mask methods under alpha-mean
    "ablate_images": (int, "20"),
    "saliency": (str, ""),
}

FLAG_KEYS = {
    "seed": "seed", "method": "method", "objective": "objective", "infill": "infill",
    "lambda_": "lambda", "tv": "tv", "temperature": "temperature", "batch": "batch",
    "steps": "steps", "upsample": "upsample", "tau": "tau", "out": "out", "model": "model",
    "image": "image", "image_path": "image_path", "methods": "methods", "images": "images",
    "saliency": "saliency", "target": "target",
}


# --------------------------------------------------------------------------
# configuration


def read_config_file(path) -> Dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file not found: {path}")
    out = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split(" #", 1)[0].strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def merge_config(file_values: Dict[str, str], overrides: Dict[str, str]) -> Dict[str, object]:
    raw = {k: d for k, (_, d) in SCHEMA.items()}
    for source in (file_values, overrides):
        for k, v in source.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}")
            raw[k] = v
    cfg = {}
    for k, v in raw.items():
        try:
            cfg[k] = SCHEMA[k][0](v)
        except ValueError as exc:
            raise ConfigError(f"key {k!r}: invalid value {v!r} ({exc})") from None
    return cfg


def config_lines(command: str, cfg: Dict[str, object]) -> List[str]:
    return [f"command = {command}"] + [f"{k} = {cfg[k]}" for k in sorted(cfg)]


def config_hash(command: str, cfg: Dict[str, object]) -> str:
    """Hash of every setting except the output directory, which never affects results."""
    kept = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256("\n".join(config_lines(command, kept)).encode()).hexdigest()[:16]


def threads() -> int:
    raw = os.environ.get("FIDO_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FIDO_THREADS: not an integer: {raw!r}") from None
    if n < 1:
        raise ConfigError("FIDO_THREADS must be at least 1")
    return n


def _model_path(cfg) -> Path:
    return Path(cfg["model"]) if cfg["model"] else Path(cfg["out"]) / "model.bin"


def _require_file(cfg, key: str, path=None) -> None:
    p = path if path is not None else cfg[key]
    if not p:
        raise ConfigError(f"key {key!r} is required")
    if not Path(p).is_file():
        raise ConfigError(f"key {key!r}: file not found: {p}")


def validate(command: str, cfg) -> None:
    """Check every referenced path and value range before any work starts."""
    if cfg["dataset"] == "idx":
        keys = ("train_images", "train_labels") if command == "train" else ("eval_images", "eval_labels")
        for k in keys:
            _require_file(cfg, k)
        if command in ("evaluate", "ablate"):
            _require_file(cfg, "eval_boxes")
    if command != "train":
        _require_file(cfg, "model", _model_path(cfg))
    if cfg["image_path"]:
        _require_file(cfg, "image_path")
    if command == "flip":
        _require_file(cfg, "saliency")
    if not 0 < cfg["flip_step"] <= 0.1:
        raise ConfigError("key 'flip_step' must lie in (0, 0.1]")
    if not 0.0 <= cfg["tau"] <= 1.0:
        raise ConfigError("key 'tau' must lie in [0, 1]")
    for k in ("images", "alpha_images", "ablate_images", "eval_count", "heldout_count", "train_count"):
        if cfg[k] < 1:
            raise ConfigError(f"key {k!r} must be at least 1")
    try:
        objective_config(cfg, None, cfg["infill"], np.full(3, 0.5))
        clf.TrainConfig(cfg["epochs"], cfg["train_batch"], cfg["train_lr"], cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if command in ("evaluate", "ablate"):
        for m in parse_methods(cfg["methods"]):
            _check_method(m)


# --------------------------------------------------------------------------
# data and objects


def load_split(cfg, split: str) -> data_io.LabeledImageSet:
    if cfg["dataset"] == "shapes":
        count = {"train": cfg["train_count"], "heldout": cfg["heldout_count"], "eval": cfg["eval_count"]}[split]
        return data_io.shapes_split(split, count, cfg["data_seed"], cfg["side"])
    prefix = "train" if split == "train" else "eval"
    ds = data_io.load_idx(cfg[f"{prefix}_images"], cfg[f"{prefix}_labels"], split=split)
    if split != "train" and cfg["eval_boxes"]:
        table = data_io.load_boxes_csv(cfg["eval_boxes"], ds.images.shape[2:])
        ds.boxes_by_id = table
    return ds


def boxes_for(ds, i: int) -> List[BoundingBox]:
    table = getattr(ds, "boxes_by_id", None)
    if table is not None:
        return table.get(ds.ids[i], [])
    return [ds.boxes[i]] if ds.boxes is not None else []


def channel_means(model) -> np.ndarray:
    raw = model.meta.get("channel_means")
    return np.array([float(v) for v in raw.split(",")]) if raw else np.full(model.input_shape[0], 0.5)


def infill_strategy(kind: str, means, seed: int) -> InfillStrategy:
    return InfillStrategy(kind, channel_means=means, seed=seed)


def objective_config(cfg, score, kind: str, means, lam: Optional[float] = None) -> mo.ObjectiveConfig:
    return mo.ObjectiveConfig(
        score=score, infill=infill_strategy(kind, means, cfg["seed"]), objective=cfg["objective"],
        lam=cfg["lambda"] if lam is None else lam, tv_weight=cfg["tv"], temperature=cfg["temperature"],
        batch_size=cfg["batch"], steps=cfg["steps"], learning_rate=cfg["lr"],
        upsample=cfg["upsample"] or None, seed=cfg["seed"], l1_scale=cfg["l1_scale"],
        sparsity=cfg["sparsity"])


def pick_target(cfg, model, x, label: Optional[int]) -> int:
    t = cfg["target"]
    if t == "predicted":
        return int(np.argmax(clf.predict_probs(model, x)))
    if t == "label":
        if label is None:
            raise ConfigError("key 'target': no label available for this image")
        return int(label)
    try:
        c = int(t)
    except ValueError:
        raise ConfigError(f"key 'target': expected predicted, label or a class index, got {t!r}") from None
    if not 0 <= c < model.class_count:
        raise ConfigError(f"key 'target': class {c} out of range")
    return c


def load_image(cfg, model):
    """(image, label or None, boxes, id) from ``image_path`` or the eval split."""
    if cfg["image_path"]:
        x = data_io.load_png(cfg["image_path"])
        if x.ndim == 2:
            x = np.repeat(x[None], 3, axis=0)
        if x.shape != model.input_shape:
            raise ConfigError(f"key 'image_path': image shape {x.shape} does not match model {model.input_shape}")
        return x, None, [], Path(cfg["image_path"]).stem
    ds = load_split(cfg, "eval")
    i = cfg["image"]
    if not 0 <= i < len(ds):
        raise ConfigError(f"key 'image': index {i} outside eval split of {len(ds)}")
    return ds.images[i], int(ds.labels[i]), boxes_for(ds, i), ds.ids[i]


# --------------------------------------------------------------------------
# saliency methods by name


def parse_methods(names: str) -> List[str]:
    return [m.strip() for m in names.split(",") if m.strip()]


def _check_method(name: str) -> None:
    if name in ("max", "center", "grad", "bbox", "random"):
        return
    for prefix in ("fido_", "bbmp_"):
        if name.startswith(prefix) and name[len(prefix):] in KINDS:
            if prefix == "bbmp_" and name[len(prefix):] in GENERATIVE:
                raise ConfigError(f"method {name!r}: BBMP needs a heuristic infiller; use bbmp_ca_<tau>")
            return
    if name.startswith("bbmp_ca_"):
        try:
            tau = float(name[len("bbmp_ca_"):])
        except ValueError:
            raise ConfigError(f"method {name!r}: bad threshold") from None
        if 0.0 <= tau <= 1.0:
            return
    raise ConfigError(f"unknown method {name!r}")


def method_saliency(name: str, cfg, model, c: int, x, boxes, means, lam=None, seed_offset: int = 0):
    """Full-resolution saliency map plus the WSL mode it is scored with."""
    h, w = x.shape[1:]
    if name in ("max", "center", "grad"):
        return ev.baselines(model, c, x)[name], ("alpha_mean" if name == "grad" else "map")
    if name == "bbox":
        m = np.zeros((h, w))
        for b in boxes[:1]:
            m[b.y_min:b.y_max, b.x_min:b.x_max] = 1.0
        return m, "map"
    if name == "random":
        return np.random.default_rng([cfg["seed"], seed_offset]).random((h, w)), "alpha_mean"
    score = mo.classifier_score(model, c)
    if name.startswith("bbmp_ca_"):
        kind = cfg["infill"] if cfg["infill"] in GENERATIVE else "harmonic"
        params, _ = mo.bbmp_ca(objective_config(cfg, score, kind, means, lam), x, float(name[8:]))
    elif name.startswith("bbmp_"):
        params, _ = mo.bbmp_optimize(objective_config(cfg, score, name[5:], means, lam), x)
    else:
        params, _ = mo.fido_optimize(objective_config(cfg, score, name[5:], means, lam), x)
    return params.saliency(), "map"


def _evaluate_image(job):
    """One image under every requested method; picklable for worker processes."""
    cfg, model, methods, x, c, boxes, image_id, index, alpha, lam = job
    means = channel_means(model)
    flip_fill = infill_strategy(cfg["flip_infill"], means, cfg["seed"])
    records, areas = [], {}
    for name in methods:
        sal, mode = method_saliency(name, cfg, model, c, x, boxes, means, lam, index)
        a = alpha if mode == "alpha_mean" else 1.0
        correct, best, _ = ev.wsl_verdict(sal, boxes, mode, a, image_id)
        sm = ev.saliency_metric(sal, model, c, x, mode, a)
        try:
            curve = ev.flipping_curve(model, c, x, sal, flip_fill, cfg["flip_step"],
                                      seed=cfg["seed"] + index, image_id=image_id)
            px = curve.pixels_at
        except ev.DegenerateCurveError as exc:
            log.warning("%s", exc)
            px = {t: None for t in ev.FLIP_TARGETS}
        records.append(ev.EvaluationRecord(image_id, name, correct, best, sm, px))
        areas[name] = float(ev.binarize(sal, mode, a).mean())
        if cfg["mask_alpha_rows"] and name.startswith(("fido", "bbmp")):
            # same map, thresholded like the gradient baseline; flipping does not depend on it
            correct, best, _ = ev.wsl_verdict(sal, boxes, "alpha_mean", alpha, image_id)
            sm = ev.saliency_metric(sal, model, c, x, "alpha_mean", alpha)
            records.append(ev.EvaluationRecord(image_id, name + "@alpha", correct, best, sm, px))
    return records, areas


def run_jobs(fn, jobs: Sequence) -> List:
    n = threads()
    if n == 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))      # results come back in job order


def eval_images(cfg, model, count: int):
    """Eval-split images (optionally only correctly classified ones) and their labels as targets."""
    ds = load_split(cfg, "eval")
    idx = list(range(len(ds)))
    if cfg["correct_only"]:
        pred = clf.predict_probs(model, ds.images).argmax(axis=1)
        idx = [i for i in idx if pred[i] == ds.labels[i]]
    idx = idx[:count]
    for i in idx:
        if not boxes_for(ds, i):
            raise ConfigError(f"key 'eval_boxes': no ground-truth box for image {ds.ids[i]}")
    return ds, idx


def grad_alpha(cfg, model) -> Tuple[float, float]:
    """Alpha for alpha-mean thresholding, chosen on held-out gradient maps."""
    if cfg["dataset"] == "shapes":
        ho = load_split(cfg, "heldout")
    else:
        ho = load_split(cfg, "eval")
    n = min(cfg["alpha_images"], len(ho))
    sal = [ev.baselines(model, int(ho.labels[i]), ho.images[i])["grad"] for i in range(n)]
    return ev.choose_alpha(sal, [boxes_for(ho, i) for i in range(n)])


# --------------------------------------------------------------------------
# commands


def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_train(cfg, chash: str, out: Path) -> dict:
    train = load_split(cfg, "train")
    check = load_split(cfg, "heldout" if cfg["dataset"] == "shapes" else "eval") \
        if cfg["dataset"] == "shapes" or cfg["eval_images"] else train
    tc = clf.TrainConfig(cfg["epochs"], cfg["train_batch"], cfg["train_lr"], cfg["seed"])
    log.info("training on %d images for %d epochs", len(train), tc.epochs)
    model = clf.train(train, tc)
    model.meta = {"config_hash": chash,
                  "channel_means": ",".join(repr(float(v)) for v in train.channel_means())}
    path = _model_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    clf.save_model(model, path)
    acc = clf.accuracy(model, check.images, check.labels)
    rec = {"command": "train", "accuracy": acc, "split": check.split, "seed": cfg["seed"],
           "config_hash": chash, "model": str(path), "model_digest": clf.model_digest(model)}
    _append_jsonl(out / "metrics.jsonl", rec)
    print(json.dumps(rec, sort_keys=True))
    return rec


def cmd_explain(cfg, chash: str, out: Path) -> dict:
    model = clf.load_model(_model_path(cfg))
    x, label, boxes, image_id = load_image(cfg, model)
    c = pick_target(cfg, model, x, label)
    means = channel_means(model)
    ocfg = objective_config(cfg, mo.classifier_score(model, c), cfg["infill"], means)
    if cfg["method"] == "fido":
        params, trace = mo.fido_optimize(ocfg, x)
    elif cfg["method"] == "bbmp":
        if ocfg.infill.is_generative:
            raise ConfigError("key 'infill': BBMP needs mean, blur or random (use method bbmp_ca)")
        params, trace = mo.bbmp_optimize(ocfg, x)
    else:
        if not ocfg.infill.is_generative:
            raise ConfigError("key 'infill': BBMP-CA needs local or harmonic")
        params, trace = mo.bbmp_ca(ocfg, x, cfg["tau"])
    header = f"config_hash={chash} image={image_id} class={c} method={cfg['method']}"
    data_io.save_saliency_csv(params.theta, out / "saliency.csv", header)
    trace.to_csv(out / "trace.csv", header)
    sal = params.saliency()
    data_io.render_heatmap(sal, x, out / "saliency.png")
    mask = mo.map_mask(params)
    final_score = float(trace.rows[-1][2])
    rec = {"command": "explain", "config_hash": chash, "image": image_id, "class": c,
           "method": cfg["method"], "infill": cfg["infill"], "final_score": final_score,
           "retained": float(mask.mean())}
    if boxes:
        _, best, _ = ev.wsl_verdict(mask.astype(float), boxes, "map")
        rec["iou"] = best
    _append_jsonl(out / "metrics.jsonl", rec)
    print(f"final s_M(c|phi) = {final_score:.6f}")
    print(f"retained area fraction (MAP) = {mask.mean():.6f}")
    if "iou" in rec:
        print(f"MAP box IoU with ground truth = {rec['iou']:.6f}")
    return rec


def cmd_evaluate(cfg, chash: str, out: Path) -> List[dict]:
    model = clf.load_model(_model_path(cfg))
    methods = parse_methods(cfg["methods"])
    alpha, alpha_err = grad_alpha(cfg, model)
    ds, idx = eval_images(cfg, model, cfg["images"])
    log.info("evaluating %d images x %d methods (grad alpha %.1f)", len(idx), len(methods), alpha)
    jobs = [(cfg, model, methods, ds.images[i], int(ds.labels[i]), boxes_for(ds, i), ds.ids[i], i, alpha, None)
            for i in idx]
    records = [r for recs, _ in run_jobs(_evaluate_image, jobs) for r in recs]
    header = f"config_hash={chash} images={len(idx)} grad_alpha={alpha}"
    ev.write_records(out / "records.csv", records, header)
    rows = ev.summarize(records)
    ev.write_summary(out / "table.csv", rows, header)
    _append_jsonl(out / "metrics.jsonl", {"command": "evaluate", "config_hash": chash, "images": len(idx),
                                          "grad_alpha": alpha, "grad_alpha_heldout_error": alpha_err})
    for r in rows:
        print(f"{r['method']:<16} wsl_error={r['wsl_error']:.3f} sm={r['saliency_metric']:.3f} "
              f"px50={r['px50']:.1f} px75={r['px75']:.1f} px90={r['px90']:.1f}")
    return rows


ABLATION_COLUMNS = ("method", "param", "value", "wsl_error", "saliency_metric", "px50", "px75", "px90", "retained")


def ablation_grid() -> List[Tuple[str, str, Optional[float]]]:
    rows = [(f"fido_{k}", "", None) for k in KINDS]
    rows += [("bbmp_blur", "", None), ("bbmp_random", "", None)]
    rows += [(f"bbmp_ca_{t:g}", "tau", t) for t in TAU_GRID]
    for m in ("fido_harmonic", "bbmp_blur", "bbmp_random"):
        rows += [(m, "lambda", lam) for lam in LAMBDA_GRID]
    return rows


def cmd_ablate(cfg, chash: str, out: Path) -> List[dict]:
    model = clf.load_model(_model_path(cfg))
    ds, idx = eval_images(cfg, model, cfg["ablate_images"])
    alpha = 1.0
    results = []
    for method, param, value in ablation_grid():
        lam = value if param == "lambda" else None
        jobs = [(cfg, model, [method], ds.images[i], int(ds.labels[i]), boxes_for(ds, i), ds.ids[i], i, alpha, lam)
                for i in idx]
        out_jobs = run_jobs(_evaluate_image, jobs)
        recs = [r for rs, _ in out_jobs for r in rs if r.method == method]
        summary = ev.summarize(recs)[0]
        summary.update(method=method, param=param, value="" if value is None else f"{value:g}",
                       retained=float(np.mean([a[method] for _, a in out_jobs])))
        results.append(summary)
        log.info("%s %s=%s px50=%.1f", method, param or "-", summary["value"], summary["px50"])
    with open(out / "ablation.csv", "w") as fh:
        fh.write(f"# config_hash={chash} images={len(idx)}\n")
        fh.write(",".join(ABLATION_COLUMNS) + "\n")
        for r in results:
            vals = [r["method"], r["param"], r["value"]] + [f"{r[k]:.6f}" for k in ABLATION_COLUMNS[3:]]
            fh.write(",".join(vals) + "\n")
    _append_jsonl(out / "metrics.jsonl", {"command": "ablate", "config_hash": chash, "images": len(idx),
                                          "rows": len(results)})
    return results


def cmd_flip(cfg, chash: str, out: Path) -> dict:
    model = clf.load_model(_model_path(cfg))
    x, label, _, image_id = load_image(cfg, model)
    c = pick_target(cfg, model, x, label)
    theta = data_io.load_saliency_csv(cfg["saliency"])
    size = x.shape[1:]
    if theta.shape != size:
        if theta.shape[0] > size[0] or theta.shape[1] > size[1]:
            raise ConfigError(f"key 'saliency': map {theta.shape} larger than image {size}")
        theta = mo.upsample_np(theta, size)
    if cfg["objective"] == "sdr":
        theta = 1.0 - theta
    fill = infill_strategy(cfg["flip_infill"], channel_means(model), cfg["seed"])
    curve = ev.flipping_curve(model, c, x, theta, fill, cfg["flip_step"], cfg["seed"], image_id)
    with open(out / "flip.csv", "w") as fh:
        fh.write(f"# config_hash={chash} image={image_id} class={c}\n")
        fh.write("count,score,suppression\n")
        for k, s, p in zip(curve.counts, curve.scores, curve.suppression):
            fh.write(f"{k},{float(s)!r},{float(p)!r}\n")
    px = {str(t): curve.pixels_at[t] for t in ev.FLIP_TARGETS}
    rec = {"command": "flip", "config_hash": chash, "image": image_id, "class": c, "pixels_at": px}
    _append_jsonl(out / "metrics.jsonl", rec)
    for t in ev.FLIP_TARGETS:
        v = curve.pixels_at[t]
        print(f"pixels for {int(t * 100)}% suppression: {'never' if v is None else v}")
    return rec


HANDLERS = {"train": cmd_train, "explain": cmd_explain, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "flip": cmd_flip}


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fido", description="FIDO saliency maps on a small classifier.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--seed")
    p.add_argument("--method", help="fido, bbmp or bbmp_ca")
    p.add_argument("--objective", help="ssr or sdr")
    p.add_argument("--infill", help="mean, blur, random, local or harmonic")
    p.add_argument("--lambda", dest="lambda_", metavar="LAMBDA")
    p.add_argument("--tv")
    p.add_argument("--temperature")
    p.add_argument("--batch")
    p.add_argument("--steps")
    p.add_argument("--upsample")
    p.add_argument("--tau")
    p.add_argument("--out")
    p.add_argument("--model")
    p.add_argument("--image", help="index into the eval split")
    p.add_argument("--image-path", dest="image_path")
    p.add_argument("--methods", help="comma-separated method names for evaluate")
    p.add_argument("--images", help="number of eval images for evaluate")
    p.add_argument("--saliency", help="saliency CSV for flip")
    p.add_argument("--target", help="predicted, label or a class index")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        for dest, key in FLAG_KEYS.items():
            v = getattr(args, dest)
            if v is not None:
                overrides[key] = v
        cfg = merge_config(file_values, overrides)
        validate(args.command, cfg)
        threads()
        chash = config_hash(args.command, cfg)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(f"# config_hash={chash}\n" + "\n".join(config_lines(args.command, cfg)) + "\n")
        HANDLERS[args.command](cfg, chash, out)
    except ConfigError as exc:
        print(f"fido: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ad.NumericError, ev.DegenerateCurveError, FloatingPointError) as exc:
        print(f"fido: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
