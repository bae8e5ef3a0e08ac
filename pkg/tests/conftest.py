import json
import time
from types import SimpleNamespace

import numpy as np
import pytest

from fido import classifier as clf
from fido import cli
from fido import data_io
from fido import evaluation as ev


def tiny_patches(n, seed):
    """4x4 images with a 2x2 patch: dark for class 0, bright for class 1."""
    rng = np.random.default_rng(seed)
    x = np.empty((n, 3, 4, 4))
    y = np.arange(n) % 2
    for i in range(n):
        img = rng.uniform(0.3, 0.7, 3)[:, None, None] + rng.normal(0.0, 0.05, (3, 4, 4))
        r, c = rng.integers(0, 3, 2)
        img[:, r:r + 2, c:c + 2] = 0.9 if y[i] else 0.1
        x[i] = np.clip(img, 0.0, 1.0)
    return SimpleNamespace(images=x, labels=y, class_count=2)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """The default ``fido train`` run (20k shapes, 10 epochs); shared by every test."""
    out = tmp_path_factory.mktemp("train")
    code = cli.main(["train", "--out", str(out)])
    assert code == 0
    metrics = json.loads((out / "metrics.jsonl").read_text().splitlines()[-1])
    return SimpleNamespace(out=out, model_path=out / "model.bin", metrics=metrics,
                           model=clf.load_model(out / "model.bin"))


@pytest.fixture(scope="session")
def model(trained_run):
    return trained_run.model


@pytest.fixture(scope="session")
def eval_set():
    return data_io.shapes_split("eval", 200, seed=0)


@pytest.fixture(scope="session")
def correct_eval(model, eval_set):
    """Indices of eval images the model classifies correctly, in order."""
    pred = clf.predict_probs(model, eval_set.images).argmax(axis=1)
    return [i for i in range(len(eval_set)) if pred[i] == eval_set.labels[i]]


@pytest.fixture(scope="session")
def tiny_model():
    train = tiny_patches(4000, 0)
    m = clf.train(train, clf.TrainConfig(epochs=10, batch_size=32, learning_rate=0.01),
                  clf.tiny_architecture((3, 4, 4), 2))
    return SimpleNamespace(model=m, means=train.images.mean(axis=(0, 2, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


FLIP_IMAGES = 50
STUDY_METHODS = ("fido_harmonic", "fido_mean", "bbmp_blur") + tuple(
    f"bbmp_ca_{t:g}" for t in cli.TAU_GRID) + ("random",)


@pytest.fixture(scope="session")
def flip_study(model, eval_set, correct_eval):
    """px50 for every study method on the first 50 correctly classified eval images.

    All methods use lambda 1e-3 and are scored by the same harmonic flipping
    infiller; results are shared by several tests.
    """
    cfg = cli.merge_config({}, {})
    means = cli.channel_means(model)
    fill = cli.infill_strategy("harmonic", means, 0)
    px = {m: [] for m in STUDY_METHODS}
    start = time.perf_counter()
    for i in correct_eval[:FLIP_IMAGES]:
        x, c = eval_set.images[i], int(eval_set.labels[i])
        for m in STUDY_METHODS:
            sal, _ = cli.method_saliency(m, cfg, model, c, x, [eval_set.boxes[i]], means, None, i)
            curve = ev.flipping_curve(model, c, x, sal, fill, seed=i, image_id=eval_set.ids[i])
            px[m].append(curve.pixels_at[0.5])
    median = {m: float(np.median([np.inf if v is None else v for v in px[m]])) for m in STUDY_METHODS}
    return SimpleNamespace(px=px, median=median, seconds=time.perf_counter() - start,
                           images=len(correct_eval[:FLIP_IMAGES]))
