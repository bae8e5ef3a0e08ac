import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fido import autodiff as ad
from fido import mask_opt as mo
from fido.infill import InfillStrategy, infill, mean_image
from oracles import bilinear_reference


def linear_score(weights):
    """Score s(phi) = <weights, phi> per image, as a graph function."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)

    def score(images):
        n = images.shape[0]
        return ad.reshape(ad.reshape(images, (n, w.shape[0])) @ ad.constant(w), (n,))

    return score


def region_score(side, rows, cols):
    w = np.zeros((3, side, side))
    w[:, rows, cols] = 1.0
    return linear_score(w)


# --------------------------------------------------------------------------
# Concrete relaxation


@pytest.mark.parametrize("t", [0.1, 0.5, 1.0, 3.0])
def test_concrete_symmetric_point(t):
    assert mo.concrete_sample(np.array([[0.5]]), np.array([[0.5]]), t).item() == 0.5


def test_concrete_identity_at_unit_temperature():
    z = mo.concrete_sample(np.array([[0.88]]), np.array([[0.5]]), 1.0).item()
    assert z == pytest.approx(0.88, abs=1e-12)


def test_concrete_low_temperature_value():
    z = mo.concrete_sample(np.array([[0.6]]), np.array([[0.5]]), 0.1).item()
    expected = 1.0 / (1.0 + np.exp(-np.log(1.5) / 0.1))
    assert z == pytest.approx(expected, abs=1e-12)
    assert z == pytest.approx(0.98295, abs=5e-6)


def test_concrete_batch_and_errors():
    u = np.full((4, 2, 2), 0.3)
    assert mo.concrete_sample(np.full((2, 2), 0.5), u, 0.1).shape == (4, 2, 2)
    with pytest.raises(ValueError, match="inside"):
        mo.concrete_sample(np.full((1, 1), 0.5), np.zeros((1, 1)), 0.1)
    with pytest.raises(ValueError):
        mo.concrete_sample(np.full((1, 1), 0.5), np.full((1, 1), 0.5), 0.0)
    with pytest.raises(ad.ShapeError):
        mo.concrete_sample(np.full((2, 2), 0.5), np.full((3, 3), 0.5), 0.1)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.1, 2.0))
def test_concrete_gradient(theta, u, t):
    err = ad.finite_diff_check(lambda v: ad.sum_(mo.concrete_sample(v, np.array([[u]]), t)),
                               np.array([[theta]]), step=1e-6)
    assert err <= 1e-4


def test_concrete_mean_is_theta():
    # P(z > 0.5) = theta for the binary Concrete at any temperature
    rng = np.random.default_rng(0)
    u = rng.uniform(1e-12, 1 - 1e-12, size=(20000, 1, 1))
    z = mo.concrete_sample(np.array([[0.3]]), u, 0.1).value
    assert abs((z > 0.5).mean() - 0.3) < 0.01


# --------------------------------------------------------------------------
# penalties


def test_sparsity_literal_convention():
    assert mo.sparsity_term(np.ones((4, 4)), "ssr", "literal") == 0.0
    assert mo.sparsity_term(np.zeros((4, 4)), "sdr", "literal") == 0.0
    assert mo.sparsity_term(np.full((4, 4), 0.25), "ssr", "literal") == 0.75


def test_sparsity_region_convention():
    z = np.full((4, 4), 0.25)
    assert mo.sparsity_term(z, "ssr") == 0.25
    assert mo.sparsity_term(z, "sdr") == 0.75
    assert mo.sparsity_term(np.zeros((3, 3)), "ssr") == 0.0
    assert mo.sparsity_term(np.ones((3, 3)), "sdr") == 0.0
    with pytest.raises(ValueError):
        mo.sparsity_term(z, "xyz")


def test_tv_values():
    assert mo.tv_penalty(np.full((5, 5), 0.3)) == 0.0
    assert mo.tv_penalty(np.array([[0.0, 1.0]])) == 1.0
    assert mo.tv_penalty(np.array([[0.0, 1.0], [1.0, 0.0]])) == 1.0
    assert mo.tv_penalty(np.array([[0.7]])) == 0.0


def test_tv_gradient(rng):
    assert ad.finite_diff_check(mo.tv_penalty, rng.uniform(size=(5, 6))) <= 1e-6


# --------------------------------------------------------------------------
# objective


def _cfg(score, kind="mean", **kw):
    return mo.ObjectiveConfig(score=score, infill=InfillStrategy(kind, channel_means=np.zeros(3)), **kw)


@pytest.mark.parametrize("objective", ["ssr", "sdr"])
def test_objective_endpoints(objective, rng):
    x = rng.uniform(size=(3, 8, 8))
    score = linear_score(rng.normal(size=(3, 8, 8)))
    cfg = _cfg(score, objective=objective, lam=0.0, tv_weight=0.0)
    z_val = 1.0 if objective == "ssr" else 0.0
    # default batch of 8: the batch mean of identical scores is then exact
    z = np.full((cfg.batch_size, 2, 2), z_val)
    xhat = np.stack([mean_image(np.zeros(3), x.shape)] * cfg.batch_size)
    got = mo.objective_value(cfg, x, z, xhat).item()
    ref = score(ad.constant(x[None] if objective == "ssr" else xhat[:1])).item()
    assert got == (-ref if objective == "ssr" else ref)


def test_objective_combines_terms(rng):
    x = rng.uniform(size=(3, 8, 8))
    score = linear_score(rng.normal(size=(3, 8, 8)))
    cfg = _cfg(score, lam=2e-3, tv_weight=0.5)
    z = rng.uniform(size=(2, 2, 2))
    xhat = rng.uniform(size=(2, 3, 8, 8))
    parts = mo.objective_parts(cfg, x, z, xhat)
    up = mo.upsample_np(z, (8, 8))
    phi = up[:, None] * x[None] + (1 - up[:, None]) * xhat
    s = score(ad.constant(phi)).value
    expected = -s.mean() + 2e-3 * mo.L1_SCALE * up.mean() + 0.5 * mo.tv_penalty(mo.upsample_np(z.mean(0), (8, 8)))
    assert parts.total.item() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("objective", ["ssr", "sdr"])
def test_objective_gradient_tiny(objective, tiny_model, rng):
    x = rng.uniform(size=(3, 4, 4))
    cfg = mo.ObjectiveConfig(score=mo.classifier_score(tiny_model.model, 1), objective=objective,
                             upsample=2, infill=InfillStrategy("harmonic"))
    u = rng.uniform(0.2, 0.8, size=(4, 2, 2))
    xhat = rng.uniform(size=(4, 3, 4, 4))

    def f(theta):
        return mo.objective_value(cfg, x, mo.concrete_sample(theta, u, cfg.temperature), xhat, theta)

    assert ad.finite_diff_check(f, rng.uniform(0.2, 0.8, size=(2, 2)), step=1e-6) <= 1e-4


def test_objective_shape_errors(rng):
    cfg = _cfg(linear_score(np.ones((3, 4, 4))))
    with pytest.raises(ad.ShapeError):
        mo.objective_value(cfg, np.zeros((3, 4, 4)), np.ones((2, 1, 1)), np.zeros((3, 3, 4, 4)))
    with pytest.raises(ValueError, match="score"):
        mo.objective_value(mo.ObjectiveConfig(), np.zeros((3, 4, 4)), np.ones((1, 1, 1)), np.zeros((1, 3, 4, 4)))


def test_config_defaults_and_validation():
    cfg = mo.ObjectiveConfig()
    assert (cfg.steps, cfg.batch_size, cfg.temperature, cfg.learning_rate) == (300, 8, 0.1, 0.05)
    assert (cfg.lam, cfg.tv_weight) == (1e-3, 0.01)
    assert cfg.coarse_shape(32, 32) == (8, 8) and cfg.coarse_shape(224, 224) == (56, 56)
    for bad in ({"objective": "x"}, {"temperature": 0}, {"batch_size": 0}, {"lam": -1},
                {"sparsity": "other"}, {"upsample": 0}):
        with pytest.raises(ValueError):
            mo.ObjectiveConfig(**bad)


# --------------------------------------------------------------------------
# MAP mask


def test_map_mask_boundaries():
    assert not mo.map_mask(mo.SaliencyParams(np.full((2, 2), 0.5), (8, 8))).any()
    assert mo.map_mask(mo.SaliencyParams(np.ones((2, 2)), (8, 8))).all()


def test_map_mask_checkerboard_matches_reference():
    theta = np.where(np.indices((4, 4)).sum(0) % 2 == 0, 0.2, 0.9)
    params = mo.SaliencyParams(theta, (8, 8))
    ref = bilinear_reference(theta, 8, 8)
    np.testing.assert_allclose(params.upsampled(), ref, atol=1e-14)
    np.testing.assert_array_equal(mo.map_mask(params), ref > 0.5)
    assert set(np.unique(ref)) - {0.2, 0.9}      # transition pixels hold interpolated values


def test_sdr_saliency_is_inverted():
    p = mo.SaliencyParams(np.full((2, 2), 0.3), (4, 4), "sdr")
    np.testing.assert_allclose(p.saliency(), 0.7)


# --------------------------------------------------------------------------
# optimisers


def _region_setup(side=16):
    x = np.full((3, side, side), 0.5)
    x[:, :8, :8] = 1.0
    return x, region_score(side, slice(0, 8), slice(0, 8))


def test_fido_linear_classifier_recovers_region():
    x, score = _region_setup()
    cfg = _cfg(score, lam=0.0, tv_weight=0.0, upsample=16, steps=150)
    params, _ = mo.fido_optimize(cfg, x)
    th = params.theta
    outside = np.ones((16, 16), bool)
    outside[:8, :8] = False
    assert th[:8, :8].mean() > 0.9
    assert np.all(th[outside] <= 0.5 + 1e-12)


def test_bbmp_linear_classifier_recovers_region():
    x, score = _region_setup()
    cfg = _cfg(score, lam=0.0, tv_weight=0.0, upsample=16, steps=150)
    params, _ = mo.bbmp_optimize(cfg, x)
    assert params.theta[:8, :8].mean() > 0.9


def test_bbmp_first_step_matches_fido_expectation(rng):
    x = rng.uniform(size=(3, 16, 16))
    score = linear_score(rng.normal(size=(3, 16, 16)))
    cfg = _cfg(score, lam=1e-3, tv_weight=0.01, batch_size=256)
    _, trace = mo.bbmp_optimize(mo.ObjectiveConfig(**{**cfg.__dict__, "steps": 1}), x)
    u = rng.uniform(1e-9, 1 - 1e-9, size=(256, 4, 4))
    z = mo.concrete_sample(np.full((4, 4), 0.5), u, cfg.temperature).value
    xhat = np.stack([mean_image(np.zeros(3), x.shape)] * 256)
    per_sample = [mo.objective_value(cfg, x, zi[None], xhat[:1], np.full((4, 4), 0.5)).item() for zi in z]
    mc, se = np.mean(per_sample), np.std(per_sample, ddof=1) / np.sqrt(256)
    assert abs(trace.rows[0][1] - mc) <= 3 * se


def test_seed_determinism(tiny_model, rng):
    x = rng.uniform(size=(3, 4, 4))
    cfg = mo.ObjectiveConfig(score=mo.classifier_score(tiny_model.model, 0), upsample=2, steps=20,
                             infill=InfillStrategy("harmonic"))
    a, ta = mo.fido_optimize(cfg, x)
    b, tb = mo.fido_optimize(cfg, x)
    np.testing.assert_array_equal(a.theta, b.theta)
    assert ta.rows == tb.rows


def test_theta_stays_clamped(tiny_model, rng):
    x = rng.uniform(size=(3, 4, 4))
    cfg = mo.ObjectiveConfig(score=mo.classifier_score(tiny_model.model, 0), upsample=2, steps=50,
                             learning_rate=5.0, infill=InfillStrategy("mean"))
    seen = []
    params, _ = mo.fido_optimize(cfg, x, callback=lambda step, th: seen.append(th))
    assert len(seen) == 50
    assert params.theta.min() >= mo.THETA_MIN and params.theta.max() <= 1 - mo.THETA_MIN


def test_lambda_sweep_shrinks_retained_area(model, eval_set, correct_eval):
    i = correct_eval[0]
    x, c = eval_set.images[i], int(eval_set.labels[i])
    areas = []
    for lam in (0.0,) + (5e-4, 1e-3, 2e-3, 5e-3):
        cfg = mo.ObjectiveConfig(score=mo.classifier_score(model, c), lam=lam,
                                 infill=InfillStrategy("harmonic"))
        params, _ = mo.fido_optimize(cfg, x)
        areas.append(mo.map_mask(params).mean())
    monotone = sum(b <= a for a, b in zip(areas, areas[1:]))
    assert monotone >= 3, areas


def test_bbmp_ca_threshold_extremes(rng):
    z = rng.uniform(0.01, 0.99, size=(4, 4))
    assert mo.infill_mask(z, (8, 8), 0.0).all()
    assert not mo.infill_mask(z, (8, 8), 1.0).any()
    x = rng.uniform(size=(3, 8, 8))
    s = InfillStrategy("harmonic", channel_means=[0.1, 0.2, 0.3])
    np.testing.assert_array_equal(infill(s, x, mo.infill_mask(z, (8, 8), 1.0)), mean_image(s.channel_means, x.shape))


def test_bbmp_dispatch_rules(rng):
    x = rng.uniform(size=(3, 8, 8))
    cfg = _cfg(linear_score(np.ones((3, 8, 8))), kind="harmonic", steps=3)
    with pytest.raises(ValueError, match="heuristic"):
        mo.bbmp_optimize(cfg, x)
    with pytest.raises(ValueError, match="tau"):
        mo.bbmp_ca(cfg, x, 1.5)
    with pytest.raises(ValueError, match="generative"):
        mo.bbmp_ca(_cfg(linear_score(np.ones((3, 8, 8))), steps=3), x, 0.5)
    params, trace = mo.bbmp_ca(cfg, x, 0.5)
    assert len(trace) == 3 and params.theta.min() >= 0 and params.theta.max() <= 1


def test_trace_csv_round_trip(tmp_path):
    tr = mo.OptimTrace()
    tr.append(0, -1.5, 1.5, 0.25, 0.0)
    tr.append(1, -1.25, 1.3, 0.2, 1e-3)
    tr.to_csv(tmp_path / "t.csv", "config_hash=xyz")
    back = mo.OptimTrace.from_csv(tmp_path / "t.csv")
    assert back.rows == tr.rows
    np.testing.assert_array_equal(back.column("score"), [1.5, 1.3])
