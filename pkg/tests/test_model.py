import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsbridge import tensor as T
from dsbridge.model import (ModelConfig, ModelParams, ema_update, extract_stats, forward,
                            init_params, load_checkpoint, param_shapes, patchify, predict,
                            save_checkpoint, statistic_bridge)

SMALL = ModelConfig(image_size=8, patch=4, dim=6, blocks=2, proj_dim=4, classes=3)


def test_patchify_layout():
    img = np.arange(2 * 8 * 8 * 3, dtype=float).reshape(2, 8, 8, 3)
    p = patchify(img, 4)
    assert p.shape == (2, 4, 48)
    # token 1 is the top-right patch
    np.testing.assert_array_equal(p[1, 1].reshape(4, 4, 3), img[1, :4, 4:])
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 6, 8, 3)), 4)


def test_extract_stats_matches_numpy(rng):
    z = rng.normal(size=(3, 5, 4))
    s = extract_stats(z)
    np.testing.assert_allclose(s.mu.data, z.mean(axis=1))
    np.testing.assert_allclose(s.sigma.data, z.std(axis=1))
    with pytest.raises(ValueError):
        extract_stats(np.zeros((3, 4)))


def _bridge_instances(n, seed, z_scale, min_tokens=2):
    r = np.random.default_rng(seed)
    for _ in range(n):
        b, t, d = r.integers(1, 4), r.integers(min_tokens, 20), r.integers(1, 6)
        z = r.normal(r.normal(), r.uniform(*z_scale), size=(b, t, d))
        yield z, r.normal(size=(b, d)) * 3, r.uniform(0, 2, size=(b, d))


def test_bridge_exact_output_statistics():
    # mean lands on mu_t; std is sigma_t scaled by sd_k / (sd_k + eps), for any scale
    eps = 1e-5
    for z, mu_t, sd_t in _bridge_instances(300, 0, (1e-3, 50)):
        out = statistic_bridge(T.Tensor(z), mu_t, sd_t, eps).data
        sd_k = z.std(axis=1)
        assert np.all(np.abs(out.mean(axis=1) - mu_t) <= 1e-5 * (1 + np.abs(mu_t)))
        np.testing.assert_allclose(out.std(axis=1), sd_t * sd_k / (sd_k + eps), rtol=1e-7, atol=1e-9)


def test_bridge_moves_statistics_onto_target():
    eps, checked = 1e-5, 0
    for z, mu_t, sd_t in _bridge_instances(1000, 1, (0.5, 3), min_tokens=8):
        out = statistic_bridge(T.Tensor(z), mu_t, sd_t, eps).data
        ok = z.std(axis=1) > 100 * eps
        np.testing.assert_allclose(out.mean(axis=1)[ok], mu_t[ok], atol=1e-5)
        np.testing.assert_allclose(out.std(axis=1)[ok], sd_t[ok], atol=1e-4)
        checked += ok.sum()
    assert checked > 1000


def test_bridge_identity_restyle(rng):
    z = rng.normal(size=(4, 16, 8)) * 2 + 1
    s = extract_stats(z)
    out = statistic_bridge(T.Tensor(z), s.mu.data, s.sigma.data, eps=0.0).data
    assert np.abs(out - z).max() < 1e-5
    # with the default eps the deviation is bounded by |z - mu| * eps / sd
    out = statistic_bridge(T.Tensor(z), s.mu.data, s.sigma.data).data
    bound = np.abs(z - s.mu.data[:, None]) * 1e-5 / s.sigma.data[:, None] + 1e-12
    assert np.all(np.abs(out - z) <= bound)


def test_bridge_zero_variance_input_lands_on_target_mean():
    z = np.ones((1, 8, 3))
    out = statistic_bridge(T.Tensor(z), np.full((1, 3), 2.0), np.ones((1, 3))).data
    np.testing.assert_allclose(out, 2.0)


def test_bridge_validation(rng):
    z = T.Tensor(rng.normal(size=(2, 4, 3)))
    with pytest.raises(ValueError):
        statistic_bridge(z, np.zeros((2, 3)), -np.ones((2, 3)))
    with pytest.raises(ValueError):
        statistic_bridge(z, np.zeros((2, 4)), np.ones((2, 4)))
    with pytest.raises(ValueError):
        statistic_bridge(z, np.zeros((2, 3)), np.ones((2, 3)), eps=-1)


def test_param_inventory():
    p = init_params(SMALL, seed=1)
    assert set(p.names()) == set(param_shapes(SMALL))
    assert p.norm_names() == ["block0.gamma", "block0.beta", "block1.gamma", "block1.beta"]
    np.testing.assert_array_equal(p.arrays["block0.gamma"], 1.0)
    np.testing.assert_array_equal(p.arrays["head.b"], 0.0)
    again = init_params(SMALL, seed=1)
    for k in p.names():
        np.testing.assert_array_equal(p.arrays[k], again.arrays[k])


def test_validate_rejects_bad_params():
    p = init_params(SMALL)
    bad = p.copy()
    bad.arrays["head.w"] = np.zeros((2, 2), dtype=np.float32)
    with pytest.raises(ValueError):
        bad.validate()
    missing = p.copy()
    del missing.arrays["proj.b"]
    with pytest.raises(ValueError):
        missing.validate()


def test_forward_shapes_and_normalisation(rng):
    p = init_params(SMALL, seed=2)
    out = forward(p, rng.random((5, 8, 8, 3)))
    assert out.logits.shape == (5, 3)
    assert out.z.shape == (5, 4, 6)
    np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(out.embedding.data, axis=1), 1.0, atol=1e-5)
    with pytest.raises(ValueError):
        forward(p, rng.random((5, 8, 8, 1)))


def test_forward_bridge_changes_only_with_stats(rng):
    p = init_params(SMALL, seed=3).astype(np.float64)
    x = rng.random((3, 8, 8, 3))
    plain = forward(p, x)
    s = extract_stats(plain.z)
    same = forward(p, x, bridge=(s.mu.data, s.sigma.data))
    assert np.abs(same.logits.data - plain.logits.data).max() < 1e-4
    moved = forward(p, x, bridge=(s.mu.data + 1.0, s.sigma.data))
    assert np.abs(moved.logits.data - plain.logits.data).max() > 1e-3
    with pytest.raises(ValueError):
        forward(p, x, bridge=(s.mu.data[:2], s.sigma.data[:2]))


def test_forward_gradients_through_bridge(rng):
    p = init_params(SMALL, seed=4).astype(np.float64)
    x = rng.random((3, 8, 8, 3))
    mu = rng.normal(size=(3, 6))
    sd = rng.uniform(0.5, 2, size=(3, 6))
    for name in ("embed.w", "block0.gamma", "head.w"):
        def f(w, name=name):
            leaves = p.leaves(requires_grad=False)
            leaves[name] = w
            out = forward(p, x, bridge=(mu, sd), weights=leaves)
            return T.sum(out.logits * out.logits) + T.sum(out.embedding)
        assert T.check_gradients(f, p.arrays[name]) < 1e-5


def test_predict_matches_forward(rng):
    p = init_params(SMALL, seed=5)
    x = rng.random((7, 8, 8, 3))
    np.testing.assert_array_equal(predict(p, x, batch_size=3), forward(p, x).logits.data.argmax(1))
    assert predict(p, x[:0]).shape == (0,)


def _pair(seed):
    r = np.random.default_rng(seed)
    a = init_params(SMALL, seed=seed)
    b = ModelParams(SMALL, {k: (v + r.normal(size=v.shape)).astype(v.dtype) for k, v in a.arrays.items()})
    return a, b


def test_ema_examples():
    a, b = _pair(0)
    one = {k: np.ones_like(v) for k, v in a.arrays.items()}
    zero = {k: np.zeros_like(v) for k, v in a.arrays.items()}
    out = ema_update(ModelParams(SMALL, one), ModelParams(SMALL, zero), 0.9)
    np.testing.assert_allclose(out.arrays["head.w"], 0.9, rtol=1e-6)
    for k in a.names():
        np.testing.assert_array_equal(ema_update(a, b, 1.0).arrays[k], a.arrays[k])
        np.testing.assert_array_equal(ema_update(a, b, 0.0).arrays[k], b.arrays[k])
    with pytest.raises(ValueError):
        ema_update(a, b, 1.5)
    with pytest.raises(ValueError):
        ema_update(a, init_params(ModelConfig(image_size=8, patch=4, dim=6, blocks=1,
                                              proj_dim=4, classes=3)), 0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 1))
def test_ema_stays_in_hull(seed, m):
    a, b = _pair(seed)
    out = ema_update(a, b, m)
    for k in a.names():
        lo = np.minimum(a.arrays[k], b.arrays[k])
        hi = np.maximum(a.arrays[k], b.arrays[k])
        assert np.all(out.arrays[k] >= lo) and np.all(out.arrays[k] <= hi)


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(SMALL, seed=6)
    save_checkpoint(p, tmp_path / "ck")
    q = load_checkpoint(tmp_path / "ck")
    assert q.config == SMALL
    for k in p.names():
        assert q.arrays[k].dtype == p.arrays[k].dtype
        assert q.arrays[k].tobytes() == p.arrays[k].tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")
    save_checkpoint(init_params(SMALL), tmp_path / "ck")
    man = tmp_path / "ck" / "manifest.json"
    man.write_text(man.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "ck")
