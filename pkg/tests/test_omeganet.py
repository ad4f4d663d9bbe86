import numpy as np
import pytest

from omega_seg import autodiff as ad
from omega_seg.omeganet import (
    IMAGE_KEYS, MATRIX_KEYS, PAPER_ALPHAS, ConfigError, NetworkConfig, init_network,
    omega_forward, omega_loss, predict, warp_back,
)
from omega_seg.transformer import RigidParams
from omega_seg.unet import UNetConfig

SMALL = UNetConfig(depth=2, base_filters=4)


def _cfg(variant, **kw):
    return NetworkConfig(variant=variant, unet=SMALL, image_size=32, dtype="float64", **kw)


def _batch(rng, n=2, size=32):
    image = rng.standard_normal((n, 1, size, size))
    labels = rng.integers(0, 6, (n, size, size))
    params = np.array([[0.1, -0.05, 0.4, 0.8], [-0.2, 0.1, -2.0, 0.6]])[:n]
    return image, labels, params


def test_paper_alphas_are_default():
    assert NetworkConfig().alphas == (100.0, 100.0, 0.1, 1.0) == PAPER_ALPHAS


def test_variant_depths():
    assert [NetworkConfig(variant=v).depth for v in "ABCD"] == [0, 1, 2, 3]
    with pytest.raises(ConfigError):
        NetworkConfig(variant="E")


def test_unit_components_give_501_3():
    cfg = NetworkConfig(variant="B")
    losses = {k: 1.0 for k in ("L_SU",) + MATRIX_KEYS + IMAGE_KEYS + ("L_SH_1",)}
    total, parts = omega_loss(losses, cfg)
    assert total.item() == pytest.approx(501.3, abs=1e-12)
    assert parts["L_total"] == pytest.approx(501.3, abs=1e-12)


def test_all_zero_components():
    cfg = NetworkConfig(variant="C")
    losses = {k: 0.0 for k in ("L_SU",) + MATRIX_KEYS + IMAGE_KEYS + ("L_SH_1", "L_SH_2")}
    assert omega_loss(losses, cfg)[0].item() == 0.0


def test_variant_a_uses_only_initial_term():
    total, parts = omega_loss({"L_SU": 0.5, "L_tx": 7.0}, NetworkConfig(variant="A"))
    assert total.item() == 50.0
    assert "L_tx" not in parts


def test_doubling_alpha4_doubles_hourglass_contribution():
    losses = {k: 0.3 for k in ("L_SU",) + MATRIX_KEYS + IMAGE_KEYS + ("L_SH_1", "L_SH_2")}
    base = omega_loss(losses, NetworkConfig(variant="C"))[0].item()
    doubled = omega_loss(losses, NetworkConfig(variant="C", alphas=(100.0, 100.0, 0.1, 2.0)))
    hourglass = 1.0 * 0.6
    assert doubled[0].item() - base == pytest.approx(hourglass, rel=1e-12)


def test_non_finite_component_is_named():
    losses = {k: 1.0 for k in ("L_SU",) + MATRIX_KEYS + IMAGE_KEYS + ("L_SH_1",)}
    losses["L_theta"] = float("nan")
    with pytest.raises(FloatingPointError, match="L_theta"):
        omega_loss(losses, NetworkConfig(variant="B"))


def test_variant_a_trace_is_bare(rng):
    cfg = _cfg("A")
    store = init_network(cfg, rng)
    image, labels, _ = _batch(rng)
    tr = omega_forward(image, cfg, store, gt_labels=labels, mode="training")
    assert tr.params is None and tr.hourglass == []
    assert set(tr.losses) == {"L_SU"}
    assert not any(n.startswith(("locnet", "hg")) for n in store.names())


def test_variant_d_has_three_hourglass_maps(rng):
    cfg = _cfg("D")
    store = init_network(cfg, rng)
    image, labels, params = _batch(rng)
    tr = omega_forward(image, cfg, store, params, labels, mode="training")
    assert len(tr.hourglass) == 3
    assert tr.transformed.shape == (2, 1, 32, 32)
    assert all(h.shape == (2, 6, 32, 32) for h in tr.hourglass)
    assert all(np.isfinite(v.item()) for v in tr.losses.values())


def test_later_variants_contain_initial_unet(rng):
    a = init_network(_cfg("A"), np.random.default_rng(0))
    for v in "BCD":
        other = init_network(_cfg(v), np.random.default_rng(0))
        for name in a.names():
            assert other[name].shape == a[name].shape


def test_ground_truth_params_zero_transformer_losses(rng):
    cfg = _cfg("B")
    store = init_network(cfg, rng)
    image, labels, _ = _batch(rng)
    with ad.Graph(training=True):
        tr = omega_forward(image, cfg, store, mode="training")
        pred = tr.params.data.copy()
        tr = omega_forward(image, cfg, store, pred, labels, mode="training")
    for key in MATRIX_KEYS + IMAGE_KEYS:
        assert tr.losses[key].item() == 0.0
    total, parts = omega_loss(tr.losses, cfg)
    expected = 100.0 * parts["L_SU"] + parts["L_SH_1"]
    assert total.item() == pytest.approx(expected, rel=1e-12)


def test_predict_label_maps(rng):
    cfg = _cfg("B")
    store = init_network(cfg, rng)
    image, _, _ = _batch(rng, n=2)
    with pytest.raises(ad.GraphError):
        predict(image, cfg, store)
    with ad.Graph(training=True):
        omega_forward(image, cfg, store, mode="training")  # fills batch-norm statistics
    pred = predict(image, cfg, store)
    assert len(pred.labels) == 2
    assert pred.params.shape == (2, 4)
    for lab in pred.labels:
        assert lab.shape == (2, 32, 32)
        assert lab.min() >= 0 and lab.max() < 6


def test_warp_back_identity_is_exact(rng):
    probs = rng.random((2, 6, 16, 16))
    probs /= probs.sum(axis=1, keepdims=True)
    ident = np.tile(RigidParams().as_array(), (2, 1))
    np.testing.assert_allclose(warp_back(probs, ident), probs, atol=1e-12)


def test_warp_back_keeps_probability_mass(rng):
    probs = rng.random((1, 6, 16, 16))
    probs /= probs.sum(axis=1, keepdims=True)
    out = warp_back(probs, np.array([[0.2, -0.1, 0.7, 0.6]]))
    assert np.all(out.sum(axis=1) >= 1.0 - 1e-9)
