import numpy as np
import pytest

from omega_seg import autodiff as ad
from omega_seg.autodiff import ShapeError
from omega_seg.nn import ParamStore
from omega_seg.unet import UNetConfig, cce_loss, init_unet, one_hot, unet_forward


def _net(rng, **kw):
    cfg = UNetConfig(**kw)
    store = ParamStore(rng, dtype=np.float64)
    init_unet(store, "u", cfg)
    return cfg, store


def test_output_shapes(rng):
    cfg, store = _net(rng, depth=3, base_filters=4)
    out = unet_forward(rng.standard_normal((2, 1, 32, 32)), cfg, store, "u", "training")
    assert out.probs.shape == (2, 6, 32, 32)
    assert out.bottleneck.shape == (2, 16, 4, 4)
    np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-9)


def test_input_must_divide_by_depth(rng):
    cfg, store = _net(rng, depth=3, base_filters=4)
    with pytest.raises(ShapeError):
        unet_forward(np.zeros((1, 1, 20, 20)), cfg, store, "u")


def test_channel_widths_double(rng):
    cfg, store = _net(rng, depth=3, base_filters=8)
    assert [store[f"u.down{l}.c1.w"].shape[0] for l in range(3)] == [8, 16, 32]
    assert store["u.center.c1.w"].shape[0] == 64
    assert store["u.head.w"].shape == (6, 8, 3, 3)


def test_head_kernel_option(rng):
    cfg, store = _net(rng, depth=2, base_filters=4, head_kernel=1)
    assert store["u.head.w"].shape == (6, 4, 1, 1)


def test_inference_is_deterministic(rng):
    cfg, store = _net(rng, depth=2, base_filters=4)
    x = rng.standard_normal((2, 1, 16, 16))
    unet_forward(x, cfg, store, "u", "training")  # initializes running stats
    a = unet_forward(x, cfg, store, "u", "inference").probs.data
    b = unet_forward(x, cfg, store, "u", "inference").probs.data
    assert a.tobytes() == b.tobytes()


def test_one_hot_and_cce(rng):
    labels = rng.integers(0, 6, (2, 4, 4))
    t = one_hot(labels, 6)
    assert t.shape == (2, 6, 4, 4) and np.all(t.sum(axis=1) == 1)
    loss = cce_loss(ad.Tensor(t.astype(np.float64)), t).item()
    assert 0 <= loss < 1e-6
