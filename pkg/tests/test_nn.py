import numpy as np
import pytest

from omega_seg import autodiff as ad
from omega_seg.nn import Adam, ParamStore, lr_at, orthogonal_init


@pytest.mark.parametrize("shape", [(8, 1, 3, 3), (8, 72), (4, 4), (6, 2)])
def test_orthogonal_init(rng, shape):
    w = orthogonal_init(shape, rng).reshape(shape[0], -1)
    gram = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
    np.testing.assert_allclose(gram, np.eye(len(gram)), atol=1e-12)


def test_orthogonal_init_rejects_empty(rng):
    with pytest.raises(ValueError):
        orthogonal_init((0, 3), rng)


def test_lr_schedule():
    assert all(lr_at(e) == 1e-3 for e in range(26))
    assert lr_at(26) == pytest.approx(1e-4)
    assert lr_at(52) == pytest.approx(1e-5)
    with pytest.raises(ValueError):
        lr_at(-1)


def _store(rng):
    store = ParamStore(rng, dtype=np.float64)
    store.dense("fc", 3, 2)
    store.batchnorm("bn", 2)
    return store


def test_adam_step_matches_hand_computation(rng):
    store = _store(rng)
    adam = Adam(store, weight_decay=1e-4)
    before = {n: t.data.copy() for n, t in store.params.items()}
    grads = {n: rng.standard_normal(t.shape) for n, t in store.params.items()}
    for n, t in store.params.items():
        t.grad = grads[n].copy()
    adam.step(1e-3)
    for n, t in store.params.items():
        p = before[n]
        if n in store.decay:
            p = p - 1e-3 * 1e-4 * p
        g = grads[n]
        m_hat = (0.1 * g) / 0.1
        v_hat = (0.001 * g * g) / 0.001
        np.testing.assert_allclose(t.data, p - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-12)


def test_weight_decay_only_on_weights(rng):
    store = _store(rng)
    assert store.decay == {"fc.w"}
    adam = Adam(store, weight_decay=0.5)
    for t in store.params.values():
        t.grad = np.zeros_like(t.data)
    b = store["fc.b"].data.copy()
    w = store["fc.w"].data.copy()
    g = store["bn.gamma"].data.copy()
    adam.step(0.1)
    np.testing.assert_array_equal(store["fc.b"].data, b)
    np.testing.assert_array_equal(store["bn.gamma"].data, g)
    np.testing.assert_allclose(store["fc.w"].data, w * (1 - 0.05))


def test_nonfinite_gradient_names_parameter(rng):
    store = _store(rng)
    store["bn.beta"].grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="bn.beta"):
        Adam(store).step(1e-3)


def test_duplicate_parameter_rejected(rng):
    store = _store(rng)
    with pytest.raises(KeyError):
        store.dense("fc", 3, 2)
