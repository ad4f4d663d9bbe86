"""Parameter storage, orthogonal initialization, Adam and the step schedule."""

import numpy as np

from .autodiff import BatchNormStats, Tensor


def orthogonal_init(shape, rng, gain=1.0, dtype=np.float64):
    """Orthogonal weights for ``shape`` flattened to (shape[0], prod(shape[1:])).

    Rows are orthonormal when fan-out <= fan-in, columns otherwise.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s == 0 for s in shape):
        raise ValueError(f"cannot initialize zero-sized shape {shape}")
    rows = shape[0]
    cols = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # unique factor: positive diagonal of R
    w = q if rows >= cols else q.T
    return (gain * w).reshape(shape).astype(dtype)


def lr_at(epoch, initial=1e-3, factor=0.1, period=26):
    """Piecewise-constant step decay: initial * factor ** floor(epoch / period)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return initial * factor ** (epoch // period)


class ParamStore:
    """Named trainable tensors plus batch-norm running statistics.

    Insertion order is the canonical parameter order used by the optimizer
    and by checkpoints.
    """

    def __init__(self, rng=None, dtype=np.float32):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.bn = {}
        self.decay = set()

    def _add(self, name, value, decay):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        if decay:
            self.decay.add(name)
        return t

    def conv(self, name, cin, cout, k=3):
        self._add(f"{name}.w", orthogonal_init((cout, cin, k, k), self.rng), True)
        self._add(f"{name}.b", np.zeros(cout), False)

    def dense(self, name, fin, fout):
        self._add(f"{name}.w", orthogonal_init((fout, fin), self.rng), True)
        self._add(f"{name}.b", np.zeros(fout), False)

    def batchnorm(self, name, channels, momentum=0.9, eps=1e-5):
        self._add(f"{name}.gamma", np.ones(channels), False)
        self._add(f"{name}.beta", np.zeros(channels), False)
        self.bn[name] = BatchNormStats(channels, momentum, eps)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def count(self, prefix=""):
        return sum(self.params[n].size for n in self.names(prefix))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def cast(self, dtype):
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(self.dtype)


class Adam:
    """Adam with decoupled weight decay (p <- p - lr*wd*p before the Adam step).

    Decay applies to the parameters listed in ``store.decay`` (conv and dense
    weights); biases and batch-norm affine terms are not decayed.
    """

    def __init__(self, store, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.params.items()}

    def step(self, lr):
        for name, p in self.store.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.store.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and name in self.store.decay:
                p.data -= p.data.dtype.type(lr * self.weight_decay) * p.data
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for n in self.m:
            self.m[n][...] = state["m"][n]
            self.v[n][...] = state["v"][n]
