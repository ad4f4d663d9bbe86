"""Finite-difference gradient checking and the suite behind ``omega-seg gradcheck``."""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import ParamStore
from .omeganet import NetworkConfig, init_network, omega_forward, omega_loss
from .transformer import (
    generate_grid, image_losses, init_locnet, locnet_forward, matrix_losses, wrap,
)
from .unet import UNetConfig

EPS = 1e-5
TOLERANCE = 1e-4


def _eval(f, x):
    out = f(x)
    value = float(np.asarray(out.data if isinstance(out, ad.Tensor) else out).reshape(()))
    if not np.isfinite(value):
        raise FloatingPointError(f"function is not finite at the probe point ({value})")
    return value


def _central(f, x, idx, eps):
    old = x.data[idx]
    x.data[idx] = old + eps
    hi = _eval(f, x)
    x.data[idx] = old - eps
    lo = _eval(f, x)
    x.data[idx] = old
    return (hi - lo) / (2 * eps)


def _rel(a, n):
    return abs(a - n) / max(1.0, abs(a), abs(n))


def gradient_report(f, x, eps=EPS, indices=None, reject_kinks=False):
    """(max relative error, probes checked, probes rejected).

    With ``reject_kinks`` a probe is discarded when the central differences
    at eps and eps/2 disagree by more than 1e-6 relative, i.e. the probe
    straddles a non-smooth point; a wrong analytic gradient still shows up
    because both numeric estimates agree with each other but not with it.
    """
    if x.data.dtype != np.float64:
        raise TypeError("gradient checks run in double precision")
    x.requires_grad = True
    x.grad = None
    with ad.Graph() as g:
        out = f(x)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("function is not finite at the probe point")
        g.backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    if indices is None:
        indices = list(np.ndindex(x.shape))
    worst, checked, rejected = 0.0, 0, 0
    for idx in indices:
        idx = tuple(int(i) for i in idx)
        num = _central(f, x, idx, eps)
        if reject_kinks and _rel(num, _central(f, x, idx, eps / 2)) > 1e-6:
            rejected += 1
            continue
        worst = max(worst, _rel(analytic[idx], num))
        checked += 1
    return worst, checked, rejected


def check_gradient(f, x, eps=EPS, indices=None, reject_kinks=False):
    """Max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|).

    ``f`` maps the tensor ``x`` (perturbed in place) to a scalar tensor.
    """
    return gradient_report(f, x, eps, indices, reject_kinks)[0]


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    error: float
    checked: int
    rejected: int
    seconds: float

    @property
    def passed(self):
        return self.checked > 0 and self.error < TOLERANCE


def _weighted_sum(out, w):
    return ad.sum_all(ad.mul(out, w))


def _away_from_integers(p, margin=1e-3):
    return np.all(np.abs(p - np.round(p)) > margin)


def _draw_sampling_params(rng, n, size):
    """Similarity params whose sample points stay in-bounds and off the pixel lattice."""
    for _ in range(1000):
        p = np.column_stack([rng.uniform(-0.2, 0.2, n), rng.uniform(-0.2, 0.2, n),
                             rng.uniform(-np.pi, np.pi, n), rng.uniform(0.5, 0.65, n)])
        M = ad.similarity_matrix(ad.Tensor(p)).data
        grid = np.einsum("nij,jhw->nihw", M[:, :, :2], generate_grid(size, size))
        grid += M[:, :, 2][:, :, None, None]
        px, py = ad.grid_to_pixels(grid, size, size)
        if _away_from_integers(px) and _away_from_integers(py):
            return p
    raise RuntimeError("could not draw lattice-free sampling params")


def _cases(rng):
    """Yield (name, f, x, kwargs) probes."""
    # conv2d: input, kernel, bias
    x = ad.Tensor(rng.standard_normal((2, 3, 6, 6)))
    k = ad.Tensor(rng.standard_normal((4, 3, 3, 3)))
    b = ad.Tensor(rng.standard_normal(4))
    w = rng.standard_normal((2, 4, 6, 6))
    for name, t in (("x", x), ("kernel", k), ("bias", b)):
        yield f"conv2d[{name}]", lambda _t: _weighted_sum(ad.conv2d(x, k, b), w), t, {}

    # conv2d + relu, probing only inputs whose pre-activations stay clear of 0
    while True:
        xr = ad.Tensor(rng.standard_normal((1, 1, 6, 6)))
        kr = ad.Tensor(rng.standard_normal((2, 1, 3, 3)))
        if np.min(np.abs(ad.conv2d(xr, kr).data)) > 1e-3:
            break
    wr = rng.standard_normal((1, 2, 6, 6))
    yield "conv2d+relu[x]", lambda _t: _weighted_sum(ad.relu(ad.conv2d(xr, kr)), wr), xr, {}

    # batchnorm in training mode, 4D and 2D
    for shape in ((3, 2, 4, 4), (5, 3)):
        C = shape[1]
        xb = ad.Tensor(rng.standard_normal(shape))
        gm = ad.Tensor(rng.uniform(0.5, 1.5, C))
        bt = ad.Tensor(rng.standard_normal(C))
        stats = ad.BatchNormStats(C)
        wb = rng.standard_normal(shape)
        f = lambda _t, xb=xb, gm=gm, bt=bt, stats=stats, wb=wb: _weighted_sum(
            ad.batchnorm(xb, gm, bt, stats, "training"), wb)
        tag = f"{len(shape)}d"
        for name, t in (("x", xb), ("gamma", gm), ("beta", bt)):
            yield f"batchnorm{tag}[{name}]", f, t, {}

    # maxpool2 with a clear winner in every window
    while True:
        xm = rng.standard_normal((2, 2, 4, 4))
        blocks = np.sort(xm.reshape(2, 2, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
                         .reshape(2, 2, 2, 2, 4), axis=-1)
        if np.min(blocks[..., -1] - blocks[..., -2]) > 1e-3:
            break
    xm = ad.Tensor(xm)
    wm = rng.standard_normal((2, 2, 2, 2))
    yield "maxpool2[x]", lambda _t: _weighted_sum(ad.maxpool2(xm), wm), xm, {}

    xu = ad.Tensor(rng.standard_normal((2, 2, 3, 3)))
    wu = rng.standard_normal((2, 2, 6, 6))
    yield "upsample2[x]", lambda _t: _weighted_sum(ad.upsample2(xu), wu), xu, {}

    logits = ad.Tensor(rng.standard_normal((2, 4, 3, 3)))
    target = np.eye(4)[rng.integers(0, 4, (2, 3, 3))].transpose(0, 3, 1, 2)
    yield "softmax+cce[logits]", lambda _t: ad.cce(ad.softmax_channels(logits), target), logits, {}

    # compose -> grid -> sampler chain
    size = 8
    img = ad.Tensor(rng.standard_normal((2, 2, size, size)))
    params = ad.Tensor(_draw_sampling_params(rng, 2, size))
    ws = rng.standard_normal((2, 2, size, size))
    base = generate_grid(size, size)

    def chain(_t):
        grid = ad.transform_grid(base, ad.similarity_matrix(params, "SRT"))
        return _weighted_sum(ad.bilinear_sample(img, grid), ws)
    yield "compose->grid->sample[params]", chain, params, {}
    yield "compose->grid->sample[image]", chain, img, {}

    # matrix losses, rotation differences kept away from the wrap point
    n = 5
    pred = ad.Tensor(np.column_stack([rng.uniform(-0.3, 0.3, (n, 2)), rng.uniform(-3, 3, n),
                                      rng.uniform(0.5, 1.0, n)]))
    gt = np.column_stack([rng.uniform(-0.3, 0.3, (n, 2)), rng.uniform(-3, 3, n),
                          rng.uniform(0.5, 1.0, n)])
    d = wrap(pred.data[:, 2] - gt[:, 2])
    gt[:, 2] += np.where(np.pi - np.abs(d) < 1e-2, 0.5, 0.0)
    for key in ("L_tx", "L_ty", "L_theta", "L_s"):
        yield f"matrix_loss[{key}]", lambda _t, key=key: matrix_losses(pred, gt)[key], pred, {}

    # image losses: smooth image, lattice-free sample points for both param sets
    size = 12
    yy, xx = np.mgrid[0:size, 0:size] / size
    smooth = np.sin(3 * xx + 1) * np.cos(2 * yy) + 0.3 * rng.standard_normal((size, size))
    image = smooth[None, None]
    pi = ad.Tensor(_draw_sampling_params(rng, 1, size))
    gi = _draw_sampling_params(rng, 1, size)
    for key in ("L_It", "L_Itheta", "L_Is"):
        yield f"image_loss[{key}]", lambda _t, key=key: image_losses(image, pi, gi)[key], pi, \
            {"reject_kinks": True}

    # LocNet: rotation loss w.r.t. head weights
    store = ParamStore(np.random.default_rng(int(rng.integers(1 << 30))), dtype=np.float64)
    init_locnet(store, "loc", 4, hidden=8, widths=(4, 4))
    feat = rng.standard_normal((3, 4, 8, 8))
    gl = np.column_stack([rng.uniform(-0.2, 0.2, (3, 2)), rng.uniform(-0.5, 0.5, 3),
                          rng.uniform(0.6, 1.0, 3)])

    def loc_loss(_t):
        return matrix_losses(locnet_forward(feat, store, "loc", "training"), gl)["L_theta"]
    for name in ("loc.c0.w", "loc.fc1.w", "loc.fc2.w"):
        yield f"locnet_L_theta[{name}]", loc_loss, store[name], {"reject_kinks": True}


def omega_loss_case(rng, n_params=20, size=32, max_draws=200):
    """Composite loss of a variant-B network on a 32x32 instance, probed at
    ``n_params`` random scalar parameters.  Probes straddling a kink are
    redrawn.  Returns one aggregated CheckResult."""
    cfg = NetworkConfig(variant="B", unet=UNetConfig(depth=2, base_filters=4), image_size=size,
                        locnet_hidden=8, dtype="float64", hourglass_target="ground_truth")
    store = init_network(cfg, np.random.default_rng(int(rng.integers(1 << 30))))
    image = rng.standard_normal((2, 1, size, size))
    labels = rng.integers(0, cfg.num_classes, (2, size, size))
    gt = np.column_stack([rng.uniform(-0.2, 0.2, (2, 2)), rng.uniform(-1, 1, 2),
                          rng.uniform(0.6, 1.0, 2)])

    def f(_t):
        tr = omega_forward(image, cfg, store, gt, labels, "training")
        return omega_loss(tr.losses, cfg)[0]
    names = store.names()
    t0 = time.perf_counter()
    worst, checked, rejected = 0.0, 0, 0
    while checked < n_params and checked + rejected < max_draws:
        t = store[names[int(rng.integers(len(names)))]]
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        err, c, r = gradient_report(f, t, indices=[idx], reject_kinks=True)
        worst, checked, rejected = max(worst, err), checked + c, rejected + r
    return CheckResult(f"omega_loss[{n_params} random params]", worst, checked, rejected,
                       time.perf_counter() - t0)


def run_suite(seed=0, include_network=True):
    rng = np.random.default_rng(seed)
    results = []
    for name, f, x, kw in list(_cases(rng)):
        t0 = time.perf_counter()
        err, checked, rejected = gradient_report(f, x, **kw)
        results.append(CheckResult(name, err, checked, rejected, time.perf_counter() - t0))
    if include_network:
        results.append(omega_loss_case(rng))
    return results
