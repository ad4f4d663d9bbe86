"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--step]

Each case runs both backends on identical inputs (after one warm-up call so
numba compilation is excluded) and reports the best of N wall times.
``--step`` adds one forward+backward training step of the desk network.
"""

import argparse
import os
import time

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np  # noqa: E402

from omega_seg import _kernels  # noqa: E402


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x64 = rng.standard_normal((8, 8, 64, 64)).astype(np.float32)
    w8 = rng.standard_normal((8, 8, 3, 3)).astype(np.float32)
    b8 = np.zeros(8, np.float32)
    out, ctx = _kernels.conv_forward(x64, w8, b8)
    g = rng.standard_normal(out.shape).astype(np.float32)
    img = rng.standard_normal((8, 6, 64, 64))
    px = rng.uniform(-2, 65, (8, 64, 64))
    py = rng.uniform(-2, 65, (8, 64, 64))
    dout = rng.standard_normal(img.shape)
    labels = rng.integers(0, 6, (8, 64, 64)).astype(np.uint8)

    def conv_fwd():
        _kernels.conv_forward(x64, w8, b8)

    def conv_bwd():
        _, c = _kernels.conv_forward(x64, w8, b8)
        _kernels.conv_backward(c, g, w8)

    return [
        ("conv 3x3 fwd 8x8x64x64", conv_fwd),
        ("conv 3x3 fwd+bwd 8x8x64x64", conv_bwd),
        ("maxpool2 fwd 8x8x64x64", lambda: _kernels.maxpool2_forward(x64)),
        ("bilinear fwd 8x6x64x64", lambda: _kernels.bilinear_forward(img, px, py)),
        ("bilinear bwd 8x6x64x64", lambda: _kernels.bilinear_backward(img, px, py, dout)),
        ("nearest labels 8x64x64", lambda: _kernels.nearest_labels(labels, px, py, 0)),
    ]


def training_step():
    from omega_seg import autodiff as ad
    from omega_seg.nn import Adam
    from omega_seg.omeganet import NetworkConfig, init_network, omega_forward, omega_loss

    cfg = NetworkConfig(variant="B")
    rng = np.random.default_rng(0)
    store = init_network(cfg, rng)
    adam = Adam(store)
    image = rng.standard_normal((8, 1, 64, 64)).astype(np.float32)
    labels = rng.integers(0, 6, (8, 64, 64))
    params = np.tile([0.1, -0.1, 0.5, 0.8], (8, 1))

    def step():
        store.zero_grad()
        with ad.Graph(training=True) as g:
            tr = omega_forward(image, cfg, store, params, labels, "training")
            g.backward(omega_loss(tr.losses, cfg)[0])
        adam.step(1e-4)
    return "training step, network B, batch 8 at 64x64", step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true", help="also time a full training step")
    args = ap.parse_args()
    if _kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    items = cases(np.random.default_rng(0))
    if args.step:
        items.append(training_step())
    print(f"{'case':46s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fn in items:
        res = {}
        for flag in (True, False):
            _kernels.USE_NUMBA = flag
            res[flag] = best_of(fn, args.repeat)
        print(f"{name:46s} {res[True] * 1e3:10.2f} {res[False] * 1e3:10.2f} "
              f"{res[False] / res[True]:7.1f}x")
    _kernels.USE_NUMBA = True


if __name__ == "__main__":
    main()
