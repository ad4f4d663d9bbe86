"""Network variants A-D: initial U-Net, transformer branch, stacked hourglass,
and the weighted composite loss."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .nn import ParamStore
from .transformer import (
    generate_grid, image_losses, init_locnet, invert_similarity, locnet_forward,
    matrix_losses, params_to_matrices, trans, warp_labels,
)
from .unet import UNetConfig, cce_loss, init_unet, one_hot, unet_forward

VARIANT_DEPTH = {"A": 0, "B": 1, "C": 2, "D": 3}
PAPER_ALPHAS = (100.0, 100.0, 0.1, 1.0)
MATRIX_KEYS = ("L_tx", "L_ty", "L_theta", "L_s")
IMAGE_KEYS = ("L_It", "L_Itheta", "L_Is")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "B"
    unet: UNetConfig = field(default_factory=UNetConfig)
    image_size: int = 64
    alphas: tuple = PAPER_ALPHAS
    locnet_hidden: int = 64
    locnet_pooling: str = "gap"
    hourglass_target: str = "predicted"
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANT_DEPTH:
            raise ConfigError(f"variant must be one of A-D, got {self.variant!r}")
        if self.hourglass_target not in ("predicted", "ground_truth"):
            raise ConfigError(f"unknown hourglass_target {self.hourglass_target!r}")
        if self.locnet_pooling not in ("gap", "flatten"):
            raise ConfigError(f"unknown locnet_pooling {self.locnet_pooling!r}")
        if len(self.alphas) != 4:
            raise ConfigError("alphas needs four weights")
        if self.image_size % 2 ** self.unet.depth:
            raise ConfigError("image_size must be divisible by 2^depth")

    @property
    def depth(self):
        """Number of hourglass U-Nets."""
        return VARIANT_DEPTH[self.variant]

    @property
    def num_classes(self):
        return self.unet.num_classes

    @property
    def bottleneck_size(self):
        return self.image_size // 2 ** self.unet.depth

    def hourglass_unet(self, d):
        cin = 1 if d == 1 else 1 + self.num_classes
        return replace(self.unet, in_channels=cin)


@dataclass
class ForwardTrace:
    probs0: ad.Tensor
    params: ad.Tensor = None
    transformed: ad.Tensor = None
    hourglass: list = field(default_factory=list)
    losses: dict = field(default_factory=dict)


def init_network(cfg, rng):
    """Orthogonally initialized parameters for every module of the variant."""
    store = ParamStore(rng, dtype=np.dtype(cfg.dtype))
    init_unet(store, "unet0", cfg.unet)
    if cfg.depth:
        if cfg.bottleneck_size < 4:
            raise ConfigError("bottleneck must be at least 4x4 for the localization head")
        init_locnet(store, "locnet", cfg.unet.width(cfg.unet.depth - 1), cfg.locnet_hidden,
                    pooling=cfg.locnet_pooling, bottleneck_size=cfg.bottleneck_size)
        for d in range(1, cfg.depth + 1):
            init_unet(store, f"hg{d}", cfg.hourglass_unet(d))
    return store


def omega_forward(image, cfg, store, gt_params=None, gt_labels=None, mode=None):
    """Run all stages; fill ``trace.losses`` when ground truth is given.

    ``image`` is (N, 1, H, W); ``gt_params`` (N, 4); ``gt_labels`` (N, H, W).
    Hourglass targets are the ground-truth labels warped (nearest neighbour)
    by the predicted matrix, or by the ground-truth matrix when
    ``cfg.hourglass_target == "ground_truth"``.
    """
    image = np.asarray(image, dtype=cfg.dtype)
    K = cfg.num_classes
    u0 = unet_forward(image, cfg.unet, store, "unet0", mode)
    trace = ForwardTrace(u0.probs)
    if gt_labels is not None:
        trace.losses["L_SU"] = cce_loss(u0.probs, one_hot(gt_labels, K, image.dtype))
    if cfg.depth == 0:
        return trace

    pred = locnet_forward(u0.bottleneck, store, "locnet", mode, cfg.locnet_pooling)
    trace.params = pred
    trace.transformed = trans(image, pred, "SRT")
    if gt_params is not None:
        trace.losses.update(matrix_losses(pred, gt_params))
        trace.losses.update(image_losses(image, pred, gt_params))

    x = trace.transformed
    for d in range(1, cfg.depth + 1):
        out = unet_forward(x, cfg.hourglass_unet(d), store, f"hg{d}", mode)
        trace.hourglass.append(out.probs)
        x = ad.concat_channels([trace.transformed, out.probs])

    if gt_labels is not None:
        source = pred.data if cfg.hourglass_target == "predicted" or gt_params is None else gt_params
        target = one_hot(warp_labels(gt_labels, params_to_matrices(source)), K, image.dtype)
        for d, probs in enumerate(trace.hourglass, start=1):
            trace.losses[f"L_SH_{d}"] = cce_loss(probs, target)
    return trace


def omega_loss(losses, cfg):
    """Weighted sum a1*L_SU + a2*sum(matrix) + a3*sum(image) + a4*sum(hourglass).

    ``losses`` maps component names to scalar tensors (or floats).  Returns
    (total tensor, breakdown dict of floats including ``L_total``).
    """
    a1, a2, a3, a4 = cfg.alphas
    groups = [(a1, ("L_SU",))]
    if cfg.depth:
        groups += [(a2, MATRIX_KEYS), (a3, IMAGE_KEYS),
                   (a4, tuple(f"L_SH_{d}" for d in range(1, cfg.depth + 1)))]
    total = None
    breakdown = {}
    for alpha, keys in groups:
        group = None
        for key in keys:
            if key not in losses:
                raise KeyError(f"missing loss component {key}")
            t = ad.as_tensor(losses[key])
            value = t.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"loss component {key} is not finite ({value})")
            breakdown[key] = value
            group = t if group is None else ad.add(group, t)
        term = ad.scale(group, alpha)
        total = term if total is None else ad.add(total, term)
    breakdown["L_total"] = total.item()
    return total, breakdown


@dataclass
class Prediction:
    params: np.ndarray            # (N, 4), empty for variant A
    probs: list                   # per U-Net (N, K, H, W), each in its own frame
    labels: list                  # argmax of probs

    def original_frame_probs(self, index):
        """Probabilities of U-Net ``index`` mapped into the input image frame."""
        if index == 0:
            return self.probs[0]
        return warp_back(self.probs[index], self.params)


def warp_back(probs, params):
    """Resample canonical-frame maps into the original frame with the inverse
    predicted matrix; points outside the canonical view read as background."""
    M = params_to_matrices(params)
    inv = np.empty_like(M)
    for i, m in enumerate(M):
        full = np.vstack([m, [0.0, 0.0, 1.0]])
        inv[i] = invert_similarity(full)[:2]
    N, K, H, W = probs.shape
    grid = np.einsum("nij,jhw->nihw", inv[:, :, :2], generate_grid(H, W))
    grid += inv[:, :, 2][:, :, None, None]
    out = ad.bilinear_sample(ad.Tensor(probs.astype(np.float64)), ad.Tensor(grid)).data
    mass = out.sum(axis=1, keepdims=True)
    out[:, :1] += np.clip(1.0 - mass, 0.0, None)
    return out


def predict(image, cfg, store, batch_size=16):
    """Inference-mode forward: predicted params and per-U-Net label maps.

    U-Net 0 maps are in the input frame; hourglass maps are in the frame of
    the transformed image.
    """
    image = np.asarray(image, dtype=cfg.dtype)
    n = len(image)
    probs = [[] for _ in range(cfg.depth + 1)]
    params = []
    for start in range(0, n, batch_size):
        tr = omega_forward(image[start:start + batch_size], cfg, store, mode="inference")
        probs[0].append(tr.probs0.data)
        if cfg.depth:
            params.append(tr.params.data.astype(np.float64))
            for d, p in enumerate(tr.hourglass, start=1):
                probs[d].append(p.data)
    probs = [np.concatenate(p) for p in probs]
    params = np.concatenate(params) if params else np.zeros((n, 0))
    return Prediction(params, probs, [p.argmax(axis=1).astype(np.uint8) for p in probs])
