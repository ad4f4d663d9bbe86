"""Configurable U-Net used both as the initial segmenter and as each hourglass stage."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_filters: int = 8
    in_channels: int = 1
    num_classes: int = 6
    head_kernel: int = 3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.head_kernel not in (1, 3):
            raise ValueError("head_kernel must be 1 or 3")

    def width(self, level):
        return self.base_filters * 2 ** level

    def check_input(self, shape):
        H, W = shape[-2:]
        f = 2 ** self.depth
        if H % f or W % f:
            raise ShapeError(f"input {H}x{W} not divisible by 2^depth = {f}")
        if shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {shape[1]}")


@dataclass
class UNetOutput:
    logits: ad.Tensor
    probs: ad.Tensor
    bottleneck: ad.Tensor


def init_unet(store, prefix, cfg):
    cin = cfg.in_channels
    for level in range(cfg.depth):
        w = cfg.width(level)
        store.conv(f"{prefix}.down{level}.c1", cin, w)
        store.batchnorm(f"{prefix}.down{level}.bn1", w)
        store.conv(f"{prefix}.down{level}.c2", w, w)
        store.batchnorm(f"{prefix}.down{level}.bn2", w)
        cin = w
    wc = cfg.width(cfg.depth)
    store.conv(f"{prefix}.center.c1", cin, wc)
    store.batchnorm(f"{prefix}.center.bn1", wc)
    cin = wc
    for level in reversed(range(cfg.depth)):
        w = cfg.width(level)
        store.conv(f"{prefix}.up{level}.c0", cin, w)
        store.conv(f"{prefix}.up{level}.c1", 2 * w, w)
        store.batchnorm(f"{prefix}.up{level}.bn1", w)
        cin = w
    store.conv(f"{prefix}.head", cin, cfg.num_classes, k=cfg.head_kernel)


def conv_bn_relu(x, store, conv, bn, mode):
    y = ad.conv2d(x, store[f"{conv}.w"], store[f"{conv}.b"])
    y = ad.batchnorm(y, store[f"{bn}.gamma"], store[f"{bn}.beta"], store.bn[bn], mode)
    return ad.relu(y)


def unet_forward(image, cfg, store, prefix, mode=None):
    """Down path of [conv-BN-ReLU]x2 + maxpool per level, a conv-BN-ReLU centre,
    and up levels of upsample-ReLU-conv concatenated with the skip, then a
    conv-BN-ReLU merge.  The bottleneck is the output of the last maxpool.
    """
    x = ad.as_tensor(image)
    cfg.check_input(x.shape)
    skips = []
    for level in range(cfg.depth):
        p = f"{prefix}.down{level}"
        x = conv_bn_relu(x, store, f"{p}.c1", f"{p}.bn1", mode)
        x = conv_bn_relu(x, store, f"{p}.c2", f"{p}.bn2", mode)
        skips.append(x)
        x = ad.maxpool2(x)
    bottleneck = x
    x = conv_bn_relu(x, store, f"{prefix}.center.c1", f"{prefix}.center.bn1", mode)
    for level in reversed(range(cfg.depth)):
        p = f"{prefix}.up{level}"
        x = ad.relu(ad.upsample2(x))
        x = ad.conv2d(x, store[f"{p}.c0.w"], store[f"{p}.c0.b"])
        x = ad.concat_channels([x, skips[level]])
        x = conv_bn_relu(x, store, f"{p}.c1", f"{p}.bn1", mode)
    logits = ad.conv2d(x, store[f"{prefix}.head.w"], store[f"{prefix}.head.b"])
    return UNetOutput(logits, ad.softmax_channels(logits), bottleneck)


def one_hot(labels, num_classes, dtype=np.float32):
    """(N,H,W) integer labels -> (N,K,H,W) one-hot."""
    labels = np.asarray(labels)
    out = (labels[:, None] == np.arange(num_classes)[None, :, None, None])
    return out.astype(dtype)


def cce_loss(probs, target, clip=1e-7):
    """Categorical cross entropy averaged over batch and pixels.

    Probabilities are clipped to [clip, 1 - clip] before the log.
    """
    return ad.cce(probs, target, clip)
