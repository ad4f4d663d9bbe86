"""Rigid spatial transformer: similarity algebra, wrapped-phase loss, grids,
bilinear sampling, image losses and the localization head.

Coordinates are normalized to [-1, 1] in both axes with the endpoints on the
outermost pixel centres.  Grids are (2, H', W') arrays whose channel 0 holds
x (the column direction) and channel 1 holds y (the row direction).
"""

import csv
import math
from dataclasses import astuple, dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import ShapeError
from .unet import conv_bn_relu

PARAM_NAMES = ("t_x", "t_y", "theta", "s")


class SimilarityError(ValueError):
    """Matrix is not a non-degenerate similarity transform."""


@dataclass(frozen=True)
class RigidParams:
    t_x: float = 0.0
    t_y: float = 0.0
    theta: float = 0.0
    s: float = 1.0

    def as_array(self):
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(*(float(v) for v in a))


IDENTITY = RigidParams()


def wrap(delta):
    """Wrap angles into [-pi, pi) as mod(delta + pi, 2 pi) - pi."""
    out = np.mod(np.asarray(delta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return float(out) if out.ndim == 0 else out


def compose_similarity(p):
    """3x3 homogeneous matrix S @ R @ T for rigid params ``p``."""
    if not isinstance(p, RigidParams):
        p = RigidParams.from_array(p)
    c, sn = math.cos(p.theta), math.sin(p.theta)
    T = np.array([[1.0, 0.0, p.t_x], [0.0, 1.0, p.t_y], [0.0, 0.0, 1.0]])
    R = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
    S = np.diag([p.s, p.s, 1.0])
    return S @ R @ T


def decompose_similarity(M, tol=1e-9):
    """Inverse of :func:`compose_similarity` for a similarity matrix."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (3, 3):
        raise SimilarityError(f"expected a 3x3 matrix, got {M.shape}")
    a, b = M[0, 0], M[1, 0]
    s = math.hypot(a, b)
    if s <= 1e-12:
        raise SimilarityError("degenerate scale")
    scale_tol = tol * max(1.0, s)
    if (abs(M[0, 1] + b) > scale_tol or abs(M[1, 1] - a) > scale_tol
            or abs(M[2, 0]) > tol or abs(M[2, 1]) > tol or abs(M[2, 2] - 1.0) > tol):
        raise SimilarityError("matrix is not a rotation+uniform-scale+translation")
    theta = wrap(math.atan2(b, a))
    c, sn = a / s, b / s
    u, v = M[0, 2] / s, M[1, 2] / s
    # t = R^T u
    return RigidParams(c * u + sn * v, -sn * u + c * v, theta, s)


def invert_similarity(M):
    M = np.asarray(M, dtype=np.float64)
    A = M[:2, :2]
    Ai = np.linalg.inv(A)
    out = np.eye(3)
    out[:2, :2] = Ai
    out[:2, 2] = -Ai @ M[:2, 2]
    return out


def params_to_matrices(params, parts="SRT"):
    """(N, 4) parameter array -> (N, 2, 3) matrices, no gradient."""
    return ad.similarity_matrix(ad.Tensor(np.asarray(params, dtype=np.float64)), parts).data


# ---------------------------------------------------------------------------
# Losses on parameters
# ---------------------------------------------------------------------------

def _half_sq(d):
    return ad.scale(ad.mean_all(ad.square(d)), 0.5)


def matrix_losses(pred, gt):
    """Batch means of 1/2 (p - p_hat)^2 per parameter, with the rotation
    difference wrapped into [-pi, pi) first.

    ``pred`` is an (N, 4) tensor, ``gt`` a constant (N, 4) array.
    Returns a dict keyed ``L_tx``, ``L_ty``, ``L_theta``, ``L_s``.
    """
    gt = np.asarray(gt, dtype=pred.dtype).reshape(pred.shape)
    out = {}
    for j, key in enumerate(("L_tx", "L_ty", "L_theta", "L_s")):
        d = ad.sub(ad.column(pred, j), gt[:, j])
        if key == "L_theta":
            d = ad.wrap_angle(d)
        out[key] = _half_sq(d)
    return out


# ---------------------------------------------------------------------------
# Grids and sampling
# ---------------------------------------------------------------------------

def generate_grid(height, width):
    """Uniform (2, H', W') grid over [-1, 1]^2 including the endpoints."""
    if height < 2 or width < 2:
        raise ValueError("grid needs at least 2 points per axis")
    ys = np.linspace(-1.0, 1.0, height)
    xs = np.linspace(-1.0, 1.0, width)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy])


def transform_grid(grid, M):
    """Apply a 3x3 (or 2x3) matrix to every (x, y) point of a (2, H', W') grid.

    ``M`` may also be an (N, 2, 3) tensor, in which case the result is a
    batched (N, 2, H', W') tensor differentiable with respect to ``M``.
    """
    if isinstance(M, ad.Tensor):
        return ad.transform_grid(grid, M)
    M = np.asarray(M, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    return np.einsum("ij,jhw->ihw", M[:2, :2], grid) + M[:2, 2][:, None, None]


def bilinear_sample(image, grid):
    """Sample an (H, W, C) image at the points of a (2, H', W') grid.

    Returns (H', W', C).  Batched tensor sampling lives in
    :func:`omega_seg.autodiff.bilinear_sample`.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    grid = np.asarray(grid, dtype=image.dtype)
    if grid.ndim != 3 or grid.shape[0] != 2:
        raise ShapeError(f"grid must be (2, H', W'), got {grid.shape}")
    H, W, _ = image.shape
    px, py = ad.grid_to_pixels(grid[None], H, W)
    out = _kernels.bilinear_forward(np.ascontiguousarray(image.transpose(2, 0, 1)[None]), px, py)
    return out[0].transpose(1, 2, 0)


def trans(image, params, parts="SRT", size=None):
    """Resample a batch of images at the grid transformed by T, RT or SRT.

    ``image`` is (N, C, H, W) (array or tensor); ``params`` an (N, 4) tensor or
    array.  The output is (N, C, H', W') with H', W' = ``size`` or the input size.
    """
    image = ad.as_tensor(image)
    params = ad.as_tensor(params, dtype=image.dtype)
    H, W = size if size is not None else image.shape[2:]
    M = ad.similarity_matrix(params, parts)
    grid = ad.transform_grid(generate_grid(H, W), M)
    return ad.bilinear_sample(image, grid)


def warp_labels(labels, matrices, size=None, fill=0):
    """Nearest-neighbour resampling of (N, H, W) integer labels with (N, 2, 3) matrices."""
    labels = np.asarray(labels)
    N, H, W = labels.shape
    Ho, Wo = size if size is not None else (H, W)
    grid = np.einsum("nij,jhw->nihw", matrices[:, :, :2], generate_grid(Ho, Wo))
    grid += matrices[:, :, 2][:, :, None, None]
    px, py = ad.grid_to_pixels(grid, H, W)
    return _kernels.nearest_labels(labels, px, py, fill)


def image_losses(image, pred, gt):
    """Half mean squared differences between images warped by predicted and
    ground-truth T, RT and SRT.  Only ``pred`` receives gradients.

    Returns a dict keyed ``L_It``, ``L_Itheta``, ``L_Is``.
    """
    image = np.asarray(image.data if isinstance(image, ad.Tensor) else image)
    if image.ndim != 4 or image.shape[1] != 1:
        raise ShapeError("image losses expect single-channel (N, 1, H, W) images")
    gt = np.asarray(gt, dtype=image.dtype)
    out = {}
    for key, parts in (("L_It", "T"), ("L_Itheta", "RT"), ("L_Is", "SRT")):
        target = trans(image, gt, parts).data
        out[key] = ad.scale(ad.mse_mean(trans(image, pred, parts), target), 0.5)
    return out


# ---------------------------------------------------------------------------
# Localization network
# ---------------------------------------------------------------------------

LOCNET_WIDTHS = (32, 32)


def init_locnet(store, prefix, in_channels, hidden=64, widths=LOCNET_WIDTHS, pooling="gap",
                bottleneck_size=8):
    cin = in_channels
    for i, w in enumerate(widths):
        store.conv(f"{prefix}.c{i}", cin, w)
        store.batchnorm(f"{prefix}.bn{i}", w)
        cin = w
    if pooling == "flatten":
        side = bottleneck_size // 2 ** len(widths)
        cin = cin * side * side
    store.dense(f"{prefix}.fc1", cin, hidden)
    store.dense(f"{prefix}.fc2", hidden, 4)


def locnet_forward(bottleneck, store, prefix, mode=None, pooling="gap"):
    """Two [conv-BN-ReLU-maxpool] blocks, pooling, FC-ReLU, FC -> (N, 4)."""
    x = bottleneck
    n_blocks = len([n for n in store.bn if n.startswith(f"{prefix}.bn")])
    if min(x.shape[2:]) < 2 ** n_blocks:
        raise ValueError(f"bottleneck {x.shape[2:]} too small for {n_blocks} pooling blocks")
    for i in range(n_blocks):
        x = conv_bn_relu(x, store, f"{prefix}.c{i}", f"{prefix}.bn{i}", mode)
        x = ad.maxpool2(x)
    x = ad.flatten(x) if pooling == "flatten" else ad.global_avg_pool(x)
    x = ad.relu(ad.fully_connected(x, store[f"{prefix}.fc1.w"], store[f"{prefix}.fc1.b"]))
    return ad.fully_connected(x, store[f"{prefix}.fc2.w"], store[f"{prefix}.fc2.b"])


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

def write_params_csv(path, rows):
    """rows: iterable of (sample_id, RigidParams)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", *PARAM_NAMES])
        for sid, p in rows:
            w.writerow([sid, *(f"{v:.17g}" for v in astuple(p))])


def read_params_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ("sample_id", *PARAM_NAMES):
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [(r["sample_id"], RigidParams(*(float(r[k]) for k in PARAM_NAMES)))
                for r in reader]
