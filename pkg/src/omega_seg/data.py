"""Synthetic cardiac phantoms with exact poses, plus preprocessing,
augmentation, subject-wise folds and on-disk dataset I/O.

A phantom is an analytic scene of nested ellipses laid out in a canonical
frame.  The observed image at normalized point y shows the scene at
M^-1 y with M = compose_similarity(gt_params), so resampling the observed
image with M (``trans(image, M)``) returns the canonical pose.

Layout constants below are stand-ins for anatomy: they give each view a
distinct, rotation-asymmetric arrangement and carry no clinical meaning.
"""

import csv
import os
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .transformer import (
    RigidParams, compose_similarity, decompose_similarity, generate_grid, invert_similarity,
    warp_labels,
)
from . import autodiff as ad

CLASS_NAMES = ("background", "lv_myocardium", "lv_bloodpool", "rv_bloodpool", "la", "ra")
NUM_CLASSES = len(CLASS_NAMES)
VIEWS = ("SA", "HLA", "VLA")
VIEW_CLASSES = {"SA": (0, 1, 2, 3), "HLA": (0, 1, 2, 3, 4, 5), "VLA": (0, 1, 2, 4)}
SA_SLICES = ("basal", "mid", "apical")

PARAM_RANGES = {"t": 0.25, "theta": (-np.pi, np.pi), "s": (0.5, 1.0)}
IMAGE_RANGE = 2.0  # raw intensities are stored as round(v / IMAGE_RANGE * 65535)

# ellipse: (cx, cy, rx, ry, angle)
_LAYOUT = {
    "SA": {"lv": (0.14, 0.0, 0.41, 0.41, 0.0), "wall": 0.14,
           "rv": (-0.32, 0.02, 0.23, 0.41, 0.2)},
    "HLA": {"lv": (0.12, -0.12, 0.26, 0.42, -0.25), "wall": 0.11,
            "rv": (-0.26, -0.08, 0.17, 0.36, -0.25),
            "la": (0.20, 0.42, 0.20, 0.16, 0.0),
            "ra": (-0.22, 0.44, 0.18, 0.16, 0.0)},
    "VLA": {"lv": (0.0, -0.12, 0.27, 0.44, 0.1), "wall": 0.12,
            "la": (0.02, 0.45, 0.22, 0.16, 0.0)},
}
_SLICE_SCALE = {"basal": (1.1, 1.0), "mid": (1.0, 0.9), "apical": (0.75, 0.6)}
_INTENSITY = {"outside": 0.05, "body": 0.25, "myo": 0.42, "lv": 0.95, "rv": 0.85,
              "la": 0.8, "ra": 0.75, "spine": 0.75}


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    gt_params: RigidParams
    view: str
    subject_id: str
    frame_id: int

    @property
    def sample_id(self):
        return f"{self.subject_id}_{self.view}_{self.frame_id:03d}"


@dataclass(frozen=True)
class AugmentRanges:
    """Translation as a fraction of the image width, rotation in degrees,
    scale as a symmetric relative range around 1."""
    translation: float = 0.15
    rotation_deg: float = 15.0
    scale: float = 0.15


def substream(seed, *names):
    """Independent generator keyed by a root seed and names/indices."""
    key = [int(seed)]
    for n in names:
        key.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n))
    return np.random.default_rng(key)


# ---------------------------------------------------------------------------
# Phantom rendering
# ---------------------------------------------------------------------------

def _inside(x, y, e):
    cx, cy, rx, ry, a = e
    c, s = np.cos(a), np.sin(a)
    u = (x - cx) * c + (y - cy) * s
    v = -(x - cx) * s + (y - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _scale_ellipse(e, k):
    cx, cy, rx, ry, a = e
    return (cx, cy, rx * k, ry * k, a)


class Scene:
    """Canonical-frame scene of one subject, view (and SA slice) and frame."""

    def __init__(self, subject_seed, view, slice_name="mid", frame=0, n_frames=8):
        if view not in VIEWS:
            raise ValueError(f"unknown view {view!r}; expected one of {VIEWS}")
        rng = substream(subject_seed, "anatomy")
        heart = rng.uniform(0.92, 1.08)
        self.shapes = {}
        layout = _LAYOUT[view]
        lv_k, rv_k = _SLICE_SCALE[slice_name] if view == "SA" else (1.0, 1.0)
        for name in ("lv", "rv", "la", "ra"):
            e = substream(subject_seed, "shape", name).uniform(size=5)
            if name not in layout:
                continue
            cx, cy, rx, ry, a = layout[name]
            k = heart * (lv_k if name == "lv" else rv_k if name == "rv" else 1.0)
            self.shapes[name] = (cx * heart + 0.06 * (e[0] - 0.5), cy * heart + 0.06 * (e[1] - 0.5),
                                 rx * k * (0.92 + 0.16 * e[2]), ry * k * (0.92 + 0.16 * e[3]),
                                 a + 0.2 * (e[4] - 0.5))
        contraction = 0.5 * (1.0 - np.cos(2 * np.pi * frame / n_frames))
        wall = layout["wall"] * heart * rng.uniform(0.85, 1.15) * (1.0 + 0.3 * contraction)
        outer = self.shapes["lv"]
        inner_k = max(0.2, 1.0 - wall / min(outer[2], outer[3]))
        self.lv_inner = _scale_ellipse(outer, inner_k * (1.0 - 0.1 * contraction))
        self.spine = (rng.uniform(0.5, 0.6), rng.uniform(0.5, 0.6), 0.1, 0.1, 0.0)
        self.body = (0.0, 0.05, 1.35, 1.2, rng.uniform(-0.1, 0.1))
        self.intensity = {k: v + rng.uniform(-0.04, 0.04) for k, v in _INTENSITY.items()}
        # texture: a few random plane waves; illumination: one slow wave
        self.tex_k = rng.uniform(6.0, 16.0, size=6) * np.exp(1j * rng.uniform(0, 2 * np.pi, 6))
        self.tex_phase = rng.uniform(0, 2 * np.pi, 6)
        self.illum_k = rng.uniform(0.8, 1.6) * np.exp(1j * rng.uniform(0, 2 * np.pi))
        self.illum_phase = rng.uniform(0, 2 * np.pi)

    def labels(self, x, y):
        lab = np.zeros(x.shape, dtype=np.uint8)
        for name, cls in (("la", 4), ("ra", 5), ("rv", 3)):
            if name in self.shapes:
                lab[_inside(x, y, self.shapes[name])] = cls
        lab[_inside(x, y, self.shapes["lv"])] = 1
        lab[_inside(x, y, self.lv_inner)] = 2
        return lab

    def intensity_at(self, x, y, labels=None):
        it = self.intensity
        if labels is None:
            labels = self.labels(x, y)
        img = np.full(x.shape, it["outside"])
        img[_inside(x, y, self.body)] = it["body"]
        img[_inside(x, y, self.spine)] = it["spine"]
        for cls, key in ((1, "myo"), (2, "lv"), (3, "rv"), (4, "la"), (5, "ra")):
            img[labels == cls] = it[key]
        tex = np.zeros(x.shape)
        for k, ph in zip(self.tex_k, self.tex_phase):
            tex += np.cos(k.real * x + k.imag * y + ph)
        img = img + 0.02 * tex
        illum = 1.0 + 0.25 * np.cos(self.illum_k.real * x + self.illum_k.imag * y + self.illum_phase)
        return img * illum


def check_param_ranges(p):
    t = PARAM_RANGES["t"]
    lo, hi = PARAM_RANGES["theta"]
    slo, shi = PARAM_RANGES["s"]
    if not (abs(p.t_x) <= t and abs(p.t_y) <= t and lo <= p.theta < hi and slo <= p.s <= shi):
        raise ValueError(f"phantom params out of range: {p}")


def draw_params(rng):
    t = PARAM_RANGES["t"]
    return RigidParams(rng.uniform(-t, t), rng.uniform(-t, t),
                       rng.uniform(*PARAM_RANGES["theta"]), rng.uniform(*PARAM_RANGES["s"]))


def render_canonical(subject_seed, view, size=64, slice_name="mid", frame=0):
    """The canonical scene sampled on the size x size grid (no noise)."""
    g = generate_grid(size, size)
    scene = Scene(subject_seed, view, slice_name, frame)
    lab = scene.labels(g[0], g[1])
    return scene.intensity_at(g[0], g[1], lab), lab


def generate_phantom(subject_seed, view, params, size=64, slice_name="mid", frame=0,
                     noise=0.02, subject_id=None, frame_id=0):
    """Render one observed sample with pose ``params``.

    Intensities and labels are evaluated analytically at M^-1 y for every
    pixel centre y; ``noise`` adds per-pixel Gaussian noise seeded by
    (subject_seed, view, slice, frame).
    """
    if not isinstance(params, RigidParams):
        params = RigidParams.from_array(params)
    check_param_ranges(params)
    scene = Scene(subject_seed, view, slice_name, frame)
    g = generate_grid(size, size)
    Minv = invert_similarity(compose_similarity(params))
    x = Minv[0, 0] * g[0] + Minv[0, 1] * g[1] + Minv[0, 2]
    y = Minv[1, 0] * g[0] + Minv[1, 1] * g[1] + Minv[1, 2]
    labels = scene.labels(x, y)
    image = scene.intensity_at(x, y, labels)
    if noise:
        image = image + noise * substream(subject_seed, "noise", view, slice_name, frame) \
            .standard_normal(image.shape)
    return Sample(image, labels, params, view,
                  subject_id if subject_id is not None else f"subj{subject_seed}", frame_id)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def crop_or_pad(image, size):
    """Centre-crop or symmetrically zero-pad each axis to ``size``."""
    out = np.asarray(image, dtype=np.float64)
    for axis in (0, 1):
        n = out.shape[axis]
        if n > size:
            start = (n - size) // 2
            out = np.take(out, np.arange(start, start + size), axis=axis)
        elif n < size:
            before = (size - n) // 2
            pad = [(0, 0), (0, 0)]
            pad[axis] = (before, size - n - before)
            out = np.pad(out, pad)
    return out


def illumination_correct(image, sigma=None):
    """Divide by a Gaussian-blurred copy of the image (sigma = width / 8)."""
    sigma = image.shape[1] / 8.0 if sigma is None else sigma
    field = np.maximum(gaussian_filter(image, sigma, mode="reflect"), 1e-3)
    return image / field


def equalize_histogram(image, bins=256):
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros_like(image)
    hist, edges = np.histogram(image, bins=bins, range=(lo, hi))
    cdf = np.cumsum(hist) / image.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    return np.interp(image, centers, cdf)


def standardize(image):
    """Zero mean, unit standard deviation; (zeros, True) for a constant image."""
    std = image.std()
    if std < 1e-12:
        return np.zeros_like(image), True
    out = (image - image.mean()) / std
    # second pass removes the residual rounding in the mean/std
    out = out - out.mean()
    return out / out.std(), False


def preprocess(raw, size=64, return_flag=False):
    """Crop/pad, illumination correction, histogram equalization, standardization."""
    img = crop_or_pad(raw, size)
    img = illumination_correct(img)
    img = equalize_histogram(img)
    img, degenerate = standardize(img)
    return (img, degenerate) if return_flag else img


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment(sample, rng, ranges=AugmentRanges()):
    """Warp by a random similarity A and re-derive the pose as A^-1 M_hat.

    The image is resampled bilinearly, labels by nearest neighbour.
    """
    t = ranges.translation * 2.0  # fraction of the [-1, 1] width
    d = RigidParams(rng.uniform(-t, t) if t else 0.0,
                    rng.uniform(-t, t) if t else 0.0,
                    np.deg2rad(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg))
                    if ranges.rotation_deg else 0.0,
                    1.0 + rng.uniform(-ranges.scale, ranges.scale) if ranges.scale else 1.0)
    if d == RigidParams():
        return replace(sample)
    A = compose_similarity(d)
    image, labels = warp_sample(sample.image, sample.labels, A)
    gt = decompose_similarity(invert_similarity(A) @ compose_similarity(sample.gt_params))
    return replace(sample, image=image, labels=labels, gt_params=gt)


def warp_sample(image, labels, A):
    """Resample an (H, W) image bilinearly and labels by nearest neighbour at A-mapped points."""
    H, W = image.shape
    grid = np.einsum("ij,jhw->ihw", A[:2, :2], generate_grid(H, W)) + A[:2, 2][:, None, None]
    img = ad.bilinear_sample(ad.Tensor(np.asarray(image, dtype=np.float64)[None, None]),
                             ad.Tensor(grid[None])).data[0, 0]
    lab = warp_labels(labels[None], A[None, :2], (H, W))[0]
    return img.astype(image.dtype), lab


def augment_batch(images, labels, params, rng, ranges):
    """Independent augmentation draw for every item of an (N, H, W) batch."""
    out_i = np.empty_like(images)
    out_l = np.empty_like(labels)
    out_p = np.empty_like(params)
    for i in range(len(images)):
        s = augment(Sample(images[i], labels[i], RigidParams.from_array(params[i]), "", "", 0),
                    rng, ranges)
        out_i[i], out_l[i], out_p[i] = s.image, s.labels, s.gt_params.as_array()
    return out_i, out_l, out_p


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------

def partition_folds(counts, k=3, seed=0):
    """Greedy largest-first packing of subjects into ``k`` folds by image count.

    ``counts`` maps subject id -> number of images (insertion order matters
    only through the seeded tie-break).  Returns {subject_id: fold}.
    """
    if k < 2:
        raise ValueError("need at least two folds")
    subjects = list(counts)
    if len(subjects) < k:
        raise ValueError(f"{len(subjects)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    shuffled.sort(key=lambda s: -counts[s])  # stable: ties keep the seeded order
    totals = [0] * k
    assignment = {}
    for s in shuffled:
        f = min(range(k), key=lambda i: (totals[i], i))
        assignment[s] = f
        totals[f] += counts[s]
    return assignment


# ---------------------------------------------------------------------------
# Dataset presets and I/O
# ---------------------------------------------------------------------------

PRESETS = {
    "desk": {"subjects": 20, "frames": 8, "image_size": 64},
    "paper": {"subjects": 63, "frames": 20, "image_size": 256},
    "tiny": {"subjects": 6, "frames": 2, "image_size": 32},
}

MANIFEST_FIELDS = ("subject_id", "view", "frame_id", "image_path", "label_path",
                   "t_x", "t_y", "theta", "s")


def view_slots():
    """(view, slice) for the five series per subject: three SA, one HLA, one VLA."""
    return [("SA", s) for s in SA_SLICES] + [("HLA", "mid"), ("VLA", "mid")]


def sample_specs(seed, subjects, frames, size):
    """Arguments of :func:`generate_phantom` for every sample, in manifest order."""
    specs = []
    for subj in range(subjects):
        subject_seed = int(substream(seed, "subject", subj).integers(2 ** 31))
        sid = f"S{subj:03d}"
        seen = {}
        for slot, (view, slice_name) in enumerate(view_slots()):
            per_view = seen.get(view, 0)
            seen[view] = per_view + 1
            for f in range(frames):
                params = draw_params(substream(seed, "pose", subj, slot, f))
                specs.append((subject_seed, view, params, size, slice_name, f, sid,
                              per_view * frames + f))
    return specs


def _render_spec(spec):
    subject_seed, view, params, size, slice_name, f, sid, frame_id = spec
    return generate_phantom(subject_seed, view, params, size, slice_name, f,
                            subject_id=sid, frame_id=frame_id)


def iter_dataset(seed, subjects, frames, size, workers=1):
    """Yield every sample of a preset in deterministic order.

    Each sample is seeded from its own indices, so a worker pool yields the
    same samples as a serial loop.
    """
    specs = sample_specs(seed, subjects, frames, size)
    if workers <= 1:
        yield from map(_render_spec, specs)
        return
    from multiprocessing import Pool
    with Pool(workers) as pool:
        yield from pool.imap(_render_spec, specs, chunksize=16)


def write_pgm(path, array, maxval):
    array = np.asarray(array)
    dtype = ">u2" if maxval > 255 else "u1"
    H, W = array.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n{maxval}\n".encode("ascii"))
        fh.write(array.astype(dtype).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    W, H, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data, dtype=dtype, count=W * H, offset=pos).reshape(H, W)


def encode_image(image):
    return np.clip(np.rint(np.asarray(image) / IMAGE_RANGE * 65535), 0, 65535).astype(np.uint16)


def decode_image(q):
    return q.astype(np.float64) / 65535 * IMAGE_RANGE


def write_dataset(out_dir, seed, preset="desk", size=None, workers=1):
    """Generate a preset to ``out_dir`` (PGM files + manifest.csv); returns the row count."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; valid presets: {', '.join(PRESETS)}")
    cfg = PRESETS[preset]
    size = size or cfg["image_size"]
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rows = 0
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for s in iter_dataset(seed, cfg["subjects"], cfg["frames"], size, workers):
            name = f"{s.sample_id}.pgm"
            write_pgm(out / "images" / name, encode_image(s.image), 65535)
            write_pgm(out / "labels" / name, s.labels, 255)
            p = s.gt_params
            w.writerow([s.subject_id, s.view, s.frame_id, f"images/{name}", f"labels/{name}",
                        *(f"{v:.17g}" for v in (p.t_x, p.t_y, p.theta, p.s))])
            rows += 1
    return rows


@dataclass
class Dataset:
    """Preprocessed arrays for a whole manifest."""
    images: np.ndarray      # (N, 1, H, W) float32, preprocessed
    labels: np.ndarray      # (N, H, W) uint8
    params: np.ndarray      # (N, 4) float64
    subjects: np.ndarray    # (N,) str
    views: np.ndarray       # (N,) str
    sample_ids: list

    def __len__(self):
        return len(self.sample_ids)

    def subject_counts(self):
        counts = {}
        for s in self.subjects:
            counts[s] = counts.get(s, 0) + 1
        return counts


def read_manifest(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        return list(reader)


def load_dataset(root, size=64):
    """Read a dataset directory written by :func:`write_dataset` (or any
    directory with a conforming manifest) and preprocess every image."""
    root = Path(root)
    rows = read_manifest(root / "manifest.csv")
    images, labels, params, subjects, views, ids = [], [], [], [], [], []
    for r in rows:
        raw = decode_image(read_pgm(root / r["image_path"]))
        images.append(preprocess(raw, size))
        labels.append(crop_or_pad(read_pgm(root / r["label_path"]), size).astype(np.uint8))
        params.append([float(r[k]) for k in ("t_x", "t_y", "theta", "s")])
        subjects.append(r["subject_id"])
        views.append(r["view"])
        ids.append(f"{r['subject_id']}_{r['view']}_{int(r['frame_id']):03d}")
    return Dataset(np.asarray(images, dtype=np.float32)[:, None], np.asarray(labels),
                   np.asarray(params), np.asarray(subjects), np.asarray(views), ids)


def write_folds(path, assignment):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "fold"])
        for s, f in assignment.items():
            w.writerow([s, f])


def read_folds(path):
    with open(path, newline="") as fh:
        return {r["subject_id"]: int(r["fold"]) for r in csv.DictReader(fh)}


def dataset_is_empty(path):
    return not os.path.exists(path) or not any(Path(path).iterdir())
