"""Training over subject-wise fold combinations, with per-epoch logs,
checkpoints and resume."""

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, load_optimizer, save_checkpoint, save_optimizer
from .data import AugmentRanges, augment_batch, substream
from .evaluation import evaluate_prediction
from .nn import Adam, lr_at
from .omeganet import NetworkConfig, init_network, omega_forward, omega_loss, predict

LOG_LOSSES = ("L_SU", "L_tx", "L_ty", "L_theta", "L_s", "L_It", "L_Itheta", "L_Is",
              "L_SH_1", "L_SH_2", "L_SH_3", "L_total")
LOG_FIELDS = ("epoch", "lr") + LOG_LOSSES + ("val_wfiou_median",)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    seed: int = 42
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_period: int = 26
    weight_decay: float = 1e-4
    augment: AugmentRanges = field(default_factory=AugmentRanges)
    val_every: int = 1


@dataclass
class FoldResult:
    fold: int
    checkpoint: Path
    log: Path
    seconds: float


def _fmt(v):
    return "" if v is None else f"{v:.17g}" if isinstance(v, float) else str(v)


def _read_log(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))[1:]


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        w.writerows(rows)


def train_fold(dataset, train_idx, val_idx, net_cfg, train_cfg, out_dir, fold=0,
               resume=False, progress=None):
    """Train one network on ``train_idx`` and validate on ``val_idx``.

    Every epoch writes ``last.ckpt``/``last.adam`` and appends a log row;
    ``model.ckpt`` holds the final parameters.  Randomness for init,
    shuffling and augmentation comes from named substreams of the seed, so
    a resumed run continues exactly where an uninterrupted one would be.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    store = init_network(net_cfg, substream(train_cfg.seed, "init", fold))
    adam = Adam(store, weight_decay=train_cfg.weight_decay)
    rows = []
    start = 0
    meta = {"fold": fold, "variant": net_cfg.variant,
            "train_subjects": ",".join(sorted(set(dataset.subjects[train_idx])))}
    if resume and (out / "last.ckpt").exists() and log_path.exists():
        ck_meta = load_checkpoint(out / "last.ckpt", store)
        load_optimizer(out / "last.adam", adam)
        start = int(ck_meta["epoch"]) + 1
        rows = [r for r in _read_log(log_path) if int(r[0]) < start]
    t0 = time.perf_counter()
    train_idx = np.asarray(train_idx)
    bs = train_cfg.batch_size
    for epoch in range(start, train_cfg.epochs):
        lr = lr_at(epoch, train_cfg.lr, train_cfg.lr_decay, train_cfg.lr_period)
        order = train_idx[substream(train_cfg.seed, "shuffle", fold, epoch)
                          .permutation(len(train_idx))]
        aug_rng = substream(train_cfg.seed, "augmentation", fold, epoch)
        sums, n_seen = {}, 0
        for b, start_b in enumerate(range(0, len(order), bs)):
            idx = order[start_b:start_b + bs]
            if len(idx) < 2:  # batch statistics need two samples
                continue
            imgs, labs, params = augment_batch(dataset.images[idx, 0], dataset.labels[idx],
                                               dataset.params[idx], aug_rng, train_cfg.augment)
            store.zero_grad()
            try:
                with ad.Graph(training=True) as g:
                    trace = omega_forward(imgs[:, None], net_cfg, store, params, labs, "training")
                    total, parts = omega_loss(trace.losses, net_cfg)
                    g.backward(total)
                adam.step(lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"fold {fold} epoch {epoch} batch {b}: {exc}") from exc
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            n_seen += len(idx)
        val = None
        if len(val_idx) and ((epoch + 1) % train_cfg.val_every == 0
                             or epoch == train_cfg.epochs - 1):
            val = validate(dataset, val_idx, net_cfg, store)
        row = [str(epoch), _fmt(lr)] + [_fmt(sums[k] / n_seen) if k in sums else ""
                                       for k in LOG_LOSSES] + [_fmt(val)]
        rows.append(row)
        _write_log(log_path, rows)
        save_checkpoint(out / "last.ckpt", store, {**meta, "epoch": epoch})
        save_optimizer(out / "last.adam", adam, {"epoch": epoch})
        if progress:
            progress(fold, epoch, sums.get("L_total", 0.0) / max(n_seen, 1), val,
                     time.perf_counter() - t0)
    save_checkpoint(out / "model.ckpt", store, {**meta, "epoch": train_cfg.epochs - 1})
    return FoldResult(fold, out / "model.ckpt", log_path, time.perf_counter() - t0), store


def validate(dataset, idx, net_cfg, store):
    """Median weighted foreground IoU of the final U-Net on ``idx``."""
    pred = predict(dataset.images[idx], net_cfg, store)
    records, _ = evaluate_prediction(pred, dataset, idx, unet_indices=[net_cfg.depth])
    return float(np.median([r.wfiou for r in records])) if records else None
