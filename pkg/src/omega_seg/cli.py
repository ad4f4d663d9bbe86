"""Command-line entry point: generate, train, evaluate, predict, gradcheck."""

import argparse
import os
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

EXIT_USAGE = 2
EXIT_FAILED = 1


def _single_thread_env():
    # BLAS reductions are only reproducible bit-for-bit with one thread
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=["A", "B", "C", "D"])
    common.add_argument("--preset", help="dataset preset (desk or paper)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory (defaults to data_dir)")
    common.add_argument("--workers", type=int)
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--resume", action="store_true", help="continue an interrupted run")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
    p = argparse.ArgumentParser(prog="omega-seg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train one network per fold combination")
    sub.add_parser("evaluate", parents=[common], help="score checkpoints on held-out folds")
    pr = sub.add_parser("predict", parents=[common], help="run a checkpoint on a dataset")
    pr.add_argument("--checkpoint", help="checkpoint file (default: fold 0 of --run)")
    pr.add_argument("--run", help="training run directory")
    sub.add_parser("gradcheck", parents=[common], help="run the gradient-check suite")
    return p


def _resolve(args, base_path=None):
    from .config import parse_pairs, resolve
    overrides = {"seed": args.seed, "variant": args.variant, "preset": args.preset,
                 "workers": args.workers, "data_dir": args.data}
    env = os.environ.get("OMEGA_SEG_THREADS")
    if env:
        overrides["workers"] = int(env)
    overrides.update(parse_pairs(args.set, "--set"))
    base = None
    if base_path is not None and not args.config:
        base = resolve(base_path)
    cfg = resolve(args.config, overrides, base)
    lock = Path(cfg.data_dir) / "run.lock"
    if args.command != "generate" and cfg.image_size == 0 and lock.exists():
        # a dataset keeps the size it was generated at
        cfg = replace(cfg, image_size=resolve(lock).size)
    return cfg


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(msg):
    print(msg, flush=True)


def cmd_generate(args):
    from .config import write_lock
    from .data import partition_folds, write_dataset, write_folds
    cfg = _resolve(args)
    out = Path(args.out or cfg.data_dir)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
        for name in ("images", "labels"):
            shutil.rmtree(out / name, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows = write_dataset(out, cfg.seed, cfg.preset, cfg.size, cfg.workers)
    from .data import read_manifest
    counts = {}
    for r in read_manifest(out / "manifest.csv"):
        counts[r["subject_id"]] = counts.get(r["subject_id"], 0) + 1
    write_folds(out / "folds.csv", partition_folds(counts, cfg.folds, cfg.seed))
    write_lock(out, cfg, "generate")
    _log(f"wrote {rows} samples to {out} in {time.perf_counter() - t0:.1f}s")
    return 0


def _load_data(cfg):
    from .data import load_dataset, read_folds
    root = Path(cfg.data_dir)
    if not (root / "manifest.csv").exists():
        raise FileNotFoundError(f"no dataset at {root} (run 'generate' first)")
    if not (root / "folds.csv").exists():
        raise FileNotFoundError(f"no folds.csv in {root}")
    ds = load_dataset(root, cfg.size)
    folds = read_folds(root / "folds.csv")
    missing = sorted(set(ds.subjects) - set(folds))
    if missing:
        raise ValueError(f"subjects without a fold: {missing[:5]}")
    import numpy as np
    return ds, np.array([folds[s] for s in ds.subjects])


def cmd_train(args):
    import numpy as np
    from .config import write_lock
    from .training import train_fold
    cfg = _resolve(args)
    out = Path(args.out or "run")
    if not args.resume:
        _prepare_out(out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    ds, fold_of = _load_data(cfg)
    write_lock(out, cfg, "train")
    net, tc = cfg.network_config(), cfg.train_config()

    def progress(fold, epoch, loss, val, sec):
        v = "" if val is None else f" val_wfiou_median {val:.4f}"
        _log(f"fold {fold} epoch {epoch} loss {loss:.4f}{v} ({sec:.0f}s)")
    for h in cfg.fold_list():
        train_idx = np.where(fold_of != h)[0]
        val_idx = np.where(fold_of == h)[0]
        res, _ = train_fold(ds, train_idx, val_idx, net, tc, out / f"fold{h}", h,
                            resume=args.resume, progress=progress)
        _log(f"fold {h}: {res.checkpoint} ({res.seconds:.0f}s)")
    return 0


def _load_model(path, cfg):
    from .checkpoint import load_checkpoint
    from .omeganet import init_network
    from .data import substream
    store = init_network(cfg.network_config(), substream(cfg.seed, "init", 0))
    meta = load_checkpoint(path, store)
    if meta.get("variant", cfg.variant) != cfg.variant:
        raise ValueError(f"{path} holds variant {meta['variant']}, configuration says "
                         f"{cfg.variant}")
    return store, meta


def cmd_evaluate(args):
    import numpy as np
    from .config import write_lock
    from .evaluation import check_leakage, evaluate_prediction, write_report
    from .omeganet import predict
    run = Path(args.out or "run")
    cfg = _resolve(args, run / "run.lock" if (run / "run.lock").exists() else None)
    ds, fold_of = _load_data(cfg)
    net = cfg.network_config()
    eval_dir = run / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    write_lock(eval_dir, cfg, "evaluate")
    all_records, all_excluded = [], []
    for h in cfg.fold_list():
        ckpt = run / f"fold{h}" / "model.ckpt"
        if not ckpt.exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        store, meta = _load_model(ckpt, cfg)
        idx = np.where(fold_of == h)[0]
        check_leakage(meta.get("train_subjects", "").split(","), ds.subjects[idx])
        pred = predict(ds.images[idx], net, store)
        records, excluded = evaluate_prediction(pred, ds, idx)
        summary = write_report(eval_dir / f"fold{h}", records, net.depth, excluded, cfg.svg)
        _log(f"fold {h}: " + ", ".join(f"unet{u} wfIoU median {summary[f'unet{u}_wfiou_median']:.4f}"
                                       for u in range(net.depth + 1)))
        all_records += records
        all_excluded += excluded
    write_report(eval_dir / "pooled", all_records, net.depth, all_excluded, cfg.svg)
    return 0


def cmd_predict(args):
    import numpy as np
    from .data import write_pgm
    from .omeganet import predict
    from .transformer import RigidParams, write_params_csv
    run = Path(args.run or "run")
    cfg = _resolve(args, run / "run.lock" if (run / "run.lock").exists() else None)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "fold0" / "model.ckpt"
    from .data import load_dataset
    ds = load_dataset(Path(cfg.data_dir), cfg.size)
    net = cfg.network_config()
    store, _ = _load_model(ckpt, cfg)
    out = _prepare_out(args.out or "predictions", args.force)
    pred = predict(ds.images, net, store)
    if net.depth:
        write_params_csv(out / "params.csv", [(sid, RigidParams.from_array(p))
                                              for sid, p in zip(ds.sample_ids, pred.params)])
    for u, labels in enumerate(pred.labels):
        d = out / f"unet{u}"
        d.mkdir(exist_ok=True)
        for sid, lab in zip(ds.sample_ids, labels):
            write_pgm(d / f"{sid}.pgm", lab, 255)
    _log(f"wrote predictions for {len(ds)} images to {out}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_suite
    cfg = _resolve(args)
    t0 = time.perf_counter()
    results = run_suite(cfg.seed)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        _log(f"{status} {r.name:40s} max rel err {r.error:.2e} "
             f"({r.checked} probes, {r.rejected} rejected at kinks)")
    failed = [r for r in results if not r.passed]
    _log(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g} "
         f"in {time.perf_counter() - t0:.1f}s")
    return EXIT_FAILED if failed else 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    _single_thread_env()
    from .config import ConfigError
    from .evaluation import LeakageError
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, LeakageError, FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"omega-seg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, (ConfigError, FileExistsError)) else EXIT_FAILED
    except FloatingPointError as exc:
        print(f"omega-seg {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
