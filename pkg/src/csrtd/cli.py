"""Command-line entry point: ``csrtd {generate,train,eval,infer,baseline,gradcheck,shapes}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import data as D
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .config import PRESETS, ModelConfig, preset
from .metrics import evaluate_masks, pixel_difference_baseline, tune_threshold
from .model import RTDModel, count_params, expected_shapes
from .tensor import Tensor

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("csrtd")


class UsageError(Exception):
    """Bad flag combination detected after argparse succeeded."""


def print_config(command: str, values: Dict[str, object]) -> None:
    print(f"[config] {command}")
    for k, v in values.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        print(f"{k}={v}")
    print("[/config]", flush=True)


def _model_config(name: str, ablation: str) -> ModelConfig:
    return preset(name, ablation=ablation)


def _thread_limit():
    raw = os.environ.get("CSRTD_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CSRTD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"CSRTD_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_generate(args) -> int:
    for split in D.SPLITS:
        if getattr(args, split) < 1:
            raise UsageError(f"--{split} must be >= 1 (empty splits are not allowed)")
    spec = D.SplitSpec(args.train, args.val, args.test, args.seed)
    print_config("generate", {"out": args.out, "size": args.size, **spec.counts(), "seed": args.seed})
    manifest = D.build_dataset(spec, args.size, args.out)
    counts = {s: sum(1 for split, _ in manifest if split == s) for s in D.SPLITS}
    print(f"wrote {len(manifest)} samples to {args.out} ({', '.join(f'{k}={v}' for k, v in counts.items())})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, train

    cfg = _model_config(args.config, args.ablation)
    tcfg = TrainConfig(seed=args.seed, model=cfg, max_epochs=args.max_epochs, batch_size=args.batch_size)
    print_config(
        "train",
        {
            "data": args.data,
            "out": args.out,
            **cfg.to_dict(),
            "lr": tcfg.lr,
            "betas": tcfg.betas,
            "batch_size": tcfg.batch_size,
            "patience": tcfg.patience,
            "max_epochs": tcfg.max_epochs,
            "seed": tcfg.seed,
        },
    )
    if args.dry_run:
        model = RTDModel(cfg, seed=args.seed)
        _check_trace(model, cfg, quiet=True)
        print(f"params={count_params(model)}")
        return EXIT_OK
    if args.data is None or args.out is None:
        raise UsageError("--data and --out are required unless --dry-run is given")
    train_data = D.load_split(args.data, "train")
    val_data = D.load_split(args.data, "val")
    if train_data.goals.shape[1] != cfg.image_size:
        raise UsageError(f"dataset images are {train_data.goals.shape[1]}px but config expects {cfg.image_size}px")
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    start = time.time()
    res = train(
        tcfg,
        train_data,
        val_data,
        log_path=log_path,
        ckpt_path=args.out,
        progress=lambda r: print(f"{r.line()} elapsed={time.time() - start:.0f}s", flush=True),
    )
    print(
        f"best_epoch={res.best.epoch} best_val_loss={res.best.best_val_loss:.6f} "
        f"initial_train_loss={res.initial_train_loss:.6f} final_train_loss={res.final_train_loss:.6f} "
        f"stopped_early={res.stopped_early}"
    )
    print(f"checkpoint={args.out} log={log_path}")
    if args.figures:
        from .plotting import plot_training_curve

        path = plot_training_curve(log_path.read_text(), Path(args.figures) / "training_curve.png")
        print(f"figure={path}")
    return EXIT_OK


def _load_model(path) -> RTDModel:
    from .train import model_from_checkpoint

    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return model_from_checkpoint(load_checkpoint(path))


def cmd_eval(args) -> int:
    from .train import predict

    if (args.ckpt is None) == (args.predictions is None):
        raise UsageError("give exactly one of --ckpt or --predictions")
    print_config("eval", {"data": args.data, "split": args.split, "ckpt": args.ckpt, "predictions": args.predictions})
    split = D.load_split(args.data, args.split)
    if args.ckpt is not None:
        model = _load_model(args.ckpt)
        if model.cfg.image_size != split.goals.shape[1]:
            raise CheckpointError(
                f"checkpoint expects {model.cfg.image_size}px images, split has {split.goals.shape[1]}px"
            )
        preds = predict(model, split.goals, split.currents)
    else:
        preds = [D.load_mask(Path(args.predictions) / f"{i}_mask.pgm") for i in split.ids]
    report = evaluate_masks(preds, list(split.masks))
    sys.stdout.write(report.render(f"eval {args.split}"))
    if args.figures:
        from .plotting import plot_mask_grid

        path = plot_mask_grid(split.goals, split.currents, split.masks, preds, Path(args.figures) / f"{args.split}_masks.png")
        print(f"figure={path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    print_config("infer", {"goal": args.goal, "cur": args.cur, "ckpt": args.ckpt, "out": args.out})
    goal, cur = D.load_image(args.goal), D.load_image(args.cur)
    if goal.shape != cur.shape:
        raise ValueError(f"goal {goal.shape} and current {cur.shape} images differ in size")
    model = _load_model(args.ckpt)
    s = model.cfg.image_size
    if goal.shape[:2] != (s, s):
        raise CheckpointError(f"checkpoint expects {s}×{s} images, got {goal.shape[0]}×{goal.shape[1]}")
    mask = model.predict(goal, cur)
    D.save_mask(mask, args.out)
    print(f"wrote {args.out} changed_fraction={float(mask.mean()):.6f}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    print_config("baseline", {"data": args.data, "split": args.split, "theta": args.theta})
    split = D.load_split(args.data, args.split)
    theta = args.theta
    if theta is None:
        val = D.load_split(args.data, "val")
        theta = tune_threshold(val.goals, val.currents, val.masks)
        print(f"theta={theta} (tuned on val)")
    preds = [pixel_difference_baseline(g, c, theta) for g, c in zip(split.goals, split.currents)]
    report = evaluate_masks(preds, list(split.masks))
    sys.stdout.write(report.render(f"pixel-difference baseline {args.split} theta={theta}"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    print_config("gradcheck", {"seed": args.seed, "n_seeds": args.n_seeds})
    ok = run_suite(args.seed, args.n_seeds, log=lambda line: print(line, flush=True))
    print("gradcheck PASSED" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


def _check_trace(model: RTDModel, cfg: ModelConfig, quiet: bool = False) -> List[str]:
    s = cfg.image_size
    trace: Dict[str, tuple] = {}
    with T.no_grad():
        x = Tensor(np.zeros((1, 3, s, s)))
        model(x, x, trace=trace)
    expected = expected_shapes(cfg)
    bad = []
    for key in list(expected) + [k for k in trace if k not in expected]:
        got, want = trace.get(key), expected.get(key)
        ok = got == want
        if not ok:
            bad.append(key)
        if not quiet:
            print(f"{'ok  ' if ok else 'FAIL'} {key:<9} {got} expected {want}")
    return bad


def cmd_shapes(args) -> int:
    cfg = _model_config(args.config, args.ablation)
    print_config("shapes", cfg.to_dict())
    model = RTDModel(cfg, seed=0)
    bad = _check_trace(model, cfg)
    print(f"params={count_params(model)}")
    if bad:
        print(f"shape audit FAILED: {', '.join(sorted(bad))}")
        return EXIT_RUNTIME
    print("shape audit PASSED")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csrtd", description="Rearrangement target detection from goal/current image pairs.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)
    configs = sorted(PRESETS)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--train", type=int, default=500)
    g.add_argument("--val", type=int, default=100)
    g.add_argument("--test", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and keep the best-validation checkpoint")
    t.add_argument("--data", type=Path)
    t.add_argument("--out", type=Path, help="checkpoint path")
    t.add_argument("--config", choices=configs, default="desk")
    t.add_argument("--ablation", choices=("ii", "iii", "iv"), default="iv")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--max-epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--log", type=Path, help="training log path (default: <out>.log)")
    t.add_argument("--figures", type=Path, help="directory for the training-curve figure")
    t.add_argument("--dry-run", action="store_true", help="build the model, audit shapes, print the param count")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or saved masks) on a split")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", choices=D.SPLITS, default="test")
    e.add_argument("--ckpt", type=Path)
    e.add_argument("--predictions", type=Path, help="directory of <id>_mask.pgm files to score instead of a model")
    e.add_argument("--figures", type=Path, help="directory for the qualitative mask grid")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict a change mask for one image pair")
    i.add_argument("--goal", required=True, type=Path)
    i.add_argument("--cur", required=True, type=Path)
    i.add_argument("--ckpt", required=True, type=Path)
    i.add_argument("--out", required=True, type=Path, help="output PGM mask")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("baseline", help="pixel-difference baseline on a split")
    b.add_argument("--data", required=True, type=Path)
    b.add_argument("--split", choices=D.SPLITS, default="test")
    b.add_argument("--theta", type=float, help="distance threshold (default: tuned on val)")
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-seeds", type=int, default=50)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("shapes", help="audit every intermediate shape against the schedule")
    s.add_argument("--config", choices=configs, default="desk")
    s.add_argument("--ablation", choices=("ii", "iii", "iv"), default="iv")
    s.set_defaults(func=cmd_shapes)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, CheckpointError) as exc:
        print(f"{parser.prog} {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
