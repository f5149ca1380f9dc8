"""Command-line entry point: synth / train / eval / predict / gradcheck / ablate."""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

from . import data as D
from .config import ConfigError, RunConfig, load_config
from .gradcheck import run_family_checks
from .metrics import format_report, mean_scores
from .model import load_checkpoint, make_variant, param_count
from .train import evaluate_tiles, train_loop

VARIANTS = {
    "baseline": (False, False),
    "deepkan": (True, False),
    "glkan": (False, True),
    "full": (True, True),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="deepkanseg",
                description="Spline-KAN semantic segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic tile dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--tiles", type=int, default=8)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--test", type=int, default=None,
                   help="test tile count (default: one quarter)")

    t = sub.add_parser("train", help="train a model on a synthesized dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True, help="dataset directory (from synth)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None, help="override train.seed")
    t.add_argument("--variant", choices=sorted(VARIANTS), default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None, help="also write the report here")
    e.add_argument("--patch", type=int, default=None)
    e.add_argument("--stride", type=int, default=None)

    r = sub.add_parser("predict", help="write stitched prediction rasters")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--patch", type=int, default=None)
    r.add_argument("--stride", type=int, default=None)

    g = sub.add_parser("gradcheck", help="finite-difference checks per layer family")
    g.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="train and score all four architecture variants")
    a.add_argument("--config", default=None)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=None)
    return p


def _load_run_config(path: Optional[str], seed: Optional[int]) -> RunConfig:
    cfg = load_config(path) if path else RunConfig()
    if seed is not None:
        import dataclasses
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
    return cfg


def _load_split(data_dir: str, split: str):
    manifest = D.load_manifest(os.path.join(data_dir, "manifest.txt"))
    return manifest, D.load_tiles(data_dir, manifest, split)


def cmd_synth(args) -> int:
    tiles = D.synth_generate(args.seed, args.tiles, args.size)
    n_test = args.test if args.test is not None else max(1, args.tiles // 4)
    patch = min(256, args.size)
    D.write_dataset(args.out, tiles, n_test=n_test, seed=args.seed,
                    patch=patch, train_stride=patch, test_stride=patch)
    print(f"wrote {args.tiles} tiles ({n_test} test) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config, args.seed)
    manifest, train_tiles = _load_split(args.data, "train")
    _, test_tiles = _load_split(args.data, "test")
    patch = cfg.data.patch
    train_set = D.extract_patches(train_tiles, patch, cfg.data.train_stride)
    use_deepkan, use_glkan = VARIANTS[args.variant] if args.variant else (None, None)
    model = make_variant(cfg.model, use_deepkan, use_glkan, seed=cfg.train.seed)
    print(f"training on {len(train_set)} patches "
          f"({param_count(model)} parameters)")
    train_loop(model, train_set, cfg.train, out_dir=args.out,
               test_tiles=test_tiles, eval_patch=patch,
               eval_stride=cfg.data.test_stride, echo=print)
    return 0


def _evaluate(args):
    model, _ = load_checkpoint(args.checkpoint)
    manifest, tiles = _load_split(args.data, "test")
    patch = args.patch or manifest.patch
    stride = args.stride or manifest.test_stride
    return model, tiles, patch, stride


def cmd_eval(args) -> int:
    model, tiles, patch, stride = _evaluate(args)
    cm, _ = evaluate_tiles(model, tiles, patch, stride)
    report = format_report(cm)
    print(report)
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(report + "\n")
    return 0


def cmd_predict(args) -> int:
    model, tiles, patch, stride = _evaluate(args)
    manifest = D.load_manifest(os.path.join(args.data, "manifest.txt"))
    records = manifest.split_tiles("test")
    _, preds = evaluate_tiles(model, tiles, patch, stride)
    os.makedirs(args.out, exist_ok=True)
    for rec, pred in zip(records, preds):
        stem = os.path.splitext(os.path.basename(rec.image_path))[0]
        D.write_pgm(os.path.join(args.out, f"{stem}_pred.pgm"), pred)
        D.write_ppm(os.path.join(args.out, f"{stem}_pred.ppm"), D.colorize(pred))
    print(f"wrote {len(preds)} prediction rasters to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    failed = False
    for name, report, tol in run_family_checks(seed=args.seed):
        ok = report.passed(tol)
        failed |= not ok
        print(f"{name}: max_rel_err={report.max_rel_err:.3e} tol={tol:g} "
              f"skipped={report.n_skipped} {'PASS' if ok else 'FAIL'}")
    if failed:
        raise RuntimeError("gradient check failed for at least one family")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args.config, args.seed)
    manifest, train_tiles = _load_split(args.data, "train")
    _, test_tiles = _load_split(args.data, "test")
    patch = cfg.data.patch
    train_set = D.extract_patches(train_tiles, patch, cfg.data.train_stride)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for name in ("baseline", "deepkan", "glkan", "full"):
        use_deepkan, use_glkan = VARIANTS[name]
        model = make_variant(cfg.model, use_deepkan, use_glkan, seed=cfg.train.seed)
        run_dir = os.path.join(args.out, name)
        train_loop(model, train_set, cfg.train, out_dir=run_dir,
                   test_tiles=test_tiles, eval_patch=patch,
                   eval_stride=cfg.data.test_stride, echo=print)
        cm, _ = evaluate_tiles(model, test_tiles, patch, cfg.data.test_stride)
        mf1, miou = mean_scores(cm)
        rows.append((name, param_count(model), mf1, miou))
    lines = [f"{'variant':<10} {'params':>10} {'mF1':>8} {'mIoU':>8}"]
    for name, params, mf1, miou in rows:
        lines.append(f"{name:<10} {params:>10} {mf1:>8.4f} {miou:>8.4f}")
    order = sorted(rows, key=lambda r: r[3], reverse=True)
    lines.append("ranking by mIoU: " + " > ".join(r[0] for r in order))
    table = "\n".join(lines)
    print(table)
    with open(os.path.join(args.out, "ablation.txt"), "w", encoding="ascii") as fh:
        fh.write(table + "\n")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
