"""``t2c``: render, gen-data, train, eval, ablate, verify.

Exit codes: 0 success, 1 internal failure, 2 user or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from trajcap.captioner import (
    FREEZE_PRESETS, CaptionError, CaptionModel, TrainingError, build_vocab, load_model, train,
)
from trajcap.config import ConfigError, RunConfig, resolve_config
from trajcap.dataset import ManifestError, SceneError, generate_corpus, load_frames, load_manifest
from trajcap.encoders import FUSIONS, QUERY_SOURCES, FusionError
from trajcap.geometry import CameraModel, GeometryError, load_calibration, load_plan
from trajcap.metrics import (
    EVAL_KEYS, EchoOracle, EmptyPredictor, EvalTable, action_accuracy, evaluate, score_captions,
    write_eval,
)
from trajcap.nn import CheckpointError
from trajcap.raster import RasterError, overlay, read_ppm, render_trajectory_image, write_ppm

log = logging.getLogger("trajcap")

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2
USER_ERRORS = (ConfigError, ManifestError, SceneError, GeometryError, RasterError, FusionError,
               CaptionError, CheckpointError, OSError)

MANIFEST = "manifest.jsonl"
AMBIGUOUS = "ambiguous_eval.jsonl"
CALIB = "calib.json"
EVAL_SPLITS = ("train", "val", "test", "ambiguous")


class UsageError(Exception):
    pass


def default_out() -> Path:
    return Path("runs") / time.strftime("%Y%m%d-%H%M%S")


def out_dir(args, cfg: Optional[RunConfig] = None) -> Path:
    path = args.out or (cfg.out_dir if cfg is not None else None) or default_out()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- data helpers ---------------------------------------------------------------------------

def data_root(path) -> Path:
    if path is None:
        raise UsageError("no data directory: pass --data or set data_dir in the config")
    root = Path(path)
    for name in (MANIFEST, CALIB):
        if not (root / name).is_file():
            raise UsageError(f"{root} is not a gen-data output: missing {name}")
    return root


def split_frames(root: Path, split: str, cam: CameraModel):
    if split == "ambiguous":
        if not (root / AMBIGUOUS).is_file():
            raise UsageError(f"{root} has no {AMBIGUOUS}")
        samples = load_manifest(root / AMBIGUOUS)
    else:
        samples = [s for s in load_manifest(root / MANIFEST) if s.split == split]
    if not samples:
        raise UsageError(f"split {split!r} in {root} is empty")
    return load_frames(samples, cam)


def train_model(cfg: RunConfig, root: Path, out: Optional[Path]) -> CaptionModel:
    cam = load_calibration(root / CALIB)
    tr = split_frames(root, "train", cam)
    va = split_frames(root, "val", cam)
    model = CaptionModel(cfg.model_config(), build_vocab(tr.captions), cam, seed=cfg.seed)
    log.info("training %s (query=%s) on %d samples, %d val", cfg.fusion, model.cfg.xattn_query,
             len(tr), len(va))
    tlog = train(model, tr, va, cfg.train_config(), out_dir=out)
    log.info("best epoch %d, val loss %.4f", tlog.best_epoch, tlog.best_val)
    return model


def format_table(rows: dict[str, EvalTable], label: str = "method") -> str:
    head = f"{label:<12}" + "".join(f"{k:>11}" for k in EVAL_KEYS)
    lines = [head]
    for name, tab in rows.items():
        lines.append(f"{name:<12}" + "".join(f"{v:>11.4f}" for v in tab.row()))
    return "\n".join(lines)


# --- commands -------------------------------------------------------------------------------

def cmd_render(args) -> int:
    plan = load_plan(args.plan)
    cam = load_calibration(args.calib)
    img = render_trajectory_image(plan, cam)
    cam_img = read_ppm(args.overlay) if args.overlay else None
    merged = overlay(cam_img, img) if cam_img is not None else None
    out = out_dir(args)
    write_ppm(img, out / "trajectory.ppm")
    print(f"trajectory.ppm {img.width}x{img.height} sha256={img.digest()}")
    if merged is not None:
        write_ppm(merged, out / "overlaid.ppm")
        print(f"overlaid.ppm {merged.width}x{merged.height} sha256={merged.digest()}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.n_standard < 0 or args.n_pairs < 0 or args.n_eval_pairs < 0:
        raise UsageError("counts must be non-negative")
    cfg = resolve_config(args.config, {"seed": args.seed})
    out = out_dir(args, cfg)
    res = generate_corpus(out, seed=cfg.seed, n_standard=args.n_standard, n_pairs=args.n_pairs,
                          n_eval_pairs=args.n_eval_pairs)
    n_amb = len(res.get("ambiguous", []))
    print(f"wrote {len(res['manifest'])} samples to {out / MANIFEST}"
          + (f" and {n_amb} to {out / AMBIGUOUS}" if n_amb else ""))
    return EXIT_OK


def run_overrides(args) -> dict:
    return {"fusion": getattr(args, "fusion", None), "xattn_query": getattr(args, "xattn_query", None),
            "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
            "freeze": args.freeze, "seed": args.seed, "data_dir": args.data}


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, run_overrides(args))
    root = data_root(cfg.data_dir)
    out = out_dir(args, cfg)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    train_model(cfg, root, out)
    print(f"checkpoint written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.oracle is None and args.checkpoint is None:
        raise UsageError("eval needs --checkpoint (or --oracle echo|empty)")
    root = data_root(args.data)
    if args.oracle is not None:
        model = EchoOracle() if args.oracle == "echo" else EmptyPredictor()
        cam = load_calibration(root / CALIB)
    else:
        model = load_model(args.checkpoint)
        cam = model.camera
    frames = split_frames(root, args.split, cam)
    out = out_dir(args)
    table = evaluate(model, frames, out)
    print(format_table({args.split: table}, "split"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = resolve_config(args.config, run_overrides(args))
    root = data_root(base.data_dir)
    out = out_dir(args, base)
    cam = load_calibration(root / CALIB)
    test = split_frames(root, "test", cam)
    amb = split_frames(root, "ambiguous", cam) if (root / AMBIGUOUS).is_file() else None
    rows, amb_rows, report = {}, {}, {"test": {}, "ambiguous": {}}
    for query in QUERY_SOURCES:
        cfg = replace(base, fusion="xattn", xattn_query=query)
        model = train_model(cfg, root, out / f"query-{query}")
        rows[query] = evaluate(model, test, out / f"query-{query}" / "eval-test")
        report["test"][query] = rows[query].as_dict()
        if amb is not None:
            preds = model.predict(amb)
            table, per_sample = score_captions(preds, amb.captions)
            write_eval(out / f"query-{query}" / "eval-ambiguous", table, amb.ids, preds, amb.captions,
                       per_sample)
            amb_rows[query] = table
            report["ambiguous"][query] = dict(table.as_dict(),
                                              action_accuracy=action_accuracy(preds, amb.captions))
    (out / "ablation.json").write_text(json.dumps(report, indent=1) + "\n")
    print("cross-attention query source, standard test split")
    print(format_table(rows, "query"))
    if amb_rows:
        print("\nambiguous pairs")
        print(format_table(amb_rows, "query"))
        print("action accuracy: " + ", ".join(
            f"{q} {report['ambiguous'][q]['action_accuracy']:.3f}" for q in amb_rows))
    return EXIT_OK


def cmd_verify(args) -> int:
    from trajcap.verify import run_all

    results = run_all(n_seeds=args.seeds, n_pairs=args.pairs)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("verify: " + ("all checks passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_INTERNAL


# --- parser ---------------------------------------------------------------------------------

def add_run_flags(p: argparse.ArgumentParser, model_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--data", help="gen-data output directory")
    if model_flags:
        p.add_argument("--fusion", choices=FUSIONS)
        p.add_argument("--xattn-query", choices=QUERY_SOURCES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--freeze", choices=FREEZE_PRESETS)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="t2c", description="Trajectory-conditioned driving captions.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory (default runs/<timestamp>)")

    p = sub.add_parser("render", help="render a plan into trajectory.ppm")
    p.add_argument("--plan", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--overlay", help="camera image (PPM) to composite under the trajectory")
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-standard", type=int, default=400)
    p.add_argument("--n-pairs", type=int, default=200)
    p.add_argument("--n-eval-pairs", type=int, default=200)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one fusion variant")
    add_run_flags(p)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", help="directory holding model.ckpt and model.json")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=EVAL_SPLITS, default="test")
    p.add_argument("--oracle", choices=("echo", "empty"), help="score a stub predictor instead")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare both cross-attention query sources")
    add_run_flags(p, model_flags=False)
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="gradient checks, metric oracles, golden images")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--pairs", type=int, default=1000)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, *USER_ERRORS) as exc:
        print(f"t2c {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except TrainingError as exc:
        print(f"t2c {args.command}: training aborted: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # anything else is a bug
        log.exception("internal failure")
        print(f"t2c {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
