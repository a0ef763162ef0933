"""gfss command line: synth, train, register, infer, eval, cifss, ablate.

Exit codes: 0 success, 2 bad config or missing/invalid artifact,
3 non-finite training loss, 4 class overlap during registration.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import io
from .cbbi import infer
from .errors import ConfigError, DataError, RegistryError, TrainingError
from .io import FormatError
from .pipeline import (
    ABLATIONS, build_dataset, cifss_table, evaluate_predictions, load_config, load_dataset,
    run_ablation, run_cifss, run_gfss, save_dataset, session_plan, train_model,
)
from .registry import SessionRegistry, extend_session, load_registry, save_registry
from .tensor import ShapeError
from .training import FrozenModel, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_NONFINITE, EXIT_OVERLAP = 0, 2, 3, 4


def _out(args):
    io.fresh_dir(args.out)
    return args.out


def _echo_config(out, cfg):
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.to_json() + "\n")


def _require(path, what):
    if not path or not os.path.exists(path):
        raise DataError(f"{what} {path!r} does not exist")
    return path


def _model(path):
    _require(path, "model checkpoint")
    m = load_checkpoint(path)
    if not isinstance(m, FrozenModel):
        raise DataError(f"{path} holds a training state, not a frozen model")
    return m


def _write_pgm(path, labels, n_classes):
    scale = 255 // max(1, n_classes - 1)
    img = (labels.astype(np.int64) * scale).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def _write_report(out, rep):
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(rep.to_json() + "\n")
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write(rep.csv_row(header=True))


# ------------------------------------------------------------------ commands


def cmd_synth(args, cfg):
    ds = build_dataset(cfg)
    save_dataset(args.out, ds)
    _echo_config(args.out, cfg)
    print(f"wrote dataset to {args.out}")


def cmd_train(args, cfg):
    ds = load_dataset(_require(args.data, "dataset"))
    out = _out(args)
    _echo_config(out, cfg)
    model = train_model(ds.world, cfg.train, log_path=os.path.join(out, "train_log.jsonl"))
    save_checkpoint(os.path.join(out, "model"), model, cfg.train)
    print(f"trained {cfg.train.steps} steps; checkpoint in {out}/model")


def cmd_register(args, cfg):
    ds = load_dataset(_require(args.data, "dataset"))
    model = _model(args.model)
    reg = load_registry(_require(args.registry, "registry")) if args.registry else SessionRegistry.from_model(model)
    ids = [int(c) for c in args.classes.split(",")] if args.classes else ds.world.novel_ids
    missing = [c for c in ids if c not in ds.supports]
    if missing:
        raise DataError(f"dataset has no supports for classes {missing}")
    reg = extend_session(reg, model, [ds.supports[c] for c in ids])
    save_registry(args.out, reg)
    print(f"session {reg.current_session}: registered {ids} into {args.out}")


def cmd_infer(args, cfg):
    model = _model(args.model)
    reg = load_registry(_require(args.registry, "registry"))
    feats = io.load_tensor(_require(args.feats, "feature file"))
    if feats.ndim == 3:
        feats = feats[None]
    out = _out(args)
    pred = infer(model, reg, feats, cfg.infer)
    io.save_tensor(os.path.join(out, "labels.gfst"), pred.astype(np.float32))
    if args.pgm:
        for i, p in enumerate(pred):
            _write_pgm(os.path.join(out, f"labels_{i:04d}.pgm"), p, max(reg.class_ids) + 1)
    print(f"wrote {pred.shape[0]} label masks to {out}")


def cmd_eval(args, cfg):
    ds = load_dataset(_require(args.data, "dataset"))
    if args.pred:
        pred = io.load_tensor(_require(args.pred, "prediction file")).astype(np.int64)
        rep = evaluate_predictions(pred, ds.eval_labels, ds.world, tag=args.tag)
    else:
        model = _model(args.model)
        reg = load_registry(_require(args.registry, "registry")) if args.registry else None
        if reg is None:
            reg, rep = run_gfss(ds, model, cfg.infer, tag=args.tag)
        else:
            pred = infer(model, reg, ds.eval_feats, cfg.infer)
            rep = evaluate_predictions(pred, ds.eval_labels, ds.world, reg.class_ids, tag=args.tag)
    out = _out(args)
    _echo_config(out, cfg)
    _write_report(out, rep)
    print(rep.csv_row(header=True), end="")


def cmd_cifss(args, cfg):
    ds = load_dataset(_require(args.data, "dataset"))
    model = _model(args.model)
    plan = session_plan(ds.world.novel_ids, cfg.run.sessions, cfg.run.classes_per_session)
    reg, results = run_cifss(ds, model, cfg.infer, plan, eval_counter=cfg.run.eval_counter)
    out = _out(args)
    _echo_config(out, cfg)
    table = cifss_table(results)
    with open(os.path.join(out, "sessions.csv"), "w") as fh:
        fh.write(table)
    with open(os.path.join(out, "sessions.json"), "w") as fh:
        json.dump([{"session": r.session, "report": r.report.to_dict(),
                    "new_class_iou": {str(c): v for c, v in r.new_class_iou.items()}} for r in results],
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_registry(os.path.join(out, "registry"), reg)
    print(table, end="")


def cmd_ablate(args, cfg):
    ds = load_dataset(_require(args.data, "dataset"))
    tags = args.tags.split(",") if args.tags else None
    out = _out(args)
    _echo_config(out, cfg)
    reports = run_ablation(ds, cfg, tags, log=lambda m: print(m, file=sys.stderr))
    text = "".join(r.csv_row(header=i == 0) for i, r in enumerate(reports))
    with open(os.path.join(out, "ablation.csv"), "w") as fh:
        fh.write(text)
    print(text, end="")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "register": cmd_register, "infer": cmd_infer,
    "eval": cmd_eval, "cifss": cmd_cifss, "ablate": cmd_ablate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="gfss", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON file of dotted keys, e.g. {\"train.lr\": 0.05}")
        s.add_argument("--seed", type=int, help="sets world.seed and train.seed")
        s.add_argument("--out", required=True, help="fresh output directory")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        if name != "synth":
            s.add_argument("--data", help="dataset directory written by synth")
        if name in ("register", "infer", "eval", "cifss"):
            s.add_argument("--model", help="checkpoint directory (the model/ folder written by train)")
        if name in ("register", "infer", "eval"):
            s.add_argument("--registry", help="registry directory")
        if name == "register":
            s.add_argument("--classes", help="comma-separated novel class ids (default: all)")
        if name == "infer":
            s.add_argument("--feats", help="GFST feature tensor (B, C, H, W)")
            s.add_argument("--pgm", action="store_true", help="also write one PGM image per mask")
        if name == "eval":
            s.add_argument("--pred", help="GFST label tensor to score instead of running the model")
            s.add_argument("--tag", default="gfss")
        if name == "ablate":
            s.add_argument("--tags", help=f"comma-separated subset of {','.join(ABLATIONS)}")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        COMMANDS[args.command](args, cfg)
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except RegistryError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OVERLAP
    except (ConfigError, DataError, FormatError, ShapeError, FileExistsError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
