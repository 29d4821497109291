"""Command-line driver: ``mrd gen | train | eval | diag``.

Exit codes: 0 ok, 1 check failed, 2 usage / bad configuration, 3 I/O or file
format failure, 4 non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .embedding_space import SynthConfig, gen_synthetic_triplets, load_dataset, save_dataset, split_holdout
from .errors import BadMagic, DimMismatch, MRDIOError, NonFiniteLoss
from .evaluation import build_report, export_report
from .gradcheck import grad_suite
from .losses import LossParams, dynamic_weights
from .relations import RelationForm
from .trainer import (
    TrainConfig,
    final_weights,
    load_checkpoint,
    save_checkpoint,
    train,
    write_trainlog_csv,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("mrd")


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not ks or list(ks) != sorted(ks) or ks[0] < 1:
        raise argparse.ArgumentTypeError("ks must be positive and ascending")
    return ks


def _seed(args) -> int:
    env = os.environ.get("MRD_SEED")
    return int(env) if env is not None else args.seed


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise MRDIOError(f"cannot write {path}: {exc}") from exc


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise MRDIOError(f"cannot create {out}: {exc}") from exc
    return out


def cmd_gen(args) -> int:
    cfg = SynthConfig(
        n_categories=args.n_categories,
        samples_per_category=args.samples_per_category,
        d=args.dim,
        points_per_cloud=args.points,
        sigma_image=args.sigma_image,
        sigma_text=args.sigma_text,
        gap_magnitude=args.gap,
        seed=_seed(args),
    )
    cfg.validate()
    out = _out_dir(args.out)
    _write_json(out / "config.json", {"command": "gen", "synth": cfg.to_dict()})
    save_dataset(gen_synthetic_triplets(cfg), out)
    print(f"wrote {cfg.n_categories * cfg.samples_per_category} triplets to {out}")
    return EXIT_OK


def _loss_params(args) -> LossParams:
    return LossParams(
        tau_align=args.tau_align,
        tau_rel=args.tau_rel,
        lam=args.lam,
        eta=args.eta,
        form=args.form,
        ir_enabled=args.ir,
        cr_enabled=args.cr,
        dd_enabled=args.dd,
        mask_diagonal=args.mask_diagonal,
    )


def cmd_train(args) -> int:
    config = TrainConfig(
        lr=args.lr,
        weight_decay=args.wd,
        epochs=args.epochs,
        warmup_fraction=args.warmup,
        batch_size=args.batch_size,
        seed=_seed(args),
        loss=_loss_params(args),
        hidden=args.hidden,
    )
    config.validate()
    out = _out_dir(args.out)
    dataset = load_dataset(args.data)
    run_config = {
        "command": "train",
        "data": str(args.data),
        "synth": dataset.config.to_dict() if dataset.config else None,
        "train": config.to_dict(),
        "eval": {"holdout": args.holdout, "ks": list(args.ks)},
    }
    _write_json(out / "config.json", run_config)

    train_set, held_out = split_holdout(dataset, args.holdout)
    result = train(train_set, config, progress=args.verbose)
    save_checkpoint(result, out / "checkpoint.mrdc")
    write_trainlog_csv(result.log, out / "trainlog.csv")

    eval_set = held_out if held_out is not None else train_set
    emb = result.encoder.encode(eval_set.clouds)
    report = build_report(run_config, emb, eval_set, args.ks, args.ks, final_weights(result, config.loss))
    export_report(report, out / "report.json")
    print(json.dumps({"zero_shot": report["zero_shot"], "mae": report["mae"]}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    result = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    run_config = {
        "command": "eval",
        "data": str(args.data),
        "checkpoint": str(args.checkpoint),
        "eval": {"holdout": args.holdout, "ks": list(args.ks)},
    }
    _write_json(out / "config.json", run_config)
    train_set, held_out = split_holdout(dataset, args.holdout)
    eval_set = held_out if held_out is not None else train_set
    emb = result.encoder.encode(eval_set.clouds)
    report = build_report(run_config, emb, eval_set, args.ks, args.ks, dynamic_weights(result.logits))
    export_report(report, out / "report.json")
    print(json.dumps({"zero_shot": report["zero_shot"], "mae": report["mae"]}, sort_keys=True))
    return EXIT_OK


def cmd_diag(args) -> int:
    forms = list(RelationForm) if args.form == "all" else [RelationForm(args.form)]
    seed = _seed(args)
    worst = 0.0
    for form in forms:
        for res in grad_suite(form, n=args.n, d=args.d, seed=seed, step=args.step):
            status = "ok" if res.max_rel_error < args.threshold else "FAIL"
            print(f"{form.value:14s} {res.kind:12s} max_rel_error={res.max_rel_error:.3e} {status}")
            worst = max(worst, res.max_rel_error)
    print(f"worst={worst:.3e} threshold={args.threshold:.1e}")
    return EXIT_OK if worst < args.threshold else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrd", description="Multi-modal relation distillation at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic triplet dataset")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-categories", type=int, default=40)
    g.add_argument("--samples-per-category", type=int, default=50)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--points", type=int, default=16)
    g.add_argument("--sigma-image", type=float, default=0.1)
    g.add_argument("--sigma-text", type=float, default=0.1)
    g.add_argument("--gap", type=float, default=0.8)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the point encoder")
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--form", choices=[f.value for f in RelationForm], default="similarity")
    t.add_argument("--ir", action=argparse.BooleanOptionalAction, default=True)
    t.add_argument("--cr", action=argparse.BooleanOptionalAction, default=True)
    t.add_argument("--dd", action=argparse.BooleanOptionalAction, default=True)
    t.add_argument("--lambda", dest="lam", type=float, default=3.0)
    t.add_argument("--eta", type=float, default=0.05)
    t.add_argument("--tau-align", type=float, default=0.07)
    t.add_argument("--tau-rel", type=float, default=0.07)
    t.add_argument("--mask-diagonal", action="store_true")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=160)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--wd", type=float, default=0.05)
    t.add_argument("--warmup", type=float, default=0.15, help="warm-up fraction of all steps")
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--holdout", type=float, default=0.2)
    t.add_argument("--ks", type=_ks, default=(1, 3, 5))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--holdout", type=float, default=0.2)
    e.add_argument("--ks", type=_ks, default=(1, 3, 5))
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diag", help="finite-difference gradient checks")
    d.add_argument("--form", choices=["all"] + [f.value for f in RelationForm], default="all")
    d.add_argument("--threshold", type=float, default=1e-4)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--step", type=float, default=1e-5)
    d.add_argument("--n", type=int, default=6)
    d.add_argument("--d", type=int, default=12)
    d.set_defaults(func=cmd_diag)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (BadMagic, DimMismatch, MRDIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
