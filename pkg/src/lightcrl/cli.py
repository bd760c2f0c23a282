"""Command-line entry point: ``lightcrl {gensynth,train,eval,gradcheck,inspect}``.

Exit codes: 0 success, 1 gradient check failed, 2 usage or input error,
3 runtime or data error.
"""

import argparse
import datetime as _dt
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, read_sections, save_checkpoint
from .data import SyntheticSpec, class_prototypes, generate_synthetic, load_embeddings, save_embeddings, split_set
from .errors import ContractError, CorruptionError, DataError, FormatError, NumericalError, ShapeError
from .evaluate import (
    ClassPrototypeSet,
    EvalReport,
    retrieval_recall_at_k,
    train_linear_probe,
    write_reports,
    zero_shot_classify,
)
from .gradcheck import finite_difference_check
from .model import init_parameters
from .objective import frozen_target_loss
from .train import ClassifierConfig, TrainConfig, Trainer, finetune, split_train_val

log = logging.getLogger("lightcrl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_id():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, command, config, seed, outputs, finished=False, previous=None):
    manifest = dict(previous or {})
    manifest.update({"command": command, "config": config, "seed": seed, "build": build_id(), "outputs": outputs})
    manifest.setdefault("started", _now())
    if finished:
        manifest["finished"] = _now()
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_config_file(path):
    """``key=value`` lines; ``#`` starts a comment; keys may use dashes."""
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg[key.replace("-", "_")] = value
    return cfg


# ---------------------------------------------------------------- subcommands


def cmd_gensynth(args):
    spec = SyntheticSpec(
        n=args.n + args.n_test,
        d_latent=args.d_latent,
        d1=args.d1,
        d2=args.d2,
        noise_sigma=args.sigma,
        num_classes=args.classes,
        seed=args.seed,
        class_sep=args.class_sep,
    )
    if args.n <= 0:
        raise ContractError("--n must be positive")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(spec)
    outputs = {"train": str(out / "train.lce"), "protos": str(out / "protos.lce")}
    if args.n_test:
        outputs["test"] = str(out / "test.lce")
    write_manifest(out, "gensynth", vars_for_manifest(args), args.seed, outputs)
    train, test = split_set(data, (args.n, args.n_test))
    save_embeddings(train, outputs["train"])
    if args.n_test:
        save_embeddings(test, outputs["test"])
    save_embeddings(class_prototypes(spec), outputs["protos"])
    write_manifest(out, "gensynth", vars_for_manifest(args), args.seed, outputs, finished=True)
    print(f"wrote {data.n} pairs (d1={spec.d1}, d2={spec.d2}, classes={spec.num_classes}) to {out}")
    return EXIT_OK


def vars_for_manifest(args):
    return {k: v for k, v in vars(args).items() if k != "func" and not callable(v)}


def cmd_train(args):
    data = load_embeddings(args.data)
    cfg = TrainConfig(
        batch_k=args.batch_k,
        max_epochs=args.max_epochs,
        patience=args.patience,
        lr=args.lr,
        seed=args.seed,
        val_fraction=args.val_fraction,
        precision=args.precision,
        max_grad_norm=args.max_grad_norm,
    )
    cfg.validate()
    if args.val_data:
        train, val = data, load_embeddings(args.val_data)
    else:
        train, val = split_train_val(data, cfg.val_fraction, cfg.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"checkpoint": str(out / "checkpoint.lck"), "last": str(out / "last.lck"), "history": str(out / "history.jsonl")}
    manifest = write_manifest(out, "train", vars_for_manifest(args), args.seed, outputs)

    if args.resume:
        trainer = Trainer.from_checkpoint(load_checkpoint(args.resume), train, val, cfg)
    else:
        params = init_parameters(
            train.d1, train.d2, args.d_ctx, args.d_model, args.d_out, fusion=args.fusion, seed=args.seed, dtype=cfg.dtype
        )
        trainer = Trainer(params, train, val, cfg)

    with open(outputs["history"], "w") as hist:
        for rec in trainer.history:
            hist.write(json.dumps(rec) + "\n")

        def on_epoch(tr, rec):
            hist.write(json.dumps(rec) + "\n")
            hist.flush()

        result = trainer.fit(on_epoch=on_epoch)

    last = trainer.checkpoint()
    save_checkpoint(last, outputs["last"])
    best = Checkpoint(
        params=result.params.state_dict(),
        dfe_config=last.dfe_config,
        train_config=last.train_config,
        opt_m=last.opt_m,
        opt_v=last.opt_v,
        step=last.step,
        epoch=last.epoch,
        best_val=result.best_val_loss,
    )
    save_checkpoint(best, outputs["checkpoint"])
    write_manifest(out, "train", vars_for_manifest(args), args.seed, outputs, finished=True, previous=manifest)
    print(
        f"epochs={trainer.epoch} steps={trainer.opt.step} initial_val={result.initial_val_loss:.6f} "
        f"best_val={result.best_val_loss:.6f} tau={result.params.tau():.4f}"
    )
    return EXIT_OK


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.to_params()
    data = load_embeddings(args.data)
    reports = []
    if args.protocol == "zeroshot":
        if not args.protos:
            raise UsageError("zeroshot needs --protos")
        if data.labels is None:
            raise UsageError("zeroshot needs labelled --data")
        protos = ClassPrototypeSet.from_pairs(load_embeddings(args.protos))
        reports, _ = zero_shot_classify(params, data.m1, data.labels, protos, args.topk, args.temperature)
    elif args.protocol == "recall":
        reports = retrieval_recall_at_k(params, data, args.ks)
    elif args.protocol in ("probe", "finetune"):
        if not args.train_data:
            raise UsageError(f"{args.protocol} needs --train-data")
        train = load_embeddings(args.train_data)
        if train.labels is None or data.labels is None:
            raise UsageError(f"{args.protocol} needs labelled --train-data and --data")
        c = max(train.num_classes, data.num_classes)
        if args.protocol == "probe":
            res = train_linear_probe(
                params, train, data, epochs=args.epochs, lr=args.head_lr, eval_every=args.eval_every, batch_k=args.batch_k, seed=args.seed
            )
            name = "probe_accuracy"
        else:
            cfg = ClassifierConfig(
                epochs=args.epochs, lr=args.head_lr, dfe_lr=args.lr, batch_k=args.batch_k, eval_every=args.eval_every, seed=args.seed
            )
            res = finetune(params, train, c, cfg, test=data)
            name = "finetune_accuracy"
        for epoch, acc in res.curve:
            reports.append(EvalReport(name, acc, data.n, epoch=epoch))
    for r in reports:
        print(r.to_json())
    if args.out:
        with open(args.out, "w") as fh:
            write_reports(reports, fh)
    return EXIT_OK


def cmd_gradcheck(args):
    if args.d_model > 16:
        raise UsageError("--d-model must be <= 16 for gradcheck")
    rng = np.random.default_rng(args.seed)
    x1 = rng.standard_normal((args.k, args.d1))
    x2 = rng.standard_normal((args.k, args.d2))
    worst = 0.0
    for kind in args.fusion or ["add", "attention"]:
        params = init_parameters(args.d1, args.d2, args.d_ctx, args.d_model, args.d_model, fusion=kind, seed=args.seed, dtype=np.float64)
        err, details = finite_difference_check(
            frozen_target_loss(params, x1, x2),
            params,
            h=args.h,
            max_coords=args.max_coords,
            seed=args.seed,
            numeric_dtype=np.longdouble,
            return_details=True,
        )
        where = max(details, key=details.get)
        print(f"fusion={kind} max_rel_error={err:.3e} (at {where}) threshold={args.threshold:g}")
        worst = max(worst, err)
    ok = worst <= args.threshold
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_inspect(args):
    raw = Path(args.checkpoint).read_bytes()
    version, sections = read_sections(raw)
    ckpt = load_checkpoint(args.checkpoint)
    print(f"checkpoint {args.checkpoint} (LCK1 v{version}, {len(sections)} sections)")
    for name, arr in sections:
        if name == "meta":
            print(f"  {name:<28} {arr.size} bytes of JSON")
        else:
            print(f"  {name:<28} {arr.dtype.name:<8} {tuple(arr.shape)}")
    print(f"dfe_config: {json.dumps(ckpt.dfe_config, sort_keys=True)}")
    print(f"epoch: {ckpt.epoch}  steps: {ckpt.step}  best_val: {ckpt.best_val}")
    print(f"param_count: {ckpt.param_count()}")
    print(f"tau: {ckpt.tau:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="lightcrl", description="Shared fusion encoder for cross-modal embeddings.")
    p.add_argument("--version", action="version", version=f"lightcrl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value file; explicit flags take precedence")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--precision", type=int, choices=(32, 64), default=32)
        sp.add_argument("--out-dir", default=".")

    g = sub.add_parser("gensynth", help="write a seeded synthetic paired set")
    common(g)
    g.add_argument("--n", type=int, default=512)
    g.add_argument("--n-test", type=int, default=0)
    g.add_argument("--d-latent", type=int, default=8)
    g.add_argument("--d1", type=int, default=32)
    g.add_argument("--d2", type=int, default=48)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--class-sep", type=float, default=SyntheticSpec.class_sep)
    g.set_defaults(func=cmd_gensynth)

    t = sub.add_parser("train", help="fit the fusion encoder with early stopping")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--fusion", choices=("add", "multiply", "concat", "attention"), default="add")
    t.add_argument("--batch-k", type=int, default=64)
    t.add_argument("--max-epochs", type=int, default=500)
    t.add_argument("--patience", type=int, default=20)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--max-grad-norm", type=float)
    t.add_argument("--d-model", type=int, default=64)
    t.add_argument("--d-ctx", type=int, default=16)
    t.add_argument("--d-out", type=int, default=64)
    t.add_argument("--resume", help="continue from a last.lck training-state checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run an evaluation protocol on a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="evaluation set (labelled for zeroshot/probe/finetune)")
    e.add_argument("--train-data", help="labelled training set for probe/finetune")
    e.add_argument("--protos", help="class prototype set for zeroshot")
    e.add_argument("--protocol", choices=("zeroshot", "recall", "probe", "finetune"), required=True)
    e.add_argument("--topk", type=_int_list, default=[1])
    e.add_argument("--ks", type=_int_list, default=[1, 5, 10])
    e.add_argument("--epochs", type=int, default=100)
    e.add_argument("--eval-every", type=int, default=20)
    e.add_argument("--batch-k", type=int, default=64)
    e.add_argument("--head-lr", type=float, default=1e-2)
    e.add_argument("--lr", type=float, default=1e-3, help="encoder learning rate when fine-tuning")
    e.add_argument("--temperature", type=float, default=1.0)
    e.add_argument("--out", help="also write report lines to this file")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    common(c)
    c.add_argument("--fusion", action="append", choices=("add", "multiply", "concat", "attention"))
    c.add_argument("--d1", type=int, default=5)
    c.add_argument("--d2", type=int, default=6)
    c.add_argument("--d-ctx", type=int, default=4)
    c.add_argument("--d-model", type=int, default=8)
    c.add_argument("--k", type=int, default=3)
    c.add_argument("--h", type=float, default=2e-6)
    c.add_argument("--max-coords", type=int)
    c.add_argument("--threshold", type=float, default=1e-6)
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="summarise a checkpoint")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            cfg = read_config_file(args.config)
        except OSError as exc:
            parser.error(f"cannot read config: {exc}")
        except UsageError as exc:
            parser.error(str(exc))
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sp._actions}
        unknown = sorted(set(cfg) - set(known))
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, raw in cfg.items():
            action = known[key]
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                parser.error(f"config {key}: {exc}")
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    parser = build_parser()
    args = _parse(parser, argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ContractError, ShapeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"lightcrl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, CorruptionError, NumericalError) as exc:
        print(f"lightcrl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FloatingPointError as exc:  # pragma: no cover - numpy errstate is not raised by default
        print(f"lightcrl {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
