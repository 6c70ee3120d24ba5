"""Command line entry point: ``gen-data``, ``train``, ``eval``, ``ablation``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Callable, Sequence

from . import BACKEND
from .dataset import (DatasetFormatError, DomainShiftConfig, SyntheticConfig, apply_domain_shift,
                      generate_synthetic, load_dataset, save_dataset, split_products)
from .encoder import load_checkpoint, save_checkpoint
from .evaluation import DEFAULT_RECALL_KS, evaluate
from .experiment import ABLATION_METRICS, Trainer, TrainConfig, run_ablation
from .sampling import BatchSpec
from .text_semantics import WordVectorFormatError, load_word_vectors

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INVALID = 4

LOSS_NAMES = {"atl": "atl", "fixed": "fixed_margin", "normsoftmax": "norm_softmax"}
SAMPLER_NAMES = {"random": "random", "oanns": "oanns", "epoch-recompute": "epoch_recompute"}
SCALING_NAMES = {"literal": "literal", "range-consistent": "range_consistent"}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def atomic_write(path: str | os.PathLike, write: Callable[[io.IOBase], None], binary: bool = False) -> None:
    """Write through a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}", EXIT_IO) from None
    try:
        mode = "wb" if binary else "w"
        kwargs = {} if binary else {"encoding": "utf-8", "newline": "\n"}
        with os.fdopen(fd, mode, **kwargs) as fh:
            write(fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p.with_suffix(".csv") if p.suffix != ".csv" else p.with_name(p.name + ".csv")


def write_csv(path: Path, rows: list[dict]) -> None:
    fields: list[str] = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)

    def _write(fh):
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    atomic_write(path, _write)


def write_json(path, obj) -> None:
    atomic_write(path, lambda fh: fh.write(json.dumps(obj, indent=2, sort_keys=False) + "\n"))


def _open(path: str, mode: str = "r"):
    try:
        if "b" in mode:
            return open(path, mode)
        return open(path, mode, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_IO) from None


def read_dataset(path: str):
    with _open(path) as fh:
        try:
            return load_dataset(fh)
        except DatasetFormatError as exc:
            raise CliError(f"invalid dataset {path}: {exc}", EXIT_INVALID) from None


def read_word_vectors(path: str | None):
    if path is None:
        return None
    with _open(path, "rb") as fh:
        try:
            return load_word_vectors(fh)
        except WordVectorFormatError as exc:
            raise CliError(f"invalid word vectors {path}: {exc}", EXIT_INVALID) from None


def int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return vals


def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(args.products, args.images_per_product, args.vocab_size,
                          args.attrs_per_product, args.feature_dim, args.noise, args.seed,
                          args.word_dim)
    ds, table = generate_synthetic(cfg)
    target = ds
    if args.eval_out:
        train_ds, eval_ds = split_products(ds, args.products - args.eval_products, seed=args.seed)
        atomic_write(args.out, lambda fh: save_dataset(train_ds, fh))
        atomic_write(args.eval_out, lambda fh: save_dataset(eval_ds, fh))
        target = eval_ds
    else:
        atomic_write(args.out, lambda fh: save_dataset(ds, fh))
    if args.shifted_out:
        shift = DomainShiftConfig(args.shift_seed, args.shift_noise, args.shift_bias,
                                  args.shift_rotation)
        shifted = apply_domain_shift(target, shift)
        atomic_write(args.shifted_out, lambda fh: save_dataset(shifted, fh))
    if args.word_vectors_out:
        atomic_write(args.word_vectors_out, table.dump)
    return 0


def _train_config(args, **overrides) -> TrainConfig:
    spec = BatchSpec(args.p, args.k, args.anchors)
    hidden = tuple(int_list(args.hidden)) if args.hidden else ()
    kw = dict(beta=args.beta, fixed_margin=args.margin, lr=args.lr, steps=args.steps, spec=spec,
              embedding_dim=args.embed_dim, hidden_dims=hidden,
              scaling_mode=SCALING_NAMES[args.scaling], seed=args.seed,
              freeze_steps=args.freeze_steps, d_clip=args.d_clip)
    kw.update(overrides)
    return TrainConfig(**kw)


def cmd_train(args) -> int:
    ds = read_dataset(args.data)
    table = read_word_vectors(args.word_vectors)
    cfg = _train_config(args, loss=LOSS_NAMES[args.loss], sampler=SAMPLER_NAMES[args.sampler])
    trainer = Trainer(ds, cfg, table)
    params, log = trainer.run()
    extra_arrays = {}
    if trainer.state.class_weights is not None:
        extra_arrays["class_weights"] = trainer.state.class_weights
    meta = {"config": cfg.to_dict()}
    atomic_write(args.checkpoint_out, lambda fh: save_checkpoint(fh, params, extra_arrays, meta),
                 binary=True)
    if args.log_out:
        write_json(args.log_out, {"config": cfg.to_dict(), "backend": BACKEND, **log.to_dict()})
    return 0


def cmd_eval(args) -> int:
    ds = read_dataset(args.data)
    with _open(args.checkpoint, "rb") as fh:
        try:
            params, _, _ = load_checkpoint(fh)
        except (ValueError, KeyError) as exc:
            raise CliError(f"invalid checkpoint {args.checkpoint}: {exc}", EXIT_INVALID) from None
    if params.input_dim != ds.d_in:
        raise CliError(f"checkpoint expects {params.input_dim}-D features, data has {ds.d_in}",
                       EXIT_INVALID)
    report = evaluate(params, ds, args.recall_ks).to_dict()
    write_json(args.out, report)
    write_csv(csv_path(args.out), [report])
    return 0


def cmd_ablation(args) -> int:
    train_ds = read_dataset(args.train)
    eval_ds = read_dataset(args.eval)
    shifted = read_dataset(args.shifted_eval)
    table = read_word_vectors(args.word_vectors)
    base = _train_config(args)

    def progress(msg):
        if not args.quiet:
            print(msg, file=sys.stderr)

    result = run_ablation(train_ds, eval_ds, shifted, args.seeds, base, table, progress)
    out = {"config": base.to_dict(), "metrics": list(ABLATION_METRICS), **result.to_dict()}
    write_json(args.out, out)
    write_csv(csv_path(args.out),
              [{"kind": "run", **r} for r in result.runs]
              + [{"kind": "mean", **r} for r in result.mean_rows()])
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--word-vectors", help="word-vector text file (default: hashed vectors)")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--margin", type=float, default=0.1, help="fixed-margin baseline margin")
    p.add_argument("--lr", type=float, default=None,
                   help="learning rate (default 0.04, or 0.01 for normsoftmax)")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--p", type=int, default=25, help="products per batch")
    p.add_argument("--k", type=int, default=4, help="images per product")
    p.add_argument("--anchors", type=int, default=5, help="anchor products per batch")
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--hidden", default="256", help="comma-separated hidden widths ('' for none)")
    p.add_argument("--scaling", choices=sorted(SCALING_NAMES), default="range-consistent")
    p.add_argument("--freeze-steps", type=int, default=200)
    p.add_argument("--d-clip", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atlmetric", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic catalog")
    g.add_argument("--products", type=int, required=True)
    g.add_argument("--images-per-product", type=int, default=4)
    g.add_argument("--vocab-size", type=int, default=60)
    g.add_argument("--attrs-per-product", type=int, default=4)
    g.add_argument("--feature-dim", type=int, default=64)
    g.add_argument("--word-dim", type=int, default=32)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--eval-out", help="also write a held-out product split here")
    g.add_argument("--eval-products", type=int, default=0,
                   help="products held out for --eval-out")
    g.add_argument("--shifted-out", help="domain-shifted copy (of the eval split if any)")
    g.add_argument("--shift-noise", type=float, default=0.1)
    g.add_argument("--shift-bias", type=float, default=0.1)
    g.add_argument("--shift-rotation", type=float, default=0.05)
    g.add_argument("--shift-seed", type=int, default=0)
    g.add_argument("--word-vectors-out", help="write the generator's word vectors here")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train an encoder")
    t.add_argument("--data", required=True)
    t.add_argument("--loss", choices=sorted(LOSS_NAMES), default="atl")
    t.add_argument("--sampler", choices=sorted(SAMPLER_NAMES), default="oanns")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint-out", required=True)
    t.add_argument("--log-out")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval metrics of a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--recall-ks", type=int_list, default=list(DEFAULT_RECALL_KS))
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablation", help="baseline / +ATL / +OANNS / +both over seeds")
    a.add_argument("--train", required=True)
    a.add_argument("--eval", required=True)
    a.add_argument("--shifted-eval", required=True)
    a.add_argument("--seeds", type=int_list, default=[1, 2, 3, 4, 5])
    a.add_argument("--out", required=True)
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(seed=0)
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "eval_out", None) and not 0 < args.eval_products < args.products:
            raise CliError("--eval-products must be between 1 and --products - 1", EXIT_USAGE)
        return args.func(args)
    except CliError as exc:
        print(f"atlmetric {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"atlmetric {args.command}: error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
