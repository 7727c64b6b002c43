"""Command-line entry point: ``ccdec <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import experiments as ex
from . import serialize, synthetic
from .decoders import aq_fit, topline_fit
from .encoders import ITQModel, PQModel
from .nn import train_decoder, write_history_csv
from .search import groundtruth
from .vecs import read_vecs, write_vecs

log = logging.getLogger("ccdec")


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ex.ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train_encoder(a) -> None:
    X = read_vecs(a.train, count=a.count)
    bits = 1 if a.kind == "itq" else a.bits
    model = ex.train_encoder(a.kind, X, a.m, bits, a.seed)
    serialize.save(model, a.out)
    log.info("trained %s %dx%d on %d vectors -> %s", a.kind, a.m, bits, X.shape[0], a.out)


def cmd_encode(a) -> None:
    model = serialize.load(a.model)
    if not isinstance(model, (PQModel, ITQModel)):
        raise SystemExit(f"{a.model} is not an encoder model")
    codes = ex.encode(model, read_vecs(a.input, count=a.count))
    serialize.save(codes, a.out)
    log.info("encoded %d vectors -> %s", codes.n, a.out)


def cmd_fit_decoder(a) -> None:
    model = serialize.load(a.model)
    X = read_vecs(a.train, count=a.count)
    codes = ex.encode(model, X)
    if a.decoder == "topline":
        dec = topline_fit(codes, X, lambda c: ex.natural(model, c))
    elif a.decoder == "aq":
        dec = aq_fit(codes, X, a.aq_lambda)
    else:
        cfg = ex.build_config(overrides={f"nn.{k}": v for k, v in _overrides(a.set).items()})
        Xtr, Xva = ex.split_train_val(X, a.nval)
        ctr, cva = codes.take(np.arange(Xtr.shape[0])), codes.take(np.arange(Xtr.shape[0], X.shape[0]))
        res = train_decoder(ctr, Xtr, cva, Xva, cfg.train_config(aq_lambda=a.aq_lambda))
        if a.history:
            write_history_csv(res.history, a.history)
        dec = res.params
    serialize.save(dec, a.out)
    log.info("fitted %s decoder -> %s", a.decoder, a.out)


def _config(a) -> ex.ExperimentConfig:
    over = _overrides(a.set)
    if a.output:
        over["output"] = a.output
    return ex.load_config(a.config, over)


def cmd_eval(a) -> None:
    for row in ex.run_recall_experiment(_config(a)):
        print(f"{row['config']}\tR@{row['R']}\t{row['recall']:.4f} +- {row['recall_std']:.4f}")


def cmd_rerank_sweep(a) -> None:
    for row in ex.run_rerank_sweep(_config(a)):
        print(f"L={row['L']}\tR@1 {row['recall_1']:.4f}\trerank {row['rerank_ms']:.3f} ms")


def cmd_prelim(a) -> None:
    for row in ex.run_preliminary_experiment(_config(a)):
        print(f"{row['ntrain']}\t{row['encoder']}+{row['decoder']}\t{row['train_mse']:.5g}\t{row['val_mse']:.5g}")


def cmd_sensitivity(a) -> None:
    curves = ex.run_sensitivity_sweep(_config(a))
    for (k, v), hist in curves.items():
        print(f"{k}={v}\tfinal val {hist[-1]['val_mse']:.5g}")


def cmd_gen_synthetic(a) -> None:
    X = synthetic.gaussian_mixture(a.n, a.dim, a.seed, a.stream)
    write_vecs(a.out, X, "fvecs")


def cmd_groundtruth(a) -> None:
    base = read_vecs(a.base)
    query = read_vecs(a.query)
    write_vecs(a.out, groundtruth(base, query, a.k).astype(np.int32), "ivecs")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccdec", description="Compact-code encoders, decoders and search benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-encoder", help="train a k-means/PQ/OPQ/ITQ encoder")
    s.add_argument("--train", required=True)
    s.add_argument("--kind", choices=("pq", "opq", "itq"), default="pq")
    s.add_argument("--m", type=int, default=8, help="subquantizers (or bits for itq)")
    s.add_argument("--bits", type=int, default=8, choices=(1, 4, 8, 16))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_encoder)

    s = sub.add_parser("encode", help="encode vectors with a trained encoder")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_encode)

    s = sub.add_parser("fit-decoder", help="fit a topline, aq or nn decoder on training codes")
    s.add_argument("decoder", choices=("topline", "aq", "nn"))
    s.add_argument("--model", required=True, help="encoder model file")
    s.add_argument("--train", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--aq-lambda", type=float)
    s.add_argument("--nval", type=int, default=10_000, help="held-out rows for nn validation")
    s.add_argument("--set", action="append", metavar="FIELD=VALUE", help="nn training override")
    s.add_argument("--history", help="write per-epoch nn losses to this CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_fit_decoder)

    for name, fn, text in (
        ("eval", cmd_eval, "recall experiment over seeds"),
        ("rerank-sweep", cmd_rerank_sweep, "shortlist re-ranking sweep"),
        ("prelim", cmd_prelim, "MSE versus training-set size"),
        ("sensitivity", cmd_sensitivity, "nn hyperparameter sweep"),
    ):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="key = value file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--output", help="output directory")
        s.set_defaults(fn=fn)

    s = sub.add_parser("gen-synthetic", help="write seeded Gaussian-mixture vectors")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stream", type=int, default=0, help="independent sample of the same mixture")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_synthetic)

    s = sub.add_parser("groundtruth", help="exact nearest neighbours as ivecs")
    s.add_argument("--base", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--k", type=int, default=100)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_groundtruth)
    return p


def main(argv: list[str] | None = None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        a.fn(a)
    except (ex.ConfigError, ValueError, OSError) as e:
        print(f"ccdec: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
