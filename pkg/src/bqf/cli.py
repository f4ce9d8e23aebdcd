"""Command-line surface.

Subcommands: train, eval, discretize, diagnose, gradcheck, synth.
Exit codes: 0 success, 1 usage error, 2 data/format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, message on stderr."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="bqf", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    tr = sub.add_parser("train", help="run a training configuration")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--binarizer", choices=["none", "sign_ste", "xnor", "tanh", "quantnet"],
                    default=None)
    tr.add_argument("--deterministic", choices=["on", "off"], default=None)
    tr.add_argument("--k", type=float, default=None,
                    help="dominance diagnostic keep-fraction")
    tr.add_argument("--dataset-dir", default=None)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", choices=["train", "test"], default="test")
    ev.add_argument("--dataset-dir", default=None)
    ev.add_argument("--batch-size", type=int, default=512)

    dc = sub.add_parser("discretize", help="write a fixed-point checkpoint")
    dc.add_argument("--checkpoint", required=True)
    dc.add_argument("--out", required=True)

    dg = sub.add_parser("diagnose", help="assumption probes + saturation on a checkpoint")
    dg.add_argument("--checkpoint", required=True)
    dg.add_argument("--dataset-dir", default=None)
    dg.add_argument("--k", type=float, default=None)
    dg.add_argument("--out", default=None, help="write JSON here instead of stdout")

    gc = sub.add_parser("gradcheck", help="finite-difference suite over all ops")
    gc.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    gc.add_argument("--points", type=int, default=10)
    gc.add_argument("--seed", type=int, default=0)

    sy = sub.add_parser("synth", help="generate a synthetic dataset corpus")
    sy.add_argument("--dataset", choices=["mnist", "cifar10"], required=True)
    sy.add_argument("--out", required=True)
    sy.add_argument("--n-train", type=int, default=None)
    sy.add_argument("--n-test", type=int, default=None)
    sy.add_argument("--seed", type=int, default=7)
    return p


def _cmd_train(args) -> int:
    from bqf.train import parse_config, run_training

    text = Path(args.config).read_text()
    cfg = parse_config(text)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.binarizer is not None:
        cfg.binarizer = args.binarizer
    if args.deterministic is not None:
        cfg.deterministic = args.deterministic == "on"
    if args.k is not None:
        cfg.dominance_k = args.k
    if args.dataset_dir is not None:
        cfg.dataset_dir = args.dataset_dir
    cfg.validate()
    records, _ = run_training(cfg, out_dir=args.out)
    final = records[-1]
    print(f"final test_acc={final.test_acc:.4f} "
          f"test_acc_d={final.test_acc_discretized:.4f} gap={final.discretization_gap:.4f}")
    return 0


def _cmd_eval(args) -> int:
    from bqf.network import evaluate
    from bqf.train import load_dataset, network_from_checkpoint

    net, cfg, _ = network_from_checkpoint(args.checkpoint)
    if args.dataset_dir is not None:
        cfg.dataset_dir = args.dataset_dir
    data = load_dataset(cfg)
    if args.split == "train":
        acc = evaluate(net, data.train_x, data.train_y, batch_size=args.batch_size)
    else:
        acc = evaluate(net, data.test_x, data.test_y, batch_size=args.batch_size)
    print(f"{args.split}_acc={acc:.9f}")
    return 0


def _cmd_discretize(args) -> int:
    from bqf.train import network_from_checkpoint, save_discretized

    net, cfg, cp = network_from_checkpoint(args.checkpoint)
    save_discretized(args.out, net, cfg, epoch=cp.epoch, seed=cp.seed)
    print(f"wrote {args.out}")
    return 0


def _cmd_diagnose(args) -> int:
    import numpy as np

    from bqf.metrics import saturation_stats
    from bqf.quantnet import assumption1_probe
    from bqf.train import load_dataset, network_from_checkpoint

    net, cfg, _ = network_from_checkpoint(args.checkpoint)
    if args.dataset_dir is not None:
        cfg.dataset_dir = args.dataset_dir
    if args.k is not None:
        cfg.dominance_k = args.k
    hist, fraction = saturation_stats(net)
    report = {
        "saturation_fraction": fraction,
        "saturation_histogram": hist.tolist(),
        "dominance": None,
        "gradient_probe": None,
    }
    if net.binarized:
        from bqf.quantnet import topk_dominance_diagnostic

        data = load_dataset(cfg)
        n = min(256, len(data.test_x))
        report["dominance"] = topk_dominance_diagnostic(
            net, cfg.dominance_k, data.test_x[:n], data.test_y[:n])
        qns = net.quantnets()
        if qns:
            first = next(iter(qns.values()))
            probe_ws = [-10.0, -5.0, -2.0, -1.0, 0.0, 1.0, 2.0, 5.0, 10.0]
            report["gradient_probe"] = assumption1_probe(first, probe_ws)
    blob = json.dumps(report, indent=2, sort_keys=True, default=float)
    if args.out:
        Path(args.out).write_text(blob + "\n")
    else:
        print(blob)
    return 0


def _cmd_gradcheck(args) -> int:
    from bqf.gradcheck import run_gradcheck, summarize
    from bqf.tensor import DType

    dtype = DType.f64 if args.dtype == "f64" else DType.f32
    results = run_gradcheck(dtype=dtype, points=args.points, seed=args.seed)
    for line in summarize(results):
        print(line)
    return 0 if all(r["ok"] for r in results) else 3


def _cmd_synth(args) -> int:
    from bqf.data import generate_digits_corpus, generate_shapes_corpus

    kwargs = {}
    if args.n_train is not None:
        kwargs["n_train"] = args.n_train
    if args.n_test is not None:
        kwargs["n_test"] = args.n_test
    if args.dataset == "mnist":
        generate_digits_corpus(args.out, seed=args.seed, **kwargs)
    else:
        generate_shapes_corpus(args.out, seed=args.seed, **kwargs)
    print(f"wrote {args.dataset} corpus to {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "discretize": _cmd_discretize,
    "diagnose": _cmd_diagnose,
    "gradcheck": _cmd_gradcheck,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    from bqf.checkpoint import CheckpointError
    from bqf.data import FormatError
    from bqf.train import ConfigError

    try:
        return _COMMANDS[args.command](args)
    except (FormatError, CheckpointError, ConfigError, FileNotFoundError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
