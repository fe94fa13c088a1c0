"""Command-line entry point: ``hwgq <command> [flags]``.

Commands: design-quantizer, train, eval, bench, export-tables.

Failures print exactly one line to stderr, ``hwgq: error[<category>]: <message>``,
and exit with the category's code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bitkernels, data, quantizer, trainer
from .network import NetworkSpec, SpecError

RUN_ROOT_ENV = "HWGQ_RUN_ROOT"

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "io": 4,
    "data": 5,
    "checkpoint": 6,
    "diverged": 7,
    "internal": 70,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise CliError("io", f"cannot write {path}: {exc.strerror or exc}") from None


def _fmt_list(values) -> str:
    return "[" + ", ".join(f"{v:.6f}" for v in values) + "]"


def _print_spec(spec: quantizer.QuantizerSpec) -> None:
    kind = "uniform" if spec.uniform else "nonuniform"
    print(f"m={spec.m} {kind} samples={spec.sample_count} seed={spec.seed} iterations={spec.iterations}")
    print(f"levels     {_fmt_list(spec.levels)}")
    print(f"thresholds {_fmt_list(spec.thresholds[:-1])} inf")
    if spec.uniform:
        print(f"delta      {spec.delta:.6f}")
    print(f"mse        {spec.mse:.9f}")


def _check_levels(m: int) -> None:
    if not 1 <= m <= 15:
        raise CliError("usage", f"--levels must lie in [1, 15], got {m}")


def _check_samples(n: int) -> None:
    if n < 10_000:
        raise CliError("usage", f"--samples must be >= 10000, got {n}")


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "."))


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

CONFIG_KEYS = ("network", "train", "dataset", "quantizer", "run_dir")


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_run_config(path) -> dict:
    """Parse and validate a run document; returns the resolved pieces.

    Relative file paths inside the document resolve against its directory;
    a relative ``run_dir`` resolves against ``$HWGQ_RUN_ROOT`` (default: cwd).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise CliError("io", f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError("config", f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    if not isinstance(doc, dict):
        raise CliError("config", "config: expected a JSON object")
    for key in doc:
        if key not in CONFIG_KEYS:
            raise CliError("config", f"config.{key}: unknown field")
    for key in ("network", "train", "dataset"):
        if key not in doc:
            raise CliError("config", f"config.{key}: required field missing")
    base = path.parent

    try:
        net_doc = doc["network"]
        if isinstance(net_doc, str):
            net_doc = json.loads(_resolve(base, net_doc).read_text())
        network = NetworkSpec.from_dict(net_doc, "config.network")
        train_cfg = trainer.TrainConfig.from_dict(doc["train"], "config.train")
    except SpecError as exc:
        raise CliError("config", str(exc)) from None
    except OSError as exc:
        raise CliError("io", f"config.network: {exc}") from None

    dataset = doc["dataset"]
    if isinstance(dataset, str):
        dataset = {"path": dataset}
    if not isinstance(dataset, dict):
        raise CliError("config", "config.dataset: expected an object or a path")
    dataset = dict(dataset)
    if "path" in dataset:
        dataset["path"] = str(_resolve(base, dataset["path"]))
        if "kind" not in dataset:
            try:
                dataset = {**data.detect_dataset(dataset["path"]), **dataset}
            except (data.DataError, OSError) as exc:
                raise CliError("data", f"config.dataset.path: {exc}") from None
    if dataset.get("kind") not in ("mnist", "cifar10", "synthetic"):
        raise CliError("config", f"config.dataset.kind: unknown dataset kind {dataset.get('kind')!r}")

    q = doc.get("quantizer")
    qspec = None
    if isinstance(q, str):
        try:
            qspec = quantizer.QuantizerSpec.load(_resolve(base, q))
        except OSError as exc:
            raise CliError("io", f"config.quantizer: {exc}") from None
        except ValueError as exc:
            raise CliError("config", f"config.quantizer: {exc}") from None
    elif isinstance(q, dict):
        known = {"levels", "uniform", "samples", "seed"}
        for key in q:
            if key not in known:
                raise CliError("config", f"config.quantizer.{key}: unknown field")
        if not isinstance(q.get("levels"), int) or not 1 <= q["levels"] <= 15:
            raise CliError("config", "config.quantizer.levels: expected an integer in [1, 15]")
        qspec = quantizer.design(
            q["levels"],
            uniform=bool(q.get("uniform", False)),
            n=int(q.get("samples", quantizer.DEFAULT_SAMPLES)),
            seed=int(q.get("seed", quantizer.DEFAULT_SEED)),
        )
    elif q is not None:
        raise CliError("config", "config.quantizer: expected a path, a design object or null")

    run_dir = doc.get("run_dir", "runs/" + network.name)
    run_dir = _resolve(run_root(), run_dir)
    return {"doc": doc, "network": network, "train": train_cfg, "dataset": dataset, "quantizer": qspec, "run_dir": run_dir}


def _load_data(desc: dict, stats=None):
    try:
        return data.load_dataset(desc, stats)
    except data.DataError as exc:
        raise CliError("data", str(exc)) from None
    except (OSError, TypeError) as exc:
        raise CliError("data", f"dataset: {exc}") from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_design_quantizer(args) -> int:
    _check_levels(args.levels)
    _check_samples(args.samples)
    spec = quantizer.design(args.levels, uniform=args.uniform, n=args.samples, seed=args.seed)
    if args.out:
        _write_text(Path(args.out), spec.to_json())
    _print_spec(spec)
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    train_cfg = cfg["train"]
    if args.deterministic:
        train_cfg.deterministic = True
    train_set, test_set = _load_data(cfg["dataset"])
    run_dir = cfg["run_dir"]
    resume = None
    if args.resume:
        resume = _load_checkpoint(args.resume)
    _write_text(run_dir / "config.json", json.dumps(cfg["doc"], indent=2, sort_keys=True) + "\n")
    try:
        result = trainer.train(
            cfg["network"],
            cfg["quantizer"],
            train_set,
            test_set,
            train_cfg,
            run_dir=run_dir,
            resume=resume,
            meta={"dataset": cfg["dataset"]},
        )
    except trainer.CheckpointError as exc:
        raise CliError("checkpoint", str(exc)) from None
    except trainer.TrainingDiverged as exc:
        raise CliError("diverged", str(exc)) from None
    last = result.last("test")
    top5 = "" if last["top5"] is None else f" top5={last['top5']:.4f}"
    print(f"run_dir={run_dir} iter={last['iter']} test_loss={last['loss']:.6f} top1={last['top1']:.4f}{top5}")
    return 0


def _load_checkpoint(path) -> trainer.Checkpoint:
    try:
        return trainer.Checkpoint.load(path)
    except OSError as exc:
        raise CliError("io", f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    except trainer.CheckpointError as exc:
        raise CliError("checkpoint", f"{path}: {exc}") from None


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    if args.dataset:
        try:
            desc = data.detect_dataset(args.dataset)
        except (data.DataError, OSError, json.JSONDecodeError) as exc:
            raise CliError("data", f"--dataset: {exc}") from None
    elif "dataset" in ckpt.meta:
        desc = ckpt.meta["dataset"]
    else:
        raise CliError("usage", "--dataset is required: the checkpoint does not record one")
    norm = ckpt.meta.get("normalization")
    stats = None
    if norm is not None:
        stats = (np.asarray(norm["mean"], np.float32), np.asarray(norm["std"], np.float32))
    train_set, test_set = _load_data(desc, stats)
    dataset = train_set if args.split == "train" else test_set
    try:
        res = trainer.evaluate_checkpoint(ckpt, dataset, packed=args.packed)
    except ValueError as exc:
        raise CliError("data", str(exc)) from None
    top5 = "" if res["top5"] is None else f" top5={res['top5']:.4f}"
    print(f"split={args.split} n={len(dataset)} loss={res['loss']:.6f} top1={res['top1']:.4f}{top5}")
    return 0


def cmd_bench(args) -> int:
    if args.min_size < 1 or args.min_size > args.max_size:
        raise CliError("usage", f"need 1 <= --min-size <= --max-size, got {args.min_size} > {args.max_size}")
    sizes = []
    n = args.min_size
    while n <= args.max_size:
        sizes.append(n)
        n *= 2
    if sizes[-1] != args.max_size:
        sizes.append(args.max_size)
    rows = bitkernels.bench_kernels(sizes, seed=args.seed, min_time=args.min_time)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        bitkernels.write_bench_csv(rows, out)
    except OSError as exc:
        raise CliError("io", f"cannot write {out}: {exc.strerror or exc}") from None
    for r in rows:
        print(f"size={r['size']} path={r['path']} ns_per_call={r['ns_per_call']} gops={r['gops']}")
    return 0


TABLE_FIELDS = ("m", "uniform", "delta", "mse", "iterations", "levels", "thresholds")


def cmd_export_tables(args) -> int:
    _check_samples(args.samples)
    for m in args.levels:
        _check_levels(m)
    out = Path(args.out)
    lines = [",".join(TABLE_FIELDS)]
    kinds = {"both": (False, True), "uniform": (True,), "nonuniform": (False,)}[args.kind]
    for m in args.levels:
        for uniform in kinds:
            spec = quantizer.design(m, uniform=uniform, n=args.samples, seed=args.seed)
            tag = "uniform" if uniform else "nonuniform"
            _write_text(out / f"hwgq_m{m}_{tag}.json", spec.to_json())
            lines.append(
                ",".join(
                    [
                        str(m),
                        str(int(uniform)),
                        "%.17g" % spec.delta if uniform else "",
                        "%.17g" % spec.mse,
                        str(spec.iterations),
                        " ".join("%.17g" % v for v in spec.levels),
                        " ".join("%.17g" % v for v in spec.thresholds[:-1]),
                    ]
                )
            )
            print(f"m={m:2d} {tag:10s} mse={spec.mse:.9f} levels={_fmt_list(spec.levels)}")
    _write_text(out / "tables.csv", "\n".join(lines) + "\n")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hwgq", description="Half-wave Gaussian quantized networks.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    d = sub.add_parser("design-quantizer", help="design an MSE-optimal half-wave quantizer")
    d.add_argument("--levels", type=int, required=True, help="number of positive levels m (1..15)")
    kind = d.add_mutually_exclusive_group()
    kind.add_argument("--uniform", dest="uniform", action="store_true", help="equally spaced levels")
    kind.add_argument("--nonuniform", dest="uniform", action="store_false", help="Lloyd levels (default)")
    d.add_argument("--samples", type=int, default=quantizer.DEFAULT_SAMPLES)
    d.add_argument("--seed", type=int, default=quantizer.DEFAULT_SEED)
    d.add_argument("--out", help="write the quantizer table (JSON) here")
    d.set_defaults(func=cmd_design_quantizer, uniform=False)

    t = sub.add_parser("train", help="train a network from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint of the same config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="dataset directory or descriptor JSON (default: the one recorded in the checkpoint)")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--packed", action="store_true", help="use bit-packed kernels where the quantizer allows")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="benchmark float vs packed +-1 dot products")
    b.add_argument("--min-size", type=int, default=64)
    b.add_argument("--max-size", type=int, default=65536)
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--min-time", type=float, default=0.05, help="seconds of timing per row")
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("export-tables", help="design a set of quantizers and write them with a summary CSV")
    x.add_argument("--levels", type=int, nargs="+", default=[1, 2, 3, 7, 15])
    x.add_argument("--kind", choices=("both", "uniform", "nonuniform"), default="both")
    x.add_argument("--samples", type=int, default=quantizer.DEFAULT_SAMPLES)
    x.add_argument("--seed", type=int, default=quantizer.DEFAULT_SEED)
    x.add_argument("--out", required=True, help="output directory")
    x.set_defaults(func=cmd_export_tables)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        category, message = exc.category, str(exc)
    except KeyboardInterrupt:
        category, message = "internal", "interrupted"
    except Exception as exc:  # last resort: still one parsable line
        category, message = "internal", f"{type(exc).__name__}: {exc}"
    message = " ".join(message.split())
    print(f"hwgq: error[{category}]: {message}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
