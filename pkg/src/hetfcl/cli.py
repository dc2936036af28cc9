"""Command-line entry point.

Exit codes:
    0  success
    1  runtime failure during a command
    2  configuration or usage error
    3  dataset cache missing (run ``prepare-data`` first)
    4  bundles incompatible for a joint report
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config, parse_set, to_ini
from .data import DATASETS, DatasetMissingError, build_task_stream, load_dataset, partition_dirichlet, prepare_cache
from .metrics import IncompatibleBundlesError, render_report

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATASET, EXIT_INCOMPATIBLE = 0, 1, 2, 3, 4


def _overrides(args) -> dict[str, str]:
    sets = parse_set(getattr(args, "set", None))
    if args.seed is not None:
        sets.setdefault("seed", str(args.seed))
    return sets


def _config(args):
    return load_config(args.config, _overrides(args))


def _out_root(args, default: str) -> Path:
    return Path(args.out if args.out is not None else default)


def cmd_run(args) -> int:
    from .orchestrator import run_experiment

    cfg = _config(args)
    out = _out_root(args, cfg.out) / f"{cfg.strategy}_seed{cfg.seed}"
    bundle = run_experiment(cfg, out, log=lambda m: print(m, flush=True))
    final = bundle.final_forgetting()
    print(json.dumps({"bundle": str(out), "seed": cfg.seed, "final_accuracy": round(bundle.final_accuracy(), 4),
                      "final_forgetting": None if final is None else round(final, 4)}))
    return EXIT_OK


def cmd_inspect_partition(args) -> int:
    cfg = _config(args)
    train, test = load_dataset(cfg.data_root, cfg.dataset)
    stream = build_task_stream(train, cfg.num_tasks, cfg.seed, test=test, shuffle_classes=cfg.shuffle_classes)
    part = partition_dirichlet(stream, cfg.num_clients, cfg.gamma, cfg.seed)
    out = _out_root(args, cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"partition_seed{cfg.seed}.tsv"
    part.write_table(path)
    sys.stdout.write(path.read_text())
    return EXIT_OK


def cmd_train_fixture(args) -> int:
    from .generator.backends import train_toy_ddpm

    seed = args.seed if args.seed is not None else 0
    train, _ = load_dataset(args.data_root, args.dataset)
    backend = train_toy_ddpm(train.images, train.labels, args.epochs, seed,
                             log=lambda e, loss: print(f"epoch {e} loss {loss:.5f}", flush=True))
    out = _out_root(args, ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"toy_ddpm_{args.dataset}_e{args.epochs}_s{seed}.ckpt"
    digest = backend.save(path, {"dataset": args.dataset, "epochs": args.epochs, "seed": seed})
    print(json.dumps({"checkpoint": str(path), "sha256": digest, "seed": seed}))
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_root(args, "report")
    paths = render_report(args.bundles, out)
    sys.stdout.write(paths["table"].read_text())
    meta = {"bundles": [str(b) for b in args.bundles], "seed": args.seed}
    (out / "report.json").write_text(json.dumps(meta, indent=1))
    return EXIT_OK


def cmd_prepare_data(args) -> int:
    path = prepare_cache(args.data_root, args.dataset)
    print(json.dumps({"dataset": args.dataset, "path": str(path)}))
    return EXIT_OK


def cmd_show_config(args) -> int:
    sys.stdout.write(to_ini(_config(args)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetfcl", description="Data-free heterogeneous federated continual learning")
    p.add_argument("--seed", type=int, default=None, help="run seed (overrides the config file)")
    p.add_argument("--out", default=None, help="root directory for every output")
    sub = p.add_subparsers(dest="command", required=True)
    data_root = os.environ.get("HETFCL_DATA_ROOT", "data")

    def with_config(sp):
        sp.add_argument("--config", required=False, default=None, help="INI experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        return sp

    with_config(sub.add_parser("run", help="run one experiment and write a results bundle")).set_defaults(
        func=cmd_run)
    with_config(sub.add_parser("inspect-partition", help="print the client partition table")).set_defaults(
        func=cmd_inspect_partition)
    with_config(sub.add_parser("show-config", help="print the resolved config")).set_defaults(func=cmd_show_config)
    tf = sub.add_parser("train-fixture", help="train the toy conditional DDPM backend")
    tf.add_argument("--dataset", default="mnist", choices=DATASETS)
    tf.add_argument("--epochs", type=int, default=15)
    tf.add_argument("--data-root", default=data_root)
    tf.set_defaults(func=cmd_train_fixture)
    rp = sub.add_parser("report", help="compare results bundles")
    rp.add_argument("bundles", nargs="+")
    rp.set_defaults(func=cmd_report)
    pd = sub.add_parser("prepare-data", help="build the on-disk dataset cache")
    pd.add_argument("--dataset", default="mnist", choices=DATASETS)
    pd.add_argument("--data-root", default=data_root)
    pd.set_defaults(func=cmd_prepare_data)
    return p


def _fail(code: int, err: BaseException) -> int:
    print(json.dumps({"error": type(err).__name__, "message": str(err), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return args.func(args)
    except DatasetMissingError as e:
        return _fail(EXIT_DATASET, e)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, e)
    except IncompatibleBundlesError as e:
        return _fail(EXIT_INCOMPATIBLE, e)
    except Exception as e:
        cause = e.__cause__
        if isinstance(cause, DatasetMissingError):
            return _fail(EXIT_DATASET, cause)
        return _fail(EXIT_RUNTIME, e)


if __name__ == "__main__":
    sys.exit(main())
