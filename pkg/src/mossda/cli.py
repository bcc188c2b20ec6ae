"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .datapipe import SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .encoders import load_checkpoint, read_checkpoint_manifest
from .errors import ConfigError, ContractError, DatasetError, PartitionError
from .eval import export_features, score
from .trainer import TrainConfig, predict, run_ablation, run_experiment, write_ablation_table

log = logging.getLogger("mossda")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2
HOME_ENV = "MOSSDA_HOME"
VALIDATION_ERRORS = (ConfigError, ContractError, DatasetError, PartitionError, FileNotFoundError, json.JSONDecodeError)


class ValidationFailure(Exception):
    pass


def work_dir() -> Path:
    """Root for outputs when --out is omitted: $MOSSDA_HOME or ./runs."""
    return Path(os.environ.get(HOME_ENV, "runs"))


def _read_json(path) -> dict:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def load_config(path, **overrides) -> TrainConfig:
    """Config file (flat JSON) with command-line overrides; missing keys take defaults."""
    data = _read_json(path) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def cmd_generate(args) -> int:
    spec = SyntheticSpec.from_dict(_read_json(args.spec_file))
    src, trg = generate_synthetic(spec)
    save_dataset(src, args.out_src)
    save_dataset(trg, args.out_trg)
    print(f"wrote {args.out_src} and {args.out_trg}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config, u=args.u, seed=args.seed, mode=args.mode)
    out = Path(args.out) if args.out else work_dir() / f"{config.mode}-{config.config_hash()}"
    result = run_experiment(config, args.src, args.trg, out, config_path=args.config)
    print(f"{result.scenario} mode={result.mode} accuracy={result.accuracy:.4f} macro_f1={result.macro_f1:.4f} -> {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = load_config(args.config, u=args.u)
    out = Path(args.out) if args.out else work_dir() / f"ablation-{config.config_hash()}"
    rows = run_ablation(config, args.src, args.trg, out, seeds=tuple(args.seeds))
    write_ablation_table(rows, out)
    for row in rows:
        if row["status"] == "ok":
            print(f"{row['label']:<22} acc={row['accuracy']:.4f} (diff {row['diff_accuracy']:+.4f}) "
                  f"f1={row['macro_f1']:.4f} (diff {row['diff_macro_f1']:+.4f})")
        else:
            print(f"{row['label']:<22} FAILED: {row['error']}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


def _load_matching(checkpoint, dataset_dir):
    manifest = read_checkpoint_manifest(checkpoint)
    ds = load_dataset(dataset_dir)
    bb = manifest["backbone"]
    want = (bb["in_channels"], bb["seq_len"], manifest["n_classes"])
    have = (ds.D, ds.T, ds.C)
    if want != have:
        raise ValidationFailure(f"checkpoint expects (D, T, C) = {want} but dataset has (D, T, C) = {have}")
    return load_checkpoint(checkpoint), ds


def cmd_eval(args) -> int:
    model, ds = _load_matching(args.checkpoint, args.dataset_dir)
    metrics = score(predict(model, ds.test_norm), ds.y_test, ds.C)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"accuracy={metrics['accuracy']:.4f} macro_f1={metrics['macro_f1']:.4f}")
    return EXIT_OK


def cmd_export_features(args) -> int:
    model, ds = _load_matching(args.checkpoint, args.dataset_dir)
    path = export_features(model, ds, args.out)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mossda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic source/target dataset pair")
    g.add_argument("spec_file")
    g.add_argument("out_src")
    g.add_argument("out_trg")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and evaluate one configuration")
    t.add_argument("config")
    t.add_argument("--src", required=True)
    t.add_argument("--trg", required=True)
    t.add_argument("--u", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--mode")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="proposed method plus four ablations")
    a.add_argument("config")
    a.add_argument("--src", required=True)
    a.add_argument("--trg", required=True)
    a.add_argument("--u", type=float)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset's test split")
    e.add_argument("checkpoint")
    e.add_argument("dataset_dir")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-features", help="dump backbone features of the test split")
    x.add_argument("checkpoint")
    x.add_argument("dataset_dir")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationFailure, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
