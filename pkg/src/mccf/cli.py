"""Command-line entry point: ``mccf <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or contract error,
3 numeric failure.  Results go to files or stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import MccfConfig, from_plain, load_config, to_plain
from .data import Vocab, WideScaler, load_dataset, save_dataset
from .errors import MccfError, NumericError
from .gradcheck import format_table, run_gradcheck
from .metrics import MetricsReport
from .model import ModelConfig, load_params, params_to_bytes
from .synth import generate_dataset, validate_statistics
from .train import VARIANTS, ablation_run, evaluate, pca_export, prepare, run_experiment

log = logging.getLogger("mccf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
STATS_TOLERANCE = 0.02


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- file helpers


def atomic_write(path: Path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_files(directory: Path) -> list[Path]:
    return [Path(directory) / n for n in ("clicks.ndjson", "nodes.csv", "edges.csv")]


def manifest_path(out: Path) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def write_manifest(out: Path, command: str, argv: Sequence[str], cfg: MccfConfig, seeds: list[int],
                   inputs: Sequence[Path], outputs: Sequence[Path], started: float) -> Path:
    doc = {
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "seeds": seeds,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
        "outputs": [str(p) for p in outputs],
    }
    path = manifest_path(out)
    atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def meta_path(model: Path) -> Path:
    return Path(model).with_name(Path(model).name + ".meta.json")


# ---------------------------------------------------------------- arguments


def _add(p: argparse.ArgumentParser, *flags: str) -> None:
    flag_args = {
        "config": dict(metavar="PATH", help="JSON config with generator/model/train sections"),
        "data": dict(metavar="DIR", help="dataset directory (clicks.ndjson, nodes.csv, edges.csv)"),
        "model": dict(metavar="PATH", help="model file written by train"),
        "seed": dict(metavar="U64", type=int, help="override the seed from the config"),
        "runs": dict(metavar="N", type=int, help="number of training runs (seeds seed..seed+N-1)"),
        "variant": dict(metavar="NAME", choices=tuple(VARIANTS), help=f"one of {', '.join(VARIANTS)}"),
        "threshold": dict(metavar="F", type=float, help="decision threshold on the fraud probability"),
    }
    for f in flags:
        if f == "print-config":
            p.add_argument("--print-config", action="store_true",
                           help="print the resolved config as JSON and exit")
        else:
            p.add_argument(f"--{f}", **flag_args[f])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mccf", description="Multimodal contrastive click-fraud detector.")
    parser.add_argument("--version", action="version", version=f"mccf {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic click log and media graph")
    _add(p, "config", "seed", "print-config")
    p.add_argument("--out", metavar="DIR", help="output directory")

    p = sub.add_parser("train", help="train, evaluate on the held-out split, save the first run")
    _add(p, "config", "data", "seed", "runs", "variant", "threshold", "print-config")
    p.add_argument("--out", metavar="PATH", help="model file; metrics.json goes next to it")

    p = sub.add_parser("eval", help="score a saved model on the held-out split")
    _add(p, "config", "data", "model", "threshold", "print-config")
    p.add_argument("--out", metavar="PATH", help="metrics JSON file (default: stdout only)")

    p = sub.add_parser("ablate", help="train every ablation variant and compare with full")
    _add(p, "config", "data", "seed", "runs", "threshold", "print-config")
    p.add_argument("--out", metavar="PATH", help="ablation JSON file")

    p = sub.add_parser("project", help="export 2-d PCA of inputs and hidden layers to CSV")
    _add(p, "config", "data", "seed", "print-config")
    p.add_argument("--out", metavar="PATH", help="CSV file with header pc1,pc2,label,source")

    p = sub.add_parser("gradcheck", help="compare analytic gradients with central differences")
    _add(p, "seed")

    p = sub.add_parser("validate-stats", help="compare class statistics with the generator targets")
    _add(p, "config", "data", "print-config")
    return parser


def _require(args, *names: str) -> None:
    for n in names:
        if getattr(args, n.replace("-", "_"), None) is None:
            raise UsageError(f"mccf {args.command}: --{n} is required")


def _resolve_config(args) -> MccfConfig:
    cfg = load_config(getattr(args, "config", None))
    tr = cfg.train
    if getattr(args, "seed", None) is not None:
        if args.command == "gen":
            cfg.generator.seed = args.seed
        tr = replace(tr, seed=args.seed)
    if getattr(args, "runs", None) is not None:
        tr = replace(tr, runs=args.runs)
    if getattr(args, "variant", None) is not None:
        tr = replace(tr, variant=args.variant)
    if getattr(args, "threshold", None) is not None:
        tr = replace(tr, threshold=args.threshold)
    cfg.train = tr
    return cfg.validate()


# ---------------------------------------------------------------- commands


def _load_prepared(cfg: MccfConfig, data: str, vocab: Vocab | None = None,
                   scaler: WideScaler | None = None, model_cfg: ModelConfig | None = None):
    records, graph = load_dataset(data, cfg.model.wide_dim)
    return prepare(records, graph, model_cfg or cfg.model, cfg.train.test_fraction, vocab, scaler)


def cmd_gen(args, cfg: MccfConfig, argv, started) -> int:
    _require(args, "out")
    records, graph = generate_dataset(cfg.generator)
    out = Path(args.out)
    paths = save_dataset(out, records, graph)
    write_manifest(out, "gen", argv, cfg, [cfg.generator.seed], [], paths, started)
    log.info("wrote %d clicks and %d media nodes to %s", len(records), len(graph), out)
    return EXIT_OK


def cmd_train(args, cfg: MccfConfig, argv, started) -> int:
    _require(args, "data", "out")
    prep = _load_prepared(cfg, args.data)
    report, params = run_experiment(prep, cfg.train)
    out = Path(args.out)
    atomic_write(out, params_to_bytes(params))
    meta = {"model_config": to_plain(prep.model_config), "vocab": prep.vocab.to_dict(),
            "scaler": prep.scaler.to_dict(), "variant": cfg.train.variant}
    atomic_write(meta_path(out), dump_json(meta))
    metrics = out.parent / "metrics.json"
    atomic_write(metrics, dump_json(report.to_dict()))
    seeds = [cfg.train.seed + i for i in range(cfg.train.runs)]
    write_manifest(out, "train", argv, cfg, seeds, dataset_files(args.data),
                   [out, meta_path(out), metrics], started)
    print(dump_json({"mean": report.mean, "std": report.std}), end="")
    return EXIT_OK


def cmd_eval(args, cfg: MccfConfig, argv, started) -> int:
    _require(args, "data", "model")
    meta = json.loads(meta_path(args.model).read_text())
    model_cfg = from_plain(ModelConfig, meta["model_config"], "model_config")
    prep = _load_prepared(cfg, args.data, Vocab.from_dict(meta["vocab"]),
                          WideScaler.from_dict(meta["scaler"]), model_cfg)
    params = load_params(args.model, prep.model_config)
    variant = meta.get("variant", "full")
    row = evaluate(params, prep.test, prep.graph, cfg.train.threshold, VARIANTS[variant])
    text = dump_json(MetricsReport([row], variant).to_dict())
    if args.out:
        out = Path(args.out)
        atomic_write(out, text)
        write_manifest(out, "eval", argv, cfg, [], [Path(args.model), meta_path(args.model),
                                                    *dataset_files(args.data)], [out], started)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args, cfg: MccfConfig, argv, started) -> int:
    _require(args, "data", "out")
    prep = _load_prepared(cfg, args.data)
    table = ablation_run(prep, cfg.train)
    out = Path(args.out)
    atomic_write(out, dump_json(table.to_dict()))
    seeds = [cfg.train.seed + i for i in range(cfg.train.runs)]
    write_manifest(out, "ablate", argv, cfg, seeds, dataset_files(args.data), [out], started)
    for v, rep in table.reports.items():
        auc = rep.mean["auc"]
        print(f"{v:6s} auc={'n/a' if auc is None else f'{auc:.4f}'} f1={rep.mean['f1']:.4f}")
    return EXIT_OK


def cmd_project(args, cfg: MccfConfig, argv, started) -> int:
    _require(args, "data", "out")
    prep = _load_prepared(cfg, args.data)
    rows = pca_export(prep, cfg.train)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pc1", "pc2", "label", "source"])
    for a, b, y, src in rows:
        w.writerow([repr(a), repr(b), y, src])
    out = Path(args.out)
    atomic_write(out, buf.getvalue())
    write_manifest(out, "project", argv, cfg, [cfg.train.seed], dataset_files(args.data), [out], started)
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    results = run_gradcheck(seed=args.seed or 0)
    print(format_table(results))
    bad = [r.component for r in results if not r.ok]
    if bad:
        print(f"gradient check failed for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_validate_stats(args, cfg: MccfConfig, argv, started) -> int:
    if args.data:
        records, graph = load_dataset(args.data, cfg.generator.wide_dim)
    else:
        records, graph = generate_dataset(cfg.generator)
    report = validate_statistics(records, graph, cfg.generator.targets, cfg.generator.positive_rate,
                                 cfg.generator.pages[:3])
    print(dump_json(report.to_dict()), end="")
    if report.max_deviation() > STATS_TOLERANCE:
        print(f"max deviation {report.max_deviation():.4f} exceeds {STATS_TOLERANCE}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "project": cmd_project, "validate-stats": cmd_validate_stats}


def _setup_logging() -> None:
    level = os.environ.get("MCCF_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"MCCF_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def dispatch(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    started = time.time()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _setup_logging()
        if args.command == "gradcheck":
            return cmd_gradcheck(args, argv)
        cfg = _resolve_config(args)
        if args.print_config:
            print(cfg.to_json())
            return EXIT_OK
        return COMMANDS[args.command](args, cfg, argv, started)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # argparse exits 0 after --help / --version
        return int(e.code or 0)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MccfError, OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())
