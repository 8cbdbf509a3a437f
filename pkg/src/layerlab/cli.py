"""``layerlab`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import FORMATS, ExperimentConfig
from .errors import ConfigError, LayerLabError

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2, 3
SUBCOMMANDS = ("train", "surgery", "probe", "similarity", "early-exit", "report")

log = logging.getLogger("layerlab")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layerlab", description="Layer surgery, probing and similarity for tabular ICL models.")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    helps = {
        "train": "train a model on the synthetic prior and save a checkpoint",
        "surgery": "skip, swap and repeat grids",
        "probe": "per-layer probes and transfer matrices",
        "similarity": "cross-layer cosine similarity",
        "early-exit": "decode after every layer",
        "report": "every intervention listed in the config",
    }
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, help=helps[name])
        s.add_argument("--config", type=Path, help="YAML config file (all keys optional)")
        s.add_argument("--seed", type=int, help="global seed (overrides 'seed')")
        s.add_argument("--out", type=Path, help="output directory (overrides 'output_dir')")
        s.add_argument("--formats", help=f"comma-separated subset of {','.join(FORMATS)}")
        s.add_argument("--workers", type=int, help="parallel grid cells (overrides 'workers')")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key by dotted path, e.g. model.training.steps=500")
        s.add_argument("-q", "--quiet", action="store_true")
    return p


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.out is not None:
        out["output_dir"] = f"'{args.out}'"
    if args.formats is not None:
        out["formats"] = "[" + ",".join(f.strip() for f in args.formats.split(",") if f.strip()) + "]"
    if args.workers is not None:
        out["workers"] = str(args.workers)
    return out


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="layerlab: %(message)s")

    from .report import emit_report, ensure_writable
    from .runner import SUBCOMMAND_INTERVENTIONS, prepare_model, run_experiment

    try:
        cfg = ExperimentConfig.load(args.config, _overrides(args))
        out = ensure_writable(cfg.output_dir)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("output directory %s is not writable: %s", cfg.output_dir, exc)
        return EXIT_CONFIG

    try:
        model, training = prepare_model(cfg, out)
    except ConfigError as exc:
        log.error("startup error: %s", exc)
        return EXIT_CONFIG
    except (LayerLabError, OSError) as exc:
        log.error("fatal: %s", exc)
        return EXIT_FATAL
    if training.source == "trained":
        tail = training.losses[-50:]
        log.info("trained %d steps in %.1fs (mean loss of last %d steps %.4f)",
                 len(training.losses), training.seconds, len(tail), float(tail.mean()) if len(tail) else float("nan"))

    chosen = None if args.command == "report" else list(SUBCOMMAND_INTERVENTIONS[args.command])
    try:
        report = run_experiment(cfg, model, training, out, chosen)
        files = emit_report(report, out, cfg.formats, args.command)
    except (LayerLabError, OSError) as exc:
        log.error("fatal: %s", exc)
        return EXIT_FATAL

    log.info("%d datasets, mean baseline AUC %.4f, %d files in %s",
             len(report.datasets), report.mean_baseline_auc, len(files), out)
    for name, s in report.wtl.items():
        log.info("%-10s win %d / tie %d / loss %d", name, s.wins, s.ties, s.losses)
    if report.failures:
        log.warning("%d grid cells failed; see manifest.json", len(report.failures))
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
