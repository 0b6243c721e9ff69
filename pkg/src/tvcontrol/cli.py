"""Command-line entry point: ``tvcontrol {run,sweep,compare,validate}``."""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from pydantic import ValidationError

from .errors import ConfigurationError
from .harness import (
    default_config_path,
    export_csv,
    load_config,
    resolve_out_dir,
    run_experiment,
    sweep,
)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tvcontrol", description="Online control of time-varying linear systems.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and export CSVs")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--seed", type=int, help="override base_seed")
    run.add_argument("--runs", type=int, help="override the number of episodes")

    sw = sub.add_parser("sweep", help="run several horizons and fit regret scaling exponents")
    sw.add_argument("--config", required=True)
    sw.add_argument("--horizons", help="comma-separated horizons, e.g. 1000,2000,4000")
    sw.add_argument("--out")

    cmp_ = sub.add_parser("compare", help="baseline comparison (defaults to the shipped config)")
    cmp_.add_argument("--config", default=str(default_config_path()))
    cmp_.add_argument("--out")

    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("--config", required=True)
    return ap


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {loc}: {e['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def _horizons(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"could not parse horizons {text!r}")
    if not values:
        raise ConfigurationError("no horizons given")
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok ({len(cfg.controllers)} controllers, mode {cfg.mode})")
            return 0
        updates = {}
        if getattr(args, "seed", None) is not None:
            updates["base_seed"] = args.seed
        if getattr(args, "runs", None) is not None:
            if args.runs < 1:
                raise ConfigurationError("--runs must be at least 1")
            updates["runs"] = args.runs
        if updates:
            cfg = cfg.model_validate({**cfg.model_dump(), **updates})
        out = resolve_out_dir(args.out, cfg)
        if args.command == "sweep":
            horizons = _horizons(args.horizons) if args.horizons else cfg.horizons
            result = sweep(cfg, horizons) if horizons else None
            files = export_csv(result, out)
            if result is not None:
                for name, fit in result.scaling.items():
                    if fit is None:
                        print(f"{name}: scaling slope unavailable")
                    else:
                        print(f"{name}: slope {fit.slope:.4f} (stderr {fit.stderr:.4f})")
        else:
            result = run_experiment(cfg)
            files = export_csv(result, out)
            for name, agg in result.controllers.items():
                print(f"{name}: final regret mean {agg.final_regrets.mean():.6g}")
        print(f"wrote {len(files)} files to {out}")
        return 0
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {args.config}: {_format_validation(exc)}", file=sys.stderr)
        return 1
    except (ConfigurationError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
