"""``denguenet <subcommand> --config <path> [--region <name>] [--force]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import STAGES, Pipeline, RunConfig, StageError, run_synth

SUBCOMMANDS = (*STAGES, "synth", "all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denguenet", description="Satellite-based dengue forecasting pipeline")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--region", help="restrict the run to one configured region")
    parser.add_argument("--force", action="store_true", help="overwrite artifacts made by a different config")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.subcommand
    try:
        config = RunConfig.from_file(args.config).only(args.region)
        if stage == "synth":
            run_synth(config)
        else:
            Pipeline(config, force=args.force).run(stage)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("denguenet").debug("traceback", exc_info=True)
        print(f"error [{stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
