import os
import sys
import logging
import argparse
from typing import List, Optional

# Add project root to Python path
# This ensures that imports like 'backend.main' work correctly
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from backend.components.config import PROFILES, load_config
from backend.components.errors import TraderError
from backend.main import STRATEGY_NAMES, TradingResearchBackend, run_seeds

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
EXIT_OK, EXIT_UNEXPECTED, EXIT_TRADER_ERROR = 0, 1, 2


def _seed_list(text: str) -> List[int]:
    """Parses '42,43' or '42-46'."""
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError(f"no seeds in {text!r}")
    return seeds


def _strategy_name(text: str) -> str:
    if text in STRATEGY_NAMES or text == "all" or (text.startswith("ma_") and text[3:].isdigit()):
        return text
    raise argparse.ArgumentTypeError(f"unknown strategy {text!r}; choose from {', '.join(STRATEGY_NAMES)}, ma_<T> or all")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON5 experiment configuration")
    common.add_argument("--profile", choices=sorted(PROFILES), help="desk (4 assets, 100k steps) or paper (all assets, 1M steps)")
    common.add_argument("--seed", type=int, help="training seed (overrides the config)")
    common.add_argument("--out", help="run directory (overrides the config and TRADER_OUTPUT_DIR)")
    common.add_argument("--log-level", default=os.getenv("TRADER_LOG_LEVEL", "INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seeds", type=_seed_list, help="several seeds, e.g. 42-46 or 42,44")
    seeded.add_argument("--parallel-seeds", action="store_true", help="run --seeds in separate processes")

    parser = argparse.ArgumentParser(prog="trader", description="Multi-indicator actor-critic trading research pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="load and clean raw OHLCV data")
    sub.add_parser("features", parents=[common], help="compute the indicator feature tensor")
    sub.add_parser("train", parents=[common, seeded], help="train the actor-critic agent")
    backtest = sub.add_parser("backtest", parents=[common, seeded], help="evaluate a strategy on the test range")
    backtest.add_argument("--strategy", type=_strategy_name, default="a2c",
                          help="a2c, random, ma_<T>, index_tracking, arima, hold, or all (every configured strategy)")
    backtest.add_argument("--checkpoint", help="checkpoint for the a2c strategy")
    sub.add_parser("report", parents=[common], help="merge backtests into the comparison table")
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, stream=sys.stderr, force=True)


def run(args: argparse.Namespace) -> None:
    config = load_config(args.config, profile=args.profile, seed=args.seed, output_dir=args.out)
    seeds = getattr(args, "seeds", None)
    if args.command in ("train", "backtest") and seeds and (args.command == "train" or args.strategy == "a2c"):
        results = run_seeds(config, args.command, seeds, args.parallel_seeds,
                            getattr(args, "strategy", "a2c"), getattr(args, "checkpoint", None))
        for seed, result in results.items():
            print(f"seed {seed}: {result}")
        return

    backend = TradingResearchBackend(config)
    if args.command == "ingest":
        manifest = backend.cmd_ingest()
        print(f"ingested {manifest['n_dates']} dates, fingerprint {manifest['data_fingerprint']}")
    elif args.command == "features":
        manifest = backend.cmd_features()
        print(f"{len(manifest['feature_names'])} features, {manifest['warmup_dropped']} warmup dates dropped")
    elif args.command == "train":
        summary = backend.cmd_train()
        print(f"{summary['updates']} updates, {summary['timesteps']} steps, model {summary['model']}")
    elif args.command == "backtest":
        rows = backend.cmd_backtest_all() if args.strategy == "all" else backend.cmd_backtest(args.strategy, args.checkpoint)
        for row in rows:
            print(",".join(str(row[k]) for k in row))
    elif args.command == "report":
        print(backend.cmd_report().to_csv(index=False, lineterminator="\n"), end="")


def _one_line(error: Exception) -> str:
    return " ".join(str(error).split())


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point. Exit code 0 on success, 2 with `ErrorClass: message` on a
    known failure, 1 on anything unexpected.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        run(args)
    except TraderError as e:
        print(f"{e.error_class}: {_one_line(e)}", file=sys.stderr)
        return EXIT_TRADER_ERROR
    except Exception as e:
        logging.getLogger(__name__).debug("Unexpected failure", exc_info=True)
        print(f"{type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
