"""
Command-line entry point for the D2HNet restoration pipeline.
"""
import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from d2hnet import config
from d2hnet.api.commands import setup_commands
from d2hnet.api.models import RunConfig, config_help, load_config
from d2hnet.utils.errors import InvariantError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _one_line(e: BaseException) -> str:
    return " ".join(str(e).split())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML run configuration (required except for selftest)")
    common.add_argument("--seed", type=int, default=None, help="Override the config seed")
    common.add_argument("--out", default=config.OUTPUT_DIR, help="Output directory")
    common.add_argument("--threads", type=int, default=None,
                        help="Worker threads (default: D2H_THREADS or 1)")

    parser = argparse.ArgumentParser(
        prog="d2hnet",
        description="Dual-exposure night image restoration: synthesis, training, inference and evaluation",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True
    setup_commands(subparsers, common)
    return parser


def _resolve_config(args: argparse.Namespace) -> Optional[RunConfig]:
    if args.config is None:
        if args.command not in ("selftest", "gradcheck"):
            raise ValueError(f"{args.command}: --config is required")
        cfg = None if args.seed is None else RunConfig(seed=args.seed)
        return cfg
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    try:
        if args.threads is None:
            args.threads = int(os.getenv("D2H_THREADS", str(config.THREADS)))
        args.threads = max(1, args.threads)
        cfg = _resolve_config(args)
        if cfg is not None:
            logger.info(f"{args.command}: config fingerprint {cfg.fingerprint()}, seed {cfg.seed}, "
                        f"{args.threads} thread(s)")
        with threadpool_limits(limits=1):
            return args.handler(args, cfg)
    except (ValueError, FileNotFoundError) as e:
        logger.debug("Input error", exc_info=True)
        print(f"error: {_one_line(e)}", file=sys.stderr)
        return 1
    except InvariantError as e:
        logger.debug("Invariant violation", exc_info=True)
        print(f"error: invariant violated: {_one_line(e)}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.debug("Internal error", exc_info=True)
        print(f"error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
