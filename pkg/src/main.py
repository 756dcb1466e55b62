"""Application entry point."""

import sys
from pathlib import Path
from typing import Sequence

_src_path = Path(__file__).parent
if str(_src_path) not in sys.path:
    sys.path.insert(0, str(_src_path))

from cli.commands import COMMANDS, EXPERIMENT_COMMANDS  # noqa: E402
from cli.parser import build_parser, run_config_from_args  # noqa: E402
from core.config import RunConfig, config  # noqa: E402
from core.error_handler import ErrorClassifier  # noqa: E402
from core.experiment import LOG_PATH  # noqa: E402
from utils.logger import get_logger, setup_logger  # noqa: E402

logger = get_logger(__name__)


def _report(exception: BaseException) -> int:
    error = ErrorClassifier.classify(exception)
    logger.debug("Failure details", exc_info=exception)
    print(error.one_line(), file=sys.stderr)
    return error.exit_code


def main(argv: Sequence[str] | None = None) -> int:
    """
    Main application entry point.

    Args:
        argv: Command-line arguments without the program name (default: sys.argv[1:])

    Returns:
        Exit code: 0 success, 1 usage, 2 data error, 3 training failure
    """
    try:
        args = build_parser().parse_args(argv)
        run_config: RunConfig | None = None
        if args.command in EXPERIMENT_COMMANDS:
            run_config = run_config_from_args(args)
    except Exception as e:
        return _report(e)

    log_file = None
    run_dir = getattr(args, "run_dir", None)
    if run_config is not None or (run_dir is not None and Path(run_dir).is_dir()):
        log_file = Path(run_dir) / LOG_PATH
    setup_logger(level=args.log_level, log_file=log_file)

    logger.info(f"{config.app_name} v{config.version}: {args.command}")
    try:
        exit_code = COMMANDS[args.command](args, run_config)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return _report(e)
    logger.info(f"{args.command} finished")
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
