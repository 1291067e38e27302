"""
Main Application - Subliminal Steering Lab
Pretrain a toy transformer, plant steering-vector biases in a teacher, and
measure what a LoRA student picks up from the teacher's number sequences.
"""
import sys
import os
import logging
import logging.handlers
import queue
import traceback
from datetime import datetime

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from cli.commands import build_parser, run_command
from core.errors import LabError, UsageError

logger = logging.getLogger(__name__)


def setup_logging(log_dir="logs", level="INFO"):
    """
    File + console handlers behind a QueueListener so worker threads never
    block on log I/O. Returns the started listener.
    """
    os.makedirs(log_dir, exist_ok=True)
    log_filename = os.path.join(log_dir, f'subliminal_lab_{datetime.now().strftime("%Y%m%d")}.log')

    # Create handlers
    file_handler = logging.FileHandler(log_filename, encoding='utf-8')
    console_handler = logging.StreamHandler()

    # Create formatters
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    file_handler.setFormatter(formatter)
    console_handler.setFormatter(formatter)

    # Use QueueHandler for async logging
    log_queue = queue.Queue(-1)  # Unlimited queue
    queue_handler = logging.handlers.QueueHandler(log_queue)

    # QueueListener runs in separate thread
    listener = logging.handlers.QueueListener(
        log_queue,
        file_handler,
        console_handler,
        respect_handler_level=True
    )

    # Configure root logger
    logging.basicConfig(
        level=getattr(logging, level),
        handlers=[queue_handler],
        force=True
    )

    # Start the listener thread
    listener.start()

    logger.info(f"Logging initialized - Log file: {log_filename}")
    return listener


def main(argv=None):
    """Main entry point; returns 0 on success, 1 on usage/config errors, 2 on stage failures"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return UsageError.exit_code

    listener = setup_logging(args.log_dir, args.log_level)
    logger.info("=" * 60)
    logger.info(f"SUBLIMINAL STEERING LAB - {args.command}")
    logger.info("=" * 60)

    try:
        return_code = run_command(args)
    except LabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        logger.debug(traceback.format_exc())
        return_code = e.exit_code
    except Exception as e:
        logger.critical(f"Unhandled exception: {type(e).__name__}: {e}\n{traceback.format_exc()}")
        return_code = 2

    logger.info(f"Exited with code {return_code}")

    # Ensure listener stops
    listener.stop()

    return return_code


if __name__ == '__main__':
    sys.exit(main())
