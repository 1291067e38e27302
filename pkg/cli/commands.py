"""
Commands - Argument parser and subcommand dispatch
"""
import argparse
import logging
import sys

from cli.pipeline import (RECOVERY_CONDITIONS, STUDENT_CONDITIONS, RunContext, full_run, stage_analyze,
                          stage_evaluate, stage_finetune, stage_generate, stage_pretrain, stage_recover,
                          stage_steer, stage_verbalize)
from cli.report import stage_report
from config.config_manager import PRESET_KEYS, ConfigManager
from core.datagen import CONDITIONS
from core.errors import UsageError

logger = logging.getLogger(__name__)

SUBCOMMANDS = {
    "pretrain": "build the corpus and vocabulary, pretrain and sanity-check the base model",
    "steer": "train the steering vector and choose the generation alpha per (bias, seed)",
    "generate": "generate and filter number datasets per condition",
    "finetune": "LoRA fine-tune a student per condition",
    "evaluate": "pick rate / log-probability condition tables",
    "analyze": "per-layer alignment profiles, skyline and window migration",
    "recover": "recover a steering vector from generated data alone",
    "verbalize": "alpha sweep over the recovered vector and score the transcript",
    "report": "tables and SVG plots over everything in the run directory",
    "full-run": "every stage for the (bias, seed) matrix, then the report",
}

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class LabArgumentParser(argparse.ArgumentParser):
    """Parse errors become UsageError so they map to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    common = LabArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="experiment config JSON (default: <config-dir>/experiment_config.json)")
    common.add_argument("--config-dir", default="config", help="directory holding biases.json and prompt_pools.json")
    common.add_argument("--preset", choices=PRESET_KEYS, default=None, help="overlay a named preset from the config")
    common.add_argument("--seed", type=int, action="append", help="seed to run (repeatable; default: config run.seeds)")
    common.add_argument("--bias", action="append", help="bias label or slug (repeatable; default: config run.biases)")
    common.add_argument("--condition", action="append", choices=CONDITIONS, help="condition (repeatable)")
    common.add_argument("--out", default=None, help="run directory (default: config run.out_dir)")
    common.add_argument("--force", action="store_true", help="resume over a run made with a different config")
    common.add_argument("--workers", type=int, default=None, help="processes for independent cells")
    common.add_argument("--no-progress", action="store_true", help="disable progress bars")
    common.add_argument("--log-level", default="INFO", choices=LOG_LEVELS)
    common.add_argument("--log-dir", default="logs")

    parser = LabArgumentParser(prog="subliminal-lab",
                               description="Desk-scale subliminal steering experiments on a toy transformer")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, text in SUBCOMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _cells(ctx, args):
    biases = args.bias or ctx.config.run.biases
    seeds = args.seed or ctx.config.run.seeds
    return [ctx.cell(ctx.bias(b), s) for b in biases for s in seeds]


def _conditions(args, ctx, allowed, default):
    chosen = args.condition or [c for c in default if c in ctx.config.run.conditions]
    bad = [c for c in chosen if c not in allowed]
    if bad:
        raise UsageError(f"{args.command} does not apply to condition(s) {bad}; allowed: {list(allowed)}")
    return chosen


def run_command(args):
    """Dispatch one parsed command; returns the process exit code"""
    manager = ConfigManager(args.config_dir)
    config = manager.experiment(args.config, preset=args.preset)
    if args.workers:
        config.run.workers = args.workers
    ctx = RunContext(config, manager.load_biases(), manager.load_prompt_pools(), out_dir=args.out,
                     force=args.force, show_progress=False if args.no_progress else None)
    logger.info(f"Command {args.command}: run directory {ctx.out_dir}")

    if args.command == "pretrain":
        stage_pretrain(ctx)
    elif args.command == "report":
        stage_report(ctx)
    elif args.command == "full-run":
        failures = full_run(ctx, args.bias or config.run.biases, args.seed or config.run.seeds,
                            workers=config.run.workers, log_level=args.log_level)
        return 2 if failures else 0
    else:
        for cell in _cells(ctx, args):
            ctx.manifest.add_cell(cell.rel_dir)
            if args.command == "steer":
                stage_steer(ctx, cell)
            elif args.command in ("generate", "finetune"):
                stage = stage_generate if args.command == "generate" else stage_finetune
                for condition in _conditions(args, ctx, STUDENT_CONDITIONS, STUDENT_CONDITIONS):
                    stage(ctx, cell, condition)
            elif args.command == "evaluate":
                stage_evaluate(ctx, cell)
            elif args.command == "analyze":
                stage_analyze(ctx, cell)
            elif args.command in ("recover", "verbalize"):
                stage = stage_recover if args.command == "recover" else stage_verbalize
                for condition in _conditions(args, ctx, RECOVERY_CONDITIONS, ("steered", "control")):
                    stage(ctx, cell, condition)
    logger.info(f"✓ {args.command} finished")
    return 0
