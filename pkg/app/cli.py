# app/cli.py
# python -m app.cli <subcommand> --config <yaml> --seed <int> --out <dir>
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import settings
from .errors import ConfigurationError, StageError, ToolkitError
from .harness import (
    METHODS,
    Pipeline,
    analyze_selection,
    load_experiment_config,
    read_metrics_csv,
    run_pipeline,
)
from .logging import attach_run_log, detach_run_logs, setup_logging

logger = logging.getLogger(__name__)

COMMANDS = ("train-task", "train-protect", "train-osse", "adapt", "eval", "analyze", "report", "serve")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.cli", description="Protective policy transfer experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "report", help="experiment YAML (path or preset name)")
        p.add_argument("--seed", type=int, default=None, help="run seed (default: first seed in the config)")
        p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
        if name in ("adapt", "eval", "analyze", "serve"):
            p.add_argument("--method", choices=METHODS, default=None)
        if name == "analyze":
            p.add_argument("--episodes", type=int, default=5)
        if name == "serve":
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int, default=8000)
    return parser


def _report(out: Path) -> int:
    from .report import emit_report

    rows = []
    for path in sorted(out.glob("seed_*/metrics_*.csv")):
        rows += read_metrics_csv(path)
    files = emit_report(rows, out / "report")
    print(files.table_md.read_text(encoding="utf-8"))
    return 0


def run(args: argparse.Namespace) -> int:
    if args.command == "report":
        return _report(Path(args.out or settings.OUTPUT_DIR))

    config = load_experiment_config(args.config)
    seed = config.seeds[0] if args.seed is None else args.seed
    out = Path(args.out or config.output_dir)
    method = getattr(args, "method", None) or config.method
    pipe = Pipeline(config, seed, out)
    if args.command != "serve":
        attach_run_log(pipe.dir)

    if args.command == "train-task":
        pipe.task_dr_re() if method == "dr_re" else pipe.task()
    elif args.command == "train-protect":
        pipe.protect()
    elif args.command == "train-osse":
        pipe.osse()
    elif args.command == "adapt":
        if method in ("dr", "dr_re"):
            logger.info("method %s runs without adaptation", method)
            return 0
        for i, params in enumerate(config.targets()):
            record = pipe.adapt(method, i, params)
            print(f"target {i}: kappa_task={record.thresholds.kappa_task:.3f} "
                  f"kappa_protect={record.thresholds.kappa_protect:.3f} unsafe_trials={record.unsafe_trials}")
    elif args.command == "eval":
        rows = run_pipeline(config.model_copy(update={"method": method}), seed, out)
        for r in rows:
            print(f"{r.method} seed={r.seed} target={r.target_value} return={r.mean_return:.2f} "
                  f"length={r.normalized_length:.3f} unsafe_trials={r.unsafe_trials}")
    elif args.command == "analyze":
        result = analyze_selection(pipe, method, args.episodes)
        for fw in result.ranked[:5]:
            print(f"{fw.name}: {fw.weight:+.4f}")
    elif args.command == "serve":
        import uvicorn

        from .registry import SERVABLE_METHODS

        if method not in SERVABLE_METHODS:
            raise ConfigurationError(f"method '{method}' cannot be served; choose one of {', '.join(SERVABLE_METHODS)}")
        settings.CHECKPOINT_DIR = str(pipe.dir)
        settings.SERVE_METHOD = method
        uvicorn.run("app.main:app", host=args.host, port=args.port)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging(settings.LOG_LEVEL)
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except StageError as e:
        print(str(e), file=sys.stderr)
        return 2
    except ToolkitError as e:
        print(f"[{args.command}] {e}", file=sys.stderr)
        return 2
    finally:
        detach_run_logs()


if __name__ == "__main__":
    sys.exit(main())
