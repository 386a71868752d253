"""fullnorm command line interface."""

# Copyright 2024, fullnorm contributors.

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License

import argparse
import logging
import pathlib
import sys
import uuid
from typing import Any, Mapping, MutableMapping, Sequence

import structlog

from . import (
    __version__,
    config,
    data,
    exceptions,
    harness,
    serializers,
    verification,
)

SETTINGS = config.settings

GENERATORS = ("toy3", "large_variation", "gaussian_mixture")

logger = structlog.get_logger(__name__)


def add_run_flag(
    logger: logging.Logger, method_name: str, event_dict: MutableMapping[str, Any]
) -> Mapping[str, Any]:
    """Add run flag to log message."""
    if "run_id" in event_dict:
        event_dict["run"] = True
    return event_dict


def configure_logging() -> None:
    level = logging.getLevelName(SETTINGS.log_level.upper())
    if not isinstance(level, int):
        level = logging.INFO
    renderer: Any = (
        structlog.processors.JSONRenderer()
        if SETTINGS.log_format == "json"
        else structlog.dev.ConsoleRenderer()
    )
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            add_run_flag,
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def run_command(args: argparse.Namespace) -> int:
    cfg = config.load_experiment_config(args.config)
    result = harness.run_experiment(cfg, output=args.out)
    print(result.csv_path)
    return exceptions.EXIT_OK


def reproduce_command(args: argparse.Namespace) -> int:
    results = harness.reproduce(args.recipe, out_dir=args.out, cap=args.cap)
    for result in results.values():
        print(result.csv_path)
    return exceptions.EXIT_OK


def verify_command(args: argparse.Namespace) -> int:
    report = verification.verify(
        verification.VerifyKind(args.kind),
        tol=args.tol,
        gamma=args.gamma,
        alpha_exp=args.alpha_exp,
        L_g=args.lg,
        iterations=args.iterations,
        out_dir=args.out,
    )
    print(report.model_dump_json(indent=2))
    if not report.passed:
        failed = [assertion.name for assertion in report.assertions if not assertion.passed]
        raise exceptions.VerificationFailed(detail="; ".join(failed) or "no assertion ran")
    return exceptions.EXIT_OK


def gen_data_command(args: argparse.Namespace) -> int:
    out = pathlib.Path(args.out or f"{args.generator}.fnds")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.generator == "toy3":
        splits = [(out, data.gen_toy3())]
    else:
        if args.generator == "large_variation":
            train, test = data.gen_large_variation(seed=args.seed)
        else:
            train, test = data.gen_gaussian_mixture(seed=args.seed)
        splits = [(out, train), (out.with_name(f"{out.stem}.test{out.suffix}"), test)]
    for path, ds in splits:
        serializers.dump_dataset(ds, path)
        logger.info("dataset written", path=str(path), samples=ds.n_samples)
        print(path)
    return exceptions.EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fullnorm",
        description="Batch and full normalization experiments.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="train one experiment configuration")
    run.add_argument("config", help="flat key = value configuration file")
    run.add_argument("--out", default=None, help="metrics CSV path")
    run.set_defaults(handler=run_command)

    reproduce = commands.add_parser("reproduce", help="run a named recipe")
    reproduce.add_argument("recipe", help=f"one of {', '.join(harness.RECIPES)}")
    reproduce.add_argument("--out", default=None, help="output directory")
    reproduce.add_argument("--cap", type=int, default=None, help="sample cap")
    reproduce.set_defaults(handler=reproduce_command)

    verify = commands.add_parser("verify", help="run property checks")
    verify.add_argument("kind", choices=[kind.value for kind in verification.VerifyKind])
    verify.add_argument("--tol", type=float, default=None)
    verify.add_argument("--gamma", type=float, default=None)
    verify.add_argument("--alpha-exp", type=float, default=None)
    verify.add_argument("--lg", type=float, default=1.0)
    verify.add_argument("--iterations", type=int, default=None)
    verify.add_argument("--out", default=None, help="output directory for rates")
    verify.set_defaults(handler=verify_command)

    gen_data = commands.add_parser("gen-data", help="write a synthetic dataset")
    gen_data.add_argument("generator", choices=GENERATORS)
    gen_data.add_argument("--seed", type=int, default=0)
    gen_data.add_argument("--out", default=None, help="dataset file path")
    gen_data.set_defaults(handler=gen_data_command)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    structlog.contextvars.clear_contextvars()
    structlog.contextvars.bind_contextvars(run_id=str(uuid.uuid4()), command=args.command)
    try:
        code: int = args.handler(args)
    except exceptions.FullNormError as exc:
        code = exceptions.exception_handler(exc)
    except Exception as exc:
        code = exceptions.general_exception_handler(exc)
    return code


if __name__ == "__main__":
    sys.exit(main())
