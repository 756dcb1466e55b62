"""Argument parsing and conversion of flags into configuration objects."""

import argparse
from dataclasses import replace
from typing import NoReturn

from core.config import (
    EnsembleConfig,
    EnsembleVariant,
    LinkConfig,
    LinkKind,
    RunConfig,
    SynthConfig,
    config,
)
from core.error_handler import ParameterError

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


class _Parser(argparse.ArgumentParser):
    """Reports usage errors as ParameterError so they share the one-line error path."""

    def error(self, message: str) -> NoReturn:
        raise ParameterError(message)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--log-level",
        choices=LOG_LEVELS,
        default=config.log_level,
        help="console and file log level",
    )


def _add_experiment(parser: argparse.ArgumentParser) -> None:
    link = config.link
    ensemble = config.ensemble
    parser.add_argument("--dataset", required=True, help="dataset directory or manifest.json")
    parser.add_argument("--run-dir", required=True, help="run directory")
    parser.add_argument(
        "--ensemble",
        choices=[v.value for v in EnsembleVariant],
        default=ensemble.variant.value,
        help="teacher ensemble variant",
    )
    parser.add_argument(
        "--include-complex",
        action="store_true",
        help="add the AH and CH hyperedges to every candidate pool",
    )
    parser.add_argument(
        "--link", choices=[k.value for k in LinkKind], default=link.kind.value, help="link learner"
    )
    parser.add_argument("--patch-radius", type=int, default=link.patch_radius)
    parser.add_argument("--ridge-lambda", type=float, default=link.ridge_lambda)
    parser.add_argument(
        "--link-hidden", type=int, default=link.hidden_channels, help="tiny-conv feature maps"
    )
    parser.add_argument("--link-epochs", type=int, default=link.train.max_epochs)
    parser.add_argument("--link-lr", type=float, default=link.train.initial_learning_rate)
    parser.add_argument("--ensemble-epochs", type=int, default=ensemble.train.max_epochs)
    parser.add_argument("--ensemble-lr", type=float, default=ensemble.train.initial_learning_rate)
    parser.add_argument(
        "--patience",
        type=int,
        default=link.train.plateau_patience,
        help="epochs without improvement before the learning rate is halved",
    )
    parser.add_argument(
        "--validation-fraction",
        type=float,
        default=0.2,
        help="tail of the labeled months used to pick the best edge",
    )
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--jobs", type=int, default=1, help="maximum concurrent fits")
    parser.add_argument(
        "--force", action="store_true", help="discard stored phases and recompute everything"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog=config.app_name,
        description="Semi-supervised multi-task hypergraph learning on gridded layers.",
        formatter_class=_Formatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {config.version}")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = config.synth
    p = commands.add_parser(
        "synth", help="generate a synthetic dataset", formatter_class=_Formatter
    )
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.add_argument("--width", type=int, default=synth.width)
    p.add_argument("--height", type=int, default=synth.height)
    p.add_argument("--months", type=int, default=synth.months)
    p.add_argument("--inputs", type=int, default=synth.n_inputs, help="number of input layers")
    p.add_argument("--outputs", type=int, default=synth.n_outputs, help="number of output layers")
    p.add_argument("--latents", type=int, default=synth.n_latents, help="latent fields")
    p.add_argument("--period", type=int, default=synth.seasonal_period, help="seasonal period")
    p.add_argument("--drift", type=float, default=synth.drift_rate, help="drift rate per month")
    p.add_argument("--noise", type=float, default=synth.noise_sigma, help="noise sigma")
    p.add_argument(
        "--split",
        type=int,
        nargs=3,
        metavar=("LABELED", "TEST", "UNLABELED"),
        default=list(synth.split_ratio),
        help="split ratio",
    )
    p.add_argument("--start-year", type=int, default=synth.start_year)
    p.add_argument("--seed", type=int, default=synth.seed)

    p = commands.add_parser(
        "run", help="run the semi-supervised iterations", formatter_class=_Formatter
    )
    _add_common(p)
    _add_experiment(p)
    p.add_argument("--iterations", type=int, default=3, help="maximum number of iterations")
    p.add_argument(
        "--convergence-threshold",
        type=float,
        default=None,
        help="stop early when validation ARPI gains less than this (e.g. 0.1); off by default",
    )

    p = commands.add_parser("report", help="summary tables of a run", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--run-dir", required=True, help="run directory")

    p = commands.add_parser(
        "eval-ensembles",
        help="compare all ensemble variants on the iteration-1 candidates",
        formatter_class=_Formatter,
    )
    _add_common(p)
    _add_experiment(p)

    p = commands.add_parser(
        "eval-mte",
        help="supervised and semi-supervised rounds of the monolithic baseline",
        formatter_class=_Formatter,
    )
    _add_common(p)
    _add_experiment(p)
    p.add_argument("--mte-hidden", type=int, default=16, help="MTE feature maps")
    p.add_argument("--mte-epochs", type=int, default=None, help="MTE epochs (default: link epochs)")
    return parser


def synth_config_from_args(args: argparse.Namespace) -> SynthConfig:
    return SynthConfig(
        width=args.width,
        height=args.height,
        months=args.months,
        n_inputs=args.inputs,
        n_outputs=args.outputs,
        n_latents=args.latents,
        seasonal_period=args.period,
        drift_rate=args.drift,
        noise_sigma=args.noise,
        split_ratio=tuple(args.split),
        start_year=args.start_year,
        seed=args.seed,
    )


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    """Build a validated RunConfig from the flags of run, eval-ensembles or eval-mte."""
    link_train = replace(
        config.link.train,
        max_epochs=args.link_epochs,
        initial_learning_rate=args.link_lr,
        plateau_patience=args.patience,
    )
    ensemble_train = replace(
        config.ensemble.train,
        max_epochs=args.ensemble_epochs,
        initial_learning_rate=args.ensemble_lr,
        plateau_patience=args.patience,
    )
    return RunConfig(
        dataset=args.dataset,
        run_dir=args.run_dir,
        ensemble=EnsembleConfig(
            variant=args.ensemble,
            include_complex=args.include_complex,
            train=ensemble_train,
        ),
        link=LinkConfig(
            kind=args.link,
            patch_radius=args.patch_radius,
            ridge_lambda=args.ridge_lambda,
            hidden_channels=args.link_hidden,
            train=link_train,
        ),
        iterations=getattr(args, "iterations", 1),
        convergence_threshold=getattr(args, "convergence_threshold", None),
        validation_fraction=args.validation_fraction,
        seed=args.seed,
        jobs=args.jobs,
        mte_hidden_channels=getattr(args, "mte_hidden", 16),
    )
