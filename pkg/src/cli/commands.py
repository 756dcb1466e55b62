"""Command implementations; each returns a process exit code."""

import argparse
from pathlib import Path

from cli.parser import synth_config_from_args
from cli.reporting import TABLES_DIR, evaluation_table, write_report_tables
from core.config import EnsembleVariant, RunConfig
from core.experiment import open_experiment, run_experiment, write_csv
from core.synth_data import generate
from utils.logger import get_logger

logger = get_logger(__name__)

POOLS = ((False, "E+EH"), (True, "E+EH+AH+CH"))


def cmd_synth(args: argparse.Namespace, run_config: RunConfig | None = None) -> int:
    manifest = generate(synth_config_from_args(args), Path(args.out))
    print(manifest.manifest_path)
    return 0


def cmd_run(args: argparse.Namespace, run_config: RunConfig | None = None) -> int:
    assert run_config is not None
    results = run_experiment(run_config, force=args.force)
    for result in results:
        print(
            f"iteration {result.k}: distilled ARPI {result.distilled_arpi:.3f}  "
            f"teacher ARPI {result.teacher_arpi:.3f}"
        )
    return 0


def cmd_report(args: argparse.Namespace, run_config: RunConfig | None = None) -> int:
    for path in write_report_tables(Path(args.run_dir)):
        print(path)
    return 0


def cmd_eval_ensembles(args: argparse.Namespace, run_config: RunConfig | None = None) -> int:
    """Fit every ensemble variant on both candidate pools of the iteration-1 links."""
    assert run_config is not None
    experiment = open_experiment(run_config, force=args.force)
    engine = experiment.engine
    state = engine.supervised_state(experiment.store)
    labeled = engine.run_products(state, engine.usable_timestamps(engine.split.labeled))
    test = engine.run_products(state, engine.usable_timestamps(engine.split.test))

    rows = []
    for include_complex, pool in POOLS:
        for variant in EnsembleVariant:
            fitted = engine.train_ensembles(state, variant, include_complex, products=labeled)
            evaluations = engine.evaluate_teachers(fitted, test)
            first_task = engine.topology.output_names[0]
            candidates = len(engine.candidate_keys(first_task, include_complex))
            rows.append(
                evaluation_table(
                    {"pool": pool, "candidates": candidates, "variant": variant.value},
                    evaluations,
                )
            )
            logger.info(f"{pool} {variant.value}: ARPI {float(rows[-1]['ARPI']):.3f}")

    tasks = list(engine.topology.output_names)
    path = run_config.run_dir / TABLES_DIR / "ensembles.csv"
    write_csv(path, ["pool", "candidates", "variant", *tasks, "ARPI"], rows)
    print(path)
    return 0


def cmd_eval_mte(args: argparse.Namespace, run_config: RunConfig | None = None) -> int:
    """Supervised and semi-supervised MTE rounds against the iteration-1 best edge."""
    assert run_config is not None
    experiment = open_experiment(run_config, force=args.force)
    engine = experiment.engine
    engine.supervised_state(experiment.store)
    rounds = engine.evaluate_mte(run_config.mte_hidden_channels, args.mte_epochs)

    rows = [
        evaluation_table({"iteration": k, "training": training}, evaluations)
        for k, training, evaluations in zip((1, 2), ("supervised", "semi-supervised"), rounds)
    ]
    tasks = list(engine.topology.output_names)
    path = run_config.run_dir / TABLES_DIR / "mte.csv"
    write_csv(path, ["iteration", "training", *tasks, "ARPI"], rows)
    print(path)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "run": cmd_run,
    "report": cmd_report,
    "eval-ensembles": cmd_eval_ensembles,
    "eval-mte": cmd_eval_mte,
}

EXPERIMENT_COMMANDS = frozenset({"run", "eval-ensembles", "eval-mte"})
