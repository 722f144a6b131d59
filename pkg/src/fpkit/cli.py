"""Command line entry point: ``fpkit <subcommand> [--config plan.yaml] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .errors import ConfigurationError, SchemaError
from .harness import (Experiment, ExperimentPlan, ThresholdTable, attack_label, verify_ownership)
from .nnkit import evaluate_accuracy, load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

ATTACK_KINDS = {"removal": "removal", "ft": "finetune", "wp": "prune", "distill": "distill"}


def _plan(args) -> ExperimentPlan:
    plan = ExperimentPlan.from_file(args.config) if args.config else ExperimentPlan()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    return replace(plan, **overrides) if overrides else plan


def cmd_train(exp: Experiment, args) -> None:
    victim = exp.victim()
    print(f"victim accuracy {evaluate_accuracy(victim, exp.bundle().test):.4f} -> {exp.out / 'victim'}")


def cmd_negatives(exp: Experiment, args) -> None:
    models = exp.negatives()
    for m in models:
        print(f"negative seed {m.info.get('seed')} accuracy {evaluate_accuracy(m, exp.bundle().test):.4f}")


def cmd_fingerprint(exp: Experiment, args) -> None:
    trials = exp.trials()
    short = sum(int(t.fingerprints.meta.get("shortfall", 0)) for t in trials)
    print(f"{len(trials)} probe trials -> {exp.out / 'probes'} (boundary shortfall {short})")


def cmd_calibrate(exp: Experiment, args) -> None:
    table = exp.thresholds()
    for name, tau in table.tau.items():
        print(f"{name}\t{tau:.6g}\t{table.modes[name]}")


def cmd_attack(exp: Experiment, args) -> None:
    attack = {"kind": ATTACK_KINDS[args.kind]}
    if args.fraction is not None:
        attack["fraction"] = args.fraction
    if args.iterations is not None:
        attack["iterations" if args.kind == "removal" else "finetune_iters"] = args.iterations
    if args.scenario is not None:
        if args.kind != "removal":
            raise ConfigurationError("--scenario applies to removal only")
        attack["scenario"] = args.scenario
    if args.ratio is not None:
        if args.kind != "removal":
            raise ConfigurationError("--ratio applies to removal only")
        attack["substitute_ratio"] = args.ratio
    label = attack_label(attack, exp.plan)
    model = exp.attack(attack)
    print(f"{label} accuracy {evaluate_accuracy(model, exp.bundle().test):.4f}")


def cmd_verify(exp: Experiment, args) -> None:
    table = exp.thresholds() if args.thresholds is None else ThresholdTable.load(args.thresholds)
    suspect = load_checkpoint(args.suspect)
    verdict = verify_ownership(exp.victim(), suspect, exp.trials(), table, exp.plan.metrics, exp.plan.layer,
                               exp.plan.aggregate)
    for name, mv in verdict.per_metric.items():
        print(f"{name}\tmean={mv.mean:.6g}\tstd={mv.std:.3g}\ttau={table.tau[name]:.6g}\t{mv.flag}\t{mv.tally_text}")
    print(f"ownership: {verdict.summary()}")


def cmd_report(exp: Experiment, args) -> int:
    bundle = exp.run()
    for label, verdict in bundle.verdicts.items():
        drop = 100 * (bundle.victim_accuracy - bundle.fidelity[label])
        print(f"{label:<18} fidelity {100 * bundle.fidelity[label]:6.2f} drop {drop:5.2f}  {verdict.summary()}")
    for stage, msg in bundle.failures:
        print(f"FAILED {stage}: {msg}", file=sys.stderr)
    print(f"report -> {bundle.report_csv}")
    return EXIT_STAGE if bundle.failures else EXIT_OK


def cmd_sweep(exp: Experiment, args) -> None:
    if args.ratios:
        exp.plan = replace(exp.plan, sweep_ratios=args.ratios)
    if not exp.plan.sweep_ratios:
        raise ConfigurationError("no sweep ratios; pass --ratios or set sweep_ratios in the plan")
    for row in exp.sweep():
        print("\t".join(f"{k}={v:.4g}" for k, v in row.items()))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON plan file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run directory (default from plan)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fpkit", description="DNN fingerprint verification and removal",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train (or load) the victim").set_defaults(func=cmd_train)
    sub.add_parser("negatives", parents=[common], help="train the negative-model farm").set_defaults(func=cmd_negatives)
    sub.add_parser("fingerprint", parents=[common], help="generate probe trials").set_defaults(func=cmd_fingerprint)
    sub.add_parser("calibrate", parents=[common], help="fit thresholds on negatives").set_defaults(func=cmd_calibrate)

    attack = sub.add_parser("attack", parents=[common], help="derive a suspect model from the victim")
    attack.add_argument("kind", choices=sorted(ATTACK_KINDS))
    attack.add_argument("--fraction", type=float)
    attack.add_argument("--iterations", type=int)
    attack.add_argument("--scenario", choices=["ltd", "lsd"])
    attack.add_argument("--ratio", type=float, help="substitute ratio (removal only)")
    attack.set_defaults(func=cmd_attack)

    verify = sub.add_parser("verify", parents=[common], help="ownership verdict for one suspect checkpoint")
    verify.add_argument("suspect", type=Path)
    verify.add_argument("--thresholds", type=Path)
    verify.set_defaults(func=cmd_verify)

    sub.add_parser("report", parents=[common], help="run the whole plan and write the report").set_defaults(func=cmd_report)
    sweep = sub.add_parser("sweep", parents=[common], help="removal over several substitute ratios")
    sweep.add_argument("--ratios", type=float, nargs="+")
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        exp = Experiment(_plan(args))
        code = args.func(exp, args)
    except (ConfigurationError, SchemaError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a stage failure
        logging.getLogger("fpkit").debug("stage failure", exc_info=True)
        print(f"stage failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
