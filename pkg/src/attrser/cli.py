"""Command line entry point: ``attrser <subcommand> --config cfg.yaml --set key=value``.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import ExperimentConfig, dump_config, load_config
from .data import SplitPlan
from .errors import AttrSerError, DataError
from .features import FBankFeatures, write_fbank_file
from .metrics import ReliabilityReport

log = logging.getLogger("attrser")


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set)


def _attach_log(run_dir: Path) -> None:
    handler = logging.FileHandler(run_dir / "log.txt")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)


def _open_run(args):
    """Config comes from --config if given, else the run's snapshot; --set applies on top."""
    run = Path(args.run)
    snapshot = run / "config_snapshot.yaml"
    if not snapshot.exists():
        raise DataError(f"{run} is not a run directory (no config_snapshot.yaml)")
    config = load_config(args.config or snapshot, args.set)
    plan = SplitPlan.load(run / "split_plan.json")
    return run, config, harness.Experiment.from_config(config, plan)


def cmd_synth(args) -> int:
    from .synthetic import make_corpus

    manifest = make_corpus(
        args.out,
        num_speakers=args.speakers,
        utts_per_class=args.utts_per_class,
        ood_per_speaker=args.ood_per_speaker,
        duration=args.duration,
        seed=args.seed,
    )
    print(manifest)
    return 0


def cmd_extract(args) -> int:
    config = _config(args)
    exp = harness.Experiment.from_config(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = exp.mapped.kept + exp.mapped.ood
    for rec in records:
        write_fbank_file(out / f"{rec.utterance_id}.fbk", FBankFeatures(exp.store.get(rec)))
    print(f"wrote {len(records)} feature files to {out}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    exp = harness.Experiment.from_config(config)
    run = harness.unique_run_dir(args.run_dir or config.out_dir)
    _attach_log(run)
    dump_config(config, run / "config_snapshot.yaml")
    exp.plan.save(run / "split_plan.json")
    (run / "checkpoints").mkdir()
    for fold in exp.fold_indices():
        log.info("training fold %d", fold)
        result = harness.train_fold(exp, fold, run / "checkpoints" / f"fold{fold}.pt")
        harness._write_csv(run / f"history_fold{fold}.csv", result.history)
    print(run)
    return 0


def _fold_reports(run, exp, split):
    reports = []
    for fold in exp.fold_indices():
        bundle = harness.CheckpointBundle.load(run / "checkpoints" / f"fold{fold}.pt")
        examples = exp.examples(fold, split)
        reports.append(harness.evaluate(bundle, examples, exp.scheme))
    return reports


def cmd_evaluate(args) -> int:
    run, config, exp = _open_run(args)
    reports = _fold_reports(run, exp, args.split)
    harness.save_json(run / f"eval_{args.split}.json", [harness.report_to_dict(r) for r in reports])
    overall = harness.aggregate_reports(reports)
    harness._write_csv(run / "metrics.csv", [{"split": args.split, **overall.as_row()}])
    (run / "confusion.txt").write_text(harness.confusion_grid(overall))
    print(f"WAR {overall.war:.4f}  UAR {overall.uar:.4f}")
    return 0


def cmd_ood(args) -> int:
    run, config, exp = _open_run(args)
    kinds = harness.detector_kinds(config)
    rows = []
    for fold in exp.fold_indices():
        bundle = harness.CheckpointBundle.load(run / "checkpoints" / f"fold{fold}.pt")
        reports = harness.ood_evaluate(
            bundle,
            exp.examples(fold, "train"),
            exp.examples(fold, "test"),
            exp.ood_examples(fold),
            kinds,
            scores_dir=run if len(exp.fold_indices()) == 1 else run / f"fold{fold}",
        )
        rows += [{"fold": fold, "detector": r.detector, "fpr95": r.fpr95, "auroc": r.auroc} for r in reports]
    harness._write_csv(run / "reliability.csv", rows)
    harness.save_json(run / "ood.json", rows)
    for r in rows:
        print(f"fold {r['fold']} {r['detector']:<12} FPR95 {r['fpr95']:.4f}  AUROC {r['auroc']:.4f}")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    config = load_config(args.config or run / "config_snapshot.yaml", args.set)
    eval_file = run / f"eval_{args.split}.json"
    if not eval_file.exists():
        raise DataError(f"{eval_file} missing; run `attrser evaluate --run {run}` first")
    reports = [harness.report_from_dict(d) for d in json.loads(eval_file.read_text())]
    reliability = []
    ood_file = run / "ood.json"
    if ood_file.exists():
        rows = json.loads(ood_file.read_text())
        by_det: dict[str, list] = {}
        for r in rows:
            by_det.setdefault(r["detector"], []).append(r)
        reliability = [
            ReliabilityReport(d, sum(r["fpr95"] for r in rs) / len(rs), sum(r["auroc"] for r in rs) / len(rs))
            for d, rs in by_det.items()
        ]
    out = harness.emit_report(reports, args.out or run / "reports", config, reliability, image=args.image)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attrser", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. optim.lr=0.0005")
        return p

    p = sub.add_parser("synth", help="write a small synthetic tone corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=5)
    p.add_argument("--utts-per-class", type=int, default=2)
    p.add_argument("--ood-per-speaker", type=int, default=2)
    p.add_argument("--duration", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("extract-features", help="write per-utterance feature files"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = with_config(sub.add_parser("train", help="train every configured fold"))
    p.add_argument("--run-dir", help="parent directory for the timestamped run (default: out_dir)")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("evaluate", help="evaluate a run's checkpoints"))
    p.add_argument("--run", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = with_config(sub.add_parser("ood-eval", help="score ID test vs OOD pool with every configured detector"))
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_ood)

    p = with_config(sub.add_parser("report", help="emit metrics, per-fold rows and confusion grid"))
    p.add_argument("--run", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--out", help="parent directory for the timestamped report")
    p.add_argument("--image", action="store_true", help="also render confusion.png")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AttrSerError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
