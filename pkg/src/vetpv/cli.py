"""Command-line entry point.

    vetpv run      --config pipeline.ini        # all stages end-to-end
    vetpv ingest   --config pipeline.ini [--csv]
    vetpv prepare  --config pipeline.ini        # harmonize + prepare + split + resample
    vetpv train    --config pipeline.ini
    vetpv ssl      --config pipeline.ini
    vetpv evaluate --config pipeline.ini
    vetpv explain  --config pipeline.ini
    vetpv report   --runs DIR [DIR ...] --out results

Exit codes: 0 success, 1 configuration/validation error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

from . import bulkio, pipeline
from .config import ConfigError, load_config
from .metrics import MetricsReport, results_table

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_STAGE = 2


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vetpv",
        description="Adverse-event outcome modeling pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, type=Path, help="pipeline config file")
        return cmd

    add("run", "run every stage end-to-end")
    ingest_cmd = add("ingest", "parse input files and export bulk-load tables")
    ingest_cmd.add_argument("--csv", action="store_true", help="also export RFC-4180 CSV tables")
    add("prepare", "harmonize, clean, split and resample")
    add("train", "fit the configured model on the resampled training matrix")
    add("ssl", "pseudo-label the unlabeled pool and retrain")
    add("evaluate", "score persisted models on validation and test")
    add("explain", "attribute predictions and write ranking artifacts")

    report_cmd = sub.add_parser("report", help="aggregate metrics from multiple runs")
    report_cmd.add_argument("--runs", nargs="+", type=Path, required=True,
                            help="output directories of completed runs")
    report_cmd.add_argument("--out", type=Path, required=True,
                            help="basename for the emitted .csv/.txt table")
    return parser


def _aggregate_runs(run_dirs: list[Path], out_base: Path) -> str:
    """Collect per-run metrics (test split, supervised variant) into one table."""
    rows = []
    for run_dir in run_dirs:
        store = pipeline.ArtifactStore(run_dir)
        text = store.get_text("metrics")
        reader = csv.DictReader(io.StringIO(text))
        for record in reader:
            if record["dataset"] != "test":
                continue
            label = record["model"]
            if record["variant"] == "ssl":
                label = f"{record['model']}+ssl"
            report = MetricsReport(
                weighted_f1=float(record["weighted_f1"]),
                weighted_precision=float(record["weighted_precision"]),
                weighted_recall=float(record["weighted_recall"]),
                accuracy=float(record["accuracy"]),
                death_recall=float(record["death_recall"]),
                recovered_recall=float(record["recovered_recall"]),
                death_precision=0.0,
                recovered_precision=0.0,
                death_f1=0.0,
                recovered_f1=0.0,
                supports={},
            )
            rows.append((label, record["sampling"], report))
    if not rows:
        raise ConfigError("no test metrics found in the given run directories")
    csv_text, aligned = results_table(rows)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    out_base.with_suffix(".csv").write_text(csv_text, encoding="utf-8")
    out_base.with_suffix(".txt").write_text(aligned, encoding="utf-8")
    return aligned


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            print(_aggregate_runs(args.runs, args.out))
            return EXIT_OK
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            report = pipeline.run(config)
            print(f"run complete: {len(report.stages)} stages, hash {report.config_hash}")
            return EXIT_OK
        store = pipeline.ArtifactStore(config.output_dir)
        if args.command == "ingest":
            tables, stats = pipeline.stage_ingest(config, store)
            if args.csv:
                bulkio.export_csv(tables, config.output_dir / "csv")
            print(f"ingested {stats['reports']} reports from {len(stats['files'])} files")
        elif args.command == "prepare":
            reports, _ = pipeline.stage_harmonize(config, store)
            cleaned, counts = pipeline.stage_prepare(config, store, reports)
            matrices, split_details = pipeline.stage_split(config, store, cleaned)
            pipeline.stage_resample(config, store, matrices)
            print(
                f"prepared {len(cleaned)} reports "
                f"(labeled {split_details['labeled']}, unlabeled {split_details['unlabeled']})"
            )
        elif args.command == "train":
            _, details = pipeline.stage_train(config, store)
            print(f"trained {details['kind']} on {details['train_rows']} rows")
        elif args.command == "ssl":
            _, details = pipeline.stage_ssl(config, store)
            print(f"pseudo-labeled {details['pseudo_rows']} rows over {details['rounds_run']} rounds")
        elif args.command == "evaluate":
            details = pipeline.stage_evaluate(config, store)
            for name, values in details.items():
                print(f"{name}: weighted_f1={values['weighted_f1']}")
        elif args.command == "explain":
            details = pipeline.stage_explain(config, store)
            print(
                f"explained {details['rows_explained']} rows; "
                f"max local-accuracy error {details['max_local_accuracy_error']:.2e}"
            )
        return EXIT_OK
    except pipeline.MissingArtifactError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # stage failure: partial artifacts are retained
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
