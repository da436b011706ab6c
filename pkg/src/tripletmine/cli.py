"""Command-line surface binding the pipeline modules into runnable commands.

Subcommands: mine, augment, calibrate, diffgate, stats, sim-server.
Exit codes: 0 success, 1 negative verdict (diffgate), 2 usage or
configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import calibration
from .augment import run_augmentation
from .bundles import PromptBundle, mark_composites, parse_bundles
from .config import RunConfig, build_config
from .diffgate import low_level_check
from .errors import BundleParseError, BundleValidationError, TripletMineError
from .gateway import HttpTransport, ModelGateway
from .scheduler import run_mining
from .selection import select_forward_records
from .sim import SimBackend, SimServer
from .store import (
    BlobStore,
    Dataset,
    distribution_report,
    format_stage_table,
    load_dataset,
    stage_report,
    write_manifest,
)

USAGE_ERROR = 2
RUNTIME_ERROR = 3


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_bundles(path: Path) -> list[PromptBundle]:
    return [mark_composites(b) for b in parse_bundles(path.read_bytes())]


def _mining_stage_rows(counters: dict, selected: int) -> list[tuple[str, str, int]]:
    pool = counters["jobs_pool"]
    after_gate = pool
    after_aesthetic = after_gate + counters["jobs_diff_discard"]
    after_unwanted = after_aesthetic + counters["jobs_aesthetics"]
    after_pre = after_unwanted + counters["jobs_unwanted_mods"]
    return [
        ("generation", "text-to-image seeds", counters["images_generated"]),
        ("plausibility gate", "yes/no check", counters["plausible_sources"]),
        ("job enumeration", "seed-instruction-retry grid", counters["jobs_enumerated"]),
        ("jobs executed", "uniform draw", counters["jobs_drawn"]),
        ("edits completed", "image-to-image", counters["edits_completed"]),
        ("pre-filter", "two-axis score threshold", after_pre),
        ("unwanted-modification check", "yes/no check", after_unwanted),
        ("aesthetic check", "yes/no check", after_aesthetic),
        ("low-level gate", "connected components", after_gate),
        ("final selection", "per-pair argmax", selected),
    ]


def cmd_mine(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    out_dir = Path(args.out)

    if args.prompts is not None:
        bundles = _load_bundles(Path(args.prompts))
    elif args.design_task is None:
        print("mine requires a prompts file or --design-task", file=sys.stderr)
        return USAGE_ERROR
    else:
        bundles = []

    if args.dry_run:
        if args.prompts is None:
            print("--dry-run requires a prompts file (design needs the network)", file=sys.stderr)
            return USAGE_ERROR
        edits_total = sum(len(b.edits) for b in bundles)
        sources = len(bundles) * config.seeds_per_prompt
        jobs = config.seeds_per_prompt * config.retries_per_edit * edits_total
        estimate = sources * config.estimated_source_cost + jobs * config.estimated_job_cost
        print(
            json.dumps(
                {
                    "bundles": len(bundles),
                    "edit_instructions": edits_total,
                    "sources_planned": sources,
                    "jobs_planned_max": jobs,
                    "estimated_max_cost_gpu_hours": round(estimate, 6),
                },
                indent=2,
                sort_keys=True,
            )
        )
        return 0

    out_dir.mkdir(parents=True, exist_ok=True)
    store = BlobStore(out_dir)
    gateway = ModelGateway(
        endpoints=config.endpoints(),
        transport=HttpTransport(),
        store=store,
        audit_path=str(out_dir / "audit.jsonl"),
    )
    if args.design_task is not None and not bundles:
        bundles = [mark_composites(b) for b in gateway.design_samples(args.design_task)]

    pipeline = config.pipeline_config()
    result = run_mining(
        pipeline,
        bundles,
        gateway,
        config.diff_config(),
        checkpoint_path=out_dir / "checkpoint.jsonl",
        resume=args.resume,
    )
    records, selection_counters = select_forward_records(
        result.pool,
        gateway,
        config.t_adherence,
        config.t_aesthetic,
        max_parallel=config.max_parallel_jobs,
    )
    write_manifest(out_dir / "manifest.jsonl", records)

    rows = _mining_stage_rows(result.counters, selection_counters["selected"])
    attempts = result.counters["jobs_drawn"]
    report = stage_report(rows, attempts=attempts if attempts > 0 else None)
    _write_json(out_dir / "stage_report.json", report.as_dict())
    (out_dir / "stage_report.txt").write_text(format_stage_table(report) + "\n", encoding="utf-8")

    _write_json(
        out_dir / "run_manifest.json",
        {
            "config": config.as_dict(),
            "counters": result.counters,
            "selection": selection_counters,
            "ledger": result.ledger.as_dict(),
            "budget_stopped": result.budget_stopped,
            "records_written": len(records),
        },
    )
    print(f"mined {len(records)} forward records into {out_dir}")
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    dataset_dir = Path(args.dataset)
    manifest_path = dataset_dir / args.manifest_name
    store = BlobStore(dataset_dir)
    dataset = load_dataset(manifest_path, store)

    gateway = ModelGateway(
        endpoints=config.endpoints(),
        transport=HttpTransport(),
        store=store,
        audit_path=str(dataset_dir / "audit_augment.jsonl"),
    )
    records, report = run_augmentation(dataset.records, gateway, config.augment_config())
    out_manifest = dataset_dir / args.output_name
    write_manifest(out_manifest, records)

    forward_count = len(dataset)
    with_inversions = forward_count + report["inversion"]["inverted"]
    with_compositions = with_inversions + report["bootstrap"]["composed"]
    rows = [
        ("forward records", "mined input", forward_count),
        ("with inversions", "semantic inversion", with_inversions),
        ("with compositions", "bootstrap composition", with_compositions),
        ("after backward filter", "inverse re-scoring", len(records)),
    ]
    stage = stage_report(rows)
    _write_json(
        dataset_dir / "augment_report.json",
        {"phases": report, "stages": stage.as_dict(), "records_written": len(records)},
    )
    (dataset_dir / "augment_stage_report.txt").write_text(
        format_stage_table(stage) + "\n", encoding="utf-8"
    )
    print(f"augmented dataset written to {out_manifest} ({len(records)} records)")
    return 0


def _load_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    return rows


_AXES = {
    calibration.Axis.INSTRUCTION: "instruction",
    calibration.Axis.AESTHETICS: "aesthetics",
}


def _calibration_report(scores_path: Path, predictions_path: Path | None) -> dict:
    raw = _load_jsonl(scores_path)
    scores = [
        calibration.RaterScore(
            triplet_id=str(row["triplet_id"]),
            rater_id=str(row["rater_id"]),
            axis=calibration.Axis(row["axis"]),
            value=float(row["value"]),
        )
        for row in raw
    ]
    report: dict = {"axes": {}}
    consensus_by_axis: dict[calibration.Axis, dict[str, float]] = {}
    for axis, label in _AXES.items():
        axis_rows = [s for s in scores if s.axis == axis]
        if not axis_rows:
            report["axes"][label] = None
            continue
        biases, consensus = calibration.calibrate_axis(axis_rows, axis)
        consensus_by_axis[axis] = {c.triplet_id: c.score for c in consensus}
        try:
            mean_rho, std_rho, pair_count = calibration.inter_rater_reliability(axis_rows, axis)
            reliability = {"mean_spearman": mean_rho, "std": std_rho, "pairs": pair_count}
        except ValueError as exc:
            reliability = {"unavailable": str(exc)}
        report["axes"][label] = {
            "biases": {b.rater_id: b.bias for b in biases},
            "consensus": consensus_by_axis[axis],
            "reliability": reliability,
        }

    if predictions_path is None:
        return report

    predictions = {
        str(row["triplet_id"]): (float(row["adherence"]), float(row["aesthetic"]))
        for row in _load_jsonl(predictions_path)
    }
    instr = consensus_by_axis.get(calibration.Axis.INSTRUCTION, {})
    aes = consensus_by_axis.get(calibration.Axis.AESTHETICS, {})
    shared = sorted(set(predictions) & set(instr) & set(aes))
    if not shared:
        report["benchmark"] = {"unavailable": "no triplet has predictions and both consensus axes"}
        return report

    pred_pairs = [predictions[t] for t in shared]
    truth_pairs = [(instr[t], aes[t]) for t in shared]
    benchmark: dict = {"triplets": len(shared)}
    for idx, label in ((0, "instruction"), (1, "aesthetics")):
        pred = [p[idx] for p in pred_pairs]
        truth = [t[idx] for t in truth_pairs]
        axis_block = {
            "mae": calibration.mae(pred, truth),
            "bucketed_mae": calibration.bucketed_mae(pred, truth),
            "confusion_matrix": {
                "labels": calibration.bucket_labels(calibration.DEFAULT_BUCKET_EDGES),
                "counts": calibration.confusion_matrix(pred, truth).tolist(),
            },
        }
        if len(shared) >= 2:
            axis_block["spearman"] = calibration.spearman(pred, truth)
        benchmark[label] = axis_block
    benchmark["classification"] = calibration.classification_metrics(
        pred_pairs, truth_pairs
    ).as_dict()
    thresholds = [round(4.0 + 0.05 * i, 2) for i in range(21)]
    benchmark["pr_sweep"] = [
        {"threshold": t, "precision": p, "recall": r}
        for t, p, r in calibration.pr_sweep(pred_pairs, truth_pairs, thresholds)
    ]
    report["benchmark"] = benchmark
    return report


def cmd_calibrate(args: argparse.Namespace) -> int:
    report = _calibration_report(
        Path(args.scores), Path(args.predictions) if args.predictions else None
    )
    if args.report:
        _write_json(Path(args.report), report)
        print(f"calibration report written to {args.report}")
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _load_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def cmd_diffgate(args: argparse.Namespace) -> int:
    try:
        source = _load_rgb(Path(args.image_a))
        edited = _load_rgb(Path(args.image_b))
        cfg = build_config(
            None,
            {
                "pixel_threshold": args.threshold,
                "min_component_fraction": args.min_fraction,
                "connectivity": args.connectivity,
                "channel_mode": args.channel_mode,
            },
        ).diff_config()
        verdict = low_level_check(source, edited, cfg)
    except (OSError, ValueError, TripletMineError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return USAGE_ERROR
    print(json.dumps(verdict.as_dict(), indent=2, sort_keys=True))
    return 0 if verdict.passed else 1


def cmd_stats(args: argparse.Namespace) -> int:
    path = Path(args.dataset)
    if path.is_dir():
        manifest, store = path / args.manifest_name, BlobStore(path)
    else:
        manifest, store = path, BlobStore(path.parent)
    dataset: Dataset = load_dataset(manifest, store)
    payload = {
        "records": len(dataset),
        "distributions": {
            axis: distribution_report(dataset, axis)
            for axis in ("derivation", "aspect_ratio", "category")
        },
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_sim_server(args: argparse.Namespace) -> int:
    backend = SimBackend(seed=args.seed, score_profile=args.profile)
    server = SimServer(backend, host=args.host, port=args.port)
    print(f"simulated backend serving at {server.base_url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        key: getattr(args, key)
        for key in (
            "seeds_per_prompt",
            "retries_per_edit",
            "t_adherence",
            "t_aesthetic",
            "t_inv_adherence",
            "t_inv_aesthetic",
            "master_seed",
            "max_parallel_jobs",
            "budget_gpu_hours",
            "generator_steps",
            "pixel_threshold",
            "min_component_fraction",
            "max_compositions_per_source",
            "rewrite_composites",
            "endpoint",
            "timeout",
            "max_retries",
        )
        if hasattr(args, key)
    }
    return build_config(getattr(args, "config", None), overrides)


def _add_endpoint_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--endpoint", help="base URL serving all model roles")
    parser.add_argument("--timeout", type=float, help="per-request timeout in seconds")
    parser.add_argument("--max-retries", dest="max_retries", type=int, help="transport retries per request")
    parser.add_argument("--master-seed", dest="master_seed", type=int, help="64-bit master seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tripletmine",
        description="Mine, expand, and qualify image-editing triplet datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    mine = sub.add_parser("mine", help="run the full mining pipeline")
    mine.add_argument("prompts", nargs="?", help="JSON file of prompt bundles")
    mine.add_argument("--design-task", dest="design_task", help="ask the prompt engineer to design bundles")
    mine.add_argument("--out", required=True, help="output dataset directory")
    _add_endpoint_flags(mine)
    mine.add_argument("--seeds-per-prompt", dest="seeds_per_prompt", type=int)
    mine.add_argument("--retries-per-edit", dest="retries_per_edit", type=int)
    mine.add_argument("--t-adherence", dest="t_adherence", type=float)
    mine.add_argument("--t-aesthetic", dest="t_aesthetic", type=float)
    mine.add_argument("--budget", dest="budget_gpu_hours", type=float, help="GPU-hour budget")
    mine.add_argument("--max-parallel", dest="max_parallel_jobs", type=int)
    mine.add_argument("--generator-steps", dest="generator_steps", type=int)
    mine.add_argument("--pixel-threshold", dest="pixel_threshold", type=int)
    mine.add_argument("--min-fraction", dest="min_component_fraction", type=float)
    mine.add_argument("--resume", action="store_true", help="replay checkpointed work instead of re-running it")
    mine.add_argument("--dry-run", dest="dry_run", action="store_true", help="print job counts and cost estimate, no network")
    mine.set_defaults(func=cmd_mine)

    augment = sub.add_parser("augment", help="invert, compose, and backward-filter a mined dataset")
    augment.add_argument("dataset", help="dataset directory produced by mine")
    augment.add_argument("--manifest-name", dest="manifest_name", default="manifest.jsonl")
    augment.add_argument("--output-name", dest="output_name", default="manifest_augmented.jsonl")
    _add_endpoint_flags(augment)
    augment.add_argument("--t-inv-adherence", dest="t_inv_adherence", type=float)
    augment.add_argument("--t-inv-aesthetic", dest="t_inv_aesthetic", type=float)
    augment.add_argument("--max-compositions", dest="max_compositions_per_source", type=int)
    augment.add_argument(
        "--rewrite-composites",
        dest="rewrite_composites",
        action="store_const",
        const=True,
        default=None,
        help="rewrite composite instructions into one sentence via the inverter",
    )
    augment.set_defaults(func=cmd_augment)

    calibrate = sub.add_parser("calibrate", help="rater calibration and validator benchmarking")
    calibrate.add_argument("scores", help="JSONL of {triplet_id, rater_id, axis, value}")
    calibrate.add_argument("--predictions", help="JSONL of {triplet_id, adherence, aesthetic}")
    calibrate.add_argument("--report", help="write the report JSON here instead of stdout")
    calibrate.set_defaults(func=cmd_calibrate)

    diffgate = sub.add_parser("diffgate", help="low-level change gate on an image pair")
    diffgate.add_argument("image_a", help="source image")
    diffgate.add_argument("image_b", help="edited image")
    diffgate.add_argument("--threshold", type=int, default=None, help="per-pixel intensity delta (default 40)")
    diffgate.add_argument("--min-fraction", dest="min_fraction", type=float, default=None)
    diffgate.add_argument("--connectivity", type=int, default=None)
    diffgate.add_argument("--channel-mode", dest="channel_mode", choices=("max", "luma"), default=None)
    diffgate.set_defaults(func=cmd_diffgate)

    stats = sub.add_parser("stats", help="dataset distribution reports")
    stats.add_argument("dataset", help="dataset directory or manifest path")
    stats.add_argument("--manifest-name", dest="manifest_name", default="manifest.jsonl")
    stats.set_defaults(func=cmd_stats)

    sim = sub.add_parser("sim-server", help="serve the deterministic simulated backend")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--host", default="127.0.0.1")
    sim.add_argument("--port", type=int, default=8008)
    sim.add_argument("--profile", choices=("high", "mixed", "low"), default="high")
    sim.set_defaults(func=cmd_sim_server)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (BundleParseError, BundleValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except TripletMineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
