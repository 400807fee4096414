"""Command-line front end.

Subcommands: evaluate (COCO files -> D-ECE report), reliability (report ->
CSV), fit-temperature (held-out logits -> T), toy-train (synthetic ablation).
Human-readable summaries go to stdout, machine artifacts to files, run
metadata to stderr; data artifacts are byte-identical for fixed inputs and
seed.

Exit codes: 0 success, 2 parse/format failure, 3 empty input after
filtering, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .calibration import apply_temperature, fit_temperature
from .coco_io import ParseError, load_annotations, load_predictions
from .geometry import match_detections
from .metrics import (
    CalibrationReport,
    EmptyInputError,
    d_ece,
    reliability_csv,
    reliability_table,
)
from .tensors import sigmoid_array
from .toy import MODES, ToyConfig, TrainingDiverged, run_experiment

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_EMPTY = 3
EXIT_DIVERGED = 4


def _print_report(report: CalibrationReport):
    print(f"{report.metric_kind} {report.error:.4f}")
    print(f"detections {report.total}")
    rows = reliability_table(report)
    if rows:
        print("bin_lo bin_hi count mean_confidence mean_outcome gap")
        for r in rows:
            print(
                f"{r['bin_lo']:.2f} {r['bin_hi']:.2f} {r['count']} "
                f"{r['mean_confidence']:.4f} {r['mean_outcome']:.4f} {r['gap']:+.4f}"
            )


def cmd_evaluate(args) -> int:
    try:
        anns = load_annotations(args.gts)
        dets = load_predictions(args.preds, anns.category_ids)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        matched = match_detections(dets, anns.ground_truths, args.iou)
        report = d_ece(matched, args.bins, args.score_floor)
    except EmptyInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    _print_report(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json())
        print(f"wrote {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_reliability(args) -> int:
    try:
        with open(args.report) as fh:
            report = CalibrationReport.from_json(fh.read())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {args.report}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    with open(args.out, "w") as fh:
        fh.write(reliability_csv(report))
    print(f"wrote {args.out}", file=sys.stderr)
    return EXIT_OK


def _load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def cmd_fit_temperature(args) -> int:
    try:
        raw_logits = _load_json(args.logits)
        raw_labels = _load_json(args.labels)
        if not isinstance(raw_logits, list) or not isinstance(raw_labels, list):
            raise ParseError("logits and labels files must hold JSON arrays")
        if len(raw_logits) != len(raw_labels):
            raise ParseError(
                f"row mismatch: {len(raw_logits)} logit rows vs {len(raw_labels)} labels"
            )
        logits = np.asarray(raw_logits, dtype=np.float64)
        if logits.ndim != 2:
            raise ParseError("logits file must hold an array of equal-length rows")
        labels = [int(v) for v in raw_labels]
        temperature = fit_temperature(logits, labels, mode=args.mode)
    except (ParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    print(f"T {temperature:.4f}")
    if args.out:
        z = apply_temperature(logits, temperature)
        if args.mode == "softmax-NLL":
            shifted = np.exp(z - z.max(axis=1, keepdims=True))
            probs = shifted / shifted.sum(axis=1, keepdims=True)
        else:
            probs = sigmoid_array(z)
        confidences = probs.max(axis=1).tolist()
        with open(args.out, "w") as fh:
            json.dump(confidences, fh, indent=2)
            fh.write("\n")
        print(f"wrote {args.out}", file=sys.stderr)
    return EXIT_OK


def _toy_report_dict(mode: str, seed: int, result) -> dict:
    return {
        "mode": mode,
        "seed": seed,
        "accuracy": result.accuracy,
        "n_positives": result.n_positives,
        "d_ece": result.d_ece.to_dict(),
        "d_uce": result.d_uce.to_dict(),
    }


def _write_trace(path: str, trace: list[float]):
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(trace):
            fh.write(f"{i},{loss!r}\n")


def cmd_toy_train(args) -> int:
    try:
        if args.config:
            with open(args.config) as fh:
                toy_cfg = ToyConfig.from_json(fh.read())
        else:
            toy_cfg = ToyConfig()
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    seed = args.seed if args.seed is not None else toy_cfg.train.seed
    os.makedirs(args.out_dir, exist_ok=True)
    modes = list(MODES) if args.mode == "all" else [args.mode]
    summary = {}
    try:
        for mode in modes:
            _, trace, result = run_experiment(toy_cfg, mode, seed)
            _write_trace(os.path.join(args.out_dir, f"loss_trace_{mode}.csv"), trace)
            with open(os.path.join(args.out_dir, f"report_{mode}.json"), "w") as fh:
                json.dump(_toy_report_dict(mode, seed, result), fh, indent=2)
                fh.write("\n")
            summary[mode] = {"d_ece": result.d_ece.error, "accuracy": result.accuracy}
            print(f"{mode}: D-ECE {result.d_ece.error:.4f} accuracy {result.accuracy:.4f}")
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if args.mode == "all":
        path = os.path.join(args.out_dir, "ablation_summary.json")
        with open(path, "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        print(f"wrote {path}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detcal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("evaluate", help="score COCO-style predictions against annotations")
    p_eval.add_argument("--preds", required=True, help="COCO results JSON")
    p_eval.add_argument("--gts", required=True, help="COCO annotation JSON")
    p_eval.add_argument("--bins", type=int, default=10)
    p_eval.add_argument("--iou", type=float, default=0.5)
    p_eval.add_argument("--score-floor", type=float, default=0.0)
    p_eval.add_argument("--out", help="write the report JSON here")
    p_eval.set_defaults(func=cmd_evaluate)

    p_rel = sub.add_parser("reliability", help="report JSON -> reliability CSV")
    p_rel.add_argument("--report", required=True)
    p_rel.add_argument("--out", required=True)
    p_rel.set_defaults(func=cmd_reliability)

    p_fit = sub.add_parser("fit-temperature", help="fit a scalar temperature on held-out logits")
    p_fit.add_argument("--logits", required=True, help="JSON array of logit rows")
    p_fit.add_argument("--labels", required=True, help="JSON array of class ids")
    p_fit.add_argument("--mode", choices=["softmax-NLL", "sigmoid-NLL"], default="softmax-NLL")
    p_fit.add_argument("--out", help="write rescaled max-class confidences here")
    p_fit.set_defaults(func=cmd_fit_temperature)

    p_toy = sub.add_parser("toy-train", help="run the synthetic calibration ablation")
    p_toy.add_argument("--config", help="ToyConfig JSON; defaults used when omitted")
    p_toy.add_argument("--mode", choices=list(MODES) + ["all"], default="full")
    p_toy.add_argument("--seed", type=int, default=None)
    p_toy.add_argument("--out-dir", default=".")
    p_toy.set_defaults(func=cmd_toy_train)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
