"""Command-line interface: prepare, train, classify, video, bench, report.

Exit codes: 0 success, 1 internal error, 2 user or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import dataio, motion, serialization
from .bench import run_bench
from .dataio import SEVEN_CLASSES, DEFAULT_CLASSES
from .experiments import accuracy_delta
from .network import ActivationMode, LossMode
from .numerics import Rng, pca_fit
from .pipeline import HEAD_KINDS, PreprocessSettings, classify_image
from .reporting import write_evaluation_report, write_training_report
from .trainer import TrainConfig, TrainingDiverged, UpdateRule, evaluate, read_metrics_csv, refit_head, train

log = logging.getLogger("cnneelm")

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2
SEED_ENV = "CNNEELM_SEED"
PCA_THRESHOLD_FLOOR = 1e-8


class UserError(Exception):
    """Bad flags or input; reported with exit code 2."""


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UserError(f"{SEED_ENV}={env!r} is not an integer") from None


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UserError(f"{args.command}: missing required option(s) {flags}")


def _class_names(args) -> tuple[str, ...]:
    if args.classes:
        return tuple(c.strip() for c in args.classes.split(",") if c.strip())
    return SEVEN_CLASSES if args.num_classes == 7 else DEFAULT_CLASSES


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UserError(f"--ratios expects three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
        raise UserError(f"--ratios must be three non-negative numbers summing to 1, got {text!r}")
    return parts


def _emit(doc: dict, out: str | None = None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _scores_doc(bundle, res) -> dict:
    return {
        "label": bundle.class_names[res.label],
        "labelIndex": res.label,
        "scores": [float(v) for v in res.scores],
        "latencyMs": res.total_ms,
        "stageMs": res.stage_ms,
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    _require(args, "output")
    seed = resolve_seed(args.seed)
    names = _class_names(args)
    if args.format == "synth":
        ds = dataio.synth_dataset(Rng(seed), args.per_class, len(names))
        ds = dataio.Dataset(ds.images, ds.labels, ds.splits, names)
    else:
        _require(args, "input")
        path = Path(args.input)
        if not path.exists():
            raise UserError(f"input {path} does not exist")
        ds = dataio.load_directory_dataset(path, names) if args.format == "dir" else dataio.load_csv_dataset(path, names)
    if len(ds) == 0:
        raise UserError("input contains no images")

    flat = ds.images.reshape(len(ds), -1)
    k = min(args.pca_keep, len(ds), flat.shape[1])
    model = pca_fit(flat, k)
    errors = dataio.reconstruction_errors(ds.images, model)
    threshold = max(dataio.percentile_threshold(errors, args.pca_threshold_percentile), PCA_THRESHOLD_FLOOR)
    reports = dataio.pca_filter(ds.images, model, threshold)
    keep = np.array([r.kept for r in reports])
    kept = dataio.Dataset(ds.images[keep], ds.labels[keep], ds.splits[keep], ds.class_names,
                          [s for s, m in zip(ds.sources, keep) if m] if ds.sources else [])
    if args.format != "csv":
        kept = dataio.split(kept, _ratios(args.ratios), Rng(seed + 1))

    out = dataio.save_archive(kept, args.output)
    lines = ["index,source,label,error,threshold,kept"]
    for i, r in enumerate(reports):
        src = ds.sources[i] if ds.sources else ""
        lines.append(f"{i},{src},{ds.class_names[ds.labels[i]]},{r.error!r},{r.threshold!r},{int(r.kept)}")
    (out / "filter_report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _emit({"output": str(out), "input": len(ds), "kept": int(keep.sum()), "threshold": threshold,
           "pcaComponents": k, "splits": {s: int((kept.splits == s).sum()) for s in dataio.SPLITS}})
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "dataset", "out")
    ds = dataio.load_archive(args.dataset)
    config = TrainConfig(
        update_rule=args.update,
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        loss_mode=args.loss,
        activation_mode=args.activation,
        seed=resolve_seed(args.seed),
        gradient_clip=args.clip,
        elm_hidden=args.elm_hidden,
        elm_ridge=args.elm_ridge,
        forest_trees=args.forest_trees,
        forest_depth=args.forest_depth,
    )
    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.csv")
    if args.reuse_network:
        bundle = refit_head(serialization.load_model(args.reuse_network), ds, args.head, config)
        serialization.save_model(bundle, out)
        _emit({"model": str(out), "head": args.head, "reusedNetwork": str(args.reuse_network)})
        return EXIT_OK
    try:
        bundle, metrics = train(config, ds, args.head)
    except TrainingDiverged as exc:
        exc.metrics.write_csv(metrics_path)
        print(f"error: training diverged ({exc}); partial metrics in {metrics_path}", file=sys.stderr)
        return EXIT_INTERNAL
    serialization.save_model(bundle, out)
    metrics.write_csv(metrics_path)
    last = metrics.rows[-1]
    _emit({"model": str(out), "metrics": str(metrics_path), "epochs": len(metrics.rows),
           "trainAcc": last["trainAcc"], "valAcc": last["valAcc"], "trainCE": last["trainCE"]})
    return EXIT_OK


def cmd_classify(args) -> int:
    _require(args, "model", "image")
    bundle = serialization.load_model(args.model)
    img = dataio.read_image(args.image)
    _emit(_scores_doc(bundle, classify_image(bundle, img)))
    return EXIT_OK


def cmd_video(args) -> int:
    _require(args, "model", "frames")
    bundle = serialization.load_model(args.model)
    frames_dir = Path(args.frames)
    if not frames_dir.is_dir():
        raise UserError(f"frames directory {frames_dir} does not exist")
    try:
        seq = motion.load_frame_sequence(frames_dir)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        t0 = time.perf_counter()
        peak = motion.detect_peak_frame(seq)
        flow_ms = (time.perf_counter() - t0) * 1e3
    notes = [str(w.message) for w in caught]
    for n in notes:
        print(f"warning: {n}", file=sys.stderr)
    res = classify_image(bundle, seq.frames[peak])
    per_frame = flow_ms / len(seq) + res.total_ms
    doc = {"peakIndex": peak, "frames": len(seq), **_scores_doc(bundle, res), "warnings": notes,
           "meanFrameMs": per_frame}
    if args.fps_check:
        budget = 1000.0 / args.fps_check
        doc.update({"fpsTarget": args.fps_check, "budgetMs": budget, "meetsFps": per_frame <= budget})
    _emit(doc)
    return EXIT_OK


def cmd_bench(args) -> int:
    _require(args, "dataset", "model")
    ds = dataio.load_archive(args.dataset)
    bundles = {}
    for path in args.model:
        b = serialization.load_model(path)
        bundles[b.head_kind if b.head_kind not in bundles else f"{b.head_kind}:{path}"] = b
    wanted = [h.strip() for h in args.heads.split(",")] if args.heads else list(bundles)
    missing = [h for h in wanted if h not in bundles]
    if missing:
        raise UserError(f"no model given for head(s) {', '.join(missing)}")
    part = ds.subset(args.split)
    if len(part) == 0:
        raise UserError(f"split {args.split!r} of {args.dataset} is empty")
    report = run_bench({h: bundles[h] for h in wanted}, part.images, part.labels, args.repeats)
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
        Path(args.out).with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    _require(args, "out")
    out = Path(args.out)
    written: list[Path] = []
    if not (args.metrics or args.model or args.experiment):
        raise UserError("report: give --metrics, --model with --dataset, or --experiment")
    if args.metrics:
        written += write_training_report(read_metrics_csv(args.metrics), out)
    if args.model:
        _require(args, "dataset")
        bundle = serialization.load_model(args.model)
        m = evaluate(bundle, dataio.load_archive(args.dataset), args.split)
        written += write_evaluation_report(m.confusion, m.class_names, out)
        summary = out / "evaluation.json"
        summary.write_text(json.dumps({"accuracy": m.accuracy, "perClass": dict(zip(m.class_names, m.per_class_accuracy.tolist())),
                                       "latencyMs": m.latency_ms}, indent=2, sort_keys=True) + "\n")
        written.append(summary)
    if args.experiment:
        seed = resolve_seed(args.seed)
        rep = accuracy_delta(range(seed, seed + args.seeds), args.per_class, args.epochs,
                             progress=lambda s, b, m: log.info("seed %d baseline %.3f modified %.3f", s, b, m))
        out.mkdir(parents=True, exist_ok=True)
        p = out / "accuracy_delta.json"
        p.write_text(rep.to_json())
        written.append(p)
        print(rep.summary())
    _emit({"written": [str(p) for p in written]})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file supplying defaults for any flag")
    common.add_argument("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cnneelm", description="Saliency-patch CNN facial expression classifier with ELM and forest heads.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="load, filter, split and archive a dataset")
    s.add_argument("--input", help="class directory tree or CSV file")
    s.add_argument("--format", choices=("dir", "csv", "synth"), default="dir")
    s.add_argument("--output", help="archive directory to write")
    s.add_argument("--pca-keep", type=int, default=20, help="PCA components for the reconstruction filter")
    s.add_argument("--pca-threshold-percentile", type=float, default=95.0)
    s.add_argument("--ratios", default="0.8,0.1,0.1", help="train,validation,test fractions")
    s.add_argument("--per-class", type=int, default=50, help="samples per class for --format synth")
    s.add_argument("--num-classes", type=int, choices=(6, 7), default=6)
    s.add_argument("--classes", help="comma-separated class names (overrides --num-classes)")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="train the network and fit a head")
    s.add_argument("--dataset", help="prepared archive directory")
    s.add_argument("--head", choices=HEAD_KINDS, default="elm")
    s.add_argument("--update", choices=[r.value for r in UpdateRule], default=UpdateRule.BASELINE.value)
    s.add_argument("--loss", choices=[m.value for m in LossMode], help="default depends on --update")
    s.add_argument("--activation", choices=[m.value for m in ActivationMode], default=ActivationMode.BASELINE.value)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, help="learning rate (default depends on --update)")
    s.add_argument("--batch", type=int, help="batch size (default depends on --update)")
    s.add_argument("--clip", type=float, help="clip the batch-mean gradient norm")
    s.add_argument("--elm-hidden", type=int, default=500)
    s.add_argument("--elm-ridge", type=float, default=0.01)
    s.add_argument("--forest-trees", type=int, default=5)
    s.add_argument("--forest-depth", type=int, default=5)
    s.add_argument("--reuse-network", help="model file whose network is kept; only the head is fitted")
    s.add_argument("--out", help="model JSON to write")
    s.add_argument("--metrics", help="per-epoch CSV (default: <out>.metrics.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("classify", parents=[common], help="classify one image")
    s.add_argument("--model")
    s.add_argument("--image")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("video", parents=[common], help="classify the peak frame of a frame sequence")
    s.add_argument("--model")
    s.add_argument("--frames", help="directory of frame_NNNN.pgm plus manifest.json")
    s.add_argument("--fps-check", type=float, default=20.0, help="frame rate the per-frame budget is checked against")
    s.set_defaults(func=cmd_video)

    s = sub.add_parser("bench", parents=[common], help="per-image latency of several heads")
    s.add_argument("--dataset")
    s.add_argument("--model", action="append", help="model file; repeat once per head")
    s.add_argument("--heads", help="comma-separated heads to time (default: all given models)")
    s.add_argument("--split", default="test", choices=dataio.SPLITS)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--out", help="report JSON (a CSV table is written next to it)")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", parents=[common], help="charts and tables from runs")
    s.add_argument("--metrics", help="per-epoch CSV from train")
    s.add_argument("--model")
    s.add_argument("--dataset")
    s.add_argument("--split", default="test", choices=dataio.SPLITS)
    s.add_argument("--experiment", action="store_true", help="run the multi-seed accuracy-delta experiment")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--per-class", type=int, default=50)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_report)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` fill any flag not given explicitly."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UserError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UserError(f"config {args.config} must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    known = {a.dest for a in sub._actions}  # noqa: SLF001
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UserError(f"config key {key!r} is not an option of {args.command}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USER
    except (UserError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
