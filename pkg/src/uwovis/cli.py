"""Command-line entry point: fixture generation, template selection, training,
evaluation (with a TopN sweep harness), and report/plot emission.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Every run writes a manifest (config snapshot, seed, version) to its output
directory; artifacts are byte-stable across reruns except the manifest
timestamp.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ClassSplit,
    DataError,
    FixtureSpec,
    load_annotations,
    split_from_names,
    synth_fixture,
)
from .encoders import EncoderError
from .evaluation import (
    EvalReport,
    evaluate_predictions,
    per_class_report,
    plot_per_class_report,
    save_predictions,
)
from .gpem import ConfigurationError
from .losses import MatchingError
from .saim import SelectionConfig, SelectionError, build_prompt_bank, select_with_single_image
from .trainer import Checkpoint, RunConfig, TrainingDiverged, build_eval_embeddings, infer, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (DataError, EncoderError, SelectionError, ConfigurationError, MatchingError)


def _write_manifest(out_dir: Path, subcommand: str, config: dict, seed: int | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    spec = FixtureSpec(
        n_images=args.images,
        n_classes=args.classes,
        shapes_per_image=args.shapes_per_image,
        image_size=args.size,
    )
    out = Path(args.out)
    index = synth_fixture(args.seed, spec, out)
    _write_manifest(out, "synth", {"spec": spec.__dict__}, args.seed)
    print(
        f"wrote {len(index.images)} images, {len(index.annotations)} instances, "
        f"{len(index.categories)} classes to {out}"
    )
    return EXIT_OK


def cmd_select_templates(args: argparse.Namespace) -> int:
    dataset = load_annotations(args.dataset)
    cfg = SelectionConfig(
        strategy=args.strategy,
        top_n=args.topn,
        lambda_mix=getattr(args, "lambda"),
        alpha_enh=args.alpha_enh,
        seed=args.seed,
    )
    from .encoders import EncoderConfig

    enc = EncoderConfig(seed=args.encoder_seed)
    bank = build_prompt_bank()
    class_names = dataset.category_names()
    result = select_with_single_image(dataset, class_names, enc, cfg, bank=bank)
    ids = bank.template_ids
    rows = []
    for i, name in enumerate(class_names):
        chosen = result.top_template_indices[i] if result.top_template_indices else []
        rows.append(
            {
                "class": name,
                "templates": [ids[j] for j in chosen],
                "sampled_image_id": result.sampled_image_ids.get(name),
                "fallback_mean_all": name in result.fallback_classes,
            }
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "template_selection.json", {"strategy": cfg.strategy, "top_n": cfg.top_n, "classes": rows})
    _write_manifest(out, "select-templates", cfg.to_dict(), args.seed)
    print(f"selected templates for {len(rows)} classes -> {out / 'template_selection.json'}")
    return EXIT_OK


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        config = RunConfig.load(args.config)
    else:
        config = RunConfig()
    overrides = {}
    if getattr(args, "mode", None):
        overrides["task_mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        opt = config.optimizer
        from .trainer import OptimizerConfig

        overrides["optimizer"] = OptimizerConfig(
            algo=opt.algo, step_size=opt.step_size, steps=args.steps, batch_size=opt.batch_size
        )
    if overrides:
        d = config.to_dict()
        cfg = RunConfig.from_dict(d)
        # flags win over the config file
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
        return cfg
    return config


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    dataset = load_annotations(args.ann)
    checkpoint = train(config, dataset)
    out = Path(args.out)
    checkpoint.save(out)
    _write_manifest(out, "train", config.to_dict(), config.seed)
    first = checkpoint.loss_history[0] if checkpoint.loss_history else float("nan")
    last = checkpoint.loss_history[-1] if checkpoint.loss_history else float("nan")
    print(
        f"trained {checkpoint.step} steps on {len(dataset.images)} images; "
        f"loss {first:.4f} -> {last:.4f}; checkpoint at {out}"
    )
    return EXIT_OK


def _run_eval_once(
    checkpoint: Checkpoint,
    dataset,
    vocabulary: list[str],
    split: ClassSplit,
    selection: SelectionConfig,
    score_floor: float | None,
):
    embeddings = build_eval_embeddings(dataset, vocabulary, checkpoint.config, selection)
    model = checkpoint.build_model()
    predictions = []
    for image_id in sorted(dataset.images):
        image = dataset.load_image(image_id)
        predictions.extend(
            infer(model, image, vocabulary, embeddings, score_floor=score_floor)
        )
    report = evaluate_predictions(predictions, dataset, vocabulary, split)
    return predictions, report


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    dataset = load_annotations(args.ann)
    if args.split:
        split = ClassSplit.load(args.split)
    else:
        split = split_from_names(checkpoint.class_names, dataset.category_names())
    if args.vocab:
        vocabulary = json.loads(Path(args.vocab).read_text(encoding="utf-8"))
        if not isinstance(vocabulary, list):
            raise DataError(f"vocabulary file {args.vocab} must hold a JSON list")
    else:
        vocabulary = split.val_classes
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    selection = checkpoint.config.selection
    predictions, report = _run_eval_once(
        checkpoint, dataset, vocabulary, split, selection, args.score_floor
    )
    save_predictions(predictions, out / "predictions.json")
    report.save(out / "report.json")

    if args.topn_sweep:
        values = [int(v) for v in args.topn_sweep.split(",") if v.strip()]
        bank_size = len(build_prompt_bank())
        rows = []
        for n in values:
            effective = min(n, bank_size)
            sel = SelectionConfig(
                strategy=selection.strategy if selection.strategy != "mean-all" else "mixed",
                top_n=effective,
                lambda_mix=selection.lambda_mix,
                alpha_enh=selection.alpha_enh,
                seed=selection.seed,
            )
            _, sweep_report = _run_eval_once(
                checkpoint, dataset, vocabulary, split, sel, args.score_floor
            )
            overall = sweep_report.groups.get("overall") or {}
            rows.append(
                {
                    "topn": n,
                    "effective_topn": effective,
                    "clamped": effective != n,
                    "mAP": overall.get("mAP"),
                    "AP50": overall.get("AP50"),
                    "AP75": overall.get("AP75"),
                }
            )
        _dump(out / "topn_sweep.json", {"vocabulary_size": len(vocabulary), "rows": rows})

    _write_manifest(
        out,
        "eval",
        {"checkpoint": str(args.checkpoint), "vocab_size": len(vocabulary)},
        checkpoint.config.seed,
    )
    overall = report.groups.get("overall")
    summary = (
        f"mAP {overall['mAP']:.2f} AP50 {overall['AP50']:.2f} AP75 {overall['AP75']:.2f}"
        if overall
        else "no scored classes"
    )
    print(f"evaluated {len(predictions)} predictions; overall: {summary}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    report = EvalReport.load(args.report)
    second = EvalReport.load(args.report2) if args.report2 else None
    ranked = per_class_report(report, args.topk, second)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "ranked_classes.json", ranked)
    if not args.no_plot:
        plot_per_class_report(ranked, out / "ranked_classes.png")
    _write_manifest(out, "report", {"topk": args.topk}, None)
    if ranked["truncated"]:
        print(
            f"note: requested top {ranked['requested_top_k']} but only "
            f"{ranked['top_k']} classes are scored"
        )
    best = ranked["best"][0] if ranked["best"] else None
    print(f"ranked {ranked['top_k']} classes; best: {best}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uwovis",
        description="Open-vocabulary underwater instance segmentation, desk scale.",
    )
    parser.add_argument("--version", action="version", version=f"uwovis {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic fixture")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--images", type=int, default=20, help="number of images")
    p.add_argument("--classes", type=int, default=6, help="number of classes")
    p.add_argument("--shapes-per-image", type=int, default=2, help="instances per image")
    p.add_argument("--size", type=int, default=64, help="square image side in pixels")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("select-templates", help="rank prompt templates per class")
    p.add_argument("--dataset", required=True, help="annotation file with images")
    p.add_argument(
        "--strategy",
        choices=("mean-all", "mixed", "weighted"),
        default="mixed",
        help="selection strategy",
    )
    p.add_argument("--topn", type=int, default=20, help="top-N templates to keep")
    p.add_argument("--lambda", type=float, default=0.5, help="mixed-strategy interpolation weight")
    p.add_argument("--alpha-enh", type=float, default=2.0, help="weighted-strategy enhancement factor")
    p.add_argument("--seed", type=int, default=0, help="single-image sampling seed")
    p.add_argument("--encoder-seed", type=int, default=0, help="frozen encoder seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_select_templates)

    p = sub.add_parser("train", help="train on an annotation file")
    p.add_argument("--config", help="run-config JSON (defaults when omitted)")
    p.add_argument("--ann", required=True, help="training annotation file")
    p.add_argument("--mode", choices=("in-domain", "cross-domain"), help="task mode (overrides config)")
    p.add_argument("--seed", type=int, help="seed override (wins over config)")
    p.add_argument("--steps", type=int, help="step-count override (wins over config)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run inference and grouped mask-AP evaluation")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--ann", required=True, help="evaluation annotation file")
    p.add_argument("--split", help="class-split JSON (derived from checkpoint vs dataset when omitted)")
    p.add_argument("--vocab", help="JSON list of class names (defaults to the split's val classes)")
    p.add_argument("--score-floor", type=float, default=None, help="prediction score floor")
    p.add_argument(
        "--topn-sweep",
        help="comma-separated TopN grid; emits topn_sweep.json with one row per value",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="rank best/worst classes and plot them")
    p.add_argument("--report", required=True, help="evaluation report JSON")
    p.add_argument("--report2", help="second report for paired comparison")
    p.add_argument("--topk", type=int, default=10, help="list length per direction")
    p.add_argument("--no-plot", action="store_true", help="skip chart emission")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
