"""Command-line surface.

Subcommands: ``make-splits``, ``train --stage {1,2,both}``,
``eval --split {test,unlabeled-diagnostic} --net {teacher,student}``,
``ablate`` and ``report``. Configuration comes from an optional key=value
file plus repeatable ``--set key=value`` overrides (overrides win). Exit
codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import viz
from .checkpoint import CheckpointError
from .config import RunConfig, UsageError, load_config, write_resolved_config
from .labels import LabelSpace
from .metrics import evaluate, pseudo_label_quality
from .model import predict
from .splits import (
    SPLIT_LABELED,
    SPLIT_TEST,
    SPLIT_UNLABELED,
    load_diagnostic_split,
    load_training_split,
    write_splits,
)
from .train import (
    TrainingDiverged,
    generate_pseudo_labels,
    layout_from_config,
    state_from_checkpoint,
    state_to_checkpoint,
    train_stage1,
    train_stage2,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we reserve 2 for runtime
        raise UsageError(message)


def _add_common(p: _Parser):
    p.add_argument("-c", "--config", default=None, help="key=value config file")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable; wins over the file)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="osdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-splits", parents=[], help="generate split manifests and images")
    _add_common(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing splits directory")

    p = sub.add_parser("train", help="run training stages")
    _add_common(p)
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint path (default: stage2.ckpt)")
    p.add_argument("--split", choices=("test", "unlabeled-diagnostic"), default="test")
    p.add_argument("--net", choices=("teacher", "student"), default="teacher")

    p = sub.add_parser("ablate", help="run the 2x2 component ablation grid")
    _add_common(p)

    p = sub.add_parser("report", help="render loss curves and the ablation table")
    _add_common(p)
    return parser


# ----------------------------------------------------------------- helpers --


def _write_jsonl(path: Path, records: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _require_splits(run_dir: Path) -> dict[str, Path]:
    splits_dir = run_dir / "splits"
    paths = {name: splits_dir / f"{name}.jsonl" for name in (SPLIT_LABELED, SPLIT_UNLABELED, SPLIT_TEST)}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise FileNotFoundError(
            "split manifests missing (run `osdet make-splits` first): " + ", ".join(missing)
        )
    return paths


def _do_train(cfg: RunConfig, run_dir: Path, splits_dir: Path, stage: str):
    """Run the requested stage(s), writing logs and checkpoints under run_dir."""
    space = cfg.label_space()
    manifests = {
        name: splits_dir / f"{name}.jsonl" for name in (SPLIT_LABELED, SPLIT_UNLABELED, SPLIT_TEST)
    }
    labeled = load_training_split(manifests[SPLIT_LABELED], splits_dir, space)
    ckpt_dir = run_dir / "checkpoints"
    logs_dir = run_dir / "logs"
    write_resolved_config(cfg, run_dir)

    def checkpoint_callback(state, record):
        if cfg.checkpoint_every > 0 and (record["iteration"] + 1) % cfg.checkpoint_every == 0:
            state_to_checkpoint(ckpt_dir / f"iter_{record['iteration'] + 1:06d}.ckpt", state, cfg)

    state = None
    try:
        if stage in ("1", "both"):
            state, records = train_stage1(labeled, cfg, space, callback=checkpoint_callback)
            _write_jsonl(logs_dir / "stage1.jsonl", records)
            state_to_checkpoint(ckpt_dir / "stage1.ckpt", state, cfg)
        if stage in ("2", "both"):
            if state is None:
                stage1_path = ckpt_dir / "stage1.ckpt"
                if not stage1_path.exists():
                    raise FileNotFoundError(
                        f"stage 2 needs a stage-1 checkpoint at {stage1_path}; run --stage 1 first"
                    )
                state, _ = state_from_checkpoint(stage1_path)
            unlabeled = load_training_split(manifests[SPLIT_UNLABELED], splits_dir, space)
            state, records = train_stage2(state, labeled, unlabeled, cfg, space,
                                          callback=checkpoint_callback)
            _write_jsonl(logs_dir / "stage2.jsonl", records)
            state_to_checkpoint(ckpt_dir / "stage2.ckpt", state, cfg)
    except TrainingDiverged as exc:
        dump = run_dir / "diagnostics" / "diverged.ckpt"
        state_to_checkpoint(dump, exc.state, cfg)
        raise RuntimeError(f"{exc} (state dumped to {dump})") from exc
    return state


def _evaluate_checkpoint(cfg: RunConfig, run_dir: Path, splits_dir: Path,
                         ckpt_path: Path, split: str, net: str, out_dir: Path):
    state, ckpt_cfg = state_from_checkpoint(ckpt_path)
    space = ckpt_cfg.label_space()
    layout = layout_from_config(ckpt_cfg, space)
    if net == "teacher":
        if state.teacher is None:
            raise RuntimeError(f"checkpoint {ckpt_path} holds no teacher parameters")
        params = state.teacher
    else:
        params = state.student

    out_dir.mkdir(parents=True, exist_ok=True)
    images_dir = out_dir / "images"

    if split == "test":
        items = load_diagnostic_split(splits_dir / f"{SPLIT_TEST}.jsonl", splits_dir, space)
        predictions, ground_truth = {}, {}
        for item in items:
            dets = predict(
                params, layout, item.image, space,
                score_threshold=cfg.eval_score_threshold, nms_iou=cfg.eval_nms_iou,
                allow_unknown=ckpt_cfg.enable_uc,
            )
            img_id = item.record.seed
            predictions[img_id] = dets
            ground_truth[img_id] = [
                (int(l), item.image.objects[i][1]) for i, l in enumerate(item.labels)
            ]
            viz.save_annotated(
                images_dir / f"{img_id}.png", item.image.pixels, dets, space,
                ground_truth=ground_truth[img_id],
            )
        result = evaluate(predictions, ground_truth, space, iou_thresh=cfg.eval_iou_thresh)
        (out_dir / "metrics.txt").write_text(result.to_lines(space))
        (out_dir / "metrics.json").write_text(
            json.dumps(result.to_dict(space), sort_keys=True, indent=1) + "\n"
        )
        return result

    # unlabeled-diagnostic: pseudo-label quality against hidden annotations
    items = load_diagnostic_split(splits_dir / f"{SPLIT_UNLABELED}.jsonl", splits_dir, space)
    pseudo, hidden = {}, {}
    for item in items:
        dets = generate_pseudo_labels(params, layout, item.image, ckpt_cfg, space, aug_seed=None)
        img_id = item.record.seed
        pseudo[img_id] = dets
        hidden[img_id] = [(int(l), item.image.objects[i][1]) for i, l in enumerate(item.labels)]
        viz.save_annotated(
            images_dir / f"{img_id}.png", item.image.pixels, dets, space,
            ground_truth=hidden[img_id],
        )
    quality = pseudo_label_quality(pseudo, hidden, space, iou_thresh=cfg.eval_iou_thresh)
    lines = "".join(f"{k} {v!r}\n" for k, v in quality.to_dict().items())
    (out_dir / "metrics.txt").write_text(lines)
    (out_dir / "metrics.json").write_text(
        json.dumps(quality.to_dict(), sort_keys=True, indent=1) + "\n"
    )
    return quality


# ---------------------------------------------------------------- commands --


def cmd_make_splits(args) -> int:
    cfg = load_config(args.config, args.overrides)
    run_dir = cfg.run_dir()
    splits_dir = run_dir / "splits"
    paths = write_splits(cfg.split_config(), splits_dir, force=args.force)
    write_resolved_config(cfg, run_dir)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    run_dir = cfg.run_dir()
    _require_splits(run_dir)
    _do_train(cfg, run_dir, run_dir / "splits", args.stage)
    print(f"training complete (stage {args.stage}); checkpoints in {run_dir / 'checkpoints'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.overrides)
    run_dir = cfg.run_dir()
    _require_splits(run_dir)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else run_dir / "checkpoints" / "stage2.ckpt"
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    out_dir = run_dir / "eval" / f"{args.net}_{args.split}"
    result = _evaluate_checkpoint(cfg, run_dir, run_dir / "splits", ckpt_path,
                                  args.split, args.net, out_dir)
    if args.split == "test":
        print(f"map_k={result.map_k:.4f} ap_u={result.ap_u:.4f} -> {out_dir}")
    else:
        print(
            f"precision={result.precision:.4f} recall={result.recall:.4f} "
            f"ood_contamination={result.ood_contamination:.4f} -> {out_dir}"
        )
    return EXIT_OK


ABLATION_ROWS = (
    (False, False),
    (True, False),
    (False, True),
    (True, True),
)


def run_ablation(cfg: RunConfig, run_dir: Path) -> dict:
    """Train and evaluate the 2x2 {fc, uc} grid with shared splits and seed.

    Returns the table payload: one row per combination with teacher-side
    test metrics and pseudo-label diagnostics, plus a label-only baseline
    read from the (off, off) row's stage-1 checkpoint.
    """
    splits_dir = run_dir / "splits"
    ablation_dir = run_dir / "ablation"
    rows = []
    label_baseline = None
    for enable_fc, enable_uc in ABLATION_ROWS:
        row_name = f"fc{int(enable_fc)}_uc{int(enable_uc)}"
        row_dir = ablation_dir / row_name
        row_cfg = replace(cfg, enable_fc=enable_fc, enable_uc=enable_uc)
        _do_train(row_cfg, row_dir, splits_dir, "both")
        result = _evaluate_checkpoint(
            row_cfg, row_dir, splits_dir, row_dir / "checkpoints" / "stage2.ckpt",
            "test", "teacher", row_dir / "eval" / "teacher_test",
        )
        quality = _evaluate_checkpoint(
            row_cfg, row_dir, splits_dir, row_dir / "checkpoints" / "stage2.ckpt",
            "unlabeled-diagnostic", "teacher", row_dir / "eval" / "teacher_unlabeled-diagnostic",
        )
        rows.append(
            {
                "enable_fc": enable_fc,
                "enable_uc": enable_uc,
                "map_k": result.map_k,
                "ap_u": result.ap_u,
                "pseudo_precision": quality.precision,
                "pseudo_recall": quality.recall,
                "ood_contamination": quality.ood_contamination,
            }
        )
        if not enable_fc and not enable_uc:
            baseline = _evaluate_checkpoint(
                row_cfg, row_dir, splits_dir, row_dir / "checkpoints" / "stage1.ckpt",
                "test", "teacher", row_dir / "eval" / "label_baseline_test",
            )
            label_baseline = {"map_k": baseline.map_k, "ap_u": baseline.ap_u}

    table = {"rows": rows, "label_baseline": label_baseline}
    ablation_dir.mkdir(parents=True, exist_ok=True)
    (ablation_dir / "table.json").write_text(json.dumps(table, sort_keys=True, indent=1) + "\n")
    lines = ["fc uc map_k ap_u"]
    for r in rows:
        lines.append(
            f"{'on' if r['enable_fc'] else 'off'} {'on' if r['enable_uc'] else 'off'} "
            f"{r['map_k']:.4f} {r['ap_u']:.4f}"
        )
    (ablation_dir / "table.txt").write_text("\n".join(lines) + "\n")
    return table


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    run_dir = cfg.run_dir()
    _require_splits(run_dir)
    table = run_ablation(cfg, run_dir)
    print((run_dir / "ablation" / "table.txt").read_text(), end="")
    if table["label_baseline"]:
        print(f"label-only baseline: map_k {table['label_baseline']['map_k']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = load_config(args.config, args.overrides)
    run_dir = cfg.run_dir()
    report_dir = run_dir / "report"
    produced = []
    for stage in ("stage1", "stage2"):
        log_path = run_dir / "logs" / f"{stage}.jsonl"
        if log_path.exists():
            records = [json.loads(line) for line in log_path.read_text().splitlines() if line]
            out = report_dir / f"loss_{stage}.png"
            viz.plot_training_log(records, out, title=stage)
            produced.append(out)
    table_path = run_dir / "ablation" / "table.json"
    if table_path.exists():
        table = json.loads(table_path.read_text())
        out = report_dir / "ablation_table.png"
        viz.render_ablation_table(table["rows"], out)
        produced.append(out)
    if not produced:
        raise FileNotFoundError(f"nothing to report under {run_dir} (no logs or ablation table)")
    for p in produced:
        print(p)
    return EXIT_OK


_COMMANDS = {
    "make-splits": cmd_make_splits,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, FileExistsError, CheckpointError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
