"""Operator command line: file-driven, reproducible pipeline runs.

Subcommands: synth, train-seg, train-translate, translate, evaluate,
compare, report. Every command reads a flat key-value config (unknown
keys are hard errors), writes a resolved-config snapshot into its output
directory, and exits nonzero with a structured code on failure.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics, synthcorpus, trainer
from .config import ConfigKeyError, parse_config, write_config
from .imaging import Image, load_label_png, load_png, save_png
from .losses import LossWeights
from .nets import SegUNet, SegmentorHandle, infer_translate, train_toy_segmentor
from .synthcorpus import EVALUATED_CLASSES, CorpusManifest, SceneSpec, default_schema

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4

OUT_ROOT_ENV = "STAINCYCLE_OUT_ROOT"


class CliError(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_dir(raw: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    path = Path(root) / raw if root else Path(raw)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- synth --------------------------------------------------------------------

SYNTH_SCHEMA = {
    "canvas_px": int,
    "marker_density": float,
    "n_train_p": int,
    "n_train_a": int,
    "n_eval_a": int,
    "base_seed": int,
    "border_width_px": int,
}


def cmd_synth(args) -> int:
    cfg = parse_config(args.config, SYNTH_SCHEMA)
    out = _out_dir(args.out)
    spec = SceneSpec(
        canvas_px=cfg.get("canvas_px", 128),
        marker_density=cfg.get("marker_density", 0.0),
        border_width_px=cfg.get("border_width_px", 2),
    )
    try:
        synthcorpus.build_corpus(
            spec,
            n_train_p=cfg.get("n_train_p", 20),
            n_train_a=cfg.get("n_train_a", 20),
            n_eval_a=cfg.get("n_eval_a", 8),
            root=out,
            base_seed=cfg.get("base_seed", 0),
        )
    except synthcorpus.RefuseOverwriteError as exc:
        raise CliError(str(exc), EXIT_DATA)
    write_config(out / "resolved_synth.cfg", cfg)
    print(f"corpus written to {out}")
    return EXIT_OK


# -- train-seg ----------------------------------------------------------------

TRAIN_SEG_SCHEMA = {
    "corpus_root": str,
    "seed": int,
    "iterations": int,
    "batch_size": int,
    "lr": float,
    "accuracy_gate": float,
    "depth": int,
    "base_width": int,
}


def _load_labelled(manifest: CorpusManifest, schema):
    images, labels = [], []
    for img_path, lab_path, _ in manifest.entries:
        if lab_path is None:
            raise CliError(f"manifest entry without label: {img_path}", EXIT_DATA)
        images.append(load_png(img_path).values)
        labels.append(load_label_png(lab_path, schema).labels)
    return np.stack(images), np.stack(labels)


def save_segmentor(path: Path, handle: SegmentorHandle, depth: int, base_width: int) -> None:
    torch.save(
        {
            "state": handle.model.state_dict(),
            "depth": depth,
            "base_width": base_width,
            "class_names": list(handle.schema.class_names),
            "background_index": handle.schema.background_index,
            "border_index": handle.schema.border_index,
            "composites": {k: sorted(v) for k, v in handle.schema.composites.items()},
        },
        path,
    )


def load_segmentor(path: Path | str) -> SegmentorHandle:
    blob = torch.load(path, weights_only=False)
    from .imaging import ClassSchema

    schema = ClassSchema(
        class_names=tuple(blob["class_names"]),
        background_index=blob["background_index"],
        border_index=blob["border_index"],
        composites={k: frozenset(v) for k, v in blob["composites"].items()},
    )
    model = SegUNet(schema.num_classes, depth=blob["depth"], base_width=blob["base_width"])
    model.load_state_dict(blob["state"])
    return SegmentorHandle(model=model, schema=schema)


def cmd_train_seg(args) -> int:
    cfg = parse_config(args.config, TRAIN_SEG_SCHEMA)
    out = _out_dir(args.out)
    schema = default_schema()
    manifest = CorpusManifest.read(Path(cfg["corpus_root"]) / "p_train.csv")
    images, labels = _load_labelled(manifest, schema)
    depth = cfg.get("depth", 4)
    base_width = cfg.get("base_width", 16)
    try:
        handle = train_toy_segmentor(
            images,
            labels,
            schema,
            seed=cfg.get("seed", 0),
            iterations=cfg.get("iterations", 400),
            batch_size=cfg.get("batch_size", 4),
            lr=cfg.get("lr", 2e-3),
            accuracy_gate=cfg.get("accuracy_gate", 0.90),
            depth=depth,
            base_width=base_width,
        )
    except Exception as exc:
        raise CliError(f"segmentor training failed: {exc}", EXIT_TRAINING)
    save_segmentor(out / "segmentor.pt", handle, depth, base_width)
    write_config(out / "resolved_train_seg.cfg", cfg)
    print(f"segmentor written to {out / 'segmentor.pt'} (digest {handle.digest[:12]})")
    return EXIT_OK


# -- train-translate ----------------------------------------------------------

TRAIN_TRANSLATE_SCHEMA = {
    "corpus_root": str,
    "segmentor": str,
    "segnet": bool,
    "ec": bool,
    "total_iterations": int,
    "batch_size": int,
    "lr0": float,
    "decay_start": int,
    "pool_size": int,
    "use_pool": bool,
    "seed": int,
    "checkpoint_every": int,
    "image_px": int,
    "gen_depth": int,
    "gen_width": int,
    "disc_depth": int,
    "disc_width": int,
    "least_squares": bool,
    "non_saturating": bool,
    "lambda_adv": float,
    "lambda_cyc": float,
    "lambda_idt": float,
    "lambda_seg": float,
    "augment": bool,
}


def train_config_from(cfg: dict) -> trainer.TrainConfig:
    weights = LossWeights(
        adv=cfg.get("lambda_adv", 1.0),
        cyc=cfg.get("lambda_cyc", 1.0),
        idt=cfg.get("lambda_idt", 1.0),
        seg=cfg.get("lambda_seg", 1.0),
    )
    keys = (
        "total_iterations", "batch_size", "lr0", "decay_start", "pool_size", "use_pool",
        "seed", "checkpoint_every", "image_px", "gen_depth", "gen_width",
        "disc_depth", "disc_width", "least_squares", "non_saturating",
        "segnet", "ec", "augment",
    )
    kwargs = {k: cfg[k] for k in keys if k in cfg}
    return trainer.TrainConfig(weights=weights, **kwargs)


def cmd_train_translate(args) -> int:
    cfg = parse_config(args.config, TRAIN_TRANSLATE_SCHEMA)
    out = _out_dir(args.out)
    try:
        train_cfg = train_config_from(cfg)
    except (trainer.ConfigError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    root = Path(cfg["corpus_root"])
    manifest_p = CorpusManifest.read(root / "p_train.csv")
    manifest_a = CorpusManifest.read(root / "a_train.csv")
    segmentor = None
    if train_cfg.segnet:
        if "segmentor" not in cfg:
            raise CliError("segnet variant requires a 'segmentor' config key", EXIT_CONFIG)
        segmentor = load_segmentor(cfg["segmentor"])
    write_config(out / "resolved_train_translate.cfg", cfg)
    trainer.fit(train_cfg, manifest_p, manifest_a, out, segmentor=segmentor)
    print(f"run finished; checkpoints in {out}")
    return EXIT_OK


def _load_run(ckpt_path: Path):
    from .nets import load_checkpoint

    blob = load_checkpoint(ckpt_path)
    spec = blob["spec"]
    weights = LossWeights(**spec.pop("weights"))
    spec["betas"] = tuple(spec["betas"])
    cfg = trainer.TrainConfig(weights=weights, **spec)
    return cfg, trainer.load_translator(cfg, blob)


# -- translate ----------------------------------------------------------------


def cmd_translate(args) -> int:
    out = _out_dir(args.out)
    _, translator = _load_run(Path(args.ckpt))
    manifest = CorpusManifest.read(args.manifest)
    rows = []
    for img_path, _, seed in manifest.entries:
        img = load_png(img_path)
        x = torch.from_numpy(img.values).float().permute(2, 0, 1)[None] * 2.0 - 1.0
        y = infer_translate(translator, x)[0].permute(1, 2, 0).numpy()
        sim = Image((y + 1.0) / 2.0, value_range=(0.0, 1.0))
        sim_path = out / f"sim_p_{seed:05d}.png"
        save_png(sim, sim_path)
        rows.append((str(sim_path), seed))
    with open(out / "translations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "seed"])
        writer.writerows(rows)
    print(f"{len(rows)} translations written to {out}")
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------


def evaluate_manifest(translator, segmentor, manifest: CorpusManifest, model_id: str):
    images, labels = [], []
    for img_path, lab_path, _ in manifest.entries:
        if lab_path is None:
            raise CliError(f"evaluation manifest entry lacks a label: {img_path}", EXIT_CONFIG)
        images.append(load_png(img_path).values)
        labels.append(load_label_png(lab_path, segmentor.schema))
    return metrics.evaluate_model(
        translator, segmentor, images, labels, EVALUATED_CLASSES, model_id=model_id
    )


def write_report(out: Path, report: metrics.EvalReport) -> None:
    with open(out / "dice_records.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["model", "class", "index", "dice"])
        writer.writeheader()
        writer.writerows(report.to_rows())
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "class", "idsc", "std"])
        for c in report.classes:
            writer.writerow(
                [
                    report.model_id,
                    c.class_name,
                    "n/a" if c.idsc is None else f"{c.idsc:.8f}",
                    "n/a" if c.std is None else f"{c.std:.8f}",
                ]
            )
    (out / "table.md").write_text(metrics.summarize([report]) + "\n")


def read_report(path: Path | str) -> metrics.EvalReport:
    """Rebuild an EvalReport from a dice_records.csv produced by evaluate."""
    per_class: dict[str, list[float]] = {}
    model_id = "model"
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            model_id = row["model"]
            per_class.setdefault(row["class"], []).append(float(row["dice"]))
    classes = []
    for name in per_class:
        values = per_class[name]
        classes.append(
            metrics.ClassResult(name, float(np.mean(values)), float(np.std(values)), values)
        )
    return metrics.EvalReport(model_id, classes)


def cmd_evaluate(args) -> int:
    out = _out_dir(args.out)
    _, translator = _load_run(Path(args.ckpt))
    segmentor = load_segmentor(args.segmentor)
    manifest = CorpusManifest.read(args.manifest)
    report = evaluate_manifest(translator, segmentor, manifest, model_id=args.model_id)
    write_report(out, report)
    print((out / "table.md").read_text())
    return EXIT_OK


# -- compare ------------------------------------------------------------------


def cmd_compare(args) -> int:
    reports = [read_report(p) for p in args.reports]
    table = metrics.summarize(reports, baseline_id=reports[0].model_id)
    print(table)
    if args.out:
        out = _out_dir(args.out)
        (out / "comparison.md").write_text(table + "\n")
    return EXIT_OK


# -- report -------------------------------------------------------------------


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run_dir)
    out = _out_dir(args.out or str(run_dir))
    log_path = run_dir / "log.csv"
    if log_path.exists():
        with open(log_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        its = [int(r["iteration"]) for r in rows]
        fig, ax = plt.subplots(figsize=(8, 5))
        for term in ("adv_d", "adv_g", "cyc", "idt", "seg_cyc", "seg_idt"):
            ax.plot(its, [float(r[term]) for r in rows], label=term, linewidth=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(loc="upper right", fontsize=8)
        fig.savefig(out / "loss_curves.png", dpi=120)
        plt.close(fig)
    summary_path = run_dir / "summary.csv"
    if summary_path.exists():
        with open(summary_path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r["idsc"] != "n/a"]
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.bar([r["class"] for r in rows], [100 * float(r["idsc"]) for r in rows])
        ax.set_ylabel("IDSC [%]")
        ax.set_ylim(0, 100)
        fig.savefig(out / "idsc_per_class.png", dpi=120)
        plt.close(fig)
    print(f"plots written to {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="staincycle")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build the synthetic two-domain corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-seg", help="train and freeze the toy segmentor")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-translate", help="train a translation variant")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_translate)

    p = sub.add_parser("translate", help="batch-translate a manifest to simulated first-domain PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="instance-level Dice evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--segmentor", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-id", default="model")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="starred comparison table across evaluation reports")
    p.add_argument("reports", nargs="+", help="dice_records.csv files; first is the baseline")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="loss-curve and per-class score plots")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigKeyError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
