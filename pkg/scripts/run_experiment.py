#!/usr/bin/env python3
"""End-to-end experiment driver: corpus, segmentor, three translator variants,
evaluation, and a comparison table.

Runs entirely through the CLI so every stage leaves a resolved config snapshot
next to its outputs. The desk scale finishes on a laptop CPU in well under an
hour; the full scale mirrors the reference schedule (300k iterations at the
default network sizes) and is only realistic with a GPU.

    python3 scripts/run_experiment.py --out runs/desk --scale desk --seed 0
"""
import argparse
import sys
from pathlib import Path

from staincycle.cli import main as cli

SCALES = {
    "desk": dict(
        canvas_px=48, n_train_p=20, n_train_a=20, n_eval_a=8,
        seg_iterations=800, seg_gate=0.90, seg_depth=4, seg_width=16,
        iterations=5000, batch_size=2, image_px=48,
        gen_depth=4, gen_width=16, disc_depth=3, disc_width=16,
        lr0=2e-4, least_squares=True,
    ),
    "full": dict(
        canvas_px=128, n_train_p=200, n_train_a=200, n_eval_a=50,
        seg_iterations=4000, seg_gate=0.90, seg_depth=4, seg_width=16,
        iterations=300_000, batch_size=3, image_px=128,
        gen_depth=7, gen_width=32, disc_depth=4, disc_width=32,
        lr0=1e-4, least_squares=False,
    ),
}


def write_cfg(path: Path, **kv) -> Path:
    path.write_text("".join(f"{k} = {v}\n" for k, v in kv.items()))
    return path


def run(args: list[str]) -> None:
    code = cli(args)
    if code != 0:
        sys.exit(f"stage failed with exit code {code}: {' '.join(args)}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--scale", choices=sorted(SCALES), default="desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--marker-density", type=float, default=0.3)
    ns = ap.parse_args()
    s = SCALES[ns.scale]
    out = ns.out
    out.mkdir(parents=True, exist_ok=True)

    corpus = out / "corpus"
    if not (corpus / "p_train.csv").exists():
        run(["synth", "--config", str(write_cfg(
            out / "synth.cfg",
            canvas_px=s["canvas_px"], marker_density=ns.marker_density,
            n_train_p=s["n_train_p"], n_train_a=s["n_train_a"], n_eval_a=s["n_eval_a"],
            base_seed=ns.seed, border_width_px=1,
        )), "--out", str(corpus)])

    seg = out / "seg"
    if not (seg / "segmentor.pt").exists():
        run(["train-seg", "--config", str(write_cfg(
            out / "seg.cfg",
            corpus_root=corpus, seed=ns.seed, iterations=s["seg_iterations"],
            accuracy_gate=s["seg_gate"], depth=s["seg_depth"], base_width=s["seg_width"],
        )), "--out", str(seg)])

    records = []
    for variant in ("plain", "ec", "segnet"):
        run_dir = out / f"run_{variant}"
        cfg = dict(
            corpus_root=corpus, seed=ns.seed,
            total_iterations=s["iterations"], decay_start=s["iterations"] // 2,
            batch_size=s["batch_size"], image_px=s["image_px"], lr0=s["lr0"],
            gen_depth=s["gen_depth"], gen_width=s["gen_width"],
            disc_depth=s["disc_depth"], disc_width=s["disc_width"],
            least_squares=str(s["least_squares"]).lower(),
            ec=str(variant == "ec").lower(), segnet=str(variant == "segnet").lower(),
        )
        if variant == "segnet":
            cfg["segmentor"] = seg / "segmentor.pt"
        if not (run_dir / "ckpt_final.pt").exists():
            run(["train-translate", "--config",
                 str(write_cfg(out / f"train_{variant}.cfg", **cfg)), "--out", str(run_dir)])

        eval_dir = out / f"eval_{variant}"
        run(["evaluate", "--ckpt", str(run_dir / "ckpt_final.pt"),
             "--segmentor", str(seg / "segmentor.pt"),
             "--manifest", str(corpus / "a_eval.csv"),
             "--out", str(eval_dir), "--model-id", variant])
        records.append(str(eval_dir / "dice_records.csv"))
        run(["report", str(run_dir), "--out", str(out / f"plots_{variant}")])

    run(["compare", *records, "--out", str(out / "comparison")])
    print(f"done; comparison table at {out / 'comparison' / 'comparison.md'}")


if __name__ == "__main__":
    main()
