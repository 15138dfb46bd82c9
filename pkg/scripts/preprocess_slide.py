#!/usr/bin/env python3
"""Cut a large stained image into training patches.

Grayscales the slide, finds the tissue threshold automatically, keeps only
windows with enough tissue, resamples them to the target patch size, and
writes the patches plus a CSV manifest.

    python3 scripts/preprocess_slide.py slide.png --mpp 0.5 --out patches/
"""
import argparse
from pathlib import Path

from staincycle.imaging import (
    TilingSpec,
    load_png,
    rgb_to_gray,
    save_png,
    tessellate,
    tissue_mask,
    write_patch_manifest,
)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("slide", type=Path)
    ap.add_argument("--mpp", type=float, required=True, help="microns per pixel of the slide")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--window-um", type=float, default=216.0)
    ap.add_argument("--patch-px", type=int, default=640)
    ap.add_argument("--min-tissue", type=float, default=0.5)
    ap.add_argument("--light-tissue", action="store_true",
                    help="tissue is brighter than background instead of darker")
    ap.add_argument("--domain", default="p", help="domain tag recorded in the manifest")
    ns = ap.parse_args()

    slide = load_png(ns.slide, mpp=ns.mpp)
    mask = tissue_mask(rgb_to_gray(slide), dark_tissue=not ns.light_tissue)
    spec = TilingSpec(patch_physical_size=ns.window_um, output_px=ns.patch_px,
                      tissue_fraction_min=ns.min_tissue)
    patches = tessellate(slide, mask, spec)

    ns.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (patch, (ox, oy)) in enumerate(patches):
        path = ns.out / f"patch_{i:05d}.png"
        save_png(patch, path)
        rows.append({"path": str(path), "origin_x_px": ox, "origin_y_px": oy,
                     "slide_id": ns.slide.stem, "domain": ns.domain, "mpp": ns.mpp})
    write_patch_manifest(ns.out / "patches.csv", rows)
    print(f"{len(rows)} patches written to {ns.out}")


if __name__ == "__main__":
    main()
