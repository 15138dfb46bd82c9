"""Deterministic synthetic two-domain corpus with known ground truth.

Domain P is an "easy to segment" rendering of a scene; domain A is a
recoloring of the same scene geometry plus marker blobs drawn from an
independent random stream. The blobs are the only content of A that
cannot be inferred from P, which gives a controllable amount of
reconstruction underdetermination for cycle-training experiments.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .imaging import (
    ClassSchema,
    Image,
    ImagingError,
    LabelMap,
    save_label_png,
    save_png,
)


class PlacementFailureError(RuntimeError):
    """Canvas too small to place the requested structure counts."""


class RefuseOverwriteError(RuntimeError):
    """Corpus output path already holds a manifest."""


BACKGROUND = 0
BORDER = 1
# Base foreground classes: two concentric structure families plus two plain ones.
CLASS_NAMES = (
    "background",
    "border",
    "core",     # inner disc of the concentric structure
    "rim",      # outer shell around the core
    "duct",     # plain elongated ellipse
    "wall",     # vessel wall ring
    "lumen",    # vessel interior
    "channel",  # plain large ellipse
)
# Six evaluated classes, two of them unions of base classes.
EVALUATED_CLASSES = ("core", "duct", "lumen", "channel", "body", "vessel")


def default_schema() -> ClassSchema:
    names = CLASS_NAMES
    return ClassSchema(
        class_names=names,
        background_index=BACKGROUND,
        border_index=BORDER,
        composites={
            "body": frozenset({names.index("core"), names.index("rim")}),
            "vessel": frozenset({names.index("wall"), names.index("lumen")}),
        },
    )


# Per-class fill colors, [0,1] RGB. P is bright/pastel, A darker and shifted.
PALETTE_P = {
    "background": (0.93, 0.90, 0.95),
    "border": (0.25, 0.10, 0.30),
    "core": (0.55, 0.25, 0.60),
    "rim": (0.85, 0.60, 0.80),
    "duct": (0.80, 0.45, 0.55),
    "wall": (0.70, 0.30, 0.45),
    "lumen": (0.95, 0.92, 0.85),
    "channel": (0.65, 0.75, 0.90),
}
PALETTE_A = {
    "background": (0.96, 0.95, 0.92),
    "border": (0.30, 0.25, 0.15),
    "core": (0.45, 0.30, 0.15),
    "rim": (0.70, 0.55, 0.35),
    "duct": (0.40, 0.55, 0.45),
    "wall": (0.55, 0.40, 0.20),
    "lumen": (0.90, 0.88, 0.80),
    "channel": (0.35, 0.45, 0.60),
}
MARKER_COLOR = (0.15, 0.25, 0.55)


@dataclass(frozen=True)
class SceneSpec:
    """Configuration of the synthetic scene generator."""

    canvas_px: int = 128
    schema: ClassSchema = field(default_factory=default_schema)
    # (min, max) inclusive instance count per structure family
    n_bodies: tuple[int, int] = (2, 3)
    n_ducts: tuple[int, int] = (3, 5)
    n_vessels: tuple[int, int] = (1, 2)
    n_channels: tuple[int, int] = (1, 2)
    border_width_px: int = 2
    texture_amp: float = 0.04
    marker_density: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.marker_density <= 1.0):
            raise ImagingError("marker_density must lie in [0, 1]")


def _ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    y = yy - cy
    x = xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * x + s * y
    v = -s * x + c * y
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _dilate(mask: np.ndarray, width: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(width):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        # diagonals, 8-neighbourhood
        grown[1:, 1:] |= out[:-1, :-1]
        grown[1:, :-1] |= out[:-1, 1:]
        grown[:-1, 1:] |= out[1:, :-1]
        grown[:-1, :-1] |= out[1:, 1:]
        out = grown
    return out


def generate_scene(spec: SceneSpec, seed: int) -> tuple[LabelMap, list[dict]]:
    """Place non-overlapping structures on the canvas, deterministically.

    Each placed instance gets a border-class ring of ``border_width_px``
    around it so touching structures stay separable. Returns the label map
    and a geometry record (one dict per instance) for debugging.
    """
    rng = np.random.default_rng(seed)
    size = spec.canvas_px
    names = spec.schema.class_names
    labels = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)
    geometry: list[dict] = []

    scale = size / 128.0

    def try_place(kind: str, paint) -> None:
        for _ in range(200):
            cy = rng.uniform(8 * scale, size - 8 * scale)
            cx = rng.uniform(8 * scale, size - 8 * scale)
            mask, parts = paint(cy, cx)
            footprint = _dilate(mask, spec.border_width_px)
            if (footprint & occupied).any():
                continue
            border_ring = footprint & ~mask
            labels[border_ring] = BORDER
            for cls_name, cls_mask in parts:
                labels[cls_mask] = names.index(cls_name)
            occupied[footprint] = True
            geometry.append({"kind": kind, "cy": cy, "cx": cx})
            return
        raise PlacementFailureError(
            f"could not place {kind} on a {size}px canvas after 200 attempts"
        )

    def paint_body(cy, cx):
        r_out = rng.uniform(9, 14) * scale
        angle = rng.uniform(0, np.pi)
        outer = _ellipse_mask(size, cy, cx, r_out, r_out * rng.uniform(0.8, 1.0), angle)
        inner = _ellipse_mask(size, cy, cx, r_out * 0.55, r_out * 0.5, angle)
        inner &= outer
        return outer, [("rim", outer & ~inner), ("core", inner)]

    def paint_duct(cy, cx):
        ry = rng.uniform(4, 7) * scale
        rx = ry * rng.uniform(1.2, 2.2)
        angle = rng.uniform(0, np.pi)
        mask = _ellipse_mask(size, cy, cx, ry, rx, angle)
        return mask, [("duct", mask)]

    def paint_vessel(cy, cx):
        r_out = rng.uniform(8, 12) * scale
        angle = rng.uniform(0, np.pi)
        outer = _ellipse_mask(size, cy, cx, r_out, r_out * rng.uniform(0.85, 1.0), angle)
        inner = _ellipse_mask(size, cy, cx, r_out * 0.5, r_out * 0.45, angle)
        inner &= outer
        return outer, [("wall", outer & ~inner), ("lumen", inner)]

    def paint_channel(cy, cx):
        ry = rng.uniform(7, 11) * scale
        rx = ry * rng.uniform(0.9, 1.6)
        angle = rng.uniform(0, np.pi)
        mask = _ellipse_mask(size, cy, cx, ry, rx, angle)
        return mask, [("channel", mask)]

    for lo_hi, kind, painter in (
        (spec.n_bodies, "body", paint_body),
        (spec.n_vessels, "vessel", paint_vessel),
        (spec.n_channels, "channel", paint_channel),
        (spec.n_ducts, "duct", paint_duct),
    ):
        count = int(rng.integers(lo_hi[0], lo_hi[1] + 1))
        for _ in range(count):
            try_place(kind, painter)

    return LabelMap(labels, spec.schema), geometry


def _render(label: LabelMap, palette: dict, texture_amp: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    size = label.height
    out = np.zeros((size, label.width, 3), dtype=np.float32)
    for idx, name in enumerate(label.schema.class_names):
        color = np.asarray(palette[name], dtype=np.float32)
        out[label.labels == idx] = color
    noise = rng.normal(0.0, texture_amp, size=out.shape).astype(np.float32)
    return np.clip(out + noise, 0.0, 1.0)


def render_p(label: LabelMap, spec: SceneSpec, seed: int) -> Image:
    """Bright, high-contrast rendering of the scene (the analyzable domain)."""
    arr = _render(label, PALETTE_P, spec.texture_amp, seed=seed * 1000003 + 1)
    return Image(arr, value_range=(0.0, 1.0))


def marker_mask(spec: SceneSpec, seed: int) -> np.ndarray:
    """Marker blob support, drawn from a stream independent of P rendering.

    Blobs are stamped until the covered fraction reaches marker_density, so
    the realized pixel fraction tracks the requested density closely.
    """
    size = spec.canvas_px
    mask = np.zeros((size, size), dtype=bool)
    if spec.marker_density <= 0.0:
        return mask
    rng = np.random.default_rng((seed, 0x5EED_A))  # stream disjoint from renderers
    target = spec.marker_density * size * size
    for _ in range(10000):
        if mask.sum() >= target:
            break
        cy = rng.uniform(0, size)
        cx = rng.uniform(0, size)
        r = rng.uniform(2.0, 5.0) * size / 128.0
        mask |= _ellipse_mask(size, cy, cx, r, r * rng.uniform(0.7, 1.0), rng.uniform(0, np.pi))
    return mask


def render_a(label: LabelMap, spec: SceneSpec, seed: int) -> Image:
    """Second-domain rendering: distinct palette plus independent marker blobs."""
    arr = _render(label, PALETTE_A, spec.texture_amp, seed=seed * 1000003 + 2)
    blobs = marker_mask(spec, seed)
    arr[blobs] = np.asarray(MARKER_COLOR, dtype=np.float32)
    return Image(np.clip(arr, 0.0, 1.0), value_range=(0.0, 1.0))


@dataclass
class CorpusManifest:
    corpus_id: str
    domain: str  # "P" or "A"
    split: str  # "train" or "eval"
    entries: list[tuple[str, Optional[str], int]]  # (image path, label path, scene seed)

    def seeds(self) -> set[int]:
        return {seed for _, _, seed in self.entries}

    def write(self, path: Path | str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["corpus_id", "domain", "split", "image", "label", "seed"])
            for image, lab, seed in self.entries:
                writer.writerow([self.corpus_id, self.domain, self.split, image, lab or "", seed])

    @classmethod
    def read(cls, path: Path | str) -> "CorpusManifest":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        assert header[0] == "corpus_id"
        corpus_id, domain, split = body[0][0], body[0][1], body[0][2]
        entries = [(r[3], r[4] or None, int(r[5])) for r in body]
        return cls(corpus_id, domain, split, entries)


def build_corpus(
    spec: SceneSpec,
    n_train_p: int,
    n_train_a: int,
    n_eval_a: int,
    root: Path | str,
    base_seed: int = 0,
) -> dict[str, CorpusManifest]:
    """Write PNG images, label PNGs, and CSV manifests for both domains.

    Seed sets are disjoint across P-train, A-train, and A-eval, so training
    data is unpaired by construction and evaluation scenes are unseen.
    """
    root = Path(root)
    manifest_paths = {
        "p_train": root / "p_train.csv",
        "a_train": root / "a_train.csv",
        "a_eval": root / "a_eval.csv",
    }
    for mp in manifest_paths.values():
        if mp.exists():
            raise RefuseOverwriteError(f"manifest already exists: {mp}")
    root.mkdir(parents=True, exist_ok=True)

    def emit(domain: str, split: str, seeds: range, subdir: str) -> CorpusManifest:
        out_dir = root / subdir
        out_dir.mkdir(exist_ok=True)
        entries = []
        for seed in seeds:
            label, _ = generate_scene(spec, seed)
            img = render_p(label, spec, seed) if domain == "P" else render_a(label, spec, seed)
            img_path = out_dir / f"{domain.lower()}_{seed:05d}.png"
            lab_path = out_dir / f"{domain.lower()}_{seed:05d}_label.png"
            save_png(img, img_path)
            save_label_png(label, lab_path)
            entries.append((str(img_path), str(lab_path), seed))
        manifest = CorpusManifest(f"synth-{base_seed}", domain, split, entries)
        manifest.write(manifest_paths[subdir])
        return manifest

    s0 = base_seed * 1_000_000
    manifests = {
        "p_train": emit("P", "train", range(s0, s0 + n_train_p), "p_train"),
        "a_train": emit("A", "train", range(s0 + n_train_p, s0 + n_train_p + n_train_a), "a_train"),
        "a_eval": emit(
            "A",
            "eval",
            range(s0 + n_train_p + n_train_a, s0 + n_train_p + n_train_a + n_eval_a),
            "a_eval",
        ),
    }
    return manifests
