"""Instance-level Dice evaluation and model comparison.

Instances are 8-connected components of a class support after removing
border pixels. The aggregate score averages, over every prediction and
every ground-truth instance in the test set, the Dice overlap with its
maximal-overlap partner (zero when unmatched).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy import stats

from .imaging import ClassSchema, LabelMap
from .nets import SegmentorHandle, infer_translate

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class MetricError(ValueError):
    pass


class UndefinedMetricError(MetricError):
    """No instances exist in either role; the score is n/a, not zero."""


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two non-empty binary masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 or nb == 0:
        raise MetricError("dsc is undefined for empty masks")
    return 2.0 * int((a & b).sum()) / (na + nb)


@dataclass
class InstanceSet:
    class_name: str
    masks: list[np.ndarray]
    source: str  # "prediction" | "ground-truth"
    image_id: Optional[str] = None

    def __len__(self) -> int:
        return len(self.masks)


def extract_instances(
    label: LabelMap, class_name: str, source: str = "prediction", image_id: Optional[str] = None
) -> InstanceSet:
    """8-connected components of the (possibly composite) class support.

    Border pixels carry their own class index and therefore never join the
    support, which is what separates touching structures.
    """
    schema = label.schema
    if class_name not in schema.composites and class_name not in schema.class_names:
        raise MetricError(f"unknown class {class_name!r}")
    support = np.isin(label.labels, list(schema.class_support(class_name)))
    labelled, count = ndimage.label(support, structure=EIGHT_CONNECTED)
    masks = [labelled == i for i in range(1, count + 1)]
    return InstanceSet(class_name, masks, source, image_id)


def max_overlap_match(inst: np.ndarray, others: InstanceSet) -> Optional[int]:
    """Index of the maximal-overlap partner; None without any overlap; ties low."""
    best_idx, best_overlap = None, 0
    for idx, other in enumerate(others.masks):
        overlap = int((inst & other).sum())
        if overlap > best_overlap:
            best_idx, best_overlap = idx, overlap
    return best_idx


@dataclass
class DiceRecord:
    image_id: Optional[str]
    class_name: str
    direction: str  # "pred->gt" | "gt->pred"
    instance_index: int
    dice: float
    partner_index: Optional[int]


def idsc(
    pairs: Sequence[tuple[InstanceSet, InstanceSet]],
) -> tuple[float, list[DiceRecord]]:
    """Instance-level Dice over a test set of (prediction, ground-truth) pairs.

    Every instance in either role contributes one Dice value against its
    maximal-overlap partner, zero when unmatched; the score is the mean of
    all contributions. Also returns the pooled per-instance records that
    back the standard deviation and the t-tests.
    """
    records: list[DiceRecord] = []
    for pred, gt in pairs:
        for i, mask in enumerate(pred.masks):
            j = max_overlap_match(mask, gt)
            value = dsc(mask, gt.masks[j]) if j is not None else 0.0
            records.append(DiceRecord(pred.image_id, pred.class_name, "pred->gt", i, value, j))
        for j, mask in enumerate(gt.masks):
            i = max_overlap_match(mask, pred)
            value = dsc(mask, pred.masks[i]) if i is not None else 0.0
            records.append(DiceRecord(gt.image_id, gt.class_name, "gt->pred", j, value, i))
    if not records:
        raise UndefinedMetricError("no instances in either role across the test set")
    # fsum: correctly rounded, so the score is independent of summation order
    score = math.fsum(r.dice for r in records) / len(records)
    return score, records


def welch_ttest(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float]:
    """Unequal-variance two-sided t-test on two Dice samples."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("welch_ttest needs at least two values per sample")
    if a.var(ddof=1) == 0.0 and b.var(ddof=1) == 0.0:
        # degenerate: no spread on either side
        if a.mean() == b.mean():
            return 0.0, 1.0
        return float("inf") if a.mean() > b.mean() else float("-inf"), 0.0
    t, p = stats.ttest_ind(a, b, equal_var=False)
    return float(t), float(p)


@dataclass
class ClassResult:
    class_name: str
    idsc: Optional[float]  # None = n/a (no instances)
    std: Optional[float]
    dice_values: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    model_id: str
    classes: list[ClassResult]

    def class_result(self, name: str) -> ClassResult:
        for c in self.classes:
            if c.class_name == name:
                return c
        raise MetricError(f"no result for class {name!r}")

    @property
    def row_mean(self) -> Optional[float]:
        values = [c.idsc for c in self.classes if c.idsc is not None]
        return float(np.mean(values)) if values else None

    def to_rows(self) -> list[dict]:
        rows = []
        for c in self.classes:
            for k, v in enumerate(c.dice_values):
                rows.append(
                    {"model": self.model_id, "class": c.class_name, "index": k, "dice": f"{v:.8f}"}
                )
        return rows


def _fmt_pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:.1f}"


def summarize(
    reports: Sequence[EvalReport],
    baseline_id: Optional[str] = None,
    alpha: float = 0.05,
) -> str:
    """Markdown matrix of per-class "IDSC ± std" cells with a row-mean column.

    When a baseline model is named, every other model's per-class Dice
    distribution is tested against the baseline's and significant cells are
    starred. Rows missing a class show n/a and flag the row mean.
    """
    class_names = [c.class_name for c in reports[0].classes]
    baseline = None
    if baseline_id is not None:
        baseline = next(r for r in reports if r.model_id == baseline_id)

    header = "| model | " + " | ".join(class_names) + " | Ø |"
    sep = "|" + "---|" * (len(class_names) + 2)
    lines = [header, sep]
    for report in reports:
        cells = []
        incomplete = False
        for name in class_names:
            c = report.class_result(name)
            if c.idsc is None:
                cells.append("n/a")
                incomplete = True
                continue
            cell = f"{_fmt_pct(c.idsc)} ± {_fmt_pct(c.std)}"
            if baseline is not None and report is not baseline:
                base = baseline.class_result(name)
                if base.dice_values and len(c.dice_values) >= 2 and len(base.dice_values) >= 2:
                    _, p = welch_ttest(c.dice_values, base.dice_values)
                    if p < alpha:
                        cell += "*"
            cells.append(cell)
        mean_cell = _fmt_pct(report.row_mean) + ("†" if incomplete else "")
        lines.append("| " + report.model_id + " | " + " | ".join(cells) + " | " + mean_cell + " |")
    if any("†" in line for line in lines):
        lines.append("")
        lines.append("† row mean excludes classes without instances (n/a cells).")
    return "\n".join(lines)


def row_mean_pct(values_pct: Sequence[float]) -> float:
    """Row mean of per-class scores already on the percent scale, one decimal."""
    return round(float(np.mean(values_pct)), 1)


def evaluate_model(
    translator,
    segmentor: SegmentorHandle,
    eval_images: Sequence[np.ndarray],
    eval_labels: Sequence[LabelMap],
    class_names: Sequence[str],
    model_id: str = "model",
    batch_size: int = 4,
) -> EvalReport:
    """Translate second-domain images, segment, and score instances per class.

    ``translator`` may be None to use the images as-is (identity translation).
    ``eval_images`` are (H, W, 3) arrays in [0,1] with matching label maps.
    """
    if len(eval_images) != len(eval_labels) or not eval_images:
        raise MetricError("evaluation needs matching non-empty image and label lists")
    pred_maps: list[LabelMap] = []
    schema = segmentor.schema
    for start in range(0, len(eval_images), batch_size):
        chunk = eval_images[start : start + batch_size]
        x = torch.stack([torch.from_numpy(np.asarray(c)).float() for c in chunk])
        x = x.permute(0, 3, 1, 2) * 2.0 - 1.0
        if translator is not None:
            x = infer_translate(translator, x)
        with torch.no_grad():
            labels = segmentor.predict_labels(x, source="a_translated")
        for row in labels:
            pred_maps.append(LabelMap(row.numpy(), schema))

    classes: list[ClassResult] = []
    for name in class_names:
        pairs = []
        for idx, (pred, gt) in enumerate(zip(pred_maps, eval_labels)):
            pairs.append(
                (
                    extract_instances(pred, name, "prediction", image_id=str(idx)),
                    extract_instances(gt, name, "ground-truth", image_id=str(idx)),
                )
            )
        try:
            score, records = idsc(pairs)
        except UndefinedMetricError:
            classes.append(ClassResult(name, None, None, []))
            continue
        values = [r.dice for r in records]
        classes.append(ClassResult(name, score, float(np.std(values)), values))
    return EvalReport(model_id, classes)
