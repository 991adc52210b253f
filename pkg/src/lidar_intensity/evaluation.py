"""Confusion matrices and IoU reports for point-wise segmentation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InsufficientDataError
from .scan import ClassId

N_CLASSES = len(ClassId)
#: column order of the summary table
TABLE_COLUMNS = (
    ("Tree", ClassId.TREE),
    ("Grass", ClassId.GRASS),
    ("Puddle", ClassId.PUDDLE),
    ("Bushes", ClassId.BUSH),
    ("Person", ClassId.PERSON),
)
SCORED_CLASSES = tuple(c for _, c in TABLE_COLUMNS)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts indexed ``[ground_truth, prediction]`` by :class:`ClassId`.

    Ground-truth void points are never scored; they are tallied in
    ``void``. A void *prediction* is the pipeline abstaining and counts
    against the true class unless ``in_gate_only`` scoring skipped it (then
    it is tallied in ``gated``).
    """

    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), np.int64))
    void: int = 0
    gated: int = 0

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.void + other.void, self.gated + other.gated)

    def __eq__(self, other):
        return (
            isinstance(other, ConfusionMatrix)
            and np.array_equal(self.counts, other.counts)
            and self.void == other.void
            and self.gated == other.gated
        )

    @property
    def scored(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, gt, pred, in_gate_only: bool = False) -> ConfusionMatrix:
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if gt.size != pred.size:
        raise ContractError(f"ground truth has {gt.size} entries, predictions {pred.size}")
    void_gt = gt == ClassId.VOID
    keep = ~void_gt
    gated = 0
    if in_gate_only:
        abstained = keep & (pred == ClassId.VOID)
        gated = int(abstained.sum())
        keep &= ~abstained
    flat = np.bincount(gt[keep] * N_CLASSES + pred[keep], minlength=N_CLASSES * N_CLASSES)
    return cm + ConfusionMatrix(flat.reshape(N_CLASSES, N_CLASSES), int(void_gt.sum()), gated)


@dataclass(frozen=True)
class IouReport:
    """Per-class IoU in ``[0, 1]`` (``nan`` where the class never occurs in ground truth)."""

    per_class: dict
    mean: float
    scored: int
    gated: int
    void: int

    def table(self, name: str = "Ours") -> str:
        return format_iou_table({name: self})

    def key_values(self) -> str:
        lines = [f"miou={self.mean:.6f}"]
        for label, cls in TABLE_COLUMNS:
            v = self.per_class.get(cls, float("nan"))
            lines.append(f"iou_{label.lower()}={'nan' if np.isnan(v) else f'{v:.6f}'}")
        lines += [f"scored={self.scored}", f"gated={self.gated}", f"void={self.void}"]
        return "\n".join(lines) + "\n"


def iou(cm: ConfusionMatrix, classes=SCORED_CLASSES) -> IouReport:
    """IoU = TP / (TP + FP + FN) per class; the mean covers classes present in ground truth."""
    if cm.scored == 0:
        raise InsufficientDataError("no scored points (all ground truth is void)")
    c = cm.counts
    per_class = {}
    for cls in classes:
        k = int(cls)
        tp = c[k, k]
        fn = c[k, :].sum() - tp
        fp = c[:, k].sum() - tp
        present = c[k, :].sum() > 0
        per_class[ClassId(k)] = float(tp / (tp + fp + fn)) if present else float("nan")
    present_vals = [v for v in per_class.values() if not np.isnan(v)]
    mean = float(np.mean(present_vals)) if present_vals else float("nan")
    return IouReport(per_class, mean, cm.scored, cm.gated, cm.void)


def format_iou_table(rows: dict) -> str:
    """Aligned text table with columns Framework, Tree, Grass, Puddle, Bushes, Person, mean.

    ``rows`` maps a framework name to an :class:`IouReport` or to a plain
    mapping of column label to percentage.
    """
    header = ["Framework"] + [label for label, _ in TABLE_COLUMNS] + ["mean"]
    body = []
    for name, row in rows.items():
        if isinstance(row, IouReport):
            vals = [row.per_class.get(cls, float("nan")) * 100 for _, cls in TABLE_COLUMNS]
            vals.append(row.mean * 100)
        else:
            vals = [row[label] for label in header[1:]]
        body.append([name] + ["-" if np.isnan(v) else f"{v:.2f}" for v in vals])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: " | ".join(s.rjust(w) for s, w in zip(r, widths))
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule] + [fmt(r) for r in body]) + "\n"
