"""Segmentation, detection and nucleus classification metrics.

Instances match one-to-one when their IoU is strictly above 0.5, which makes
the matching unique without an assignment solver.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

IOU_THRESHOLD = 0.5
UNKNOWN = "Unknown"
DEFAULT_CLASSES = ("Neoplastic", "Epithelial", "Inflammatory", "Connective")


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ValidationError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def dice_jaccard(gt_binary, pred_binary) -> tuple[float, float]:
    """Pixel Dice and Jaccard of two masks; both 1.0 when both are empty."""
    _check_shapes(gt_binary, pred_binary)
    a = np.asarray(gt_binary).astype(bool)
    b = np.asarray(pred_binary).astype(bool)
    inter = int(np.count_nonzero(a & b))
    na, nb = int(a.sum()), int(b.sum())
    return _dice_jaccard_counts(inter, na, nb)


def _dice_jaccard_counts(inter: int, na: int, nb: int) -> tuple[float, float]:
    if na + nb == 0:
        return 1.0, 1.0
    return 2.0 * inter / (na + nb), inter / (na + nb - inter)


@dataclass(frozen=True)
class InstanceMatch:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_gt: tuple[int, ...]
    unmatched_pred: tuple[int, ...]

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)

    @property
    def iou_sum(self) -> float:
        return math.fsum(p[2] for p in self.pairs)


def match_instances(gt_instances, pred_instances) -> InstanceMatch:
    """Pair gt and predicted instances with IoU > 0.5 (id 0 is background)."""
    _check_shapes(gt_instances, pred_instances)
    g = np.asarray(gt_instances).astype(np.int64).ravel()
    p = np.asarray(pred_instances).astype(np.int64).ravel()
    gt_ids, gt_area = np.unique(g[g > 0], return_counts=True)
    pr_ids, pr_area = np.unique(p[p > 0], return_counts=True)
    both = (g > 0) & (p > 0)
    key = g[both] * (int(p.max(initial=0)) + 1) + p[both]
    keys, inter = np.unique(key, return_counts=True)
    ga = dict(zip(gt_ids.tolist(), gt_area.tolist()))
    pa = dict(zip(pr_ids.tolist(), pr_area.tolist()))
    base = int(p.max(initial=0)) + 1
    pairs = []
    for k, n in zip(keys.tolist(), inter.tolist()):
        gi, pi = divmod(k, base)
        iou = n / (ga[gi] + pa[pi] - n)
        if iou > IOU_THRESHOLD:
            pairs.append((gi, pi, iou))
    pairs.sort()
    mg = {q[0] for q in pairs}
    mp = {q[1] for q in pairs}
    return InstanceMatch(
        tuple(pairs),
        tuple(i for i in gt_ids.tolist() if i not in mg),
        tuple(i for i in pr_ids.tolist() if i not in mp),
    )


def _detection(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn)
    return f1, precision, recall


def match_and_detect(gt_instances, pred_instances) -> tuple[InstanceMatch, float, float, float]:
    """Returns ``(match, f1, precision, recall)``."""
    m = match_instances(gt_instances, pred_instances)
    f1, prec, rec = _detection(m.tp, m.fp, m.fn)
    return m, f1, prec, rec


def _bpq(tp: int, fp: int, fn: int, iou_sum: float) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return iou_sum / (tp + 0.5 * fp + 0.5 * fn)


def bpq(gt_instances, pred_instances) -> float:
    """Binary panoptic quality: summed matched IoU over ``TP + FP/2 + FN/2``."""
    m = match_instances(gt_instances, pred_instances)
    return _bpq(m.tp, m.fp, m.fn, m.iou_sum)


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


@dataclass
class ClassificationTally:
    """Additive per-class counts so results can be pooled over images."""

    classes: tuple[str, ...]
    per_class: dict[str, ClassCounts] = field(default_factory=dict)
    correct: int = 0
    total: int = 0
    unknown_excluded: int = 0
    gt_present: set = field(default_factory=set)

    def __post_init__(self):
        for c in self.classes:
            self.per_class.setdefault(c, ClassCounts())

    def _check(self, label: str):
        if label != UNKNOWN and label not in self.classes:
            raise ValidationError(f"class {label!r} not in configured classes {self.classes}")

    def add(self, match: InstanceMatch, gt_labels: Mapping[int, str], pred_labels: Mapping[int, str]):
        for gi, pi, _ in match.pairs:
            if gi not in gt_labels:
                raise ValidationError(f"no label for matched gt instance {gi}")
            g, p = gt_labels[gi], pred_labels.get(pi, UNKNOWN)
            self._check(g)
            self._check(p)
            if g == UNKNOWN:
                self.unknown_excluded += 1
                continue
            self.gt_present.add(g)
            self.total += 1
            if g == p:
                self.correct += 1
                self.per_class[g].tp += 1
            else:
                self.per_class[g].fn += 1
                if p != UNKNOWN:
                    self.per_class[p].fp += 1
        for gi in match.unmatched_gt:
            g = gt_labels.get(gi, UNKNOWN)
            self._check(g)
            if g == UNKNOWN:
                self.unknown_excluded += 1
                continue
            self.gt_present.add(g)
            self.total += 1
            self.per_class[g].fn += 1
        for pi in match.unmatched_pred:
            p = pred_labels.get(pi, UNKNOWN)
            self._check(p)
            if p != UNKNOWN:
                self.per_class[p].fp += 1

    def scores(self) -> tuple[float, float, dict[str, float]]:
        per = {c: self.per_class[c].f1 for c in self.classes}
        present = [c for c in self.classes if c in self.gt_present]
        macro = math.fsum(per[c] for c in present) / len(present) if present else 1.0
        acc = self.correct / self.total if self.total else 1.0
        return macro, acc, per


def classification_scores(matched: InstanceMatch, gt_labels: Mapping[int, str],
                          pred_labels: Mapping[int, str],
                          classes: Sequence[str] = DEFAULT_CLASSES) -> tuple[float, float, dict[str, float]]:
    """Returns ``(macro_f1, accuracy, per_class_f1)``.

    Unknown ground truth is skipped. An unmatched gt nucleus is a false
    negative for its class and a wrong answer for accuracy; an unmatched
    prediction is a false positive for its class. The macro average runs over
    classes that occur in the scored ground truth.
    """
    tally = ClassificationTally(tuple(classes))
    tally.add(matched, gt_labels, pred_labels)
    return tally.scores()


@dataclass
class MetricReport:
    dice: float
    jaccard: float
    bpq: float
    f1: float
    precision: float
    recall: float
    macro_f1: float
    accuracy: float
    per_class_f1: dict[str, float]
    tp: int
    fp: int
    fn: int
    unknown_excluded: int
    n_images: int

    def to_dict(self) -> dict:
        return asdict(self)


class Evaluator:
    """Accumulates counts over images; every metric is computed from pooled counts."""

    def __init__(self, classes: Sequence[str] = DEFAULT_CLASSES):
        self.inter = self.gt_px = self.pred_px = 0
        self.tp = self.fp = self.fn = 0
        self.ious: list[float] = []
        self.tally = ClassificationTally(tuple(classes))
        self.n_images = 0

    def add(self, gt_instances, pred_instances, gt_labels: Mapping[int, str] | None = None,
            pred_labels: Mapping[int, str] | None = None):
        _check_shapes(gt_instances, pred_instances)
        g = np.asarray(gt_instances) > 0
        p = np.asarray(pred_instances) > 0
        self.inter += int(np.count_nonzero(g & p))
        self.gt_px += int(g.sum())
        self.pred_px += int(p.sum())
        m = match_instances(gt_instances, pred_instances)
        self.tp += m.tp
        self.fp += m.fp
        self.fn += m.fn
        self.ious.extend(q[2] for q in m.pairs)
        if gt_labels is not None:
            self.tally.add(m, gt_labels, pred_labels or {})
        self.n_images += 1
        return m

    def report(self) -> MetricReport:
        dice, jac = _dice_jaccard_counts(self.inter, self.gt_px, self.pred_px)
        f1, prec, rec = _detection(self.tp, self.fp, self.fn)
        macro, acc, per = self.tally.scores()
        return MetricReport(dice, jac, _bpq(self.tp, self.fp, self.fn, math.fsum(self.ious)), f1, prec,
                            rec, macro, acc, per, self.tp, self.fp, self.fn, self.tally.unknown_excluded,
                            self.n_images)


def evaluate_datasets(gt_dir, pred_dir) -> MetricReport:
    """Score a predicted dataset directory against a ground-truth one, patch by patch."""
    from .tiling import read_manifest, read_patch

    gt_m = read_manifest(gt_dir)
    pr_m = read_manifest(pred_dir)
    if list(gt_m["classes"]) != list(pr_m["classes"]):
        raise ValidationError(f"class lists differ: {gt_m['classes']} vs {pr_m['classes']}")
    classes = [c for c in gt_m["classes"] if c != "background"]
    ev = Evaluator(classes)
    for entry in gt_m["patches"]:
        name = entry["dir"]
        if not (Path(pred_dir) / name).is_dir():
            raise FileNotFoundError(f"{Path(pred_dir) / name}: missing prediction patch")
        gt = read_patch(Path(gt_dir) / name)
        pr = read_patch(Path(pred_dir) / name)
        ev.add(gt.instance_map, pr.instance_map, gt.labels, pr.labels)
    return ev.report()
