"""Micro/macro AUPRC and F1, metric reports, and common-embedding export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import MetricError
from .ontology import SINGLE_LABEL, AnnotationCorpus


def auprc(scores, targets) -> float:
    """Area under the step precision-recall curve.

    Scores are visited in descending order; tied scores form one threshold.
    Each threshold contributes ``precision * (gained true positives / P)``.
    The sum is taken in exact rational arithmetic and rounded once, so the
    result does not depend on summation order. Raises :class:`MetricError`
    when there are no positive targets.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(targets).reshape(-1).astype(bool)
    if s.shape != t.shape:
        raise MetricError(f"{s.size} scores for {t.size} targets")
    n_pos = int(t.sum())
    if n_pos == 0:
        raise MetricError("AUPRC is undefined without positive targets")
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    # last index of every tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(t)[ends]
    seen = ends + 1
    gained = np.diff(np.r_[0, tp])
    area = sum(
        (Fraction(int(tp_k) * int(g), int(seen_k)) for tp_k, seen_k, g in zip(tp, seen, gained) if g),
        Fraction(0),
    )
    return float(area / n_pos)


@dataclass
class PredictionSet:
    scores: np.ndarray  # (clips, classes) probabilities
    targets: np.ndarray  # (clips, classes) in {0, 1}
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.scores.shape != self.targets.shape:
            raise MetricError(f"scores {self.scores.shape} vs targets {self.targets.shape}")
        if not self.labels:
            self.labels = tuple(str(j) for j in range(self.scores.shape[1]))
        if len(self.labels) != self.scores.shape[1]:
            raise MetricError(f"{len(self.labels)} labels for {self.scores.shape[1]} classes")


def per_class_auprc(preds: PredictionSet) -> list[float | None]:
    out: list[float | None] = []
    for j in range(preds.scores.shape[1]):
        col = preds.targets[:, j]
        out.append(auprc(preds.scores[:, j], col) if col.any() else None)
    return out


def micro_macro_auprc(preds: PredictionSet) -> tuple[float, float]:
    per_class = [v for v in per_class_auprc(preds) if v is not None]
    if not per_class:
        raise MetricError("no class has a positive target")
    micro = auprc(preds.scores.reshape(-1), preds.targets.reshape(-1))
    return micro, float(np.mean(per_class))


def decisions(preds: PredictionSet, mode: str, threshold: float = 0.5) -> np.ndarray:
    """Binary decisions: one argmax per clip in single-label mode, else ``score >= threshold``."""
    if mode == SINGLE_LABEL:
        d = np.zeros_like(preds.scores)
        if d.size:
            d[np.arange(d.shape[0]), np.argmax(preds.scores, axis=1)] = 1.0
        return d
    return (preds.scores >= threshold).astype(np.float64)


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def per_class_f1(preds: PredictionSet, mode: str) -> list[float | None]:
    """F1 per class; ``None`` for classes never predicted and never present."""
    d = decisions(preds, mode).astype(bool)
    t = preds.targets.astype(bool)
    out: list[float | None] = []
    for j in range(t.shape[1]):
        tp = float(np.sum(d[:, j] & t[:, j]))
        fp = float(np.sum(d[:, j] & ~t[:, j]))
        fn = float(np.sum(~d[:, j] & t[:, j]))
        out.append(None if tp + fp + fn == 0 else _f1(tp, fp, fn))
    return out


def micro_macro_f1(preds: PredictionSet, mode: str) -> tuple[float, float]:
    d = decisions(preds, mode).astype(bool)
    t = preds.targets.astype(bool)
    micro = _f1(float(np.sum(d & t)), float(np.sum(d & ~t)), float(np.sum(~d & t)))
    per_class = [v for v in per_class_f1(preds, mode) if v is not None]
    macro = float(np.mean(per_class)) if per_class else 0.0
    return micro, macro


@dataclass
class MetricReport:
    level: str
    micro_auprc: float | None
    macro_auprc: float | None
    micro_f1: float
    macro_f1: float
    labels: tuple[str, ...] = ()
    class_auprc: list[float | None] = field(default_factory=list)
    class_f1: list[float | None] = field(default_factory=list)


def metric_report(preds: PredictionSet, mode: str, level: str = "") -> MetricReport:
    try:
        micro_a, macro_a = micro_macro_auprc(preds)
    except MetricError:
        micro_a = macro_a = None
    micro_f, macro_f = micro_macro_f1(preds, mode)
    return MetricReport(level, micro_a, macro_a, micro_f, macro_f, preds.labels,
                        per_class_auprc(preds), per_class_f1(preds, mode))


def evaluate_model(model, corpus: AnnotationCorpus) -> dict[str, MetricReport]:
    """Fine and coarse reports from the model's directly scored predictions."""
    fine, coarse = model.predict(corpus.feature_matrix())
    tax = corpus.taxonomy
    return {
        "fine": metric_report(PredictionSet(fine, corpus.fine_targets(), tax.fine_labels),
                              corpus.mode, "fine"),
        "coarse": metric_report(PredictionSet(coarse, corpus.coarse_targets(), tax.coarse_labels),
                                corpus.mode, "coarse"),
    }


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def report_rows(reports: dict[str, MetricReport]) -> list[list[str]]:
    """``[level, metric, class, value]`` rows: summary rows first, then per-class rows."""
    rows = []
    for level, r in reports.items():
        for name in ("micro_auprc", "macro_auprc", "micro_f1", "macro_f1"):
            rows.append([level, name, "", _fmt(getattr(r, name))])
    for level, r in reports.items():
        for label, a, f in zip(r.labels, r.class_auprc, r.class_f1):
            rows.append([level, "auprc", label, _fmt(a)])
            rows.append([level, "f1", label, _fmt(f)])
    return rows


def write_report(reports: dict[str, MetricReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "metric", "class", "value"])
        w.writerows(report_rows(reports))


def export_embeddings(model, corpus: AnnotationCorpus, path) -> None:
    """CSV of ``clip_id, fine_labels, e0..e{E-1}`` with ``;``-joined fine labels."""
    emb = model.embed(corpus.feature_matrix()) if len(corpus) else np.zeros((0, 0))
    width = emb.shape[1] if len(corpus) else model.encoder.out_width
    order = {n: i for i, n in enumerate(corpus.taxonomy.fine_labels)}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "fine_labels", *(f"e{k}" for k in range(width))])
        for clip, row in zip(corpus.clips, emb):
            labels = ";".join(sorted(clip.fine_set, key=order.__getitem__))
            w.writerow([clip.id, labels, *(repr(float(v)) for v in row)])

