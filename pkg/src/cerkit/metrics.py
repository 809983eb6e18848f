"""Confusion matrices, per-class recall, macro-F1 and the per-class report table."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from cerkit.errors import DataError, LabelOutOfRange
from cerkit.taxonomy import COMPOUND_NAMES, NUM_COMPOUND

NA = "—"


class LengthMismatch(DataError):
    pass


def confusion(true_labels, pred_labels, num_classes: int = NUM_COMPOUND) -> np.ndarray:
    """``counts[t, p]`` = number of samples with true class t predicted as p."""
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise LengthMismatch(f"{t.size} true labels vs {p.size} predictions")
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= num_classes or p.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    """Per-class recall in percent; NaN where a class has no true samples."""
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    out = np.full(cm.shape[0], np.nan)
    nz = rows > 0
    out[nz] = 100.0 * np.diag(cm)[nz] / rows[nz]
    return out


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    # F1 is 0 whenever a marginal or the P+R denominator is 0
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    f1 = np.zeros(cm.shape[0])
    for i in range(cm.shape[0]):
        if rows[i] == 0 or cols[i] == 0:
            continue
        prec, rec = tp[i] / cols[i], tp[i] / rows[i]
        if prec + rec > 0:
            f1[i] = 2 * prec * rec / (prec + rec)
    return f1


def macro_f1(cm: np.ndarray) -> float:
    return float(np.mean(per_class_f1(cm)))


def overall_accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    return float(100.0 * np.trace(cm) / total) if total else math.nan


@dataclass
class EvalReport:
    per_class_accuracy: np.ndarray
    per_class_f1: np.ndarray
    overall_accuracy: float
    macro_f1: float
    n_samples: int
    confusion: np.ndarray | None = None
    class_order: tuple[str, ...] = COMPOUND_NAMES

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "EvalReport":
        cm = np.asarray(cm, dtype=np.int64)
        f1 = per_class_f1(cm)
        return cls(per_class_accuracy(cm), f1, overall_accuracy(cm), float(np.mean(f1)), int(cm.sum()), cm)

    @classmethod
    def from_labels(cls, true_labels, pred_labels) -> "EvalReport":
        return cls.from_confusion(confusion(true_labels, pred_labels))


def evaluate(true_labels, pred_labels) -> EvalReport:
    return EvalReport.from_labels(true_labels, pred_labels)


LABEL_WIDTH = max(len("Compound Expression"), *(len(n) for n in COMPOUND_NAMES))


def _cell(value: float, scale: float = 1.0) -> str:
    return NA if value is None or not math.isfinite(value) else f"{value * scale:.2f}"


def render_report(reports: EvalReport | Sequence[EvalReport], model_names: Sequence[str] | str) -> str:
    """Fixed-width text table: one row per compound class, then ``acc`` and ``F1``.

    Values are percentages with two decimals; one column per model.
    """
    if isinstance(reports, EvalReport):
        reports = [reports]
    if isinstance(model_names, str):
        model_names = [model_names]
    if len(reports) != len(model_names):
        raise ValueError("need one model name per report")
    widths = [max(6, len(n)) for n in model_names]

    def row(label: str, cells: Sequence[str]) -> str:
        return label.ljust(LABEL_WIDTH) + "".join("  " + c.rjust(w) for c, w in zip(cells, widths))

    header = row("Compound Expression", list(model_names))
    rule = "-" * len(header)
    lines = [header, rule]
    for i, name in enumerate(reports[0].class_order):
        lines.append(row(name, [_cell(r.per_class_accuracy[i]) for r in reports]))
    lines.append(rule)
    lines.append(row("acc", [_cell(r.overall_accuracy) for r in reports]))
    lines.append(rule)
    lines.append(row("F1", [_cell(r.macro_f1 if r.n_samples else math.nan, 100.0) for r in reports]))
    return "\n".join(lines) + "\n"


def report_tsv(report: EvalReport) -> str:
    def fmt(v: float, spec: str) -> str:
        return format(v, spec) if math.isfinite(v) else "NA"

    lines = ["class\taccuracy\tf1"]
    for i, name in enumerate(report.class_order):
        lines.append(f"{name}\t{fmt(report.per_class_accuracy[i], '.4f')}\t{fmt(report.per_class_f1[i], '.6f')}")
    macro = report.macro_f1 if report.n_samples else math.nan
    lines.append(f"overall\t{fmt(report.overall_accuracy, '.4f')}\t{fmt(macro, '.6f')}")
    return "\n".join(lines) + "\n"


def write_report(
    reports: EvalReport | Sequence[EvalReport],
    model_names: Sequence[str] | str,
    out_dir: str | Path,
    figures: bool = True,
) -> dict[str, Path]:
    """Write ``report.txt``, one ``<model>.tsv`` per model and, optionally, PNG figures."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    if isinstance(model_names, str):
        model_names = [model_names]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": out / "report.txt"}
    paths["table"].write_text(render_report(reports, model_names), encoding="utf-8")
    for rep, name in zip(reports, model_names):
        p = out / f"{_safe(name)}.tsv"
        p.write_text(report_tsv(rep), encoding="utf-8")
        paths[f"tsv:{name}"] = p
    if figures:
        from cerkit import plotting

        paths["per_class"] = plotting.plot_per_class(reports, model_names, out / "per_class_accuracy.png")
        for rep, name in zip(reports, model_names):
            if rep.confusion is not None:
                paths[f"confusion:{name}"] = plotting.plot_confusion(
                    rep.confusion, out / f"confusion_{_safe(name)}.png", title=name
                )
    return paths


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
