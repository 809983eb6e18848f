from itertools import permutations
from pathlib import Path

import numpy as np
import pytest

from cerkit.errors import LabelOutOfRange
from cerkit.metrics import (
    EvalReport,
    LengthMismatch,
    confusion,
    macro_f1,
    overall_accuracy,
    per_class_accuracy,
    per_class_f1,
    render_report,
    report_tsv,
    write_report,
)

GOLDEN = Path(__file__).parent / "golden"

# reference ensemble per-class accuracies (percent), pinned for the report layout
REFERENCE_ACC = [50.00, 45.71, 87.14, 85.93, 84.84, 77.27, 27.78]


def brute_force(true, pred, k=7):
    """Recompute per-class P/R/F1 and recall from raw label lists."""
    f1s, recalls = [], []
    for c in range(k):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        npred = sum(1 for p in pred if p == c)
        ntrue = sum(1 for t in true if t == c)
        prec = tp / npred if npred else 0.0
        rec = tp / ntrue if ntrue else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if npred and ntrue and prec + rec else 0.0)
        recalls.append(100.0 * tp / ntrue if ntrue else float("nan"))
    return sum(f1s) / k, recalls


def reference_report():
    return EvalReport(
        per_class_accuracy=np.array(REFERENCE_ACC),
        per_class_f1=np.full(7, 0.6379),
        overall_accuracy=73.80,
        macro_f1=0.6379,
        n_samples=1,
    )


def test_confusion_empty():
    assert not confusion([], []).any()


def test_confusion_perfect():
    np.testing.assert_array_equal(confusion(range(7), range(7)), np.eye(7, dtype=int))


def test_confusion_hand_built():
    t = [0, 0, 1, 2, 2, 2, 3, 5, 6, 6]
    p = [0, 1, 1, 2, 0, 2, 4, 5, 6, 0]
    cm = confusion(t, p)
    for a in range(7):
        for b in range(7):
            assert cm[a, b] == sum(1 for x, y in zip(t, p) if (x, y) == (a, b))
    assert cm.sum() == 10


def test_confusion_errors():
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [0])
    with pytest.raises(LabelOutOfRange):
        confusion([7], [0])


def test_per_class_accuracy():
    np.testing.assert_array_equal(per_class_accuracy(np.eye(7, dtype=int)), np.full(7, 100.0))
    cm = np.zeros((7, 7), dtype=int)
    cm[0, :2] = 1
    acc = per_class_accuracy(cm)
    assert acc[0] == 50.0 and np.isnan(acc[1:]).all()


def test_per_class_accuracy_random(rng):
    cm = rng.integers(0, 20, size=(7, 7))
    cm[3] = 0
    acc = per_class_accuracy(cm)
    for c in range(7):
        if c == 3:
            assert np.isnan(acc[c])
        else:
            assert acc[c] == 100.0 * cm[c, c] / cm[c].sum()


def test_macro_perfect():
    assert macro_f1(confusion(range(7), range(7))) == 1.0


def test_macro_single_predicted_class():
    true = np.repeat(np.arange(7), 2)
    pred = np.full(14, 4)
    f1 = per_class_f1(confusion(true, pred))
    assert np.flatnonzero(f1).tolist() == [4]
    # brute force: P = 2/14, R = 1 for class 4
    assert macro_f1(confusion(true, pred)) == pytest.approx(brute_force(true, pred)[0], abs=1e-15)
    assert f1[4] == pytest.approx(2 * (2 / 14) / (2 / 14 + 1), abs=1e-15)


def test_macro_is_permutation_invariant(rng):
    cm = rng.integers(0, 9, size=(7, 7))
    perm = rng.permutation(7)
    assert macro_f1(cm[np.ix_(perm, perm)]) == pytest.approx(macro_f1(cm), abs=1e-15)


def test_macro_bounds_and_diagonal(rng):
    for _ in range(50):
        cm = rng.integers(0, 5, size=(7, 7))
        assert 0.0 <= macro_f1(cm) <= 1.0
    assert macro_f1(np.diag(rng.integers(1, 9, size=7))) == 1.0
    # a diagonal matrix with an empty row is not perfect
    assert macro_f1(np.diag([1, 1, 1, 1, 1, 1, 0])) < 1.0


def test_overall_accuracy_is_not_mean_recall():
    cm = np.diag([9, 1, 1, 1, 1, 1, 1])
    cm[1, 0] = 9
    assert overall_accuracy(cm) == pytest.approx(100 * 15 / 24)
    assert overall_accuracy(cm) != pytest.approx(np.nanmean(per_class_accuracy(cm)))
    # the published ensemble column shows the same gap
    assert np.mean(REFERENCE_ACC) != pytest.approx(73.80, abs=0.5)


def test_report_invariant(rng):
    rep = EvalReport.from_labels(rng.integers(0, 7, 100), rng.integers(0, 7, 100))
    assert abs(rep.macro_f1 - np.mean(rep.per_class_f1)) <= 1e-12


def test_render_reference_golden():
    text = render_report(reference_report(), "Ensemble")
    assert text == (GOLDEN / "reference_report.txt").read_text(encoding="utf-8")
    lines = [" ".join(line.split()) for line in text.splitlines()]
    assert "Fearfully Surprised 87.14" in lines
    assert "acc 73.80" in lines
    assert "F1 63.79" in lines


def test_render_empty_report():
    text = render_report(EvalReport.from_confusion(np.zeros((7, 7), dtype=int)), "m")
    body = [line.split()[-1] for line in text.splitlines()[2:] if not line.startswith("-")]
    assert body == ["—"] * 9


def test_render_column_order(rng):
    a = EvalReport.from_labels(range(7), range(7))
    b = EvalReport.from_labels(range(7), [0] * 7)
    text = render_report([a, b], ["ViT", "ResNet"])
    assert text.splitlines()[0].split()[-2:] == ["ViT", "ResNet"]
    assert text.splitlines()[3].split()[-2:] == ["100.00", "0.00"]


def test_tsv_and_figures(tmp_path):
    rep = EvalReport.from_labels([0, 1, 2, 3, 4, 5, 6, 6], [0, 1, 2, 3, 4, 5, 6, 0])
    paths = write_report([rep, rep], ["a", "b"], tmp_path)
    assert paths["table"].read_text(encoding="utf-8") == render_report([rep, rep], ["a", "b"])
    tsv = (tmp_path / "a.tsv").read_text(encoding="utf-8").splitlines()
    assert tsv[0] == "class\taccuracy\tf1"
    assert tsv[7] == "Sadly Surprised\t50.0000\t0.666667"
    for key in ("per_class", "confusion:a", "confusion:b"):
        assert paths[key].read_bytes()[:4] == b"\x89PNG"
    assert report_tsv(EvalReport.from_confusion(np.zeros((7, 7), dtype=int))).splitlines()[1].endswith("NA\t0.000000")
