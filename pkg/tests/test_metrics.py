import numpy as np
import pytest

from modules.metrics import ConfusionMatrix, accumulate, merge, metrics_row, scores, to_frame
from modules.pointcloud import IGNORE
from utils.errors import DataError, ShapeError


def matrix(truth, pred, c):
    return accumulate(ConfusionMatrix(c), np.array(truth), np.array(pred))


class TestConfusionMatrix:
    def test_symmetric_two_class(self):
        cm = ConfusionMatrix(2, np.array([[3, 1], [1, 3]]), 8)
        s = scores(cm)
        np.testing.assert_allclose(s["iou"], [0.6, 0.6])
        assert s["miou"] == pytest.approx(0.6)
        assert s["fiou"] == pytest.approx(0.6)

    def test_mixed_example(self):
        cm = matrix([0, 0, 1, 1, 2], [0, 1, 1, 1, 0], 4)
        assert cm.counts.tolist() == [[1, 1, 0, 0], [0, 2, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0]]
        s = scores(cm)
        np.testing.assert_allclose(s["iou"][:3], [1 / 3, 2 / 3, 0.0])
        assert np.isnan(s["iou"][3])
        assert s["miou"] == pytest.approx(1 / 3)
        assert s["fiou"] == pytest.approx(0.4)

    def test_ignore_truth_is_skipped(self):
        cm = matrix([0, IGNORE, 1], [0, 1, 1], 2)
        assert cm.total == 2
        assert scores(cm)["miou"] == 1.0

    def test_grids_are_flattened(self):
        cm = matrix([[0, 1], [1, IGNORE]], [[0, 1], [0, 0]], 2)
        assert cm.counts.tolist() == [[1, 0], [1, 1]]

    def test_merge(self):
        a = matrix([0, 1], [0, 0], 2)
        b = matrix([1, 1], [1, 1], 2)
        m = merge(a, b)
        assert m.counts.tolist() == [[1, 0], [1, 2]]
        assert m.total == 4
        with pytest.raises(ShapeError):
            merge(a, ConfusionMatrix(3))

    def test_copy_is_independent(self):
        a = matrix([0], [0], 2)
        b = a.copy()
        accumulate(b, [1], [1])
        assert a.total == 1 and b.total == 2

    def test_errors(self):
        with pytest.raises(DataError):
            scores(ConfusionMatrix(3))
        with pytest.raises(DataError):
            matrix([0, 3], [0, 0], 3)
        with pytest.raises(DataError):
            matrix([0, 1], [0, -1], 3)
        with pytest.raises(ShapeError):
            matrix([0, 1], [0], 3)


class TestReporting:
    def test_metrics_row(self):
        cm = matrix([0, 0, 1, 1, 2], [0, 1, 1, 1, 0], 3)
        row = metrics_row(cm, ["ground", "vehicle", "pole"], epoch=2, split="target")
        assert row["epoch"] == 2 and row["split"] == "target"
        assert row["miou"] == pytest.approx(1 / 3)
        assert row["iou_vehicle"] == pytest.approx(2 / 3)
        assert list(row)[-3:] == ["iou_ground", "iou_vehicle", "iou_pole"]

    def test_default_class_names(self):
        row = metrics_row(matrix([0, 1], [0, 1], 2))
        assert "iou_0" in row and "iou_1" in row

    def test_to_frame(self):
        df = to_frame(matrix([0, 0, 1], [0, 1, 1], 2), ["a", "b"])
        assert df["class"].tolist() == ["a", "b"]
        assert df["truth"].tolist() == [2, 1]
        assert df["predicted"].tolist() == [1, 2]
        assert df["tp"].tolist() == [1, 1]
        np.testing.assert_allclose(df["iou"], [0.5, 0.5])


class TestAdditivity:
    def test_perfect_prediction(self, rng):
        truth = rng.integers(0, 4, size=200)
        s = scores(matrix(truth, truth, 4))
        assert s["miou"] == 1.0 and s["fiou"] == 1.0

    def test_split_and_merge_order(self, rng):
        truth = rng.integers(-1, 4, size=500)
        pred = rng.integers(0, 4, size=500)
        whole = matrix(truth, pred, 4)
        cuts = np.sort(rng.choice(np.arange(1, 500), size=4, replace=False))
        parts = [matrix(t, p, 4) for t, p in zip(np.split(truth, cuts), np.split(pred, cuts))]
        forward = parts[0]
        for p in parts[1:]:
            forward = merge(forward, p)
        backward = parts[-1]
        for p in reversed(parts[:-1]):
            backward = merge(p, backward)
        np.testing.assert_array_equal(forward.counts, whole.counts)
        np.testing.assert_array_equal(backward.counts, whole.counts)
        assert forward.total == whole.total
