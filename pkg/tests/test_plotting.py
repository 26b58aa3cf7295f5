import numpy as np
import pytest

from canonpose import plotting
from canonpose.eval import MetricsReport

PNG = b"\x89PNG\r\n\x1a\n"


def _is_png(path):
    return path.is_file() and path.read_bytes()[:8] == PNG


def test_stage1_history(tmp_path):
    hist = [{"epoch": e, "stage": 1, "l_depth": 1.0 / (e + 1), "l_mask": 0.5 / (e + 1), "val_l_depth": 1.1 / (e + 1),
             "val_l_mask": None, "alpha": 10.0 if e < 3 else 1000.0, "beta": 1000.0} for e in range(6)]
    assert _is_png(plotting.plot_history(hist, tmp_path / "h1.png"))


def test_stage2_history(tmp_path):
    hist = [{"epoch": e, "stage": 2, "l_bce": 0.7 - 0.1 * e, "l_g": float(e), "l_d": -float(e),
             "iou_val": 0.1 * e} for e in range(4)]
    hist[1]["l_g"] = float("nan")
    assert _is_png(plotting.plot_history(hist, tmp_path / "sub/h2.png"))


def test_previews(tmp_path):
    rng = np.random.default_rng(0)
    assert _is_png(plotting.plot_depth_pair(rng.random((2, 16, 16)), tmp_path / "pair.png", title="x"))
    assert _is_png(plotting.plot_voxels(rng.random((8, 8, 8)), tmp_path / "vox.png"))
    assert _is_png(plotting.plot_voxels(np.zeros((8, 8, 8)), tmp_path / "empty.png"))
    posed = rng.random((3, 2, 16, 16))
    assert _is_png(plotting.plot_comparison(posed, posed, posed, tmp_path / "cmp.png", ids=["a", "b", "c"]))
    assert _is_png(plotting.save_grayscale(rng.normal(size=(16, 16)), tmp_path / "g.png"))


def test_metrics_figure(tmp_path):
    folds = [{"fold": f"s{k}p0", "nn": 0.5, "ft": 0.4, "st": 0.6, "dcg": 0.7, "iou": 0.3, "mean_ce": 0.2}
             for k in range(2)]
    report = MetricsReport.aggregate(folds, {"nn_baseline_mean": 0.1})
    assert _is_png(plotting.plot_metrics(report, tmp_path / "m.png"))
    with pytest.raises(ValueError):
        plotting.plot_metrics(MetricsReport.aggregate([{"fold": "x"}]), tmp_path / "none.png")
