import numpy as np

from cats.metrics import CaseMetrics, MetricsReport
from cats.report import plot_dice_by_class, plot_loss_curve, summary_table


def _report():
    recs = [CaseMetrics("a", 1, 0.8, 1.0, 2.0), CaseMetrics("a", 2, 0.6, 2.0, 4.0),
            CaseMetrics("b", 1, 0.9, 0.5, 1.0),
            CaseMetrics("b", 2, 0.0, float("nan"), float("nan"), "pred_empty")]
    return MetricsReport(recs, {1: "liver", 2: "spleen"})


def test_table_layout_and_average():
    table = summary_table(_report())
    lines = table.splitlines()
    assert lines[0].split() == ["Metric", "liver", "spleen", "Avg."]
    dice = lines[2].split()
    assert dice[:3] == ["Dice", "0.8500", "(0.0500)"]
    assert float(dice[-1]) == np.mean([0.85, 0.3])
    # NaN distances are skipped, so spleen ASD comes from case a alone
    asd = lines[3]
    assert "2.0000 (0.0000)" in asd
    assert len({len(line) for line in lines[:2]}) == 1


def test_figures_deterministic(tmp_path):
    hist = [(1, 0.5, float("nan")), (2, 0.4, 0.7), (3, 0.3, float("nan")), (4, 0.2, 0.8)]
    for name in ("x", "y"):
        plot_loss_curve(hist, tmp_path / f"{name}_loss.png")
        plot_dice_by_class(_report(), tmp_path / f"{name}_dice.png")
    for kind in ("loss", "dice"):
        a = (tmp_path / f"x_{kind}.png").read_bytes()
        assert a[:8] == b"\x89PNG\r\n\x1a\n"
        assert a == (tmp_path / f"y_{kind}.png").read_bytes()
