import matplotlib.pyplot as plt
import numpy as np
import pytest

from eegvlm.errors import ValidationError
from eegvlm.evaluate import ConfusionMatrix, metrics
from eegvlm.report import (
    METRIC_KEYS,
    comparison_report,
    draw_confusion,
    markdown_table,
    read_metrics_file,
    report,
    write_metrics_file,
)


def cm_of(counts):
    return ConfusionMatrix(np.array(counts, dtype=np.int64))


PERFECT = cm_of(np.diag([10] * 5))
MIXED = cm_of([[9, 1, 0, 0, 0], [2, 6, 1, 0, 1], [0, 1, 8, 1, 0], [0, 0, 2, 8, 0], [1, 2, 0, 0, 7]])


def test_perfect_run_report(tmp_path):
    paths = report(metrics(PERFECT), PERFECT, {"run": "perfect"}, tmp_path, name="perfect")
    table = paths["table_md"].read_text()
    assert table.splitlines()[2].count("1.000") == len(METRIC_KEYS)
    for key in ("metrics", "table_csv", "scores", "confusion"):
        assert paths[key].stat().st_size > 0
    assert (tmp_path / "confusion.csv").read_text().splitlines()[1] == "Wake,10,0,0,0,0"


def test_metrics_file_round_trip(tmp_path):
    bundle = metrics(MIXED)
    back = read_metrics_file(write_metrics_file(bundle, tmp_path / "m.json", {"seed": 0}))
    assert back.accuracy == pytest.approx(bundle.accuracy, abs=1e-9)
    assert back.kappa == pytest.approx(bundle.kappa, abs=1e-9)
    np.testing.assert_allclose(back.per_class_f1, bundle.per_class_f1, atol=1e-9)


def test_metrics_file_missing_key(tmp_path):
    (tmp_path / "bad.json").write_text('{"accuracy": 1.0}')
    with pytest.raises(ValidationError):
        read_metrics_file(tmp_path / "bad.json")


def test_heatmap_colour_follows_counts():
    fig, ax = plt.subplots()
    im = draw_confusion(MIXED, ax)
    rgba = im.to_rgba(im.get_array())
    brightness = rgba[..., :3].sum(-1)
    counts = MIXED.counts.ravel()
    order = np.argsort(counts, kind="stable")
    # the Blues map darkens as counts grow
    b = brightness.ravel()[order]
    assert all(b[i] >= b[i + 1] - 1e-12 for i in range(len(b) - 1))
    plt.close(fig)


def test_report_bytes_deterministic(tmp_path):
    a = report(metrics(MIXED), MIXED, {"run": "x"}, tmp_path / "a")
    b = report(metrics(MIXED), MIXED, {"run": "x"}, tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes(), key


def test_inconsistent_bundle_rejected(tmp_path):
    with pytest.raises(ValidationError):
        report(metrics(PERFECT), MIXED, {}, tmp_path)


def test_comparison_table_lists_runs(tmp_path):
    runs = {"patch-aligned": metrics(PERFECT), "wo-feature-embedding": metrics(MIXED)}
    paths = comparison_report(runs, tmp_path)
    rows = paths["table_md"].read_text().splitlines()
    assert rows[2].startswith("| patch-aligned |") and rows[3].startswith("| wo-feature-embedding |")
    assert markdown_table(runs) == paths["table_md"].read_text()
