import csv
import json

import numpy as np
import pytest

from cephalo.model import ModelSpec, build_model
from cephalo.report import (make_report, plot_sweep, render_cv_table, run_artefact_sweep,
                            run_padding_sweep, run_topk_sweep)
from test_pipeline import tiny_config
from conftest import make_record


@pytest.fixture(scope="module")
def records():
    rng = np.random.default_rng(3)
    return [make_record(rng, image_id=f"img{i}", height=180, width=150, spacing=0.1)
            for i in range(4)]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_topk_sweep_rows_and_monotone_axis(records, tmp_path):
    import torch

    torch.manual_seed(0)
    config = tiny_config(max_epochs=1)
    model = build_model(config.model).eval()
    path = run_topk_sweep(config, [model], records, tmp_path, ks=(1, 5, 20),
                          preprocess="gt_box")
    rows = read_rows(path)
    assert [int(r["top_k"]) for r in rows] == [1, 5, 20]
    assert all(float(r["mre_mm"]) >= 0 for r in rows)


def test_padding_sweep_categories(records, tmp_path):
    config = tiny_config(max_epochs=1, n_folds=2)
    path = run_padding_sweep(config, records, tmp_path, values=(16, "pad_resize"), fold=0)
    rows = read_rows(path)
    assert [r["padding"] for r in rows] == ["16", "pad_resize"]
    for r in rows:
        assert np.isfinite(float(r["mre_mm"]))


def test_artefact_sweep_rates(records, tmp_path):
    config = tiny_config(max_epochs=1, n_folds=2)
    path = run_artefact_sweep(config, records, tmp_path, rates=(0.0, 1.0), fold=0)
    rows = read_rows(path)
    assert [float(r["artefact_rate"]) for r in rows] == [0.0, 1.0]


def test_plot_sweep_with_gaps_warns(tmp_path, caplog):
    path = tmp_path / "sweep_top_k.csv"
    path.write_text("top_k,mre_mm,sdr_2mm_pct\n1,2.0,50\n5,nan,nan\n20,1.5,60\n")
    with caplog.at_level("WARNING"):
        out = plot_sweep(path, "top_k", tmp_path / "plot.png")
    assert out.exists()
    assert any("missing points" in m for m in caplog.messages)


def test_plot_sweep_empty_csv_errors(tmp_path):
    path = tmp_path / "sweep_top_k.csv"
    path.write_text("top_k,mre_mm,sdr_2mm_pct\n")
    with pytest.raises(ValueError, match="empty sweep"):
        plot_sweep(path, "top_k", tmp_path / "plot.png")


def test_render_cv_table_shape(tmp_path):
    metrics = {
        "folds": [{"fold": i, "mre_mm": 1.2 + 0.01 * i, "sdr_2mm_pct": 83.0 - i}
                  for i in range(4)],
        "ensemble": {"mre_mm": 0.95, "sdr_2mm_pct": 88.0},
    }
    csv_path, png_path = render_cv_table(metrics, tmp_path)
    rows = read_rows(csv_path)
    assert len(rows) == 5  # 4 folds + ensemble
    assert rows[-1]["split"] == "ensemble"
    assert png_path.exists()


def test_make_report_collects_artifacts(tmp_path):
    (tmp_path / "sweep_top_k.csv").write_text("top_k,mre_mm,sdr_2mm_pct\n1,2.0,50\n")
    metrics = {"folds": [{"fold": 0, "mre_mm": 1.0, "sdr_2mm_pct": 80.0}],
               "ensemble": {"mre_mm": 0.9, "sdr_2mm_pct": 85.0}}
    (tmp_path / "fold_metrics.json").write_text(json.dumps(metrics))
    artifacts = make_report(tmp_path)
    names = {p.name for p in artifacts}
    assert "sweep_top_k.png" in names
    assert "cv_table.csv" in names and "cv_table.png" in names


def test_make_report_empty_dir_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        make_report(tmp_path)
