import numpy as np
import pytest

from sigforge import reporting as rp
from sigforge.analysis import ssim_far_study
from sigforge.attack import EvalReport
from sigforge.countermeasure import compare


def _report(tag, accepts, scenarios=("vanilla", "cgan")):
    log = []
    for u, acc in enumerate(accepts):
        for tag_s in scenarios:
            log += [{"model": tag, "user_id": f"u{u}", "scenario": tag_s, "attempt": "impostor", "index": i,
                     "sample_id": f"{tag_s}{i}", "accepted": i < acc} for i in range(7)]
        log += [{"model": tag, "user_id": f"u{u}", "scenario": "genuine", "attempt": "genuine", "index": i,
                 "sample_id": f"g{i}", "accepted": i > 0} for i in range(3)]
    return EvalReport.from_decisions(log, scenarios)


def test_csv_round_trip_reproduces_records(tmp_path):
    rep = _report("vanilla", [3, 1])
    path = rp.emit_report(rep, "csv", tmp_path / "r.csv", config_hash="0123abcd")
    header, rows = rp.read_csv(path)
    assert header == {"schema": "far-cells", "version": 1, "columns": list(rp.CELL_COLUMNS),
                      "config_hash": "0123abcd"}
    want = [{c: r.get(c) for c in rp.CELL_COLUMNS} for r in rep.records()]
    assert rows == want


def test_jsonl_round_trip(tmp_path):
    rep = _report("vanilla", [2, 5])
    path = rp.emit_report(rep, "jsonl", tmp_path / "r.jsonl", config_hash="feed")
    header, rows = rp.read_jsonl(path)
    assert header["schema"] == "far-cells" and header["config_hash"] == "feed"
    assert rows == rep.records()


def test_comparison_and_study_round_trip(tmp_path):
    cmp_ = compare(_report("vanilla", [4, 4]), _report("cgan_assisted", [1, 0]))
    _, rows = rp.read_csv(rp.emit_report(cmp_, "csv", tmp_path / "c.csv"))
    assert rows == [{c: r.get(c) for c in rp.COMPARISON_COLUMNS} for r in cmp_.records()]
    pts = [{"label": f"b{i}", "band_low": i / 10, "band_high": (i + 1) / 10, "mean_ssim": 0.1 * i + 0.01 * i * i,
            "far": 0.5 - 0.1 * i, "attempts": 3 + i} for i in range(4)]
    res = ssim_far_study(pts, n_permutations=100)
    header, rows = rp.read_csv(rp.emit_report(res, "csv", tmp_path / "s.csv"))
    assert header["schema"] == "ssim-far-points" and rows == pts


def test_float_formatting_is_exact(tmp_path):
    vals = [0.1 + 0.2, 1 / 3, 1e-300, -0.0, 2.5e10]
    rows = [{"label": str(i), "far": v} for i, v in enumerate(vals)]
    _, back = rp.read_csv(rp.write_csv(rows, ("label", "far"), tmp_path / "f.csv", "t"))
    assert [r["far"] for r in back] == vals


def test_empty_report_is_header_only(tmp_path):
    path = rp.emit_report([], "csv", tmp_path / "e.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("# sigforge:far-cells v1")
    assert rp.read_csv(path)[1] == []


def test_io_failure_names_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(rp.ReportIOError) as info:
        rp.emit_report([], "csv", blocker / "sub" / "x.csv")
    assert str(blocker) in str(info.value) and not isinstance(info.value, ValueError)


def test_unknown_format_and_type():
    with pytest.raises(ValueError):
        rp.emit_report([], "xml", "x")
    with pytest.raises(TypeError):
        rp.emit_report(object(), "csv", "x")


def test_heatmap_cell_count_and_values(tmp_path):
    reports = {"vanilla": _report("vanilla", [7, 0]), "vae_assisted": _report("vae_assisted", [1, 1])}
    path = rp.write_heatmap(reports, ("vanilla", "cgan"), tmp_path / "h.csv", config_hash="aa")
    header, rows = rp.read_csv(path)
    assert len(rows) * (len(header["columns"]) - 1) == 2 * 2
    assert rows[0] == {"row": "procedural/vanilla", "vanilla": 0.5, "cgan": 0.5}
    assert rows[1]["cgan"] == 2 / 14


def test_radar_rows(tmp_path):
    reports = {"vanilla": _report("vanilla", [7, 0])}
    _, rows = rp.read_csv(rp.write_radar(reports, tmp_path / "r.csv"))
    assert rows == [{"dataset": "procedural", "model": "vanilla", "far": 0.5, "frr": 1 / 3}]


def test_svg_contains_points_line_and_hash():
    pts = [{"label": str(i), "mean_ssim": 0.2 * i, "far": 0.8 - 0.15 * i} for i in range(4)]
    res = ssim_far_study(pts, n_permutations=50)
    svg = rp.scatter_svg(res, config_hash="beef")
    assert svg.startswith("<svg") and svg.count("<circle") == 4
    assert 'stroke="crimson"' in svg and "<!-- config beef -->" in svg
    only = rp.scatter_svg(None, points=pts[:2])
    assert only.count("<circle") == 2 and "crimson" not in only


def test_jsonl_meta_lands_in_header(tmp_path):
    path = rp.write_jsonl([{"a": 1}], tmp_path / "m.jsonl", "x", meta={"scenarios": ["vanilla"]})
    header, rows = rp.read_jsonl(path)
    assert header["scenarios"] == ["vanilla"] and rows == [{"a": 1}]
    (tmp_path / "bad.jsonl").write_text('{"a": 1}\n')
    with pytest.raises(ValueError):
        rp.read_jsonl(tmp_path / "bad.jsonl")
    assert np.isfinite(header["version"])
