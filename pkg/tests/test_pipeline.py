import json
import logging
import re
import shutil

import pytest

from sigforge import pipeline as pl
from sigforge.config import parse_config
from sigforge.imaging import pgm_comments
from sigforge.reporting import read_csv, read_jsonl

from conftest import MICRO


def _report_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted((root / "reports").rglob("*")) if p.is_file()}


def _ran(caplog):
    return [m.group(1) for r in caplog.records if (m := re.match(r"stage (\w+): running", r.getMessage()))]


def test_full_run_emits_every_report(micro_run, micro_cfg):
    root = micro_run
    assert root.name == micro_cfg.hash
    for sub in pl.SUBDIRS:
        assert (root / sub).is_dir()
    for name in ("heatmap.csv", "radar.csv", "study.svg", "study.csv", "study.jsonl", "summary.json"):
        assert (root / "reports" / name).is_file(), name
    for tag in ("vanilla", "random_assisted", "vae_assisted", "cgan_assisted", "vae_ssi_assisted"):
        assert (root / "reports" / tag / "report.csv").is_file()
    for tag in ("random_assisted", "vae_ssi_assisted"):
        assert (root / "reports" / tag / "comparison.csv").is_file()
    manifests = pl.executed_stages(root)
    assert all(manifests[s] is not None for s in pl.STAGES)


def test_artifacts_carry_the_config_hash(micro_run, micro_cfg):
    h = micro_cfg.hash
    header, _ = read_csv(micro_run / "reports" / "vanilla" / "report.csv")
    assert header["config_hash"] == h
    assert read_jsonl(micro_run / "reports" / "study.jsonl")[0]["config_hash"] == h
    pgm = next((micro_run / "synthetic" / "vae" / "images").iterdir())
    assert pgm_comments(pgm.read_bytes()) == [f"config {h}"]
    head = json.loads(next((micro_run / "models" / "vanilla").glob("head-*.json")).read_text())
    assert head["metadata"]["config_hash"] == h
    assert f"<!-- config {h} -->" in (micro_run / "reports" / "study.svg").read_text()
    assert json.loads((micro_run / "reports" / "summary.json").read_text())["config_hash"] == h


def test_synthetic_partitions_follow_reference_splits(micro_run):
    splits = json.loads((micro_run / "corpus" / "split.json").read_text())["splits"]
    for method in ("vae", "cgan", "vae_ssi"):
        for line in (micro_run / "synthetic" / method / "samples.jsonl").read_text().splitlines():
            rec = json.loads(line)
            assert rec["split"] == splits[rec["reference_id"]]


def test_rerun_skips_everything_and_reports_are_identical(micro_run, micro_cfg, tmp_path, caplog):
    copy = tmp_path / micro_run.name
    shutil.copytree(micro_run, copy)
    before = _report_bytes(copy)
    manifests = pl.executed_stages(copy)
    with caplog.at_level(logging.INFO, logger="sigforge"):
        pl.run_pipeline(micro_cfg, out=tmp_path)
    assert _ran(caplog) == []
    assert _report_bytes(copy) == before
    assert pl.executed_stages(copy) == manifests


@pytest.mark.parametrize("stage, expected", [
    ("retrain", ["retrain", "hardened", "compare", "reports"]),
    ("study", ["study", "reports"]),
    ("generation", ["generation", "attack", "retrain", "hardened", "compare", "study", "reports"]),
])
def test_corrupt_manifest_reruns_stage_and_dependents(micro_run, micro_cfg, tmp_path, caplog, stage, expected):
    copy = tmp_path / micro_run.name
    shutil.copytree(micro_run, copy)
    before = _report_bytes(copy)
    pl.manifest_path(copy, stage).write_text("{ not json")
    with caplog.at_level(logging.INFO, logger="sigforge"):
        pl.run_pipeline(micro_cfg, out=tmp_path)
    assert _ran(caplog) == expected
    assert _report_bytes(copy) == before


def test_tampered_output_is_detected(micro_run, micro_cfg, tmp_path, caplog):
    copy = tmp_path / micro_run.name
    shutil.copytree(micro_run, copy)
    (copy / "reports" / "heatmap.csv").write_text("tampered\n")
    with caplog.at_level(logging.INFO, logger="sigforge"):
        pl.run_pipeline(micro_cfg, out=tmp_path)
    assert _ran(caplog) == ["reports"]
    assert (copy / "reports" / "heatmap.csv").read_text().startswith("# sigforge:far-heatmap")


def test_mixed_hash_run_directories_are_rejected(micro_run, micro_cfg, tmp_path):
    copy = tmp_path / micro_run.name
    shutil.copytree(micro_run, copy)
    m = json.loads(pl.manifest_path(copy, "study").read_text())
    m["config_hash"] = "0000000000000000"
    pl.manifest_path(copy, "study").write_text(json.dumps(m))
    with pytest.raises(pl.RunDirError, match="mixed-hash"):
        pl.run_pipeline(micro_cfg, out=tmp_path)
    other = parse_config({**MICRO, "seed": 4})
    foreign = tmp_path / other.hash
    shutil.copytree(micro_run, foreign)
    with pytest.raises(pl.RunDirError):
        pl.run_pipeline(other, out=tmp_path)


def test_until_stops_early(micro_cfg, tmp_path):
    root = pl.run_pipeline(micro_cfg, out=tmp_path, until="split")
    done = pl.executed_stages(root)
    assert done["corpus"] and done["split"] and done["extractor"] is None
    with pytest.raises(ValueError, match="unknown stage"):
        pl.run_pipeline(micro_cfg, out=tmp_path, until="everything")


def test_stage_failure_names_the_stage(tmp_path):
    cfg = parse_config({**{k: v for k, v in MICRO.items() if k != "corpus"},
                        "dataset": {"root": str(tmp_path / "nowhere"), "name": "cedar"}})
    with pytest.raises(pl.StageError) as info:
        pl.run_pipeline(cfg, out=tmp_path)
    assert info.value.stage == "corpus" and "nowhere" in str(info.value)


def test_pipeline_runs_on_an_ingested_dataset(micro_run, tmp_path):
    from sigforge.corpus import load_samples
    from sigforge.imaging import save_image

    for s in load_samples(micro_run / "corpus" / "raw"):
        d = tmp_path / "data" / "set" / s.user_id / ("genuine" if s.label == "genuine" else "forgery")
        d.mkdir(parents=True, exist_ok=True)
        save_image(s.image, d / f"{s.sample_id}.pgm")
    cfg = parse_config({**{k: v for k, v in MICRO.items() if k != "corpus"},
                        "dataset": {"root": str(tmp_path / "data"), "name": "set"}})
    root = pl.run_pipeline(cfg, out=tmp_path / "runs")
    header, rows = read_csv(root / "reports" / "heatmap.csv")
    assert rows[0]["row"] == "set/vanilla"
