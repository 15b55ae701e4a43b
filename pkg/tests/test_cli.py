import json
import subprocess
import sys

import numpy as np
import pytest

from sigforge.cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, main
from sigforge.imaging import save_image
from sigforge.reporting import read_csv, read_jsonl


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, [json.loads(line) for line in out.splitlines() if line.startswith("{")], err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_staged_commands_chain_end_to_end(capsys, workdir, micro_config_file):
    cfg = ["--config", micro_config_file]
    corpus, models, syn = workdir / "corpus", workdir / "models", workdir / "syn"

    code, out, _ = _run(capsys, "synth-corpus", *cfg, "--out", corpus)
    assert code == EXIT_OK and out[0]["samples"] == 3 * 8

    code, out, _ = _run(capsys, "train-verifiers", *cfg, "--corpus", corpus, "--out", models)
    assert code == EXIT_OK and out[0]["models"] == 3 and out[0]["extractor"] == "trained"

    for method, refs in (("vae", "test"), ("vae-ssi", "test"), ("vae-ssi", "train")):
        dest = syn / refs / method.replace("-", "_")
        code, out, _ = _run(capsys, "generate", *cfg, "--corpus", corpus, "--method", method, "--refs", refs,
                            "--out", dest)
        assert code == EXIT_OK and out[0]["samples"] == 2 * out[0]["references"]

    report = workdir / "vanilla.jsonl"
    code, out, _ = _run(capsys, "attack", *cfg, "--models", models, "--corpus", corpus,
                        "--scenarios", "vanilla,random,vae,vae-ssi", "--synthetic", syn / "test", "--out", report)
    assert code == EXIT_OK and [r["scenario"] for r in out] == ["vanilla", "random", "vae", "vae_ssi"]
    assert out[1]["attempts"] == 3 * 20
    header, rows = read_jsonl(report)
    assert header["schema"] == "far-cells" and len(rows) == 3 * 4 + 2 * 4

    hardened = workdir / "hardened"
    code, out, _ = _run(capsys, "retrain", *cfg, "--models", models, "--corpus", corpus, "--assist", "vae-ssi",
                        "--synthetic", syn / "train", "--out", hardened)
    assert code == EXIT_OK and out[0]["tag"] == "vae_ssi_assisted"

    after = workdir / "after" / "hardened.jsonl"
    after.parent.mkdir()
    code, out, _ = _run(capsys, "attack", *cfg, "--models", hardened, "--corpus", corpus,
                        "--scenarios", "vanilla,random,vae,vae-ssi", "--synthetic", syn / "test", "--out", after)
    assert code == EXIT_OK

    comparison = workdir / "comparison.csv"
    code, out, _ = _run(capsys, "compare", *cfg, "--before", report, "--after", after, "--out", comparison)
    assert code == EXIT_OK and len(out) == 4
    assert all(r["far_delta"] == pytest.approx(r["far_after"] - r["far_before"]) for r in out)
    assert read_csv(comparison)[0]["schema"] == "comparison"

    study = workdir / "study.csv"
    code, out, _ = _run(capsys, "analyze", *cfg, "--report", report, "--synthetic", syn / "test", "--out", study,
                        "--svg", workdir / "study.svg")
    # two samples per reference leave too few SSIM bands to correlate
    assert code == EXIT_FAILED and not study.exists()


def test_analyze_on_a_pipeline_run(capsys, tmp_path, micro_run, micro_config_file):
    svg = tmp_path / "study.svg"
    code, out, _ = _run(capsys, "analyze", "--config", micro_config_file, "--out", tmp_path / "study.csv",
                        "--report", micro_run / "reports" / "vanilla" / "report.csv",
                        "--synthetic", micro_run / "synthetic", "--svg", svg)
    assert code == EXIT_OK and out[0]["method"] == "permutation" and -1 <= out[0]["r"] <= 1
    assert svg.read_text().startswith("<svg")
    _, points = read_csv(tmp_path / "study.csv")
    assert len(points) == out[0]["n"] >= 3


def test_leaky_retrain_is_rejected(capsys, workdir, micro_config_file):
    cfg = ["--config", micro_config_file]
    corpus, models, syn = workdir / "corpus", workdir / "models", workdir / "syn"
    if not (syn / "test" / "vae").exists():
        pytest.skip("needs the chained run above")
    code, _, err = _run(capsys, "retrain", *cfg, "--models", models, "--corpus", corpus, "--assist", "vae",
                        "--synthetic", syn / "test", "--out", workdir / "leak")
    assert code == EXIT_INVALID and "test" in err


def test_ssim_command_prints_component_means(capsys, tmp_path):
    rng = np.random.default_rng(0)
    a, b = rng.random((20, 20)), rng.random((20, 20))
    save_image(a, tmp_path / "a.pgm")
    save_image(a, tmp_path / "same.pgm")
    save_image(b, tmp_path / "b.pgm")
    code, out, _ = _run(capsys, "ssim", "--a", tmp_path / "a.pgm", "--b", tmp_path / "same.pgm")
    assert code == EXIT_OK
    assert set(out[0]) >= {"window", "size", "ssim", "luminance", "contrast", "structure"}
    assert out[0]["ssim"] == pytest.approx(1.0)
    code, out, _ = _run(capsys, "ssim", "--a", tmp_path / "a.pgm", "--b", tmp_path / "b.pgm", "--window", "uniform",
                        "--size", "7")
    assert code == EXIT_OK and out[0]["window"] == "uniform" and out[0]["ssim"] < 0.5


def test_pipeline_command_and_exit_codes(capsys, tmp_path, micro_config_file):
    code, out, _ = _run(capsys, "pipeline", "--config", micro_config_file, "--out", tmp_path, "--until", "baseline")
    assert code == EXIT_OK and out[0]["run"].endswith(out[0]["config_hash"])

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"generation": {"band": [0.5, 0.1]}}))
    code, _, err = _run(capsys, "pipeline", "--config", bad, "--out", tmp_path)
    assert code == EXIT_INVALID and "generation" in err

    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps({"dataset": {"root": str(tmp_path / "none"), "name": "x"}}))
    code, _, err = _run(capsys, "pipeline", "--config", missing, "--out", tmp_path)
    assert code == EXIT_FAILED and "corpus" in err

    code, _, err = _run(capsys, "ssim", "--a", tmp_path / "nope.pgm", "--b", tmp_path / "nope.pgm")
    assert code == EXIT_INVALID and "nope.pgm" in err

    code, _, err = _run(capsys, "synth-corpus", "--config", micro_config_file)
    assert code == EXIT_INVALID and "--out" in err

    with pytest.raises(SystemExit) as info:
        main(["generate", "--corpus", "x", "--method", "gan", "--refs", "test"])
    assert info.value.code == 2


def test_module_entry_point(tmp_path):
    done = subprocess.run([sys.executable, "-m", "sigforge", "--version"], capture_output=True, text=True)
    assert done.returncode == 0 and done.stdout.startswith("sigforge ")
