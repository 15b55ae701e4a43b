import json

import pytest

from sigforge.config import parse_config
from sigforge.pipeline import run_pipeline

# seconds-fast end-to-end configuration for pipeline and CLI tests
MICRO = {
    "seed": 3,
    "image_size": 16,
    "corpus": {"users": 3, "genuine": 4, "forged": 4},
    "extractor": {"hidden": 8, "epochs": 5},
    "head": {"hidden": 8, "epochs": 10, "lr": 0.01},
    "generation": {
        "per_ref": 2, "epochs": 20, "refs_per_user": 1, "band": [-0.5, 0.9],
        "vae": {"hidden": 8, "latent": 2}, "cgan": {"hidden": 8, "noise": 4},
    },
    "attack": {"random_count": 20},
    "retrain": {"random_count": 4},
    "analysis": {"n_permutations": 50, "points": "sets"},
}

# 4 users, 8 samples of each label, 200-epoch generators
TINY = {
    "seed": 3,
    "corpus": {"users": 4, "genuine": 8, "forged": 8},
    "extractor": {"hidden": 32, "epochs": 10},
    "head": {"hidden": 64, "epochs": 20},
    "generation": {
        "per_ref": 2, "epochs": 200, "refs_per_user": 1,
        "vae": {"hidden": 64, "latent": 8},
        "cgan": {"hidden": 64, "noise": 16, "lr": 0.002, "non_saturating": True},
    },
    "attack": {"random_count": 50},
    "retrain": {"random_count": 16},
    "analysis": {"n_permutations": 500},
}


@pytest.fixture(scope="session")
def micro_cfg():
    return parse_config(MICRO)


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory, micro_cfg):
    return run_pipeline(micro_cfg, out=tmp_path_factory.mktemp("micro"))


@pytest.fixture
def micro_config_file(tmp_path):
    path = tmp_path / "micro.json"
    path.write_text(json.dumps(MICRO))
    return path


_criteria = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    failed = report.failed or (report.skipped and report.when != "teardown")
    if report.when == "call" or failed:
        _criteria[number] = _criteria.get(number, True) and not failed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if _criteria[number] else 'FAIL'}")
