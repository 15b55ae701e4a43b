"""End-to-end experiment runner with resumable, content-checked stages.

A run lives in ``<output_root>/<config hash>/`` with the subdirectories
``corpus``, ``models``, ``synthetic``, ``reports`` and ``logs``. Each stage
writes its artifacts and then ``logs/stage-<name>.json`` recording the config
hash and the sha256 of every output file. On a rerun a stage is skipped when
its manifest is intact, its outputs still match their digests and none of
its dependencies was rerun in the same invocation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis, attack, countermeasure, generative, reporting
from .config import ExperimentConfig
from .corpus import generate_corpus, ingest_dataset, load_samples, save_samples, split_dataset
from .parallel import pmap
from .seeding import derive_seed
from .verifier import (
    load_extractor,
    load_verifiers,
    preprocess_samples,
    save_extractor,
    save_verifier,
    train_extractor,
    train_verifier,
)

log = logging.getLogger("sigforge")

STAGES = ("corpus", "split", "extractor", "baseline", "generation", "attack", "retrain", "hardened", "compare",
          "study", "reports")
DEPENDS = {
    "corpus": (),
    "split": ("corpus",),
    "extractor": ("split",),
    "baseline": ("split", "extractor"),
    "generation": ("split",),
    "attack": ("split", "baseline", "generation"),
    "retrain": ("split", "baseline", "generation"),
    "hardened": ("split", "retrain", "generation"),
    "compare": ("attack", "hardened"),
    "study": ("attack", "generation"),
    "reports": ("attack", "hardened", "study"),
}
SUBDIRS = ("corpus", "models", "synthetic", "reports", "logs")
BASELINE_TAG = "vanilla"


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


class RunDirError(ValueError):
    """The run directory belongs to another configuration."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_dir(cfg: ExperimentConfig, out=None) -> Path:
    return Path(out if out is not None else cfg.output_root) / cfg.hash


# --------------------------------------------------------------------- run state


@dataclass
class Run:
    cfg: ExperimentConfig
    root: Path
    jobs: int | None = 1
    _cache: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return self.cfg.hash

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def seed(self, *parts) -> int:
        return derive_seed(self.cfg.seed, *parts)

    def cached(self, key, load):
        if key not in self._cache:
            self._cache[key] = load()
        return self._cache[key]

    def forget(self, *keys):
        for k in keys:
            self._cache.pop(k, None)

    # -- loaders -------------------------------------------------------

    def samples(self) -> list:
        """Corpus samples (page polarity) with their split assigned."""
        def load():
            raw = load_samples(self.path("corpus", "raw"))
            splits = json.loads(self.path("corpus", "split.json").read_text())["splits"]
            return [s.with_split(splits[s.sample_id]) for s in raw]
        return self.cached("samples", load)

    def extractor(self):
        return self.cached("extractor", lambda: load_extractor(self.path("models", "extractor")))

    def models(self, tag: str) -> list:
        return self.cached(("models", tag), lambda: load_verifiers(self.path("models", tag), self.extractor()))

    def synthetic(self, method: str) -> generative.SyntheticSet:
        def load():
            return generative.SyntheticSet(tuple(load_samples(self.path("synthetic", method))))
        return self.cached(("synthetic", method), load)

    def report(self, tag: str) -> attack.EvalReport:
        def load():
            head, rows = reporting.read_jsonl(self.path("reports", tag, "decisions.jsonl"))
            return attack.EvalReport.from_decisions(rows, head["scenarios"], {"scenarios": head["scenario_specs"]})
        return self.cached(("report", tag), load)

    def scenarios(self) -> list:
        out = []
        samples = self.samples()
        for tag in self.cfg.attack.scenarios:
            if tag == "vanilla":
                out.append(attack.AttackScenario.vanilla([s for s in samples if s.split == "test"]))
            elif tag == "random":
                out.append(attack.AttackScenario.random(self.cfg.attack.random_count, self.seed("random-attack")))
            else:
                out.append(attack.AttackScenario.generative(self.synthetic(tag).partition("test"), tag))
        return out


# --------------------------------------------------------------------- stages


def _stage_corpus(run: Run) -> list[Path]:
    cfg = run.cfg
    if cfg.dataset is not None:
        samples = ingest_dataset(cfg.dataset.root, cfg.dataset.name)
    else:
        samples = generate_corpus(cfg.corpus_config(), run.jobs)
    manifest = save_samples(samples, run.path("corpus", "raw"), run.hash)
    run.forget("samples")
    return [manifest, *(run.path("corpus", "raw", "images", f"{s.sample_id}.pgm") for s in samples)]


def _stage_split(run: Run) -> list[Path]:
    raw = load_samples(run.path("corpus", "raw"))
    split = split_dataset(raw, run.cfg.split_fraction, run.seed("split"))
    out = run.path("corpus", "split.json")
    counts = {k: sum(s.split == k for s in split) for k in ("train", "test")}
    out.write_text(json.dumps({"config_hash": run.hash, "counts": counts,
                               "splits": {s.sample_id: s.split for s in split}}, indent=1, sort_keys=True) + "\n")
    run.forget("samples")
    return [out]


def _stage_extractor(run: Run) -> list[Path]:
    train = preprocess_samples([s for s in run.samples() if s.split == "train"], run.cfg.image_size)
    ext = train_extractor(train, run.cfg.image_size, run.cfg.extractor_spec(), run.seed("extractor"))
    directory = run.path("models", "extractor")
    save_extractor(ext, directory, run.hash)
    run.forget("extractor")
    return sorted(directory.iterdir())


def _train_user(user_samples, extractor, hyper, seed, tag):
    return train_verifier(user_samples, extractor, hyper, seed, tag)


def _by_user(samples) -> dict:
    out: dict = {}
    for s in samples:
        out.setdefault(s.user_id, []).append(s)
    return dict(sorted(out.items()))


def _save_models(run: Run, models, tag: str) -> list[Path]:
    directory = run.path("models", tag)
    directory.mkdir(parents=True, exist_ok=True)
    for m in models:
        save_verifier(m, directory, run.hash)
    run.forget(("models", tag))
    return sorted(directory.iterdir())


def _stage_baseline(run: Run) -> list[Path]:
    size, hyper = run.cfg.image_size, run.cfg.head_hyper()
    train = preprocess_samples([s for s in run.samples() if s.split == "train"], size)
    ext = run.extractor()
    args = [(samples, ext, hyper, run.seed("baseline", user), BASELINE_TAG) for user, samples in _by_user(train).items()]
    return _save_models(run, pmap(_train_user, args, run.jobs), BASELINE_TAG)


def references(run: Run) -> list:
    """Preprocessed human forgeries the generators imitate, from both splits."""
    limit = run.cfg.generation.refs_per_user
    chosen = []
    for user, samples in _by_user([s for s in run.samples() if s.label == "forged"]).items():
        for split in ("train", "test"):
            part = sorted((s for s in samples if s.split == split), key=lambda s: s.sample_id)
            chosen.extend(part if limit is None else part[:limit])
    return preprocess_samples(chosen, run.cfg.image_size)


def _generate_one(job: generative.GenerationJob, controlled: bool):
    try:
        return generative.run_job(job, controlled), None
    except generative.SsimBudgetError as exc:
        return None, {"reference_id": exc.reference_id, "sample_index": exc.sample_index, "attempts": exc.attempts,
                      "closest": min(exc.seen, key=lambda v: abs(v - float(np.mean(exc.band)))) if exc.seen else None}


def _stage_generation(run: Run) -> list[Path]:
    g = run.cfg.generation
    refs = references(run)
    outputs = []
    for method in g.methods:
        controlled = method == "vae_ssi"
        base = generative.GenerationJob(
            reference=refs[0], method="vae" if controlled else method, samples=g.per_ref, epochs=g.epochs,
            interval=g.interval, band=tuple(g.band), restart_budget=g.restart_budget,
            vae=run.cfg.vae_hyper(), cgan=run.cfg.cgan_hyper(),
        )
        jobs = [(replace(base, reference=r, seed=run.seed("generate", method, r.sample_id)), controlled)
                for r in refs]
        results = pmap(_generate_one, jobs, run.jobs)
        sets = [s for s, _ in results if s is not None]
        failures = [f for _, f in results if f is not None]
        directory = run.path("synthetic", method)
        merged = generative.SyntheticSet.merge(sets)
        outputs.append(save_samples(merged.samples, directory, run.hash))
        outputs.extend(directory / "images" / f"{s.sample_id}.pgm" for s in merged)
        summary = {"config_hash": run.hash, "method": method, "references": len(refs), "failed": failures,
                   "samples": len(merged), "mean_ssim": merged.mean_ssim() if len(merged) else None}
        path = directory / "summary.json"
        path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        outputs.append(path)
        run.forget(("synthetic", method))
    return outputs


def _write_eval(run: Run, report: attack.EvalReport, tag: str) -> list[Path]:
    directory = run.path("reports", tag)
    meta = {"model": report.model_tag, "scenarios": list(report.scenarios), "scenario_specs": report.meta["scenarios"]}
    paths = [
        reporting.write_jsonl(report.decisions, directory / "decisions.jsonl", "decisions", run.hash, meta),
        reporting.emit_report(report, "jsonl", directory / "report.jsonl", run.hash),
        reporting.emit_report(report, "csv", directory / "report.csv", run.hash),
    ]
    run.forget(("report", tag))
    return paths


def _campaign(run: Run, tag: str) -> list[Path]:
    genuine = [s for s in run.samples() if s.split == "test" and s.label == "genuine"]
    report = attack.run_campaign(run.models(tag), run.scenarios(), genuine, run.jobs)
    return _write_eval(run, report, tag)


def _stage_attack(run: Run) -> list[Path]:
    return _campaign(run, BASELINE_TAG)


def _retrain_user(model, plan, samples):
    return countermeasure.retrain_verifier(model, plan, samples)


def plans(run: Run) -> list[countermeasure.RetrainPlan]:
    r = run.cfg.retrain
    out = []
    for assist in r.plans:
        synthetic = () if assist == "random" else run.synthetic(assist).partition("train").samples
        out.append(countermeasure.RetrainPlan(
            assist=assist, synthetic=synthetic, random_count=r.random_count, random_seed=run.seed("retrain-random"),
            mix_ratio=r.mix_ratio, hyper=run.cfg.head_hyper(), seed=run.seed("retrain", assist), warm_start=r.warm_start,
        ))
    return out


def _stage_retrain(run: Run) -> list[Path]:
    train = _by_user([s for s in run.samples() if s.split == "train"])
    base = {m.user_id: m for m in run.models(BASELINE_TAG)}
    outputs = []
    for plan in plans(run):
        args = [(base[user], plan, samples) for user, samples in train.items()]
        outputs.extend(_save_models(run, pmap(_retrain_user, args, run.jobs), plan.tag))
    return outputs


def _hardened_tags(run: Run) -> list[str]:
    return [countermeasure.ASSIST_TAGS[a] for a in run.cfg.retrain.plans]


def _stage_hardened(run: Run) -> list[Path]:
    return [p for tag in _hardened_tags(run) for p in _campaign(run, tag)]


def _stage_compare(run: Run) -> list[Path]:
    before = run.report(BASELINE_TAG)
    outputs = []
    for tag in _hardened_tags(run):
        comp = countermeasure.compare(before, run.report(tag), run.cfg.retrain.frr_guardrail)
        directory = run.path("reports", tag)
        outputs.append(reporting.emit_report(comp, "jsonl", directory / "comparison.jsonl", run.hash))
        outputs.append(reporting.emit_report(comp, "csv", directory / "comparison.csv", run.hash))
    return outputs


def study_points(run: Run) -> list[dict]:
    """(mean SSIM, FAR) points from the baseline attack on synthetic impostors."""
    a = run.cfg.analysis
    report = run.report(BASELINE_TAG)
    tags = [t for t in report.scenarios if t in attack.GENERATIVE_TAGS]
    ssim_of = {s.sample_id: s.ssim for t in tags for s in run.synthetic(t)}
    rows = [d for d in report.decisions if d["scenario"] in tags and d["attempt"] == "impostor"]
    if a.points == "bands":
        return analysis.band_points([ssim_of[d["sample_id"]] for d in rows], [d["accepted"] for d in rows],
                                    a.band_width, a.min_band_count)
    groups: dict = {}
    for d in rows:
        groups.setdefault((d["scenario"], d["user_id"]), []).append(d)
    points = []
    for (tag, user), ds in sorted(groups.items()):
        points.append({"label": f"{tag}/{user}", "band_low": None, "band_high": None,
                       "mean_ssim": float(np.mean([ssim_of[d["sample_id"]] for d in ds])),
                       "far": float(np.mean([d["accepted"] for d in ds])), "attempts": len(ds)})
    return points


def _stage_study(run: Run) -> list[Path]:
    a = run.cfg.analysis
    points = study_points(run)
    meta = {"points": a.points, "band_width": a.band_width, "source": f"{BASELINE_TAG} attack on synthetic sets"}
    try:
        res = analysis.ssim_far_study(points, a.p_method, a.n_permutations, run.seed("study"))
        meta.update(r=res.r, r_squared=res.r_squared, p_value=res.p_value, n=res.n, slope=res.slope,
                    intercept=res.intercept, method=res.method)
    except analysis.StatsError as exc:
        meta["error"] = str(exc)
    directory = run.path("reports")
    return [
        reporting.write_csv(points, reporting.STUDY_COLUMNS, directory / "study.csv", "ssim-far-points", run.hash),
        reporting.write_jsonl(points, directory / "study.jsonl", "ssim-far-study", run.hash, meta),
    ]


def _stage_reports(run: Run) -> list[Path]:
    directory = run.path("reports")
    reports = {BASELINE_TAG: run.report(BASELINE_TAG), **{t: run.report(t) for t in _hardened_tags(run)}}
    scenarios = list(run.cfg.attack.scenarios)
    name = run.cfg.dataset.name if run.cfg.dataset is not None else "procedural"
    head, points = reporting.read_jsonl(directory / "study.jsonl")
    result = None
    if "error" not in head:
        result = analysis.CorrelationResult(head["r"], head["r_squared"], head["p_value"], head["n"], head["slope"],
                                            head["intercept"], head["method"], tuple(points))
    summary = {
        "config_hash": run.hash,
        "far": {tag: {sc: r.aggregate(sc).far for sc in r.scenarios} for tag, r in reports.items()},
        "far_user_mean": {tag: {sc: r.aggregate(sc, "users").far for sc in r.scenarios} for tag, r in reports.items()},
        "frr": {tag: r.aggregate(r.scenarios[0]).frr for tag, r in reports.items()},
        "generation": {m: json.loads(run.path("synthetic", m, "summary.json").read_text())
                       for m in run.cfg.generation.methods},
        "study": {k: head.get(k) for k in ("r", "r_squared", "p_value", "n", "error") if k in head},
    }
    for g in summary["generation"].values():
        g.pop("config_hash", None)
    return [
        reporting.write_heatmap(reports, scenarios, directory / "heatmap.csv", name, run.hash),
        reporting.write_radar(reports, directory / "radar.csv", name, run.hash),
        reporting.write_svg(result, directory / "study.svg", run.hash, points),
        reporting.write_text(directory / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n"),
    ]


STAGE_FUNCS = {
    "corpus": _stage_corpus,
    "split": _stage_split,
    "extractor": _stage_extractor,
    "baseline": _stage_baseline,
    "generation": _stage_generation,
    "attack": _stage_attack,
    "retrain": _stage_retrain,
    "hardened": _stage_hardened,
    "compare": _stage_compare,
    "study": _stage_study,
    "reports": _stage_reports,
}


# --------------------------------------------------------------------- manifests


def manifest_path(root: Path, stage: str) -> Path:
    return root / "logs" / f"stage-{stage}.json"


def _read_manifest(root: Path, stage: str) -> dict | None:
    try:
        m = json.loads(manifest_path(root, stage).read_text())
    except (OSError, ValueError):
        return None
    return m if isinstance(m, dict) else None


def stage_is_fresh(root: Path, stage: str, config_hash: str) -> bool:
    m = _read_manifest(root, stage)
    if m is None or m.get("stage") != stage or m.get("config_hash") != config_hash:
        return False
    outputs = m.get("outputs")
    if not isinstance(outputs, dict) or not outputs:
        return False
    for rel, digest in outputs.items():
        p = root / rel
        if not p.is_file() or sha256_file(p) != digest:
            return False
    return True


def _write_manifest(root: Path, stage: str, config_hash: str, outputs, elapsed: float) -> None:
    digests = {str(Path(p).relative_to(root)): sha256_file(p) for p in sorted(set(map(Path, outputs)))}
    m = {"stage": stage, "config_hash": config_hash, "depends": list(DEPENDS[stage]), "outputs": digests,
         "elapsed_seconds": round(elapsed, 3)}
    manifest_path(root, stage).write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")


def claim_run_dir(root: Path, cfg: ExperimentConfig) -> None:
    """Create the layout, or check an existing tree belongs to ``cfg``."""
    info = root / "run.json"
    if info.exists():
        try:
            existing = json.loads(info.read_text()).get("config_hash")
        except ValueError:
            existing = None
        if existing != cfg.hash:
            raise RunDirError(f"{root} holds a run for config {existing}, not {cfg.hash}")
    for stage in STAGES:
        m = _read_manifest(root, stage)
        if m is not None and m.get("config_hash") not in (None, cfg.hash):
            raise RunDirError(f"{manifest_path(root, stage)} was written for config {m.get('config_hash')}, "
                              f"not {cfg.hash}; mixed-hash run directories are not allowed")
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    info.write_text(json.dumps({"config_hash": cfg.hash, "config": cfg.canonical()}, indent=1, sort_keys=True) + "\n")


def run_pipeline(cfg: ExperimentConfig, out=None, jobs: int | None = 1, until: str | None = None) -> Path:
    """Run (or resume) every stage in order; returns the run directory.

    ``until`` stops after the named stage.
    """
    if until is not None and until not in STAGES:
        raise ValueError(f"unknown stage {until!r}; stages are {STAGES}")
    root = run_dir(cfg, out)
    claim_run_dir(root, cfg)
    run = Run(cfg, root, jobs)
    handler = logging.FileHandler(root / "logs" / "pipeline.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    try:
        rerun: set[str] = set()
        for stage in STAGES:
            dirty = [d for d in DEPENDS[stage] if d in rerun]
            if not dirty and stage_is_fresh(root, stage, cfg.hash):
                log.info("stage %s: up to date, skipped", stage)
            else:
                log.info("stage %s: running%s", stage, f" (upstream {', '.join(dirty)} reran)" if dirty else "")
                start = time.perf_counter()
                try:
                    outputs = STAGE_FUNCS[stage](run)
                except Exception as exc:
                    log.error("stage %s failed: %s", stage, exc)
                    raise StageError(stage, exc) from exc
                _write_manifest(root, stage, cfg.hash, outputs, time.perf_counter() - start)
                rerun.add(stage)
            if stage == until:
                break
    finally:
        log.removeHandler(handler)
        handler.close()
    return root


def executed_stages(root: Path) -> dict:
    """Stage name -> manifest (or None), for inspection and tests."""
    return {s: _read_manifest(Path(root), s) for s in STAGES}
