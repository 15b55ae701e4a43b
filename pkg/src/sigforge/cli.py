"""``sigforge`` command line.

Exit codes: 0 success, 2 invalid input or configuration, 3 a stage or
computation failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, analysis, attack, countermeasure, generative, reporting
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .corpus import LeakageError, generate_corpus, ingest_dataset, load_samples, save_samples, split_dataset
from .imaging import load_image
from .parallel import default_jobs, pmap
from .pipeline import RunDirError, StageError, run_pipeline
from .seeding import derive_seed
from .ssim import SsimParams, ssim_map
from .verifier import (
    load_verifiers,
    preprocess_samples,
    save_extractor,
    save_verifier,
    train_extractor,
    train_verifier,
)

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3

log = logging.getLogger("sigforge")


class CliError(ValueError):
    """Bad command-line input."""


# --------------------------------------------------------------------- helpers


def _config(args) -> ExperimentConfig:
    overrides = {"seed": args.seed}
    if args.config:
        return load_config(args.config, **overrides)
    return parse_config({}, **overrides)


def _jobs(args) -> int:
    return args.jobs if args.jobs is not None else default_jobs()


def _out(args) -> Path:
    if not args.out:
        raise CliError(f"{args.command} needs --out")
    return Path(args.out)


def _split_corpus(directory, cfg: ExperimentConfig) -> list:
    """Samples of a corpus directory, split with the configured fraction if not yet split."""
    samples = load_samples(directory)
    if all(s.split is not None for s in samples):
        return samples
    if any(s.split is not None for s in samples):
        raise CliError(f"{directory}: some samples carry a split and some do not")
    return split_dataset(samples, cfg.split_fraction, derive_seed(cfg.seed, "split"))


def _method_dir(name: str) -> str:
    return name.replace("-", "_")


def _synthetic(directory, method: str) -> generative.SyntheticSet:
    root = Path(directory)
    sub = root / method
    return generative.SyntheticSet(tuple(load_samples(sub if (sub / "samples.jsonl").exists() else root)))


def _load_report(path) -> attack.EvalReport:
    """An EvalReport rebuilt from the ``decisions.jsonl`` next to ``path``."""
    path = Path(path)
    log_path = path if path.name == "decisions.jsonl" else path.with_name("decisions.jsonl")
    if not log_path.exists():
        raise CliError(f"{path}: no decision log at {log_path}")
    head, rows = reporting.read_jsonl(log_path)
    return attack.EvalReport.from_decisions(rows, head["scenarios"], {"scenarios": head.get("scenario_specs", [])})


def _print(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


# --------------------------------------------------------------------- commands


def cmd_synth_corpus(args) -> int:
    cfg = _config(args)
    c = cfg.corpus_config()
    c = replace(c, users=args.users or c.users, genuine=args.genuine or c.genuine, forged=args.forged or c.forged,
                image_size=args.size or c.image_size)
    samples = generate_corpus(c, _jobs(args))
    path = save_samples(samples, _out(args), cfg.hash)
    _print({"samples": len(samples), "users": c.users, "manifest": str(path)})
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _config(args)
    samples = ingest_dataset(args.root, args.dataset)
    path = save_samples(samples, _out(args), cfg.hash)
    _print({"samples": len(samples), "users": len({s.user_id for s in samples}), "manifest": str(path)})
    return EXIT_OK


def cmd_train_verifiers(args) -> int:
    cfg = _config(args)
    size = cfg.image_size
    samples = _split_corpus(args.corpus, cfg)
    train = preprocess_samples([s for s in samples if s.split == "train"], size)
    spec = replace(cfg.extractor_spec(), kind=args.extractor or cfg.extractor.kind)
    ext = train_extractor(train, size, spec, derive_seed(cfg.seed, "extractor"))
    out = _out(args)
    save_extractor(ext, out, cfg.hash)
    users = sorted({s.user_id for s in train})
    jobs = [([s for s in train if s.user_id == u], ext, cfg.head_hyper(), derive_seed(cfg.seed, "baseline", u), "vanilla")
            for u in users]
    for model in pmap(train_verifier, jobs, _jobs(args)):
        save_verifier(model, out, cfg.hash)
    _print({"models": len(users), "extractor": ext.kind, "out": str(out)})
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _config(args)
    method = _method_dir(args.method)
    lo, hi = (float(v) for v in args.band.split(":")) if args.band else cfg.generation.band
    samples = _split_corpus(args.corpus, cfg)
    refs = [s for s in samples if s.label == "forged" and s.split == args.refs]
    if not refs:
        raise CliError(f"no forgeries in the {args.refs!r} split of {args.corpus}")
    refs = preprocess_samples(refs, cfg.image_size)
    g = cfg.generation
    base = generative.GenerationJob(
        reference=refs[0], method="vae" if method == "vae_ssi" else method, samples=args.per_ref or g.per_ref,
        epochs=args.epochs or g.epochs, interval=args.interval or g.interval, band=(lo, hi),
        restart_budget=g.restart_budget, vae=cfg.vae_hyper(), cgan=cfg.cgan_hyper(),
    )
    jobs = [(replace(base, reference=r, seed=derive_seed(cfg.seed, "generate", method, r.sample_id)),
             method == "vae_ssi") for r in refs]
    sets = pmap(generative.run_job, jobs, _jobs(args))
    merged = generative.SyntheticSet.merge(sets)
    path = save_samples(merged.samples, _out(args), cfg.hash)
    _print({"method": method, "references": len(refs), "samples": len(merged), "mean_ssim": merged.mean_ssim(),
            "manifest": str(path)})
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    models = load_verifiers(args.models)
    samples = _split_corpus(args.corpus, cfg)
    scenarios = []
    for name in args.scenarios.split(","):
        tag = _method_dir(name.strip())
        if tag == "vanilla":
            scenarios.append(attack.AttackScenario.vanilla([s for s in samples if s.split == "test"]))
        elif tag == "random":
            count = args.random_count or cfg.attack.random_count
            scenarios.append(attack.AttackScenario.random(count, derive_seed(cfg.seed, "random-attack")))
        elif tag in attack.GENERATIVE_TAGS:
            if not args.synthetic:
                raise CliError(f"scenario {tag!r} needs --synthetic")
            scenarios.append(attack.AttackScenario.generative(_synthetic(args.synthetic, tag), tag))
        else:
            raise CliError(f"unknown scenario {name!r}")
    genuine = [s for s in samples if s.split == "test" and s.label == "genuine"]
    report = attack.run_campaign(models, scenarios, genuine, _jobs(args))
    out = _out(args)
    meta = {"model": report.model_tag, "scenarios": list(report.scenarios), "scenario_specs": report.meta["scenarios"]}
    reporting.write_jsonl(report.decisions, out.with_name("decisions.jsonl"), "decisions", cfg.hash, meta)
    reporting.emit_report(report, "jsonl", out, cfg.hash)
    for tag in report.scenarios:
        agg = report.aggregate(tag)
        _print({"scenario": tag, "far": agg.far, "frr": agg.frr, "attempts": agg.far_attempts})
    return EXIT_OK


def cmd_retrain(args) -> int:
    cfg = _config(args)
    assist = _method_dir(args.assist)
    models = load_verifiers(args.models)
    samples = _split_corpus(args.corpus, cfg)
    synthetic = ()
    if assist != "random":
        if not args.synthetic:
            raise CliError(f"{assist} assistance needs --synthetic")
        synthetic = _synthetic(args.synthetic, assist).samples
    r = cfg.retrain
    plan = countermeasure.RetrainPlan(
        assist=assist, synthetic=synthetic, random_count=r.random_count,
        random_seed=derive_seed(cfg.seed, "retrain-random"), mix_ratio=r.mix_ratio, hyper=cfg.head_hyper(),
        seed=derive_seed(cfg.seed, "retrain", assist), warm_start=args.warm_start or r.warm_start,
    )
    jobs = [(m, plan, [s for s in samples if s.split == "train" and s.user_id == m.user_id]) for m in models]
    out = _out(args)
    retrained = pmap(countermeasure.retrain_verifier, jobs, _jobs(args))
    save_extractor(models[0].extractor, out, cfg.hash)
    for m in retrained:
        save_verifier(m, out, cfg.hash)
    _print({"assist": assist, "tag": plan.tag, "models": len(retrained), "out": str(out)})
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    comp = countermeasure.compare(_load_report(args.before), _load_report(args.after), cfg.retrain.frr_guardrail)
    out = _out(args)
    reporting.emit_report(comp, "csv" if out.suffix == ".csv" else "jsonl", out, cfg.hash)
    for row in comp.aggregates:
        if row["weighting"] == "attempts":
            _print({k: row[k] for k in ("scenario", "far_before", "far_after", "far_delta", "frr_delta", "frr_flag")})
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    a = cfg.analysis
    report = _load_report(args.report)
    tags = [t for t in report.scenarios if t in attack.GENERATIVE_TAGS]
    if not tags:
        raise CliError("the report has no generative scenarios to study")
    ssim_of = {s.sample_id: s.ssim for t in tags for s in _synthetic(args.synthetic, t)}
    rows = [d for d in report.decisions if d["scenario"] in tags and d["attempt"] == "impostor"]
    missing = sorted({d["sample_id"] for d in rows} - set(ssim_of))
    if missing:
        raise CliError(f"{len(missing)} attacked samples are missing from {args.synthetic}, e.g. {missing[0]}")
    points = analysis.band_points([ssim_of[d["sample_id"]] for d in rows], [d["accepted"] for d in rows],
                                  a.band_width, a.min_band_count)
    res = analysis.ssim_far_study(points, a.p_method, a.n_permutations, derive_seed(cfg.seed, "study"))
    reporting.emit_report(res, "csv", _out(args), cfg.hash)
    if args.svg:
        reporting.write_svg(res, args.svg, cfg.hash)
    _print({"r": res.r, "r_squared": res.r_squared, "p_value": res.p_value, "n": res.n, "method": res.method})
    return EXIT_OK


def cmd_ssim(args) -> int:
    params = SsimParams(window=args.window, size=args.size)
    comps = ssim_map(load_image(args.a), load_image(args.b), params)
    _print({"window": args.window, "size": args.size, **comps.means()})
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    root = run_pipeline(cfg, args.out, _jobs(args), args.until)
    _print({"run": str(root), "config_hash": cfg.hash})
    return EXIT_OK


# --------------------------------------------------------------------- parser


def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {"default": None}
    parser.add_argument("--config", help="experiment config JSON", **d)
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)", **d)
    parser.add_argument("--out", help="output path or directory", **d)
    parser.add_argument("--jobs", type=int, help="worker processes (default: $SIGFORGE_JOBS or 1)", **d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sigforge", description="Generative forgery attacks on signature verifiers.")
    p.add_argument("--version", action="version", version=f"sigforge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    _globals(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        _globals(sp, suppress=True)
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth-corpus", cmd_synth_corpus, "write the procedural stand-in corpus")
    sp.add_argument("--users", type=int)
    sp.add_argument("--genuine", type=int)
    sp.add_argument("--forged", type=int)
    sp.add_argument("--size", type=int)

    sp = add("ingest", cmd_ingest, "import <root>/<dataset>/<user>/{genuine,forgery}/ images")
    sp.add_argument("--root", required=True)
    sp.add_argument("--dataset", required=True)

    sp = add("train-verifiers", cmd_train_verifiers, "train the extractor and one head per user")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--extractor", choices=("trained", "raw"))

    sp = add("generate", cmd_generate, "synthesize forgeries from the corpus forgeries of one split")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--method", required=True, choices=("vae", "cgan", "vae-ssi", "vae_ssi"))
    sp.add_argument("--refs", required=True, choices=("train", "test"))
    sp.add_argument("--per-ref", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--band", help="SSIM band low:high for vae-ssi")
    sp.add_argument("--interval", type=int)

    sp = add("attack", cmd_attack, "run a black-box attack campaign")
    sp.add_argument("--models", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--scenarios", default="vanilla,random")
    sp.add_argument("--synthetic", help="directory with one subdirectory per generator")
    sp.add_argument("--random-count", type=int)

    sp = add("retrain", cmd_retrain, "retrain heads with random or synthetic impostors")
    sp.add_argument("--models", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--assist", required=True, choices=("random", "vae", "cgan", "vae-ssi", "vae_ssi"))
    sp.add_argument("--synthetic", help="directory with one subdirectory per generator")
    sp.add_argument("--warm-start", action="store_true")

    sp = add("compare", cmd_compare, "per-cell FAR/FRR deltas between two attack reports")
    sp.add_argument("--before", required=True)
    sp.add_argument("--after", required=True)

    sp = add("analyze", cmd_analyze, "correlate per-band SSIM with FAR")
    sp.add_argument("--report", required=True)
    sp.add_argument("--synthetic", required=True)
    sp.add_argument("--svg")

    sp = add("ssim", cmd_ssim, "SSIM between two images")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--window", choices=("gaussian", "uniform"), default="gaussian")
    sp.add_argument("--size", type=int, default=11)

    sp = add("pipeline", cmd_pipeline, "run or resume the full experiment")
    sp.add_argument("--until", help="stop after this stage")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"sigforge: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (StageError, analysis.StatsError) as exc:
        print(f"sigforge: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (CliError, RunDirError, LeakageError, ValueError, FileNotFoundError) as exc:
        print(f"sigforge: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a failed computation
        print(f"sigforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
