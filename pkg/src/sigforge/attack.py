"""Black-box attack campaigns against writer-dependent verifiers.

The harness only ever calls :func:`sigforge.verifier.verify_batch`; it sees
accept/reject decisions and nothing else about a model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .corpus import LeakageError, SignatureSample
from .generative import SyntheticSet
from .imaging import preprocess, random_signature
from .parallel import pmap
from .seeding import derive_seed
from .verifier import verify_batch

SCENARIO_KINDS = ("vanilla", "random", "generative")
SCENARIO_TAGS = ("vanilla", "random", "vae", "cgan", "vae_ssi")
GENERATIVE_TAGS = ("vae", "cgan", "vae_ssi")
DEFAULT_RANDOM_COUNT = 5000


class AttackError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AttackScenario:
    kind: str
    tag: str
    impostors: tuple[SignatureSample, ...] = ()
    random_count: int | None = None
    random_seed: int | None = None

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise AttackError(f"scenario kind must be one of {SCENARIO_KINDS}, got {self.kind!r}")
        if self.tag not in SCENARIO_TAGS:
            raise AttackError(f"scenario tag must be one of {SCENARIO_TAGS}, got {self.tag!r}")
        if self.kind == "random":
            if self.random_count is None or self.random_seed is None or self.random_count < 1:
                raise AttackError("a random scenario needs a positive count and a seed")
        elif self.kind == "generative":
            check_test_partition(self.impostors)
        object.__setattr__(self, "impostors", tuple(self.impostors))

    @classmethod
    def vanilla(cls, forgeries) -> "AttackScenario":
        return cls("vanilla", "vanilla", tuple(s for s in forgeries if s.label == "forged"))

    @classmethod
    def random(cls, count: int = DEFAULT_RANDOM_COUNT, seed: int = 0) -> "AttackScenario":
        return cls("random", "random", (), count, seed)

    @classmethod
    def generative(cls, synthetic: SyntheticSet | tuple, tag: str | None = None) -> "AttackScenario":
        samples = tuple(synthetic)
        tag = tag or (samples[0].provenance if samples else "vae")
        return cls("generative", tag, samples)

    def describe(self) -> dict:
        d = {"kind": self.kind, "tag": self.tag}
        if self.kind == "random":
            d.update(count=self.random_count, seed=self.random_seed)
        else:
            d["n_impostors"] = len(self.impostors)
        return d


def check_test_partition(samples) -> None:
    for s in samples:
        if s.reference_id is None and s.provenance in ("human", "procedural"):
            continue
        if s.split != "test":
            raise LeakageError(
                f"synthetic sample {s.sample_id} (reference {s.reference_id}) belongs to the {s.split!r} partition; "
                "only test-partition synthetic samples may be used to attack"
            )


@dataclass(frozen=True)
class EvalMetrics:
    far: float | None
    frr: float | None
    far_attempts: int
    far_accepted: int
    frr_attempts: int
    frr_rejected: int

    @property
    def hter(self) -> float | None:
        if self.far is None or self.frr is None:
            return None
        return hter(self.far, self.frr)

    @classmethod
    def from_counts(cls, far_accepted: int, far_attempts: int, frr_rejected: int, frr_attempts: int) -> "EvalMetrics":
        return cls(
            far_accepted / far_attempts if far_attempts else None,
            frr_rejected / frr_attempts if frr_attempts else None,
            far_attempts, far_accepted, frr_attempts, frr_rejected,
        )

    def to_dict(self) -> dict:
        return {"far": self.far, "frr": self.frr, "hter": self.hter, "far_attempts": self.far_attempts,
                "far_accepted": self.far_accepted, "frr_attempts": self.frr_attempts, "frr_rejected": self.frr_rejected}


def hter(far: float, frr: float) -> float:
    return (far + frr) / 2.0


# --------------------------------------------------------------------- inputs


@lru_cache(maxsize=8)
def _random_images(count: int, seed: int, size: int) -> np.ndarray:
    imgs = np.stack([preprocess(random_signature(size, size, derive_seed(seed, "random-image", i)), size)
                     for i in range(count)])
    imgs.flags.writeable = False
    return imgs


def random_images(count: int, seed: int, size: int) -> np.ndarray:
    """``count`` preprocessed coin-flip images; cached per (count, seed, size)."""
    return _random_images(int(count), int(seed), int(size))


def _prepared(samples, size: int) -> np.ndarray:
    return np.stack([preprocess(s.image, size) for s in samples])


def _impostors_for(scenario: AttackScenario, user_id: str, size: int):
    """(ids, preprocessed images) this scenario throws at ``user_id``'s model."""
    if scenario.kind == "random":
        ids = [f"random-{scenario.random_seed}-{i:05d}" for i in range(scenario.random_count)]
        return ids, random_images(scenario.random_count, scenario.random_seed, size)
    chosen = [s for s in scenario.impostors if s.user_id == user_id]
    if scenario.kind == "vanilla":
        chosen = [s for s in chosen if s.split in (None, "test")]
    if not chosen:
        raise AttackError(f"scenario {scenario.tag!r} has no impostor samples for user {user_id}")
    return [s.sample_id for s in chosen], _prepared(chosen, size)


def _size_of(model) -> int:
    return model.extractor.image_shape[0]


# --------------------------------------------------------------------- evaluation


def _log(model, scenario_tag: str, kind: str, ids, decisions) -> list[dict]:
    return [
        {"model": model.tag, "user_id": model.user_id, "scenario": scenario_tag, "attempt": kind, "index": i,
         "sample_id": sid, "accepted": d.accepted}
        for i, (sid, d) in enumerate(zip(ids, decisions))
    ]


@dataclass(frozen=True)
class CellResult:
    metrics: EvalMetrics
    decisions: tuple


def eval_genuine(model, genuine_samples) -> CellResult:
    samples = [s for s in genuine_samples if s.user_id == model.user_id and s.label == "genuine"]
    if not samples:
        raise AttackError(f"no genuine test samples for user {model.user_id}")
    decisions = verify_batch(model, _prepared(samples, _size_of(model)))
    rejected = sum(not d.accepted for d in decisions)
    log = _log(model, "genuine", "genuine", [s.sample_id for s in samples], decisions)
    return CellResult(EvalMetrics.from_counts(0, 0, rejected, len(decisions)), tuple(log))


def run_attack(model, scenario: AttackScenario) -> CellResult:
    if scenario.kind == "generative":
        check_test_partition(scenario.impostors)
    ids, images = _impostors_for(scenario, model.user_id, _size_of(model))
    decisions = verify_batch(model, images)
    accepted = sum(d.accepted for d in decisions)
    log = _log(model, scenario.tag, "impostor", ids, decisions)
    return CellResult(EvalMetrics.from_counts(accepted, len(decisions), 0, 0), tuple(log))


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Cells keyed by (user_id, scenario tag); FRR comes from the model's genuine run."""

    model_tag: str
    cells: dict
    genuine: dict
    decisions: tuple
    scenarios: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def users(self) -> list[str]:
        return sorted(self.genuine)

    def cell(self, user_id: str, scenario: str) -> EvalMetrics:
        far = self.cells[(user_id, scenario)]
        g = self.genuine[user_id]
        return EvalMetrics(far.far, g.frr, far.far_attempts, far.far_accepted, g.frr_attempts, g.frr_rejected)

    def aggregate(self, scenario: str, weighting: str = "attempts") -> EvalMetrics:
        """Scenario aggregate over users, attempt-weighted (pooled) or user-mean."""
        users = [u for u in self.users if (u, scenario) in self.cells]
        if not users:
            raise AttackError(f"scenario {scenario!r} has no cells")
        cells = [self.cell(u, scenario) for u in users]
        if weighting == "attempts":
            return EvalMetrics.from_counts(sum(c.far_accepted for c in cells), sum(c.far_attempts for c in cells),
                                           sum(c.frr_rejected for c in cells), sum(c.frr_attempts for c in cells))
        if weighting != "users":
            raise AttackError(f"weighting must be 'attempts' or 'users', got {weighting!r}")
        far = float(np.mean([c.far for c in cells]))
        frr = float(np.mean([c.frr for c in cells]))
        return EvalMetrics(far, frr, sum(c.far_attempts for c in cells), sum(c.far_accepted for c in cells),
                           sum(c.frr_attempts for c in cells), sum(c.frr_rejected for c in cells))

    @classmethod
    def from_decisions(cls, decisions, scenarios, meta: dict | None = None) -> "EvalReport":
        """Rebuild a report from its decision log; exact, since every metric is a count."""
        decisions = tuple(decisions)
        tags = {d["model"] for d in decisions}
        if len(tags) != 1:
            raise AttackError(f"a decision log must cover one model family, got {sorted(tags)}")
        users = sorted({d["user_id"] for d in decisions})
        cells = {}
        genuine = {u: recompute(decisions, "genuine", u) for u in users}
        for u in users:
            for tag in scenarios:
                m = recompute(decisions, tag, u)
                if m.far_attempts:
                    cells[(u, tag)] = EvalMetrics.from_counts(m.far_accepted, m.far_attempts, 0, 0)
        return cls(tags.pop(), cells, genuine, decisions, tuple(scenarios), dict(meta or {}))

    def records(self) -> list[dict]:
        """Report rows: one per cell, then attempt-weighted and user-mean aggregates per scenario."""
        rows = []
        for user in self.users:
            for tag in self.scenarios:
                if (user, tag) in self.cells:
                    rows.append({"type": "cell", "model": self.model_tag, "user_id": user, "scenario": tag,
                                 **self.cell(user, tag).to_dict()})
        for tag in self.scenarios:
            for weighting in ("attempts", "users"):
                rows.append({"type": "aggregate", "model": self.model_tag, "user_id": "*", "scenario": tag,
                             "weighting": weighting, **self.aggregate(tag, weighting).to_dict()})
        return rows


def _user_cells(model, scenarios, genuine_samples):
    try:
        g = eval_genuine(model, genuine_samples)
    except Exception as exc:
        raise AttackError(f"genuine evaluation failed for model {model.tag}/{model.user_id}: {exc}") from exc
    out = []
    for sc in scenarios:
        try:
            out.append(run_attack(model, sc))
        except LeakageError:
            raise
        except Exception as exc:
            raise AttackError(f"cell ({model.tag}/{model.user_id}, {sc.tag}) failed: {exc}") from exc
    return g, out


def run_campaign(models, scenarios, genuine_samples, jobs: int | None = 1, meta: dict | None = None) -> EvalReport:
    """Every model against every scenario, plus each model's genuine test set."""
    models = sorted(models, key=lambda m: m.user_id)
    scenarios = list(scenarios)
    if not models or not scenarios:
        raise AttackError("a campaign needs at least one model and one scenario")
    tags = [sc.tag for sc in scenarios]
    if len(set(tags)) != len(tags):
        raise AttackError(f"duplicate scenario tags {tags}")
    for sc in scenarios:
        if sc.kind == "generative":
            check_test_partition(sc.impostors)
    model_tags = {m.tag for m in models}
    if len(model_tags) != 1:
        raise AttackError(f"a campaign evaluates one model family, got tags {sorted(model_tags)}")
    genuine_samples = [s for s in genuine_samples if s.label == "genuine"]
    results = pmap(_user_cells, [(m, scenarios, genuine_samples) for m in models], jobs)
    cells, genuine, log = {}, {}, []
    for model, (g, attacks) in zip(models, results):
        genuine[model.user_id] = g.metrics
        log.extend(g.decisions)
        for sc, res in zip(scenarios, attacks):
            cells[(model.user_id, sc.tag)] = res.metrics
            log.extend(res.decisions)
    info = {"scenarios": [sc.describe() for sc in scenarios], **(meta or {})}
    return EvalReport(model_tags.pop(), cells, genuine, tuple(log), tuple(tags), info)


def recompute(decisions, scenario: str, user_id: str | None = None) -> EvalMetrics:
    """FAR/FRR straight from a decision log (for audits of persisted reports)."""
    rows = [d for d in decisions if user_id is None or d["user_id"] == user_id]
    imp = [d for d in rows if d["scenario"] == scenario and d["attempt"] == "impostor"]
    gen = [d for d in rows if d["attempt"] == "genuine"]
    return EvalMetrics.from_counts(sum(d["accepted"] for d in imp), len(imp),
                                   sum(not d["accepted"] for d in gen), len(gen))
