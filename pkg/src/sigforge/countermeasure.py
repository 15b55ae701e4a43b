"""Synthetic-data-augmented retraining of verifier heads and before/after comparison."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .attack import AttackError, EvalReport
from .corpus import LeakageError, SignatureSample
from .imaging import random_signature
from .seeding import derive_seed, rng_for
from .verifier import HeadHyper, VerifierModel, fit_head, head_targets, init_head, preprocess_samples

ASSIST_TAGS = {
    "random": "random_assisted",
    "vae": "vae_assisted",
    "cgan": "cgan_assisted",
    "vae_ssi": "vae_ssi_assisted",
}
DEFAULT_FRR_GUARDRAIL = 0.05


class RetrainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RetrainPlan:
    """How to harden one family of verifiers.

    ``assist`` is ``random`` (fresh coin-flip images, ``random_count`` per
    user drawn from ``random_seed``) or a generator tag whose
    ``synthetic`` samples must all come from the train partition.
    ``mix_ratio`` is the fraction of each user's available augmentation used.
    """

    assist: str
    synthetic: tuple[SignatureSample, ...] = ()
    random_count: int = 64
    random_seed: int = 1
    mix_ratio: float = 1.0
    hyper: HeadHyper = field(default_factory=HeadHyper)
    seed: int = 0
    warm_start: bool = False

    def __post_init__(self):
        if self.assist not in ASSIST_TAGS:
            raise RetrainError(f"assist must be one of {sorted(ASSIST_TAGS)}, got {self.assist!r}")
        if not 0 < self.mix_ratio <= 1:
            raise RetrainError("mix_ratio must lie in (0, 1]")
        object.__setattr__(self, "synthetic", tuple(self.synthetic))
        if self.assist == "random":
            if self.random_count < 1:
                raise RetrainError("random assistance needs random_count >= 1 (zero augmentation is not a countermeasure)")
        else:
            if not self.synthetic:
                raise RetrainError(f"{self.assist} assistance needs a non-empty train-partition synthetic set")
            check_train_partition(self.synthetic)

    @property
    def tag(self) -> str:
        return ASSIST_TAGS[self.assist]


def check_train_partition(samples) -> None:
    for s in samples:
        if s.split != "train":
            raise LeakageError(
                f"synthetic sample {s.sample_id} (reference {s.reference_id}) belongs to the {s.split!r} partition; "
                "only train-partition synthetic samples may be used for retraining"
            )


def _synthetic_augmentation(plan: RetrainPlan, user_id: str) -> list[SignatureSample]:
    check_train_partition(plan.synthetic)
    pool = [s for s in plan.synthetic if s.user_id == user_id]
    for s in pool:
        if s.label != "forged":
            raise RetrainError(f"augmentation sample {s.sample_id} is labelled {s.label!r}; impostors only")
    return pool


def _random_augmentation(plan: RetrainPlan, user_id: str, size: int) -> list[SignatureSample]:
    return [
        SignatureSample(
            sample_id=f"{user_id}-assist-random{k:04d}",
            image=random_signature(size, size, derive_seed(plan.random_seed, "retrain-random", user_id, k)),
            user_id=user_id,
            label="forged",
            provenance="random",
            split="train",
        )
        for k in range(plan.random_count)
    ]


def build_retrain_set(plan: RetrainPlan, user_train_samples, image_size: int) -> list[SignatureSample]:
    """The user's own train samples plus the chosen augmentation, all augmentation labelled forged.

    Images stay in page polarity; callers preprocess before training.
    """
    base = list(user_train_samples)
    users = {s.user_id for s in base}
    if len(users) != 1:
        raise RetrainError(f"retraining works on one user at a time, got {sorted(users)}")
    user = users.pop()
    if any(s.split not in (None, "train") for s in base):
        raise LeakageError(f"user {user}: base retraining samples must come from the train split")
    pool = _random_augmentation(plan, user, image_size) if plan.assist == "random" else _synthetic_augmentation(plan, user)
    n = int(np.floor(len(pool) * plan.mix_ratio + 1e-9))
    if n < 1:
        raise RetrainError(f"user {user}: no augmentation samples available for {plan.assist!r} assistance")
    if n < len(pool):
        keep = np.sort(rng_for(plan.seed, "mix", user).permutation(len(pool))[:n])
        pool = [pool[i] for i in keep]
    extra = [replace(s, label="forged") if s.label != "forged" else s for s in pool]
    return base + extra


def retrain_verifier(base_model: VerifierModel, plan: RetrainPlan, user_train_samples) -> VerifierModel:
    """Retrain ``base_model``'s head on the augmented set; the extractor is shared and untouched.

    The head starts from a fresh seeded initialization unless
    ``plan.warm_start`` is set.
    """
    size = base_model.extractor.image_shape[0]
    samples = build_retrain_set(plan, user_train_samples, size)
    if {s.user_id for s in samples} != {base_model.user_id}:
        raise RetrainError(f"train samples do not belong to user {base_model.user_id}")
    prepared = preprocess_samples(samples, size)
    feats = base_model.extractor.features(np.stack([s.image for s in prepared]))
    seed = derive_seed(plan.seed, plan.tag, base_model.user_id)
    if plan.warm_start:
        head = nn.Network(base_model.head.layers, base_model.head.params, None, base_model.head.seed)
    else:
        head = init_head(base_model.extractor, plan.hyper.hidden, derive_seed(seed, "head-init"))
    head, trace = fit_head(head, feats, head_targets([s.label for s in prepared]), plan.hyper, seed)
    return VerifierModel(base_model.user_id, base_model.extractor, head, plan.hyper.decision_rule, seed, plan.tag, trace)


# --------------------------------------------------------------------- comparison


@dataclass(frozen=True)
class ComparisonReport:
    before_tag: str
    after_tag: str
    cells: tuple
    aggregates: tuple
    guardrail: float
    flagged: tuple

    def records(self) -> list[dict]:
        return [{"type": "cell", **c} for c in self.cells] + [{"type": "aggregate", **a} for a in self.aggregates]


def _delta(a, b):
    return None if a is None or b is None else b - a


def _pair(before, after, extra: dict) -> dict:
    return {
        **extra,
        "far_before": before.far, "far_after": after.far, "far_delta": _delta(before.far, after.far),
        "frr_before": before.frr, "frr_after": after.frr, "frr_delta": _delta(before.frr, after.frr),
    }


def compare(before: EvalReport, after: EvalReport, guardrail: float = DEFAULT_FRR_GUARDRAIL) -> ComparisonReport:
    """Per-cell and aggregate deltas (after - before); flags FRR rises above ``guardrail``."""
    kb, ka = set(before.cells), set(after.cells)
    if kb != ka:
        diff = sorted(kb ^ ka)
        raise AttackError(f"reports cover different cells; symmetric difference: {diff}")
    cells, flagged = [], []
    for user, tag in sorted(kb):
        row = _pair(before.cell(user, tag), after.cell(user, tag), {"user_id": user, "scenario": tag})
        row["frr_flag"] = row["frr_delta"] is not None and row["frr_delta"] > guardrail
        if row["frr_flag"]:
            flagged.append((user, tag))
        cells.append(row)
    aggs = []
    for tag in before.scenarios:
        for weighting in ("attempts", "users"):
            row = _pair(before.aggregate(tag, weighting), after.aggregate(tag, weighting),
                        {"user_id": "*", "scenario": tag, "weighting": weighting})
            row["frr_flag"] = row["frr_delta"] is not None and row["frr_delta"] > guardrail
            aggs.append(row)
    return ComparisonReport(before.model_tag, after.model_tag, tuple(cells), tuple(aggs), guardrail, tuple(flagged))
