"""Experiment configuration: strict JSON schema, defaults and a canonical hash."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .corpus import CorpusConfig
from .generative import CganHyper, VaeHyper
from .verifier import ExtractorSpec, HeadHyper


class ConfigError(ValueError):
    """Invalid experiment configuration; ``fields`` names every offending key path."""

    def __init__(self, messages: list[str], fields: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(messages))
        self.fields = fields


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CorpusSection(_Strict):
    users: int = Field(8, ge=1)
    genuine: int = Field(12, ge=1)
    forged: int = Field(12, ge=1)
    strokes: tuple[int, int] = (3, 5)
    jitter: float = Field(0.012, ge=0)
    perturbation: float = 0.05
    pen_radius: float = Field(0.018, gt=0, lt=0.25)
    salt_pepper: float = Field(0.002, ge=0, lt=0.5)

    @model_validator(mode="after")
    def _order(self):
        if self.perturbation <= self.jitter:
            raise ValueError("perturbation must exceed jitter")
        if not 1 <= self.strokes[0] <= self.strokes[1]:
            raise ValueError("strokes must be an ordered range with min >= 1")
        return self


class DatasetSection(_Strict):
    root: str
    name: str


class ExtractorSection(_Strict):
    kind: Literal["trained", "raw"] = "trained"
    hidden: int = Field(128, ge=1)
    conv_filters: int = Field(0, ge=0)
    conv_kernel: int = Field(5, ge=1)
    epochs: int = Field(40, ge=1)
    lr: float = Field(0.05, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(8, ge=1)


class HeadSection(_Strict):
    hidden: int = Field(256, ge=1)
    lr: float = Field(1e-4, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(1, ge=1)
    decision_rule: Literal["compare", "threshold"] = "compare"


class VaeSection(_Strict):
    hidden: int = Field(256, ge=1)
    latent: int = Field(32, ge=1)
    lr: float = Field(1e-3, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    draws: int = Field(8, ge=1)
    clip_norm: float | None = Field(1000.0, gt=0)


class CganSection(_Strict):
    hidden: int = Field(256, ge=1)
    noise: int = Field(64, ge=1)
    n_conditions: int = Field(4, ge=1)
    lr: float = Field(5e-4, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch: int = Field(4, ge=1)
    non_saturating: bool = False


class GenerationSection(_Strict):
    methods: tuple[Literal["vae", "cgan", "vae_ssi"], ...] = ("vae", "cgan", "vae_ssi")
    per_ref: int = Field(9, ge=1)
    epochs: int = Field(800, ge=1)
    band: tuple[float, float] = (0.04, 0.08)
    interval: int = Field(5, ge=1)
    restart_budget: int = Field(20, ge=1, le=20)
    refs_per_user: int | None = Field(None, ge=1)
    vae: VaeSection = VaeSection()
    cgan: CganSection = CganSection()

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.band
        if not lo < hi:
            raise ValueError(f"band low {lo} must be below band high {hi}")
        if self.epochs % self.interval:
            raise ValueError(f"interval {self.interval} does not divide epochs {self.epochs}")
        return self


class AttackSection(_Strict):
    scenarios: tuple[Literal["vanilla", "random", "vae", "cgan", "vae_ssi"], ...] = (
        "vanilla", "random", "vae", "cgan", "vae_ssi")
    random_count: int = Field(5000, ge=1)


class RetrainSection(_Strict):
    plans: tuple[Literal["random", "vae", "cgan", "vae_ssi"], ...] = ("random", "vae", "cgan", "vae_ssi")
    random_count: int = Field(64, ge=1)
    mix_ratio: float = Field(1.0, gt=0, le=1)
    warm_start: bool = False
    frr_guardrail: float = Field(0.05, ge=0)


class AnalysisSection(_Strict):
    p_method: Literal["permutation", "exhaustive", "t-approx"] = "permutation"
    n_permutations: int = Field(10000, ge=1)
    points: Literal["bands", "sets"] = "bands"
    band_width: float = Field(0.1, gt=0)
    min_band_count: int = Field(1, ge=1)


class ExperimentConfig(_Strict):
    seed: int = 0
    output_root: str = "runs"
    corpus: CorpusSection | None = None
    dataset: DatasetSection | None = None
    image_size: int = Field(64, ge=11)
    split_fraction: float = Field(2.0 / 3.0, gt=0, lt=1)
    extractor: ExtractorSection = ExtractorSection()
    head: HeadSection = HeadSection()
    generation: GenerationSection = GenerationSection()
    attack: AttackSection = AttackSection()
    retrain: RetrainSection = RetrainSection()
    analysis: AnalysisSection = AnalysisSection()

    @field_validator("seed")
    @classmethod
    def _seed(cls, v):
        if v < 0:
            raise ValueError("seed must be >= 0")
        return v

    @model_validator(mode="after")
    def _source(self):
        if self.corpus is not None and self.dataset is not None:
            raise ValueError("exactly one data source: give 'corpus' or 'dataset', not both")
        if self.corpus is None and self.dataset is None:
            object.__setattr__(self, "corpus", CorpusSection())
        gen, att = set(self.generation.methods), set(self.attack.scenarios)
        missing = sorted((att & {"vae", "cgan", "vae_ssi"}) - gen)
        if missing:
            raise ValueError(f"attack scenarios {missing} need matching generation methods")
        missing = sorted((set(self.retrain.plans) - {"random"}) - gen)
        if missing:
            raise ValueError(f"retrain plans {missing} need matching generation methods")
        return self

    # -- conversions ----------------------------------------------------

    def canonical(self) -> dict:
        """Everything that shapes results; ``output_root`` only says where they go."""
        return json.loads(self.model_dump_json(exclude={"output_root"}))

    @property
    def hash(self) -> str:
        return config_hash(self.canonical())

    def corpus_config(self) -> CorpusConfig:
        c = self.corpus
        return CorpusConfig(c.users, c.genuine, c.forged, self.image_size, tuple(c.strokes), c.jitter, c.perturbation,
                            c.pen_radius, c.salt_pepper, self.seed).validate()

    def extractor_spec(self) -> ExtractorSpec:
        return ExtractorSpec(**self.extractor.model_dump())

    def head_hyper(self) -> HeadHyper:
        return HeadHyper(**self.head.model_dump())

    def vae_hyper(self) -> VaeHyper:
        return VaeHyper(**self.generation.vae.model_dump())

    def cgan_hyper(self) -> CganHyper:
        return CganHyper(**self.generation.cgan.model_dump())


def config_hash(canonical: dict) -> str:
    text = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _errors(exc: ValidationError) -> ConfigError:
    messages, fields = [], []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        fields.append(loc)
        messages.append(f"{loc}: {err['msg']}")
    return ConfigError(messages, fields)


def parse_config(data: dict, **overrides) -> ExperimentConfig:
    data = dict(data)
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise _errors(exc) from None


def load_config(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file {path} does not exist"], ["<file>"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path} is not valid JSON: {exc}"], ["<file>"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"{path} must hold a JSON object"], ["<root>"])
    return parse_config(data, **overrides)
