"""Signature samples, the procedural corpus, train/test splitting and dataset I/O."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .imaging import load_image, save_image
from .seeding import derive_seed, rng_for

LABELS = ("genuine", "forged")
PROVENANCES = ("human", "random", "vae", "cgan", "vae_ssi", "procedural")
SPLITS = ("train", "test")


class SplitError(ValueError):
    pass


class LeakageError(SplitError):
    """A synthetic sample was offered to the wrong side of the train/test split."""


@dataclass(frozen=True, eq=False)
class SignatureSample:
    sample_id: str
    image: np.ndarray
    user_id: str
    label: str
    provenance: str
    split: str | None = None
    reference_id: str | None = None
    ssim: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {self.provenance!r}")
        if self.provenance == "random" and self.label != "forged":
            raise ValueError("random signatures are always labelled forged")
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def with_split(self, split: str) -> "SignatureSample":
        if self.split is not None:
            raise SplitError(f"sample {self.sample_id} already assigned to {self.split}")
        return replace(self, split=split)

    def record(self) -> dict:
        rec = {
            "sample_id": self.sample_id,
            "user_id": self.user_id,
            "label": self.label,
            "provenance": self.provenance,
            "split": self.split,
        }
        if self.reference_id is not None:
            rec["reference_id"] = self.reference_id
        if self.ssim is not None:
            rec["ssim"] = self.ssim
        if self.extra:
            rec["extra"] = self.extra
        return rec


@dataclass(frozen=True)
class CorpusConfig:
    """Knobs for the procedural stand-in corpus.

    ``jitter`` and ``perturbation`` are standard deviations of the stroke
    control-point noise as fractions of the canvas; genuine samples use the
    first, forgeries the second.
    """

    users: int = 8
    genuine: int = 12
    forged: int = 12
    image_size: int = 64
    strokes: tuple[int, int] = (3, 5)
    jitter: float = 0.012
    perturbation: float = 0.05
    pen_radius: float = 0.018
    salt_pepper: float = 0.002
    seed: int = 0

    def validate(self) -> "CorpusConfig":
        for name in ("users", "genuine", "forged"):
            if getattr(self, name) < 1:
                raise ValueError(f"corpus field {name!r} must be >= 1")
        if self.image_size < 8:
            raise ValueError("corpus field 'image_size' must be >= 8")
        lo, hi = self.strokes
        if not 1 <= lo <= hi:
            raise ValueError("corpus field 'strokes' must be an ordered range with min >= 1")
        if self.jitter < 0:
            raise ValueError("corpus field 'jitter' must be >= 0")
        if not self.perturbation > self.jitter:
            raise ValueError("corpus field 'perturbation' must exceed 'jitter'")
        if not 0 < self.pen_radius < 0.25:
            raise ValueError("corpus field 'pen_radius' must lie in (0, 0.25)")
        if not 0 <= self.salt_pepper < 0.5:
            raise ValueError("corpus field 'salt_pepper' must lie in [0, 0.5)")
        return self


def user_id(index: int) -> str:
    return f"u{index:03d}"


def _base_strokes(rng: np.random.Generator, n_strokes: int) -> np.ndarray:
    """Cubic Bezier control points, shape (strokes, 4, 2), in unit canvas coordinates."""
    edges = np.linspace(0.12, 0.88, n_strokes + 1)
    strokes = []
    y_prev = rng.uniform(0.4, 0.6)
    for i in range(n_strokes):
        x0, x3 = edges[i], edges[i + 1] + rng.uniform(-0.03, 0.03)
        y0 = y_prev
        y3 = np.clip(rng.normal(0.5, 0.1), 0.3, 0.7)
        c1 = (x0 + rng.uniform(-0.05, 0.25), np.clip(y0 + rng.normal(0, 0.22), 0.12, 0.88))
        c2 = (x3 + rng.uniform(-0.25, 0.05), np.clip(y3 + rng.normal(0, 0.22), 0.12, 0.88))
        strokes.append([(x0, y0), c1, c2, (x3, y3)])
        y_prev = y3
    return np.asarray(strokes, dtype=np.float64)


def _bezier_points(ctrl: np.ndarray, size: int) -> np.ndarray:
    # about two samples per pixel of control-polygon length
    length = np.sum(np.hypot(*np.diff(ctrl, axis=0).T)) * size
    t = np.linspace(0.0, 1.0, max(8, int(np.ceil(2 * length))))[:, None]
    p0, p1, p2, p3 = ctrl
    return ((1 - t) ** 3) * p0 + 3 * ((1 - t) ** 2) * t * p1 + 3 * (1 - t) * t * t * p2 + (t ** 3) * p3


def render_strokes(strokes: np.ndarray, size: int, pen_radius: float) -> np.ndarray:
    """Anti-aliased ink coverage in [0, 1] for a set of Bezier strokes."""
    pts = np.concatenate([_bezier_points(s, size) for s in strokes]) * size
    c = np.arange(size) + 0.5
    # squared distance separates into row and column terms
    dy2 = (c[:, None] - pts[None, :, 1]) ** 2
    dx2 = (c[:, None] - pts[None, :, 0]) ** 2
    d2 = dy2[:, None, :] + dx2[None, :, :]
    dist = np.sqrt(d2.min(axis=2))
    return np.clip(pen_radius * size + 0.5 - dist, 0.0, 1.0)


def _page(coverage: np.ndarray, rng: np.random.Generator, salt_pepper: float) -> np.ndarray:
    page = 0.94 - 0.82 * coverage + rng.normal(0.0, 0.015, coverage.shape)
    if salt_pepper > 0:
        flips = rng.uniform(size=coverage.shape)
        page = np.where(flips < salt_pepper / 2, 0.0, page)
        page = np.where(flips > 1 - salt_pepper / 2, 1.0, page)
    # 8-bit quantization keeps PGM round trips exact
    return np.rint(np.clip(page, 0.0, 1.0) * 255.0) / 255.0


def generate_user(cfg: CorpusConfig, index: int) -> list[SignatureSample]:
    uid = user_id(index)
    base_rng = rng_for(cfg.seed, "corpus-base", index)
    n_strokes = int(base_rng.integers(cfg.strokes[0], cfg.strokes[1] + 1))
    base = _base_strokes(base_rng, n_strokes)
    out = []
    for label, count, sigma in (("genuine", cfg.genuine, cfg.jitter), ("forged", cfg.forged, cfg.perturbation)):
        for k in range(count):
            rng = rng_for(cfg.seed, "corpus-sample", index, label, k)
            ctrl = base + rng.normal(0.0, sigma, base.shape)
            coverage = render_strokes(ctrl, cfg.image_size, cfg.pen_radius)
            out.append(
                SignatureSample(
                    sample_id=f"{uid}-{label[0]}{k:03d}",
                    image=_page(coverage, rng, cfg.salt_pepper),
                    user_id=uid,
                    label=label,
                    provenance="procedural",
                )
            )
    return out


def generate_corpus(cfg: CorpusConfig, jobs: int = 1) -> list[SignatureSample]:
    """Per user: a base signature, genuine copies with small control-point
    jitter and forgeries with a larger perturbation. Users are independent
    jobs seeded from ``cfg.seed`` so the result does not depend on ``jobs``."""
    cfg.validate()
    from .parallel import pmap

    per_user = pmap(generate_user, [(cfg, i) for i in range(cfg.users)], jobs)
    return [s for user in per_user for s in user]


def split_dataset(samples, train_fraction: float, seed: int) -> list[SignatureSample]:
    """Assign train/test per (user, label) group: floor(n * fraction) to train."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    groups: dict[tuple[str, str], list[SignatureSample]] = {}
    for s in samples:
        groups.setdefault((s.user_id, s.label), []).append(s)
    assigned = {}
    for (uid, label), group in sorted(groups.items()):
        if len(group) < 2:
            raise SplitError(f"user {uid} has {len(group)} {label} sample(s); at least 2 are needed to split")
        order = rng_for(seed, "split", uid, label).permutation(len(group))
        n_train = math.floor(len(group) * train_fraction + 1e-9)
        for rank, pos in enumerate(order):
            s = group[pos]
            assigned[s.sample_id] = s.with_split("train" if rank < n_train else "test")
    return [assigned[s.sample_id] for s in samples]


# --------------------------------------------------------------------- persistence


def save_samples(samples, directory, config_hash: str | None = None, manifest: str = "samples.jsonl") -> Path:
    """Write ``images/<id>.pgm`` plus a JSONL manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"images/{s.sample_id}.pgm"
        save_image(s.image, directory / rel, comment=f"config {config_hash}" if config_hash else None)
        rec = s.record()
        rec["file"] = rel
        if config_hash:
            rec["config_hash"] = config_hash
        lines.append(json.dumps(rec, sort_keys=True))
    path = directory / manifest
    path.write_text("".join(line + "\n" for line in lines))
    return path


def load_samples(directory, manifest: str = "samples.jsonl") -> list[SignatureSample]:
    directory = Path(directory)
    out = []
    for line in (directory / manifest).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(
            SignatureSample(
                sample_id=rec["sample_id"],
                image=load_image(directory / rec["file"]),
                user_id=rec["user_id"],
                label=rec["label"],
                provenance=rec["provenance"],
                split=rec.get("split"),
                reference_id=rec.get("reference_id"),
                ssim=rec.get("ssim"),
                extra=rec.get("extra", {}),
            )
        )
    return out


def ingest_dataset(root, dataset: str) -> list[SignatureSample]:
    """Read ``<root>/<dataset>/<user>/{genuine,forgery}/*.{pgm,png}``."""
    base = Path(root) / dataset
    if not base.is_dir():
        raise FileNotFoundError(f"dataset directory {base} does not exist")
    out = []
    for user_dir in sorted(p for p in base.iterdir() if p.is_dir()):
        for sub, label in (("genuine", "genuine"), ("forgery", "forged")):
            folder = user_dir / sub
            if not folder.is_dir():
                continue
            files = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".pgm", ".png"))
            for k, f in enumerate(files):
                out.append(
                    SignatureSample(
                        sample_id=f"{user_dir.name}-{label[0]}{k:03d}",
                        image=load_image(f),
                        user_id=user_dir.name,
                        label=label,
                        provenance="human",
                        extra={"source": str(f.relative_to(base))},
                    )
                )
    if not out:
        raise ValueError(f"no signature images found under {base}")
    return out


def corpus_config_dict(cfg: CorpusConfig) -> dict:
    d = asdict(cfg)
    d["strokes"] = list(cfg.strokes)
    return d


def sample_seed(master: int, sample: SignatureSample, *parts) -> int:
    return derive_seed(master, sample.sample_id, *parts)
