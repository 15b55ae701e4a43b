"""Writer-dependent verifiers: a shared frozen feature extractor and a per-user
two-node head (genuine score, impostor score)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .corpus import SignatureSample
from .imaging import preprocess
from .seeding import derive_seed

DECISION_RULES = ("compare", "threshold")


class VerifierError(ValueError):
    pass


@dataclass(frozen=True)
class Decision:
    accepted: bool
    genuine_score: float
    impostor_score: float


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    kind: str
    image_shape: tuple[int, int]
    network: nn.Network | None = None
    provenance: dict = field(default_factory=dict)
    frozen: bool = True

    @property
    def feature_dim(self) -> int:
        if self.network is None:
            return self.image_shape[0] * self.image_shape[1]
        return int(np.prod(self.network.out_shape))

    def features(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.shape[1:] != self.image_shape:
            raise VerifierError(
                f"image shape {images.shape[1:]} does not match the verifier's {self.image_shape}; preprocess first"
            )
        flat = images.reshape(images.shape[0], -1)
        if self.network is None:
            return flat
        x = flat if self.network.layers[0].kind == "dense" else images[:, None, :, :]
        return nn.output(self.network, x).reshape(images.shape[0], -1)


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str = "trained"
    hidden: int = 128
    conv_filters: int = 0
    conv_kernel: int = 5
    epochs: int = 40
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 8


@dataclass(frozen=True)
class HeadHyper:
    hidden: int = 256
    lr: float = 1e-4
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 1
    decision_rule: str = "compare"


@dataclass(frozen=True, eq=False)
class VerifierModel:
    user_id: str
    extractor: FeatureExtractor
    head: nn.Network
    decision_rule: str = "compare"
    seed: int = 0
    tag: str = "vanilla"
    trace: tuple = ()

    def scores(self, images) -> np.ndarray:
        return nn.output(self.head, self.extractor.features(images))


def preprocess_samples(samples, size: int) -> list[SignatureSample]:
    """Same samples with page images replaced by their preprocessed ink masks."""
    return [replace(s, image=preprocess(s.image, size)) for s in samples]


def raw_extractor(image_size: int) -> FeatureExtractor:
    return FeatureExtractor("raw", (image_size, image_size), None, {"kind": "raw"})


def _extractor_layers(spec: ExtractorSpec, size: int, n_users: int):
    layers = []
    if spec.conv_filters:
        conv = nn.conv2d((1, size, size), spec.conv_filters, spec.conv_kernel, "relu")
        layers.append(conv)
        layers.append(nn.dense(conv.out_shape, spec.hidden, "relu"))
    else:
        layers.append(nn.dense(size * size, spec.hidden, "relu"))
    layers.append(nn.dense(spec.hidden, n_users, "sigmoid"))
    return layers


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_extractor(train_samples, image_size: int, spec: ExtractorSpec = ExtractorSpec(), seed: int = 0) -> FeatureExtractor:
    """Fit a user-identity classifier on training genuine images, then drop its
    output layer and freeze the rest."""
    if spec.kind == "raw":
        return raw_extractor(image_size)
    genuine = [s for s in train_samples if s.label == "genuine"]
    users = sorted({s.user_id for s in genuine})
    if len(users) < 2:
        raise VerifierError(f"extractor training needs at least 2 users, got {len(users)}")
    index = {u: i for i, u in enumerate(users)}
    images = np.stack([s.image for s in genuine])
    if images.shape[1:] != (image_size, image_size):
        raise VerifierError(f"training images are {images.shape[1:]}, expected {image_size}x{image_size}")
    targets = np.zeros((len(genuine), len(users)))
    targets[np.arange(len(genuine)), [index[s.user_id] for s in genuine]] = 1.0
    x = images[:, None] if spec.conv_filters else images.reshape(len(genuine), -1)

    net = nn.init_network(_extractor_layers(spec, image_size, len(users)), derive_seed(seed, "extractor-init"))
    rng = np.random.default_rng(derive_seed(seed, "extractor-batches"))
    for _ in range(spec.epochs):
        for idx in _batches(len(genuine), spec.batch_size, rng):
            _, grad = nn.loss_and_grad(net, x[idx], targets[idx], "bce")
            net = nn.sgd_momentum_step(net, grad, spec.lr, spec.momentum)
    trunk = nn.Network(net.layers[:-1], net.params[: net.n_params - net.layers[-1].param_count], None, net.seed)
    provenance = {"kind": "trained", "users": users, "seed": seed, "n_images": len(genuine), **spec.__dict__}
    return FeatureExtractor("trained", (image_size, image_size), trunk, provenance, frozen=True)


def _head_layers(feature_dim: int, hidden: int):
    return [nn.dense(feature_dim, hidden, "relu"), nn.dense(hidden, 2, "sigmoid")]


def init_head(extractor: FeatureExtractor, hidden: int, seed: int) -> nn.Network:
    return nn.init_network(_head_layers(extractor.feature_dim, hidden), seed)


def head_targets(labels) -> np.ndarray:
    return np.array([[1.0, 0.0] if lab == "genuine" else [0.0, 1.0] for lab in labels])


def fit_head(head: nn.Network, feats: np.ndarray, targets: np.ndarray, hyper: HeadHyper, seed: int):
    rng = np.random.default_rng(derive_seed(seed, "head-batches"))
    trace = [nn.loss_and_grad(head, feats, targets, "bce")[0].total]
    for _ in range(hyper.epochs):
        for idx in _batches(len(feats), hyper.batch_size, rng):
            _, grad = nn.loss_and_grad(head, feats[idx], targets[idx], "bce")
            head = nn.sgd_momentum_step(head, grad, hyper.lr, hyper.momentum)
        trace.append(nn.loss_and_grad(head, feats, targets, "bce")[0].total)
    return head, tuple(trace)


def train_verifier(user_samples, extractor: FeatureExtractor, hyper: HeadHyper = HeadHyper(), seed: int = 0, tag: str = "vanilla") -> VerifierModel:
    """Train one user's head with per-node BCE on targets (1,0) genuine / (0,1) forged.

    ``user_samples`` must already be preprocessed to the extractor's size.
    """
    samples = list(user_samples)
    if hyper.decision_rule not in DECISION_RULES:
        raise VerifierError(f"decision rule must be one of {DECISION_RULES}")
    if not extractor.frozen:
        raise VerifierError("the feature extractor must be frozen before head training")
    users = {s.user_id for s in samples}
    if len(users) != 1:
        raise VerifierError(f"a writer-dependent head trains on one user, got {sorted(users)}")
    labels = [s.label for s in samples]
    if len(set(labels)) < 2:
        raise VerifierError("head training needs both genuine and forged samples")
    feats = extractor.features(np.stack([s.image for s in samples]))
    head = init_head(extractor, hyper.hidden, derive_seed(seed, "head-init"))
    head, trace = fit_head(head, feats, head_targets(labels), hyper, seed)
    return VerifierModel(users.pop(), extractor, head, hyper.decision_rule, seed, tag, trace)


def decide(genuine: float, impostor: float, rule: str = "compare") -> Decision:
    if rule == "threshold":
        return Decision(bool(genuine > 0.5), float(genuine), float(impostor))
    return Decision(bool(genuine > impostor), float(genuine), float(impostor))


def verify_batch(model: VerifierModel, images) -> list[Decision]:
    scores = model.scores(images)
    return [decide(g, i, model.decision_rule) for g, i in scores]


def verify(model: VerifierModel, image) -> Decision:
    """Accept/reject one preprocessed image."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.extractor.image_shape:
        raise VerifierError(
            f"image shape {image.shape} does not match the verifier's {model.extractor.image_shape}; preprocess first"
        )
    return verify_batch(model, image[None])[0]


# --------------------------------------------------------------------- persistence


def save_extractor(extractor: FeatureExtractor, directory, config_hash: str | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"kind": extractor.kind, "image_shape": list(extractor.image_shape), "provenance": extractor.provenance,
            "config_hash": config_hash}
    if extractor.network is None:
        (directory / "extractor.json").write_text(json.dumps({"version": nn.FORMAT_VERSION, "metadata": meta,
                                                              "layers": [], "n_params": 0}, indent=1, sort_keys=True) + "\n")
    else:
        nn.save_network(extractor.network, directory / "extractor", **meta)


def load_extractor(directory) -> FeatureExtractor:
    directory = Path(directory)
    manifest = json.loads((directory / "extractor.json").read_text())
    meta = manifest["metadata"]
    shape = tuple(meta["image_shape"])
    if meta["kind"] == "raw":
        return FeatureExtractor("raw", shape, None, meta.get("provenance", {}))
    net, meta = nn.load_network(directory / "extractor")
    return FeatureExtractor("trained", shape, net, meta.get("provenance", {}))


def save_verifier(model: VerifierModel, directory, config_hash: str | None = None) -> None:
    nn.save_network(
        model.head,
        Path(directory) / f"head-{model.user_id}",
        user_id=model.user_id,
        decision_rule=model.decision_rule,
        seed=model.seed,
        tag=model.tag,
        trace=list(model.trace),
        config_hash=config_hash,
    )


def load_verifiers(directory, extractor: FeatureExtractor | None = None) -> list[VerifierModel]:
    """Heads in ``directory``; the extractor is read from there too unless given."""
    directory = Path(directory)
    extractor = extractor if extractor is not None else load_extractor(directory)
    models = []
    for manifest in sorted(directory.glob("head-*.json")):
        head, meta = nn.load_network(manifest)
        models.append(
            VerifierModel(meta["user_id"], extractor, head, meta.get("decision_rule", "compare"), meta.get("seed", 0),
                          meta.get("tag", "vanilla"), tuple(meta.get("trace", ())))
        )
    return models
