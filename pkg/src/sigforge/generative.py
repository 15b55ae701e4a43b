"""Per-reference VAE and CGAN forgery generators.

Each generator is trained on a single preprocessed reference image (ink
domain, 1 = ink). Outputs are returned to page polarity before they are
stored as :class:`SignatureSample` objects so that they go through the same
preprocessing as every other input.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .corpus import SignatureSample
from .imaging import to_page
from .seeding import derive_seed
from .ssim import DEFAULT_PARAMS, SsimParams, ssim_score

METHODS = ("vae", "cgan")
MAX_RESTARTS = 20


class GenerationError(RuntimeError):
    pass


class SsimBudgetError(GenerationError):
    """No checkpoint landed in the SSIM band within the restart budget."""

    def __init__(self, reference_id: str, sample_index: int, attempts: int, seen: list[float], band):
        self.reference_id = reference_id
        self.sample_index = sample_index
        self.attempts = attempts
        self.seen = seen
        lo, hi = band
        closest = min(seen, key=lambda s: min(abs(s - lo), abs(s - hi))) if seen else None
        super().__init__(
            f"reference {reference_id} sample {sample_index}: no SSIM in [{lo}, {hi}] after {attempts} attempt(s); "
            f"{len(seen)} checkpoints seen, range [{min(seen, default=float('nan')):.4f}, "
            f"{max(seen, default=float('nan')):.4f}], closest {closest}"
        )


@dataclass(frozen=True)
class VaeHyper:
    hidden: int = 256
    latent: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    # reparameterization draws averaged per step, and a global gradient-norm
    # cap that only bites during the first few explosive steps
    draws: int = 8
    clip_norm: float | None = 1000.0


@dataclass(frozen=True)
class CganHyper:
    hidden: int = 256
    noise: int = 64
    n_conditions: int = 4
    lr: float = 5e-4
    momentum: float = 0.9
    batch: int = 4
    non_saturating: bool = False


@dataclass(frozen=True, eq=False)
class VaeModel:
    vae: nn.EncoderDecoder
    image_shape: tuple[int, int]
    trace: tuple = ()

    @property
    def latent_dim(self) -> int:
        return self.vae.latent_dim


@dataclass(frozen=True, eq=False)
class CganModel:
    pair: nn.AdversarialPair
    image_shape: tuple[int, int]
    condition: int
    trace: tuple = ()

    @property
    def noise_dim(self) -> int:
        return self.pair.noise_dim

    @property
    def n_conditions(self) -> int:
        return self.pair.n_conditions


# --------------------------------------------------------------------- VAE


def build_vae(image_shape, hyper: VaeHyper, seed: int) -> nn.EncoderDecoder:
    n = image_shape[0] * image_shape[1]
    encoder = nn.init_network(
        [nn.dense(n, hyper.hidden, "relu"), nn.dense(hyper.hidden, 2 * hyper.latent)], derive_seed(seed, "encoder")
    )
    decoder = nn.init_network(
        [nn.dense(hyper.latent, hyper.hidden, "relu"), nn.dense(hyper.hidden, n, "sigmoid")], derive_seed(seed, "decoder")
    )
    return nn.EncoderDecoder(encoder, decoder)


def clip_gradient(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    """Rescale ``grad`` so its L2 norm is at most ``max_norm`` (None: unchanged)."""
    if max_norm is None:
        return grad
    norm = float(np.sqrt(np.dot(grad, grad)))
    return grad * (max_norm / norm) if norm > max_norm else grad


class VaeRun:
    """Live state of one VAE training run; ``model()`` snapshots it."""

    def __init__(self, reference: np.ndarray, hyper: VaeHyper, seed: int):
        self.reference = reference
        self.hyper = hyper
        vae = build_vae(reference.shape, hyper, seed)
        self._enc = nn.SgdState(vae.encoder, hyper.lr, hyper.momentum)
        self._dec = nn.SgdState(vae.decoder, hyper.lr, hyper.momentum)
        self._noise = np.random.default_rng(derive_seed(seed, "reparam"))
        self.epoch = 0
        self.trace: list[dict] = []

    @property
    def live(self) -> nn.EncoderDecoder:
        return nn.EncoderDecoder(self._enc.network, self._dec.network)

    def step(self) -> None:
        # several reparameterization draws of the same reference per step
        x = np.repeat(self.reference.reshape(1, -1), self.hyper.draws, axis=0)
        eps = self._noise.standard_normal((self.hyper.draws, self.hyper.latent))
        try:
            value, grad = nn.loss_and_grad(self.live, x, x, "vae_elbo", noise=eps)
        except nn.NonFiniteLossError as exc:
            raise GenerationError(f"VAE loss component {exc.component!r} not finite at epoch {self.epoch + 1}") from exc
        grad = clip_gradient(grad, self.hyper.clip_norm)
        n_enc = self._enc.network.n_params
        self._enc.step(grad[:n_enc])
        self._dec.step(grad[n_enc:])
        self.epoch += 1
        self.trace.append(value.to_dict())

    def sample(self, seed: int) -> np.ndarray:
        z = np.random.default_rng(seed).standard_normal((1, self.hyper.latent))
        return nn.output(self._dec.network, z).reshape(self.reference.shape)

    def model(self) -> VaeModel:
        vae = nn.EncoderDecoder(self._enc.snapshot(), self._dec.snapshot())
        return VaeModel(vae, self.reference.shape, tuple(self.trace))


def vae_epochs(reference, hyper: VaeHyper, seed: int):
    """Yield the live :class:`VaeRun` after every gradient step (epoch numbers from 1).

    One epoch is one ELBO step on the single reference, with the
    reparameterization noise drawn from a stream seeded by ``seed``.
    """
    run = VaeRun(np.asarray(reference, dtype=np.float64), hyper, seed)
    while True:
        run.step()
        yield run


def train_vae(reference, epochs: int, hyper: VaeHyper = VaeHyper(), seed: int = 0) -> VaeModel:
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    for run in vae_epochs(reference, hyper, seed):
        if run.epoch == epochs:
            return run.model()


def untrained_vae(image_shape, hyper: VaeHyper = VaeHyper(), seed: int = 0) -> VaeModel:
    return VaeModel(build_vae(image_shape, hyper, seed), tuple(image_shape))


def sample_vae(model: VaeModel, seed: int) -> np.ndarray:
    """Decode one standard-normal latent draw; output in [0, 1] at the reference size."""
    z = np.random.default_rng(seed).standard_normal((1, model.latent_dim))
    return nn.output(model.vae.decoder, z).reshape(model.image_shape)


# --------------------------------------------------------------------- CGAN


def condition_of(user_id: str, n_conditions: int) -> int:
    return derive_seed(0, "condition", user_id) % n_conditions


def one_hot(index: int, n: int, batch: int = 1) -> np.ndarray:
    out = np.zeros((batch, n))
    out[:, index] = 1.0
    return out


def build_cgan(image_shape, hyper: CganHyper, seed: int) -> nn.AdversarialPair:
    n = image_shape[0] * image_shape[1]
    gen = nn.init_network(
        [nn.dense(hyper.noise + hyper.n_conditions, hyper.hidden, "relu"), nn.dense(hyper.hidden, n, "sigmoid")],
        derive_seed(seed, "generator"),
    )
    disc = nn.init_network(
        [nn.dense(n + hyper.n_conditions, hyper.hidden, "relu"), nn.dense(hyper.hidden, 1, "sigmoid")],
        derive_seed(seed, "discriminator"),
    )
    return nn.AdversarialPair(gen, disc, hyper.n_conditions)


def train_cgan(reference, condition: int, epochs: int, hyper: CganHyper = CganHyper(), seed: int = 0) -> CganModel:
    """Alternate one discriminator ascent step and one generator step per epoch."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not 0 <= condition < hyper.n_conditions:
        raise ValueError(f"condition {condition} outside [0, {hyper.n_conditions})")
    ref = np.asarray(reference, dtype=np.float64)
    real = np.repeat(ref.reshape(1, -1), hyper.batch, axis=0)
    cond = one_hot(condition, hyper.n_conditions, hyper.batch)
    init = build_cgan(ref.shape, hyper, seed)
    gen = nn.SgdState(init.generator, hyper.lr, hyper.momentum)
    disc = nn.SgdState(init.discriminator, hyper.lr, hyper.momentum)
    pair = nn.AdversarialPair(gen.network, disc.network, hyper.n_conditions)
    rng = np.random.default_rng(derive_seed(seed, "cgan-noise"))
    trace = []
    for epoch in range(1, epochs + 1):
        z = np.concatenate([rng.standard_normal((hyper.batch, hyper.noise)), cond], axis=1)
        try:
            d_value, d_grad = nn.loss_and_grad(pair, z, real, "gan_term", side="d")
        except nn.NonFiniteLossError as exc:
            raise GenerationError(f"CGAN discriminator (D) loss not finite at epoch {epoch}") from exc
        # the discriminator ascends the value function
        disc.step(-d_grad)
        z = np.concatenate([rng.standard_normal((hyper.batch, hyper.noise)), cond], axis=1)
        try:
            g_value, g_grad = nn.loss_and_grad(pair, z, None, "gan_term", side="g", non_saturating=hyper.non_saturating)
        except nn.NonFiniteLossError as exc:
            raise GenerationError(f"CGAN generator (G) loss not finite at epoch {epoch}") from exc
        gen.step(g_grad)
        trace.append({"d_value": d_value.total, "g_loss": g_value.total})
    final = nn.AdversarialPair(gen.snapshot(), disc.snapshot(), hyper.n_conditions)
    return CganModel(final, ref.shape, condition, tuple(trace))


def sample_cgan(model: CganModel, condition: int, seed: int) -> np.ndarray:
    if not 0 <= condition < model.n_conditions:
        raise ValueError(f"unknown condition {condition}; model knows 0..{model.n_conditions - 1}")
    z = np.random.default_rng(seed).standard_normal((1, model.noise_dim))
    gen_in = np.concatenate([z, one_hot(condition, model.n_conditions)], axis=1)
    return nn.output(model.pair.generator, gen_in).reshape(model.image_shape)


# --------------------------------------------------------------------- jobs


@dataclass(frozen=True, eq=False)
class GenerationJob:
    """One reference image and how to derive synthetic forgeries from it.

    ``reference.image`` must already be preprocessed (ink domain).
    """

    reference: SignatureSample
    method: str = "vae"
    samples: int = 9
    epochs: int = 800
    interval: int = 5
    band: tuple[float, float] = (0.04, 0.08)
    restart_budget: int = MAX_RESTARTS
    seed: int = 0
    vae: VaeHyper = field(default_factory=VaeHyper)
    cgan: CganHyper = field(default_factory=CganHyper)
    ssim: SsimParams = DEFAULT_PARAMS

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.samples < 1:
            raise ValueError("samples requested must be >= 1")
        if self.epochs < 1 or self.interval < 1:
            raise ValueError("epochs and interval must be >= 1")
        if self.epochs % self.interval:
            raise ValueError(f"interval {self.interval} does not divide the epoch budget {self.epochs}")
        lo, hi = self.band
        if not lo < hi:
            raise ValueError(f"SSIM band low {lo} must be below high {hi}")
        if not 1 <= self.restart_budget <= MAX_RESTARTS:
            raise ValueError(f"restart budget must lie in [1, {MAX_RESTARTS}]")


@dataclass(frozen=True, eq=False)
class SyntheticSet:
    samples: tuple[SignatureSample, ...]

    @property
    def ssims(self) -> list[float]:
        return [s.ssim for s in self.samples]

    @property
    def partitions(self) -> set[str]:
        return {s.split for s in self.samples}

    def mean_ssim(self) -> float:
        return float(np.mean(self.ssims))

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @classmethod
    def merge(cls, sets) -> "SyntheticSet":
        return cls(tuple(s for part in sets for s in part.samples))

    def partition(self, split: str) -> "SyntheticSet":
        return SyntheticSet(tuple(s for s in self.samples if s.split == split))


def _synthetic(job: GenerationJob, provenance: str, k: int, output: np.ndarray, ssim: float, extra: dict) -> SignatureSample:
    ref = job.reference
    return SignatureSample(
        sample_id=f"{ref.sample_id}-{provenance}{k:02d}",
        image=to_page(np.clip(output, 0.0, 1.0)),
        user_id=ref.user_id,
        label="forged",
        provenance=provenance,
        split=ref.split,
        reference_id=ref.sample_id,
        ssim=float(ssim),
        extra=extra,
    )


def generate_epoch_guided(job: GenerationJob) -> SyntheticSet:
    """Train one model for the whole budget, then draw ``job.samples`` outputs."""
    ref_img = job.reference.image
    if job.method == "vae":
        model = train_vae(ref_img, job.epochs, job.vae, derive_seed(job.seed, "train"))
        draw = lambda s: sample_vae(model, s)  # noqa: E731
    else:
        cond = condition_of(job.reference.user_id, job.cgan.n_conditions)
        model = train_cgan(ref_img, cond, job.epochs, job.cgan, derive_seed(job.seed, "train"))
        draw = lambda s: sample_cgan(model, cond, s)  # noqa: E731
    out = []
    for k in range(job.samples):
        seed = derive_seed(job.seed, "draw", k)
        img = draw(seed)
        out.append(_synthetic(job, job.method, k, img, ssim_score(img, ref_img, job.ssim),
                              {"method": job.method, "epochs": job.epochs, "seed": seed, "restarts": 0}))
    return SyntheticSet(tuple(out))


def generate_ssim_controlled(job: GenerationJob) -> SyntheticSet:
    """Sample once every ``interval`` epochs and keep the first draw whose SSIM
    to the reference falls inside ``band``; retrain from a fresh seed when the
    budget runs out."""
    if job.method != "vae":
        raise GenerationError("SSIM-controlled generation is only defined for the VAE generator")
    lo, hi = job.band
    ref_img = job.reference.image
    out = []
    for k in range(job.samples):
        seen: list[float] = []
        kept = None
        for attempt in range(job.restart_budget):
            train_seed = derive_seed(job.seed, "ssi-train", k, attempt)
            for run in vae_epochs(ref_img, job.vae, train_seed):
                epoch = run.epoch
                if epoch % job.interval == 0:
                    draw_seed = derive_seed(job.seed, "ssi-draw", k, attempt, epoch)
                    img = run.sample(draw_seed)
                    score = ssim_score(img, ref_img, job.ssim)
                    seen.append(score)
                    if lo <= score <= hi:
                        kept = _synthetic(job, "vae_ssi", k, img, score, {
                            "method": "vae_ssi", "epochs": epoch, "restarts": attempt, "seed": draw_seed,
                            "train_seed": train_seed, "band": [lo, hi],
                        })
                        break
                if epoch >= job.epochs:
                    break
            if kept is not None:
                break
        if kept is None:
            raise SsimBudgetError(job.reference.sample_id, k, job.restart_budget, seen, job.band)
        out.append(kept)
    return SyntheticSet(tuple(out))


def run_job(job: GenerationJob, controlled: bool = False) -> SyntheticSet:
    return generate_ssim_controlled(job) if controlled else generate_epoch_guided(job)


def with_reference(job: GenerationJob, reference: SignatureSample) -> GenerationJob:
    return replace(job, reference=reference)
