"""Losses with analytic gradients, composite models, the SGD+momentum update and
a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import Network, ShapeError, backward, forward

PROB_EPS = 1e-7
LOSS_KINDS = ("bce", "mse", "vae_elbo", "gan_term")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value=None):
        self.component = component
        super().__init__(f"loss component {component!r} is not finite ({value})")


@dataclass(frozen=True)
class LossValue:
    total: float
    components: dict = field(default_factory=dict)

    @classmethod
    def of(cls, **components) -> "LossValue":
        for name, value in components.items():
            if not np.isfinite(value):
                raise NonFiniteLossError(name, value)
        comps = {k: float(v) for k, v in components.items()}
        return cls(float(sum(comps.values())), comps)

    def to_dict(self) -> dict:
        return {"total": self.total, **self.components}


@dataclass(frozen=True, eq=False)
class EncoderDecoder:
    """A VAE: the encoder emits ``[mu, log_var]``, the decoder maps ``z`` back."""

    encoder: Network
    decoder: Network

    def __post_init__(self):
        latent = self.decoder.in_shape[0]
        if self.encoder.out_shape != (2 * latent,):
            raise ShapeError(f"encoder must output 2*latent={2 * latent} values, got {self.encoder.out_shape}")
        if self.decoder.out_shape != self.encoder.in_shape:
            raise ShapeError("decoder output shape must equal encoder input shape")

    @property
    def latent_dim(self) -> int:
        return self.decoder.in_shape[0]

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.encoder.params, self.decoder.params])

    @property
    def n_params(self) -> int:
        return self.encoder.n_params + self.decoder.n_params

    def with_params(self, flat) -> "EncoderDecoder":
        n = self.encoder.n_params
        return EncoderDecoder(self.encoder.with_params(flat[:n]), self.decoder.with_params(flat[n:]))


@dataclass(frozen=True, eq=False)
class AdversarialPair:
    """Conditional generator/discriminator pair.

    The generator input is ``[noise, one_hot(condition)]``; the discriminator
    sees ``[flattened image, one_hot(condition)]`` and outputs one
    probability.
    """

    generator: Network
    discriminator: Network
    n_conditions: int

    @property
    def noise_dim(self) -> int:
        return self.generator.in_shape[0] - self.n_conditions

    def side(self, side: str) -> Network:
        return self.discriminator if side == "d" else self.generator

    def with_side(self, side: str, net: Network) -> "AdversarialPair":
        if side == "d":
            return AdversarialPair(self.generator, net, self.n_conditions)
        return AdversarialPair(net, self.discriminator, self.n_conditions)


def _clamped(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def bce_terms(p: np.ndarray, t: np.ndarray):
    """Elementwise binary cross-entropy and its derivative w.r.t. ``p``."""
    pc = _clamped(p)
    loss = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    grad = (-(t / pc) + (1.0 - t) / (1.0 - pc)) * inside
    return loss, grad


def _log_clamped(p):
    pc = _clamped(p)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    return np.log(pc), inside / pc


def _log1m_clamped(p):
    pc = _clamped(p)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    return np.log(1.0 - pc), -(inside / (1.0 - pc))


def loss_and_grad(net, x, target, loss_kind: str, **kw):
    """Loss and its gradient with respect to the trained parameters.

    ``bce`` and ``mse`` average over every output element. ``vae_elbo`` takes
    an :class:`EncoderDecoder` and requires ``noise`` (the reparameterization
    draw, shape ``(batch, latent)``); its reconstruction term sums pixelwise
    BCE per example. ``gan_term`` takes an :class:`AdversarialPair`, ``x`` is
    the generator input and ``target`` the real images; ``side="d"`` reports
    the value function the discriminator ascends, ``side="g"`` the generator
    loss (``non_saturating=True`` swaps in ``-log D(G(z))``).
    """
    if loss_kind == "bce":
        acts = forward(net, x)
        out = acts[-1]
        t = np.asarray(target, dtype=np.float64).reshape(out.shape)
        loss, dp = bce_terms(out, t)
        value = LossValue.of(bce=loss.mean())
        grad, _ = backward(net, acts, dp / out.size)
        return value, grad
    if loss_kind == "mse":
        acts = forward(net, x)
        out = acts[-1]
        t = np.asarray(target, dtype=np.float64).reshape(out.shape)
        diff = out - t
        value = LossValue.of(mse=np.mean(diff * diff))
        grad, _ = backward(net, acts, 2.0 * diff / out.size)
        return value, grad
    if loss_kind == "vae_elbo":
        return _vae_elbo(net, x, target, kw["noise"])
    if loss_kind == "gan_term":
        return _gan_term(net, x, target, kw.get("side", "d"), kw.get("non_saturating", False))
    raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def vae_encode(vae: EncoderDecoder, x):
    enc_acts = forward(vae.encoder, x)
    stats = enc_acts[-1]
    latent = vae.latent_dim
    return enc_acts, stats[:, :latent], stats[:, latent:]


def _vae_elbo(vae: EncoderDecoder, x, target, noise):
    enc_acts, mu, log_var = vae_encode(vae, x)
    batch = mu.shape[0]
    eps = np.asarray(noise, dtype=np.float64).reshape(mu.shape)
    if not np.all(np.isfinite(log_var)):
        raise NonFiniteLossError("log_var")
    std = np.exp(0.5 * log_var)
    z = mu + std * eps
    dec_acts = forward(vae.decoder, z)
    recon = dec_acts[-1]
    t = enc_acts[0] if target is None else np.asarray(target, dtype=np.float64).reshape(recon.shape)
    pix_loss, dp = bce_terms(recon, t)
    var = np.exp(log_var)
    kl = -0.5 * np.sum(1.0 + log_var - mu * mu - var, axis=1)
    value = LossValue.of(reconstruction=pix_loss.reshape(batch, -1).sum(axis=1).mean(), kl=kl.mean())

    dec_grad, gz = backward(vae.decoder, dec_acts, dp / batch, need_input_grad=True)
    gmu = gz + mu / batch
    glv = gz * eps * 0.5 * std + 0.5 * (var - 1.0) / batch
    enc_grad, _ = backward(vae.encoder, enc_acts, np.concatenate([gmu, glv], axis=1))
    return value, np.concatenate([enc_grad, dec_grad])


def _disc_input(images: np.ndarray, cond: np.ndarray) -> np.ndarray:
    return np.concatenate([images.reshape(images.shape[0], -1), cond], axis=1)


def _gan_term(pair: AdversarialPair, gen_in, real, side: str, non_saturating: bool):
    gen_in = np.asarray(gen_in, dtype=np.float64)
    if gen_in.ndim == 1:
        gen_in = gen_in[None, :]
    cond = gen_in[:, pair.noise_dim:]
    g_acts = forward(pair.generator, gen_in)
    fake = g_acts[-1]
    batch = fake.shape[0]
    if side == "d":
        real = np.asarray(real, dtype=np.float64).reshape(batch, -1)
        d_real_acts = forward(pair.discriminator, _disc_input(real, cond))
        d_fake_acts = forward(pair.discriminator, _disc_input(fake, cond))
        lr_, glr = _log_clamped(d_real_acts[-1])
        lf_, glf = _log1m_clamped(d_fake_acts[-1])
        value = LossValue.of(real_term=lr_.mean(), fake_term=lf_.mean())
        g_real, _ = backward(pair.discriminator, d_real_acts, glr / batch)
        g_fake, _ = backward(pair.discriminator, d_fake_acts, glf / batch)
        return value, g_real + g_fake
    if side == "g":
        d_acts = forward(pair.discriminator, _disc_input(fake, cond))
        d = d_acts[-1]
        if non_saturating:
            logd, gd = _log_clamped(d)
            value = LossValue.of(generator=-logd.mean())
            gd = -gd
        else:
            l1m, gd = _log1m_clamped(d)
            value = LossValue.of(generator=l1m.mean())
        _, gin = backward(pair.discriminator, d_acts, gd / batch, need_input_grad=True)
        gimg = gin[:, : fake[0].size].reshape(fake.shape)
        grad, _ = backward(pair.generator, g_acts, gimg)
        return value, grad
    raise ValueError(f"gan side must be 'd' or 'g', got {side!r}")


def sgd_momentum_step(net: Network, gradient, lr: float, momentum: float) -> Network:
    """``v' = momentum * v - lr * g``; ``p' = p + v'``. Returns a new Network."""
    gradient = np.asarray(gradient, dtype=np.float64).reshape(-1)
    if gradient.size != net.n_params:
        raise ShapeError(f"gradient has {gradient.size} entries, network has {net.n_params} parameters")
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    velocity = np.multiply(net.velocity, momentum)
    velocity -= lr * gradient
    return net._adopt(net.params + velocity, velocity)


class SgdState:
    """In-place SGD with momentum for training loops.

    Produces the same iterates as repeated :func:`sgd_momentum_step` calls but
    reuses its buffers. ``network`` is a read-only view that changes after
    every ``step``; call ``snapshot`` for an independent copy.
    """

    def __init__(self, net: Network, lr: float, momentum: float):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self._params = np.array(net.params)
        self._velocity = np.array(net.velocity)
        self._scratch = np.empty_like(self._params)
        self._template = net
        p, v = self._params.view(), self._velocity.view()
        self.network = net._adopt(p, v)

    def step(self, gradient) -> None:
        gradient = np.asarray(gradient, dtype=np.float64).reshape(-1)
        if gradient.size != self._params.size:
            raise ShapeError(f"gradient has {gradient.size} entries, network has {self._params.size} parameters")
        self._velocity *= self.momentum
        np.multiply(gradient, self.lr, out=self._scratch)
        self._velocity -= self._scratch
        self._params += self._velocity

    def snapshot(self) -> Network:
        return self._template._adopt(self._params.copy(), self._velocity.copy())


def _get_params(model, kw) -> np.ndarray:
    if isinstance(model, AdversarialPair):
        return model.side(kw.get("side", "d")).params
    return model.params


def _set_params(model, flat, kw):
    if isinstance(model, AdversarialPair):
        side = kw.get("side", "d")
        return model.with_side(side, model.side(side).with_params(flat))
    return model.with_params(flat)


def numeric_grad(model, x, target, loss_kind: str, eps: float = 1e-4, **kw) -> np.ndarray:
    base = _get_params(model, kw).copy()
    out = np.empty_like(base)
    for i in range(base.size):
        probe = base.copy()
        probe[i] = base[i] + eps
        up = loss_and_grad(_set_params(model, probe, kw), x, target, loss_kind, **kw)[0].total
        probe[i] = base[i] - eps
        down = loss_and_grad(_set_params(model, probe, kw), x, target, loss_kind, **kw)[0].total
        out[i] = (up - down) / (2.0 * eps)
    return out


def grad_check(model, x, target, loss_kind: str, eps: float = 1e-4, **kw) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, analytic = loss_and_grad(model, x, target, loss_kind, **kw)
    numeric = numeric_grad(model, x, target, loss_kind, eps, **kw)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NonFiniteLossError("gradient")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
