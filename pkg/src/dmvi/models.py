"""Trainers: VAE, adversarial autoencoder, GAN, and the VGH hybrids.

All models share the same small fully connected parts: an encoder emitting
(mean, logvar) of a diagonal Gaussian posterior, a decoder/generator, and
up to two discriminators (one on data, one on codes). Training is plain
alternating Adam; every iteration performs one step per component, encoder
first, then generator, then data discriminator, then code discriminator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .distributions import (
    BernoulliVisible,
    DiagGaussian,
    QuantizedNormalVisible,
    bernoulli_log_prob,
    kl_diag_standard,
    quantized_log_prob,
    reparam,
)
from .engine import Tensor
from .errors import ContractError, NumericsError
from .nn import MLP
from .rng import RngStream

# Discriminator probabilities are clamped here before any log; keeps every
# adversarial loss term finite (|log| <= 16.2) no matter how saturated the
# classifier gets.
PROB_CLAMP = 1e-7

VISIBLE_KINDS = ("bernoulli", "quantized", "real")


@dataclass
class TrainConfig:
    latent: int = 16
    hidden: int = 256
    lam: float = 10.0
    lr: float = 1e-3
    lr_enc: float | None = None
    lr_gen: float | None = None
    lr_disc: float | None = None
    lr_code: float | None = None
    iters: int = 2000
    batch: int = 64
    seed: int = 0
    visible: str = "bernoulli"
    recon: str = "loglik"              # aae reconstruction: loglik | l1
    generator_loss: str = "nonsat"     # gan: nonsat | reverse_kl
    mc_samples: int = 1
    log_every: int = 10

    def validate(self):
        if self.latent < 1 or self.batch < 1 or self.iters < 1:
            raise ContractError("latent, batch, iters must be positive")
        if self.visible not in VISIBLE_KINDS:
            raise ContractError(f"unknown visible kind {self.visible!r}")
        if self.recon not in ("loglik", "l1"):
            raise ContractError(f"unknown reconstruction {self.recon!r}")
        if self.generator_loss not in ("nonsat", "reverse_kl"):
            raise ContractError(f"unknown generator loss {self.generator_loss!r}")
        if self.mc_samples < 1:
            raise ContractError("mc_samples must be positive")
        return self


class MetricLog:
    def __init__(self):
        self.rows = []

    def add(self, step: int, name: str, value: float):
        self.rows.append({"step": step, "name": name, "value": float(value)})


class ModelBundle:
    """Networks for one model plus the glue to run them.

    Components not used by a model kind are None. ``visible`` selects how
    decoder outputs are read: Bernoulli logits, quantized-Gaussian
    (mean, logvar) pairs, or raw real-valued points.
    """

    def __init__(self, encoder, decoder, data_disc, code_disc,
                 latent: int, data_dim: int, visible: str):
        self.encoder = encoder
        self.decoder = decoder
        self.data_disc = data_disc
        self.code_disc = code_disc
        self.latent = latent
        self.data_dim = data_dim
        self.visible = visible

    def posterior(self, x) -> DiagGaussian:
        h = self.encoder(engine.as_tensor(x))
        mean = engine.narrow(h, 1, 0, self.latent)
        logvar = engine.narrow(h, 1, self.latent, self.latent)
        return DiagGaussian(mean, logvar)

    def decode(self, z):
        h = self.decoder(engine.as_tensor(z))
        if self.visible == "bernoulli":
            return BernoulliVisible(h)
        if self.visible == "quantized":
            mean = engine.narrow(h, 1, 0, self.data_dim)
            logvar = engine.narrow(h, 1, self.data_dim, self.data_dim)
            return QuantizedNormalVisible(mean, logvar)
        return h

    def decode_mean(self, z) -> Tensor:
        """Point reconstruction on the data scale."""
        vis = self.decode(z)
        if self.visible == "bernoulli":
            return vis.mean()
        if self.visible == "quantized":
            # The density is evaluated at x + u, u ~ U[0,1); subtracting the
            # noise mean puts the point estimate back on the integer scale.
            return vis.mean - 0.5
        return vis

    def recon_log_prob(self, x, z, rng: RngStream) -> Tensor:
        vis = self.decode(z)
        if self.visible == "bernoulli":
            return bernoulli_log_prob(vis, x)
        if self.visible == "quantized":
            return quantized_log_prob(vis, x, rng)
        raise ContractError("real-visible models have no likelihood; use l1")

    def data_prob(self, x) -> Tensor:
        return engine.sigmoid(self.data_disc(engine.as_tensor(x)))

    def code_prob(self, z) -> Tensor:
        return engine.sigmoid(self.code_disc(engine.as_tensor(z)))

    def component_params(self) -> dict:
        out = {}
        for name, net in (("enc", self.encoder), ("gen", self.decoder),
                          ("data_disc", self.data_disc),
                          ("code_disc", self.code_disc)):
            if net is not None:
                out[name] = net.parameters()
        return out

    def named_parameters(self) -> dict:
        out = {}
        for net in (self.encoder, self.decoder, self.data_disc, self.code_disc):
            if net is not None:
                out.update(net.named_parameters())
        return out


def build_bundle(cfg: TrainConfig, data_dim: int, rng: RngStream,
                 parts=("enc", "gen")) -> ModelBundle:
    dec_out = 2 * data_dim if cfg.visible == "quantized" else data_dim
    h = cfg.hidden
    enc = dec = ddisc = cdisc = None
    if "enc" in parts:
        enc = MLP((data_dim, h, h, 2 * cfg.latent), rng.child("enc"), "relu", "enc")
    if "gen" in parts:
        dec = MLP((cfg.latent, h, h, dec_out), rng.child("gen"), "relu", "gen")
    if "data_disc" in parts:
        ddisc = MLP((data_dim, h, h, h, 1), rng.child("ddisc"), "leaky", "ddisc")
    if "code_disc" in parts:
        cdisc = MLP((cfg.latent, h, h, h, 1), rng.child("cdisc"), "leaky", "cdisc")
    return ModelBundle(enc, dec, ddisc, cdisc, cfg.latent, data_dim, cfg.visible)


# ---------------------------------------------------------------------------
# Loss pieces.


def _safe_log(p: Tensor) -> Tensor:
    return engine.log(engine.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def _log_not(p: Tensor) -> Tensor:
    return engine.log(engine.clip(1.0 - p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def ratio_penalty(p: Tensor) -> Tensor:
    """-log p + log(1-p): pushes the classifier toward calling p 'real'."""
    return _log_not(p) - _safe_log(p)


def elbo_parts(x, bundle: ModelBundle, rng: RngStream, mc_samples: int = 1):
    """Per-example (reconstruction, kl) rows; ELBO is their difference."""
    x = engine.as_tensor(x)
    q = bundle.posterior(x)
    kl = kl_diag_standard(q)
    total = None
    for _ in range(mc_samples):
        z = reparam(q, rng)
        lp = bundle.recon_log_prob(x, z, rng)
        total = lp if total is None else total + lp
    return total * (1.0 / mc_samples), kl


def elbo(x, bundle: ModelBundle, rng: RngStream, mc_samples: int = 1) -> Tensor:
    recon, kl = elbo_parts(x, bundle, rng, mc_samples)
    return engine.tmean(recon - kl)


def l1_reconstruction(x, x_hat) -> Tensor:
    """Mean over the batch of per-example l1 distance."""
    x = engine.as_tensor(x)
    n = x.data.shape[0] if x.data.ndim > 1 else 1
    return engine.l1_norm(x - x_hat) * (1.0 / n)


def vgh_losses(x, bundle: ModelBundle, variant: str, lam: float,
               rng: RngStream | None = None, noise=None) -> dict:
    """The four component losses on one batch, as one graph.

    ``noise`` is (eps, z_prior); when absent both are drawn from ``rng``
    in that order. The returned dict also carries the l1 reconstruction
    under "recon" for logging.
    """
    if variant not in ("vgh", "vghpp"):
        raise ContractError(f"unknown variant {variant!r}")
    x = engine.as_tensor(x)
    n = x.data.shape[0]
    if noise is None:
        eps = rng.normal((n, bundle.latent))
        z_prior = rng.normal((n, bundle.latent))
    else:
        eps, z_prior = noise
    q = bundle.posterior(x)
    z_hat = q.mean + engine.exp(0.5 * q.logvar) * Tensor(eps)
    x_hat = bundle.decode_mean(z_hat)
    x_gen = bundle.decode_mean(Tensor(z_prior))

    recon = l1_reconstruction(x, x_hat)
    c_hat = bundle.code_prob(z_hat)
    c_prior = bundle.code_prob(Tensor(z_prior))
    d_real = bundle.data_prob(x)
    d_hat = bundle.data_prob(x_hat)

    loss_enc = lam * recon + engine.tmean(ratio_penalty(c_hat))
    loss_gen = lam * recon + engine.tmean(ratio_penalty(d_hat))
    if variant == "vghpp":
        d_gen = bundle.data_prob(x_gen)
        loss_gen = loss_gen + engine.tmean(ratio_penalty(d_gen))
        loss_disc = (-2.0 * engine.tmean(_safe_log(d_real))
                     - engine.tmean(_log_not(d_hat))
                     - engine.tmean(_log_not(d_gen)))
    else:
        loss_disc = (-engine.tmean(_safe_log(d_real))
                     - engine.tmean(_log_not(d_hat)))
    loss_code = (-engine.tmean(_log_not(c_hat))
                 - engine.tmean(_safe_log(c_prior)))
    return {"enc": loss_enc, "gen": loss_gen, "data_disc": loss_disc,
            "code_disc": loss_code, "recon": recon}


# ---------------------------------------------------------------------------
# Trainers.


def _lr(cfg: TrainConfig, override) -> float:
    return cfg.lr if override is None else override


def _check_finite(value: Tensor, what: str, step: int):
    if not np.isfinite(value.data):
        raise NumericsError(f"non-finite {what} at step {step}")


def _minibatch(data: np.ndarray, rng: RngStream, batch: int) -> np.ndarray:
    idx = rng.integers(0, data.shape[0], (batch,))
    return data[idx]


def train_vae(data: np.ndarray, cfg: TrainConfig):
    """Adam ascent on the batch-mean ELBO."""
    cfg.validate()
    from .optim import Adam

    root = RngStream(cfg.seed)
    bundle = build_bundle(cfg, data.shape[1], root.child("init"))
    params = bundle.encoder.parameters() + bundle.decoder.parameters()
    opt = Adam(params, _lr(cfg, cfg.lr_enc))
    loop = root.child("loop")
    log = MetricLog()
    for step in range(cfg.iters):
        x = _minibatch(data, loop, cfg.batch)
        with engine.Tape() as tape:
            recon, kl = elbo_parts(x, bundle, loop, cfg.mc_samples)
            bound = engine.tmean(recon - kl)
            loss = -bound
        _check_finite(loss, "vae loss", step)
        opt.zero_grad()
        engine.backward(tape, loss)
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            log.add(step, "elbo", bound.item())
            log.add(step, "kl_avg", engine.tmean(kl).item())
            log.add(step, "recon", engine.tmean(recon).item())
    return bundle, log


def train_gan(data: np.ndarray, cfg: TrainConfig):
    """Alternating cross-entropy discriminator and chosen generator loss."""
    cfg.validate()
    from .optim import Adam

    root = RngStream(cfg.seed)
    bundle = build_bundle(cfg, data.shape[1], root.child("init"),
                          parts=("gen", "data_disc"))
    opt_g = Adam(bundle.decoder.parameters(), _lr(cfg, cfg.lr_gen))
    opt_d = Adam(bundle.data_disc.parameters(), _lr(cfg, cfg.lr_disc))
    loop = root.child("loop")
    log = MetricLog()
    for step in range(cfg.iters):
        x = _minibatch(data, loop, cfg.batch)
        z = loop.normal((cfg.batch, cfg.latent))

        fake = bundle.decode_mean(Tensor(z)).data
        with engine.Tape() as tape:
            d_loss = (-engine.tmean(_safe_log(bundle.data_prob(x)))
                      - engine.tmean(_log_not(bundle.data_prob(fake))))
        _check_finite(d_loss, "discriminator loss", step)
        opt_d.zero_grad()
        engine.backward(tape, d_loss)
        opt_d.step()

        with engine.Tape() as tape:
            p_fake = bundle.data_prob(bundle.decode_mean(Tensor(z)))
            if cfg.generator_loss == "nonsat":
                g_loss = -engine.tmean(_safe_log(p_fake))
            else:
                g_loss = engine.tmean(ratio_penalty(p_fake))
        _check_finite(g_loss, "generator loss", step)
        opt_g.zero_grad()
        engine.backward(tape, g_loss)
        opt_g.step()

        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            log.add(step, "loss_disc", d_loss.item())
            log.add(step, "loss_gen", g_loss.item())
    return bundle, log


def train_aae(data: np.ndarray, cfg: TrainConfig):
    """Reconstruction plus code-adversarial latent matching."""
    cfg.validate()
    from .optim import Adam

    root = RngStream(cfg.seed)
    bundle = build_bundle(cfg, data.shape[1], root.child("init"),
                          parts=("enc", "gen", "code_disc"))
    opt_e = Adam(bundle.encoder.parameters(), _lr(cfg, cfg.lr_enc))
    opt_g = Adam(bundle.decoder.parameters(), _lr(cfg, cfg.lr_gen))
    opt_c = Adam(bundle.code_disc.parameters(), _lr(cfg, cfg.lr_code))
    loop = root.child("loop")
    log = MetricLog()
    for step in range(cfg.iters):
        x = _minibatch(data, loop, cfg.batch)
        eps = loop.normal((cfg.batch, cfg.latent))
        z_prior = loop.normal((cfg.batch, cfg.latent))

        with engine.Tape() as tape:
            q = bundle.posterior(x)
            z_hat = q.mean + engine.exp(0.5 * q.logvar) * Tensor(eps)
            if cfg.recon == "loglik":
                recon = -engine.tmean(bundle.recon_log_prob(x, z_hat, loop))
            else:
                recon = l1_reconstruction(x, bundle.decode_mean(z_hat))
            ae_loss = recon + engine.tmean(ratio_penalty(bundle.code_prob(z_hat)))
        _check_finite(ae_loss, "autoencoder loss", step)
        opt_e.zero_grad()
        opt_g.zero_grad()
        engine.backward(tape, ae_loss)
        opt_e.step()
        opt_g.step()

        z_hat_const = z_hat.data
        with engine.Tape() as tape:
            c_loss = (-engine.tmean(_log_not(bundle.code_prob(z_hat_const)))
                      - engine.tmean(_safe_log(bundle.code_prob(z_prior))))
        _check_finite(c_loss, "code discriminator loss", step)
        opt_c.zero_grad()
        engine.backward(tape, c_loss)
        opt_c.step()

        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            log.add(step, "recon", recon.item())
            log.add(step, "loss_enc", ae_loss.item())
            log.add(step, "loss_code_disc", c_loss.item())
    return bundle, log


def train_vgh(data: np.ndarray, cfg: TrainConfig, variant: str = "vghpp"):
    """One Adam step per component per iteration, encoder first.

    Component updates within an iteration share the same minibatch and
    noise draws; each update recomputes its loss from current parameters.
    """
    cfg.validate()
    from .optim import Adam

    root = RngStream(cfg.seed)
    bundle = build_bundle(cfg, data.shape[1], root.child("init"),
                          parts=("enc", "gen", "data_disc", "code_disc"))
    groups = bundle.component_params()
    lrs = {"enc": _lr(cfg, cfg.lr_enc), "gen": _lr(cfg, cfg.lr_gen),
           "data_disc": _lr(cfg, cfg.lr_disc), "code_disc": _lr(cfg, cfg.lr_code)}
    opts = {name: Adam(ps, lrs[name]) for name, ps in groups.items()}
    all_params = [p for ps in groups.values() for p in ps]
    loop = root.child("loop")
    log = MetricLog()
    for step in range(cfg.iters):
        x = _minibatch(data, loop, cfg.batch)
        eps = loop.normal((cfg.batch, cfg.latent))
        z_prior = loop.normal((cfg.batch, cfg.latent))
        seen = {}
        for name in ("enc", "gen", "data_disc", "code_disc"):
            with engine.Tape() as tape:
                losses = vgh_losses(x, bundle, variant, cfg.lam,
                                    noise=(eps, z_prior))
            _check_finite(losses[name], f"{name} loss", step)
            engine.zero_grads(all_params)
            engine.backward(tape, losses[name])
            opts[name].step()
            seen[name] = losses[name].item()
            seen["recon"] = losses["recon"].item()
        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            log.add(step, "loss_enc", seen["enc"])
            log.add(step, "loss_gen", seen["gen"])
            log.add(step, "loss_disc", seen["data_disc"])
            log.add(step, "loss_code_disc", seen["code_disc"])
            log.add(step, "recon", seen["recon"])
    for name in groups:
        log.add(cfg.iters - 1, f"updates_{name}", float(opts[name].state.t))
    return bundle, log


TRAINERS = {
    "vae": train_vae,
    "aae": train_aae,
    "gan": train_gan,
    "vgh": lambda data, cfg: train_vgh(data, cfg, "vgh"),
    "vghpp": lambda data, cfg: train_vgh(data, cfg, "vghpp"),
}
