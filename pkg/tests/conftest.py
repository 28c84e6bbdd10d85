"""Shared fixtures: trained models are expensive, so they are session-scoped
and every consumer treats them as read-only."""

import time
from types import SimpleNamespace

import pytest

from dmvi.datasets import dataset_generate
from dmvi.models import TrainConfig, train_aae, train_vae


@pytest.fixture(scope="session")
def sprites256():
    return dataset_generate("sprites", 256, 0)


@pytest.fixture(scope="session")
def sprites1024():
    return dataset_generate("sprites", 1024, 0)


def _timed(trainer, data, cfg, **kw):
    t0 = time.perf_counter()
    bundle, log = trainer(data, cfg, **kw)
    return SimpleNamespace(bundle=bundle, log=log, data=data, cfg=cfg,
                           elapsed=time.perf_counter() - t0)


@pytest.fixture(scope="session")
def vae_small(sprites256):
    """Quick Bernoulli VAE for estimator and diagnostic unit tests."""
    cfg = TrainConfig(latent=8, hidden=64, iters=300, batch=64, seed=0,
                      log_every=50)
    return _timed(train_vae, sprites256, cfg)


@pytest.fixture(scope="session")
def toy_vae(sprites1024):
    """The reference toy model: 16 latents on 1024 sprites."""
    cfg = TrainConfig(latent=16, hidden=256, iters=2000, batch=64, seed=0,
                      log_every=100)
    return _timed(train_vae, sprites1024, cfg)


@pytest.fixture(scope="session")
def aae_small(sprites256):
    """Matched-architecture adversarial autoencoder for contrast tests."""
    cfg = TrainConfig(latent=8, hidden=64, iters=300, batch=64, seed=0,
                      log_every=50)
    return _timed(train_aae, sprites256, cfg)
