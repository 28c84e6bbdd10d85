"""Estimating KL(q(z) ‖ p(z)) three ways, plus the KL decomposition.

q(z) is the dataset-averaged posterior (1/N) Σ_n q(z|x_n). The Monte Carlo
route evaluates that mixture exactly at sampled codes; the ratio route
trains a classifier between code samples and prior samples and reads the
KL off its odds; the density route fits an explicit model to code samples
and plugs it in. All three report a standard error over their per-sample
terms and serialize to the same JSON record shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import (
    StandardPrior,
    VAR_FLOOR,
    gauss_logpdf_np,
    log_mean_exp,
)
from .errors import ContractError, NumericsError
from .models import ModelBundle, _log_not, _safe_log
from . import engine
from .nn import MLP
from .optim import Adam
from .rng import RngStream

# Rows of z scored against the whole dataset at once would need an
# (num_z, N, d) block; chunking keeps it tens of megabytes.
_CHUNK = 64


@dataclass
class EstimateReport:
    method: str              # mc | ratio | gmm | ar
    value: float
    stderr: float
    num_z: int
    inner: int               # posterior evaluations per z
    status: str = "ok"       # ok | invalid

    def to_json(self, config_hash: str = "") -> dict:
        return {"method": self.method, "value": self.value,
                "stderr": self.stderr, "num_z": self.num_z,
                "config_hash": config_hash}


def _posterior_arrays(bundle: ModelBundle, data: np.ndarray):
    q = bundle.posterior(data)
    return q.mean.data, q.logvar.data


def marginal_log_q(z, bundle: ModelBundle, data: np.ndarray):
    """log (1/N) Σ_n q(z|x_n) at each row of z.

    Exact mixture evaluation over the full dataset; scalar out for a
    single z vector, array out for a batch.
    """
    if data.shape[0] == 0:
        raise ContractError("marginal density needs a non-empty dataset")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    mean, logvar = _posterior_arrays(bundle, data)
    out = np.empty(z2.shape[0])
    for lo in range(0, z2.shape[0], _CHUNK):
        block = z2[lo:lo + _CHUNK]                      # (m, d)
        lp = gauss_logpdf_np(block[:, None, :], mean, logvar)   # (m, N)
        out[lo:lo + _CHUNK] = log_mean_exp(lp, axis=1)
    return float(out[0]) if single else out


def _sample_codes(bundle: ModelBundle, data: np.ndarray, num_z: int,
                  rng: RngStream) -> np.ndarray:
    """num_z draws z ~ q(z|x) with x resampled from the data each time."""
    idx = rng.integers(0, data.shape[0], (num_z,))
    mean, logvar = _posterior_arrays(bundle, data[idx])
    eps = rng.normal(mean.shape)
    return mean + np.exp(0.5 * logvar) * eps


def mc_marginal_kl(bundle: ModelBundle, data: np.ndarray, num_z: int,
                   rng: RngStream) -> EstimateReport:
    """Monte Carlo estimate: mean over codes of log q(z) - log p(z)."""
    if num_z < 1:
        raise ContractError("num_z must be positive")
    z = _sample_codes(bundle, data, num_z, rng)
    prior = StandardPrior(bundle.latent)
    terms = marginal_log_q(z, bundle, data) - prior.log_prob(z)
    stderr = float(terms.std(ddof=1) / np.sqrt(num_z)) if num_z > 1 else 0.0
    return EstimateReport("mc", float(terms.mean()), stderr, num_z,
                          inner=data.shape[0])


def avg_posterior_kl(bundle: ModelBundle, data: np.ndarray) -> float:
    """Closed-form E_data KL(q(z|x) ‖ p(z))."""
    mean, logvar = _posterior_arrays(bundle, data)
    var = np.exp(logvar)
    per_row = 0.5 * (mean * mean + var - 1.0 - logvar).sum(axis=1)
    return float(per_row.mean())


def marginal_kl_floor(avg_posterior_kl: float, n: int) -> float:
    """Lower bound on the marginal KL: the mutual information between a
    datum and its code cannot exceed ln N."""
    if n < 1:
        raise ContractError("dataset size must be positive")
    return avg_posterior_kl - float(np.log(n))


def surgery_decompose(bundle: ModelBundle, data: np.ndarray, num_z: int,
                      rng: RngStream) -> dict:
    """Split the average posterior KL into marginal KL plus mutual info.

    The identity avg = marginal + mi holds by construction here (mi is the
    difference); the informative outputs are the MC marginal value, its
    stderr, and the ln N floor.
    """
    avg = avg_posterior_kl(bundle, data)
    report = mc_marginal_kl(bundle, data, num_z, rng)
    return {
        "avg_kl": avg,
        "marginal_kl": report.value,
        "mutual_info": avg - report.value,
        "stderr": report.stderr,
        "floor": marginal_kl_floor(avg, data.shape[0]),
        "num_z": num_z,
    }


# ---------------------------------------------------------------------------
# Density-ratio classifier.


@dataclass
class RatioConfig:
    hidden: int = 128
    layers: int = 3
    iters: int = 3000
    lr: float = 1e-3
    batch: int = 128
    holdout: float = 0.2


def ratio_kl(samples_q: np.ndarray, samples_p: np.ndarray,
             cfg: RatioConfig, rng: RngStream) -> EstimateReport:
    """KL via a classifier's odds: mean over held-out q samples of
    log D - log(1-D), labels 1 for q and 0 for p.

    Both sides are split train/eval so the estimate never reads
    memorized training points. A non-finite training loss marks the
    report invalid instead of raising.
    """
    samples_q = np.atleast_2d(np.asarray(samples_q, dtype=np.float64))
    samples_p = np.atleast_2d(np.asarray(samples_p, dtype=np.float64))
    if samples_q.shape[0] == 0 or samples_p.shape[0] == 0:
        raise ContractError("both sample sets must be non-empty")
    d = samples_q.shape[1]

    def split(samples, stream):
        n_eval = max(1, int(round(cfg.holdout * samples.shape[0])))
        perm = stream.permutation(samples.shape[0])
        return samples[perm[n_eval:]], samples[perm[:n_eval]]

    train_q, eval_q = split(samples_q, rng.child("split_q"))
    train_p, eval_p = split(samples_p, rng.child("split_p"))

    dims = (d,) + (cfg.hidden,) * cfg.layers + (1,)
    net = MLP(dims, rng.child("net"), activation="leaky", name="ratio")
    opt = Adam(net.parameters(), cfg.lr)
    loop = rng.child("loop")
    status = "ok"
    try:
        for _ in range(cfg.iters):
            bq = train_q[loop.integers(0, train_q.shape[0], (cfg.batch,))]
            bp = train_p[loop.integers(0, train_p.shape[0], (cfg.batch,))]
            with engine.Tape() as tape:
                pq = engine.sigmoid(net(engine.Tensor(bq)))
                pp = engine.sigmoid(net(engine.Tensor(bp)))
                loss = (-engine.tmean(_safe_log(pq))
                        - engine.tmean(_log_not(pp)))
            if not np.isfinite(loss.data):
                raise NumericsError("classifier loss non-finite")
            opt.zero_grad()
            engine.backward(tape, loss)
            opt.step()
    except NumericsError:
        status = "invalid"

    if status == "ok":
        probs = _sigmoid_np(net(engine.Tensor(eval_q)).data[:, 0])
        probs = np.clip(probs, 1e-7, 1.0 - 1e-7)
        terms = np.log(probs) - np.log1p(-probs)
        value = float(terms.mean())
        stderr = (float(terms.std(ddof=1) / np.sqrt(terms.size))
                  if terms.size > 1 else 0.0)
    else:
        value, stderr = float("nan"), float("nan")
    return EstimateReport("ratio", value, stderr, eval_q.shape[0],
                          inner=1, status=status)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Explicit density models fitted to code samples.


@dataclass
class GmmModel:
    weights: np.ndarray      # (k,)
    means: np.ndarray        # (k, d)
    variances: np.ndarray    # (k, d), floored
    loglik_history: list
    reseeds: int

    def log_prob(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        comp = gauss_logpdf_np(z[:, None, :], self.means,
                               np.log(self.variances))       # (n, k)
        comp = comp + np.log(self.weights)
        hi = comp.max(axis=1, keepdims=True)
        return (np.log(np.exp(comp - hi).sum(axis=1)) + hi[:, 0])


def _farthest_point_init(x: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    """First mean random, each next at the sample farthest from all chosen.

    Random-sample init can drop every mean into one mode of a multimodal
    sample, a symmetric local optimum EM never leaves.
    """
    n = x.shape[0]
    chosen = [int(rng.integers(0, n, (1,))[0])]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(d2.argmax())
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def gmm_fit(samples: np.ndarray, k: int, iters: int,
            rng: RngStream) -> GmmModel:
    """Expectation-maximization with a variance floor.

    An emptied component is reseeded at a random sample; reseeding can dent
    the likelihood, so the count is reported alongside the history.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = x.shape
    if n < k:
        raise ContractError(f"need at least {k} samples, got {n}")
    means = _farthest_point_init(x, k, rng)
    variances = np.tile(np.maximum(x.var(axis=0), VAR_FLOOR), (k, 1))
    weights = np.full(k, 1.0 / k)
    history = []
    reseeds = 0
    for _ in range(iters):
        comp = gauss_logpdf_np(x[:, None, :], means, np.log(variances))
        comp = comp + np.log(weights)
        hi = comp.max(axis=1, keepdims=True)
        norm = np.log(np.exp(comp - hi).sum(axis=1, keepdims=True)) + hi
        history.append(float(norm.sum()))
        resp = np.exp(comp - norm)                           # (n, k)
        nk = resp.sum(axis=0)
        empty = np.flatnonzero(nk < 1e-10)
        nk = np.maximum(nk, 1e-10)
        weights = nk / nk.sum()
        means = (resp.T @ x) / nk[:, None]
        diff2 = (x[:, None, :] - means) ** 2
        variances = np.maximum(
            (resp[:, :, None] * diff2).sum(axis=0) / nk[:, None], VAR_FLOOR)
        for j in empty:
            means[j] = x[int(rng.integers(0, n, (1,))[0])]
            variances[j] = np.maximum(x.var(axis=0), VAR_FLOOR)
            weights[j] = 1.0 / n
            reseeds += 1
        weights = weights / weights.sum()
    return GmmModel(weights, means, variances, history, reseeds)


class ArGaussModel:
    """Fully factorized q(z) = Π q(z_i | z_<i) with perceptron heads.

    Coordinate 0 gets free (mean, logvar) parameters; coordinate i > 0 gets
    a one-hidden-layer net from the prefix to its Gaussian parameters.
    """

    def __init__(self, dim: int, hidden: int, rng: RngStream):
        self.dim = dim
        self.head0 = engine.parameter(np.zeros(2))
        self.nets = [
            MLP((i, hidden, 2), rng.child(f"coord{i}"), "relu", f"coord{i}")
            for i in range(1, dim)
        ]

    def parameters(self):
        out = [self.head0]
        for net in self.nets:
            out.extend(net.parameters())
        return out

    def _coord_params(self, z: np.ndarray):
        """Per-coordinate (mean, logvar) arrays, each (n, dim)."""
        n = z.shape[0]
        means = np.empty((n, self.dim))
        logvars = np.empty((n, self.dim))
        means[:, 0] = self.head0.data[0]
        logvars[:, 0] = self.head0.data[1]
        for i in range(1, self.dim):
            h = self.nets[i - 1](engine.Tensor(z[:, :i])).data
            means[:, i] = h[:, 0]
            logvars[:, i] = h[:, 1]
        return means, np.maximum(logvars, np.log(VAR_FLOOR))

    def log_prob(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        means, logvars = self._coord_params(z)
        return gauss_logpdf_np(z, means, logvars)

    def _nll(self, z_batch: np.ndarray) -> engine.Tensor:
        zt = engine.Tensor(z_batch)
        total = None
        for i in range(self.dim):
            if i == 0:
                mean = engine.narrow(self.head0, 0, 0, 1)
                logvar = engine.narrow(self.head0, 0, 1, 1)
            else:
                h = self.nets[i - 1](engine.narrow(zt, 1, 0, i))
                mean = engine.narrow(h, 1, 0, 1)
                logvar = engine.narrow(h, 1, 1, 1)
            logvar = engine.clamp_min(logvar, float(np.log(VAR_FLOOR)))
            zi = engine.narrow(zt, 1, i, 1)
            diff = zi - mean
            ll = -0.5 * (diff * diff * engine.exp(-logvar) + logvar
                         + float(np.log(2.0 * np.pi)))
            term = engine.tmean(ll)
            total = term if total is None else total + term
        return -total


@dataclass
class ArConfig:
    hidden: int = 32
    iters: int = 2000
    lr: float = 1e-3
    batch: int = 128


def ar_fit(samples: np.ndarray, cfg: ArConfig, rng: RngStream) -> ArGaussModel:
    """Maximum-likelihood training of the autoregressive factorization."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    model = ArGaussModel(x.shape[1], cfg.hidden, rng.child("init"))
    opt = Adam(model.parameters(), cfg.lr)
    loop = rng.child("loop")
    for _ in range(cfg.iters):
        batch = x[loop.integers(0, x.shape[0], (cfg.batch,))]
        with engine.Tape() as tape:
            loss = model._nll(batch)
        if not np.isfinite(loss.data):
            raise NumericsError("autoregressive fit diverged")
        opt.zero_grad()
        engine.backward(tape, loss)
        opt.step()
    return model


def density_model_kl(model, bundle: ModelBundle, data: np.ndarray,
                     num_z: int, rng: RngStream) -> EstimateReport:
    """Plug-in estimate with a fitted density t: mean of log t(z) - log p(z)."""
    z = _sample_codes(bundle, data, num_z, rng)
    prior = StandardPrior(bundle.latent)
    terms = model.log_prob(z) - prior.log_prob(z)
    method = "gmm" if isinstance(model, GmmModel) else "ar"
    stderr = float(terms.std(ddof=1) / np.sqrt(num_z)) if num_z > 1 else 0.0
    return EstimateReport(method, float(terms.mean()), stderr, num_z, inner=1)
