"""Model forensics: low-posterior samples, ELBO histograms, posterior KL
tables, and an SSIM-based sample-diversity score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import LOGVAR_FLOOR
from .errors import ContractError, ShapeError
from .estimators import marginal_log_q, _posterior_arrays
from .models import ModelBundle
from .rng import RngStream


def low_posterior_samples(bundle: ModelBundle, data: np.ndarray,
                          num_z: int, n: int, rng: RngStream) -> dict:
    """Decode the n prior draws (out of num_z) where q(z) is smallest.

    Returns latents, decoded point reconstructions, and scores, all sorted
    ascending by marginal log q. The candidate scores are included so
    selection can be re-checked externally.
    """
    if not (1 <= n <= num_z):
        raise ContractError("need 1 <= n <= num_z")
    candidates = rng.normal((num_z, bundle.latent))
    scores = marginal_log_q(candidates, bundle, data)
    order = np.argsort(scores, kind="stable")[:n]
    picked = candidates[order]
    decoded = bundle.decode_mean(picked).data
    return {"latents": picked, "decoded": decoded,
            "log_q": scores[order], "candidate_log_q": scores}


def nearest_neighbors(queries: np.ndarray, data: np.ndarray) -> np.ndarray:
    """Index of the closest data row to each query row, in l2."""
    q = np.atleast_2d(queries)
    d2 = ((q[:, None, :] - data[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


# ---------------------------------------------------------------------------
# Histograms.


@dataclass
class HistogramReport:
    tag: str
    edges: np.ndarray
    counts: np.ndarray
    kde_x: np.ndarray
    kde_y: np.ndarray
    mean: float


def _silverman_bandwidth(values: np.ndarray) -> float:
    n = values.size
    std = values.std(ddof=1) if n > 1 else 1.0
    iqr = np.subtract(*np.percentile(values, [75, 25]))
    scale = min(std, iqr / 1.34) if iqr > 0 else std
    if scale <= 0:
        scale = max(abs(values.mean()), 1.0) * 1e-3
    return 0.9 * scale * n ** (-0.2)


def gaussian_kde(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Rule-of-thumb kernel density estimate evaluated on ``grid``."""
    h = _silverman_bandwidth(values)
    z = (grid[:, None] - values[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (values.size * h * np.sqrt(2 * np.pi))


def value_histograms(populations: dict, bins: int = 30,
                     grid_points: int = 200) -> dict:
    """Histogram + KDE per population on shared edges."""
    if not populations:
        raise ContractError("no populations given")
    pooled = np.concatenate([np.asarray(v, dtype=np.float64).ravel()
                             for v in populations.values()])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    grid = np.linspace(lo, hi, grid_points)
    out = {}
    for tag, values in populations.items():
        values = np.asarray(values, dtype=np.float64).ravel()
        counts, _ = np.histogram(values, bins=edges)
        out[tag] = HistogramReport(tag, edges, counts, grid,
                                   gaussian_kde(values, grid),
                                   float(values.mean()))
    return out


def per_example_elbo(bundle: ModelBundle, data: np.ndarray,
                     rng: RngStream, mc_samples: int = 1) -> np.ndarray:
    from .models import elbo_parts

    recon, kl = elbo_parts(data, bundle, rng, mc_samples)
    return recon.data - kl.data


def elbo_histogram(bundle: ModelBundle, populations: dict,
                   rng: RngStream, bins: int = 30) -> dict:
    """Per-example ELBO histogram for each named data population."""
    values = {tag: per_example_elbo(bundle, arr, rng.child(tag))
              for tag, arr in populations.items()}
    return value_histograms(values, bins=bins)


def posterior_kl_stats(bundle: ModelBundle, data: np.ndarray,
                       sparse_below: float = 0.01) -> dict:
    """Per-dimension KL profile plus collapse/sparsity summaries.

    A unit counts as floored when its median data row has the posterior
    variance clamped at the floor. Trained encoders never drive every row
    to the clamp (rows near the boundary get lifted by shared-weight
    updates serving the rest of the batch), so the median is the reading
    that detects a collapsed unit without false negatives.
    """
    mean, logvar = _posterior_arrays(bundle, data)
    var = np.exp(logvar)
    per = 0.5 * (mean * mean + var - 1.0 - logvar)
    per_dim = per.mean(axis=0)
    floored = (logvar <= LOGVAR_FLOOR + 1e-12).mean(axis=0)
    return {
        "per_dim_kl": per_dim,
        "per_example_kl": per.sum(axis=1),
        "sparsity_fraction": float((per_dim < sparse_below).mean()),
        "floor_fraction": float((floored >= 0.5).mean()),
        "max_abs_mean": float(np.abs(mean).max()),
    }


# ---------------------------------------------------------------------------
# Structural similarity and sample diversity.

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_L = 1.0


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _window_means(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-region weighted local means (direct accumulation)."""
    w = kernel.shape[0]
    oh = img.shape[0] - w + 1
    ow = img.shape[1] - w + 1
    acc = np.zeros((oh, ow))
    for i in range(w):
        for j in range(w):
            acc += kernel[i, j] * img[i:i + oh, j:j + ow]
    return acc


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7,
         sigma: float = 1.5) -> float:
    """Single-scale structural similarity on the valid region, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError(f"need 2-D images, got shape {a.shape}")
    if window > min(a.shape):
        raise ContractError(
            f"window {window} exceeds image extent {min(a.shape)}")
    kernel = _gaussian_window(window, sigma)
    mu_a = _window_means(a, kernel)
    mu_b = _window_means(b, kernel)
    var_a = _window_means(a * a, kernel) - mu_a * mu_a
    var_b = _window_means(b * b, kernel) - mu_b * mu_b
    cov = _window_means(a * b, kernel) - mu_a * mu_b
    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ms_ssim(a: np.ndarray, b: np.ndarray, scales: int = 3,
            window: int = 7) -> float:
    """Multi-scale variant for images of at least 32px per side."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if min(a.shape) < 32:
        raise ContractError("multi-scale needs at least 32px per side")
    weights = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])[:scales]
    weights = weights / weights.sum()
    score = 1.0
    for level in range(scales):
        value = ssim(a, b, window)
        score *= max(value, 1e-8) ** weights[level]
        if level < scales - 1:
            a = _downsample2(a)
            b = _downsample2(b)
    return float(score)


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2]
                   + img[0::2, 1::2] + img[1::2, 1::2])


def diversity(batch: np.ndarray, window: int = 7) -> float:
    """Mean over distinct image pairs of 1 - ssim; 0 means all identical."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        side = int(round(np.sqrt(batch.shape[1])))
        if side * side != batch.shape[1]:
            raise ShapeError(
                f"rows of length {batch.shape[1]} are not square images")
        batch = batch.reshape(batch.shape[0], side, side)
    if batch.shape[0] < 2:
        raise ContractError("diversity needs at least two images")
    total = 0.0
    pairs = 0
    for i in range(batch.shape[0]):
        for j in range(i + 1, batch.shape[0]):
            total += 1.0 - ssim(batch[i], batch[j], window)
            pairs += 1
    return total / pairs
