"""Central-difference verification of the reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from . import engine
from .rng import RngStream

# Coordinates probed per parameter. Full sweeps on 256-wide layers would
# dominate test time without adding much coverage.
_COORDS_PER_PARAM = 6


def grad_check(builder, probes: int = 20, eps: float = 1e-5, seed: int = 0) -> float:
    """Max over probes of |ad − fd| / max(1e−8, |fd|).

    ``builder(rng)`` returns ``(params, loss_fn)`` where ``loss_fn()``
    evaluates a scalar Tensor from the current parameter values. A NaN in
    either gradient makes the result NaN. Coordinates where both gradients
    are below 1e−6 are skipped: at that scale the central difference is
    roundoff, not signal.
    """
    worst = 0.0
    root = RngStream(seed)
    for i in range(probes):
        rng = root.child(f"probe{i}")
        params, loss_fn = builder(rng)
        with engine.Tape() as tape:
            loss = loss_fn()
        engine.zero_grads(params)
        engine.backward(tape, loss)
        for p in params:
            flat = p.data.reshape(-1)
            gflat = (np.zeros_like(flat) if p.grad is None
                     else p.grad.reshape(-1))
            n = flat.size
            if n <= _COORDS_PER_PARAM:
                coords = range(n)
            else:
                coords = rng.integers(0, n, (_COORDS_PER_PARAM,))
            for j in coords:
                j = int(j)
                orig = flat[j]
                flat[j] = orig + eps
                hi = loss_fn().item()
                flat[j] = orig - eps
                lo = loss_fn().item()
                flat[j] = orig
                fd = (hi - lo) / (2.0 * eps)
                ad = gflat[j]
                if not (np.isfinite(fd) and np.isfinite(ad)):
                    return float("nan")
                if abs(fd) < 1e-6 and abs(ad) < 1e-6:
                    continue
                err = abs(ad - fd) / max(1e-8, abs(fd))
                worst = max(worst, err)
    return worst
