"""Shared builders for tests."""
import numpy as np
from dataclasses import replace

from delta_tta import netcore
from delta_tta.netcore import ModelSpec


def random_net(rng, dim=None, hidden=None, classes=None, seed=None):
    """Untrained net with perturbed affine params and plausible source statistics."""
    dim = dim or int(rng.integers(2, 9))
    hidden = hidden or tuple(int(h) for h in rng.integers(2, 17, size=int(rng.integers(1, 3))))
    classes = classes or int(rng.integers(2, 7))
    model = netcore.init_model(ModelSpec(dim, hidden, classes, seed=int(rng.integers(1 << 31)) if seed is None else seed))
    norms = [replace(s, gamma=rng.uniform(0.5, 1.5, s.channels), beta=rng.normal(0, 0.2, s.channels),
                     mu_src=rng.normal(0, 0.3, s.channels), sigma_src=rng.uniform(0.3, 1.0, s.channels))
             for s in model.norms]
    return model.with_norms(norms)


def ema_primed(model, rng, scale=1.0):
    """Seed the test-time averages away from any batch so TBR's r, d are non-trivial."""
    norms = [replace(s, mu_ema=rng.normal(0, 0.3, s.channels), sigma_ema=rng.uniform(0.3, 1.2, s.channels))
             for s in model.norms]
    return model.with_norms(norms)
