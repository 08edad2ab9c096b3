"""Per-channel normalization regimes used at test time.

Four modes share one layer state:

* ``SOURCE_EMA`` normalizes with the statistics accumulated during training.
* ``BATCH_STAT`` normalizes with the statistics of the current mini-batch.
* ``TEST_EMA`` normalizes with test-time moving averages, updated after use.
* ``TBR`` normalizes with the batch statistics, then rectifies the result with
  the detached factors ``r = sigma_batch / sigma_ema`` and
  ``d = (mu_batch - mu_ema) / sigma_ema``.

Forward values of ``TBR`` and ``TEST_EMA`` coincide; only their gradients
differ. Every function returns fresh arrays and never writes into its inputs.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, StateError

DEFAULT_EPS = 1e-5
DEFAULT_ALPHA = 0.95


class NormMode(str, enum.Enum):
    SOURCE_EMA = "source-ema"
    BATCH_STAT = "batch-stat"
    TEST_EMA = "test-ema"
    TBR = "tbr"


class InitStrategy(str, enum.Enum):
    FIRST = "first"
    INHERIT = "inherit"


#: modes whose forward pass reads the test-time moving averages
EMA_MODES = (NormMode.TEST_EMA, NormMode.TBR)
#: modes whose backward pass is a legitimate adaptation path
GRADIENT_MODES = (NormMode.BATCH_STAT, NormMode.TBR)


@dataclass(frozen=True)
class NormLayerState:
    gamma: np.ndarray
    beta: np.ndarray
    mu_src: np.ndarray
    sigma_src: np.ndarray
    mu_ema: np.ndarray | None = None
    sigma_ema: np.ndarray | None = None
    alpha: float = DEFAULT_ALPHA
    eps: float = DEFAULT_EPS

    @classmethod
    def fresh(cls, channels: int, eps: float = DEFAULT_EPS, alpha: float = DEFAULT_ALPHA):
        """Identity affine map and unit source statistics."""
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            mu_src=np.zeros(channels),
            sigma_src=np.full(channels, np.sqrt(1.0 + eps)),
            alpha=alpha,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def initialized(self) -> bool:
        return self.mu_ema is not None and self.sigma_ema is not None

    def reset_test_stats(self) -> "NormLayerState":
        return replace(self, mu_ema=None, sigma_ema=None)


@dataclass(frozen=True)
class NormCache:
    mode: NormMode
    v: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    v_hat: np.ndarray  # (v - mu) / sigma with whichever statistics the mode uses
    v_star: np.ndarray  # pre-affine output
    gamma: np.ndarray
    r: np.ndarray | None = None
    d: np.ndarray | None = None


def batch_stats(v, eps=DEFAULT_EPS):
    """Column mean and ``sqrt(biased variance + eps)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 1:
        raise ContractError(f"batch_stats expects a non-empty B x C matrix, got shape {v.shape}")
    mu = v.mean(axis=0)
    var = np.mean((v - mu) ** 2, axis=0)
    return mu, np.sqrt(var + eps)


def ema_update(state: NormLayerState, mu_batch, sigma_batch) -> NormLayerState:
    if not state.initialized:
        raise StateError("ema_update on uninitialized test-time statistics")
    a = state.alpha
    mu = a * state.mu_ema + (1.0 - a) * np.asarray(mu_batch, dtype=np.float64)
    sigma = a * state.sigma_ema + (1.0 - a) * np.asarray(sigma_batch, dtype=np.float64)
    return replace(state, mu_ema=mu, sigma_ema=sigma)


def init_stats(state: NormLayerState, strategy=InitStrategy.FIRST, first_batch_stats=None) -> NormLayerState:
    """Seed the test-time moving averages.

    ``FIRST`` copies ``first_batch_stats`` (a ``(mu, sigma)`` pair from
    :func:`batch_stats`); ``INHERIT`` copies the source statistics.
    """
    if state.initialized:
        raise StateError("test-time statistics are already initialized")
    strategy = InitStrategy(strategy)
    if strategy is InitStrategy.INHERIT:
        return replace(state, mu_ema=state.mu_src.copy(), sigma_ema=state.sigma_src.copy())
    if first_batch_stats is None:
        raise StateError("FIRST initialization needs the first batch's statistics")
    mu, sigma = first_batch_stats
    return replace(state, mu_ema=np.array(mu, dtype=np.float64), sigma_ema=np.array(sigma, dtype=np.float64))


def normalize_forward(v, state: NormLayerState, mode, *, update_stats=True, rd=None):
    """Normalize ``v`` (B x C), scale and shift, and advance the moving averages.

    ``update_stats=False`` leaves the moving averages untouched (used by the
    slow-update pass of the small-batch schedule and by gradient oracles).
    ``rd`` pins TBR's ``(r, d)`` to given values instead of computing them;
    this is how a finite-difference oracle honours the stop-gradient.

    Returns ``(v_out, cache, new_state)``.
    """
    mode = NormMode(mode)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != state.channels:
        raise ContractError(f"expected B x {state.channels} input, got shape {v.shape}")
    if mode in EMA_MODES and not state.initialized:
        raise StateError(f"{mode.value} normalization needs initialized test-time statistics")

    r = d = None
    new_state = state
    if mode is NormMode.SOURCE_EMA:
        mu, sigma = state.mu_src, state.sigma_src
        v_hat = (v - mu) / sigma
        v_star = v_hat
    elif mode is NormMode.TEST_EMA:
        mu, sigma = state.mu_ema, state.sigma_ema
        v_hat = (v - mu) / sigma
        v_star = v_hat
        if update_stats:
            new_state = ema_update(state, *batch_stats(v, state.eps))
    else:
        mu, sigma = batch_stats(v, state.eps)
        v_hat = (v - mu) / sigma
        if mode is NormMode.BATCH_STAT:
            v_star = v_hat
        else:
            if rd is None:
                r = sigma / state.sigma_ema
                d = (mu - state.mu_ema) / state.sigma_ema
            else:
                r, d = rd
            v_star = v_hat * r + d
            if update_stats:
                new_state = ema_update(state, mu, sigma)

    out = state.gamma * v_star + state.beta
    cache = NormCache(mode=mode, v=v, mu=mu, sigma=sigma, v_hat=v_hat, v_star=v_star,
                      gamma=state.gamma, r=r, d=d)
    return out, cache, new_state


def normalize_backward(grad_out, cache: NormCache, *, allow_test_ema=False):
    """Gradients w.r.t. the layer input, ``gamma`` and ``beta``.

    Batch statistics are differentiated through (full batch-norm Jacobian);
    TBR's ``r`` and ``d`` are constants, so its input gradient is the batch-norm
    one scaled per channel by ``r``. ``TEST_EMA`` treats its statistics as
    constants and is only accepted with ``allow_test_ema=True``.
    """
    if cache.mode is NormMode.TEST_EMA and not allow_test_ema:
        raise ContractError("test-ema gradients are only available as an explicit negative control")
    if cache.mode not in GRADIENT_MODES and cache.mode is not NormMode.TEST_EMA:
        raise ContractError(f"no adaptation gradient through {cache.mode.value} normalization")
    g = np.asarray(grad_out, dtype=np.float64)
    grad_gamma = np.sum(g * cache.v_star, axis=0)
    grad_beta = np.sum(g, axis=0)
    g_star = g * cache.gamma
    if cache.mode is NormMode.TEST_EMA:
        return g_star / cache.sigma, grad_gamma, grad_beta
    if cache.mode is NormMode.TBR:
        g_star = g_star * cache.r
    g_in = (g_star - g_star.mean(axis=0) - cache.v_hat * np.mean(g_star * cache.v_hat, axis=0)) / cache.sigma
    return g_in, grad_gamma, grad_beta
