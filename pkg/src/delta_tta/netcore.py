"""A small dense classifier with per-feature normalization layers.

Layout: ``[dense -> norm -> relu] * L -> dense head``. The forward pass is
explicit and caches what the backward pass needs; adaptation gradients are
computed only for the normalization affine parameters, while
:func:`train_source` backpropagates into every parameter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import normalize as nz
from .errors import ConfigError, ContractError, InputError, NumericError
from .losses import LossSpec, evaluate, softmax
from .normalize import InitStrategy, NormLayerState, NormMode


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden: tuple = (64, 64)
    num_classes: int = 10
    seed: int = 0
    eps: float = nz.DEFAULT_EPS

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("layer widths must be positive")


@dataclass(frozen=True)
class ModelState:
    spec: ModelSpec
    dense: tuple  # ((W, b), ...) for the hidden layers, W is fan_in x fan_out
    norms: tuple  # NormLayerState per hidden layer
    head: tuple  # (W, b)

    def with_norms(self, norms) -> "ModelState":
        return replace(self, norms=tuple(norms))

    def affine_params(self) -> list:
        """Flat ``[gamma_0, beta_0, gamma_1, ...]`` list."""
        out = []
        for s in self.norms:
            out += [s.gamma, s.beta]
        return out

    def with_affine_params(self, params) -> "ModelState":
        it = iter(params)
        return self.with_norms(replace(s, gamma=next(it), beta=next(it)) for s in self.norms)

    def set_alpha(self, alpha: float) -> "ModelState":
        return self.with_norms(replace(s, alpha=alpha) for s in self.norms)

    def reset_test_stats(self) -> "ModelState":
        return self.with_norms(s.reset_test_stats() for s in self.norms)


def _uniform_layer(rng, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def init_model(spec: ModelSpec, alpha: float = nz.DEFAULT_ALPHA) -> ModelState:
    rng = np.random.default_rng(spec.seed)
    dense, norms = [], []
    fan_in = spec.input_dim
    for width in spec.hidden:
        dense.append(_uniform_layer(rng, fan_in, width))
        norms.append(NormLayerState.fresh(width, eps=spec.eps, alpha=alpha))
        fan_in = width
    head = _uniform_layer(rng, fan_in, spec.num_classes)
    return ModelState(spec, tuple(dense), tuple(norms), head)


@dataclass
class ForwardTrace:
    inputs: list = field(default_factory=list)  # input to each dense layer
    caches: list = field(default_factory=list)  # NormCache per hidden layer
    relu_masks: list = field(default_factory=list)
    head_input: np.ndarray | None = None
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None

    @property
    def mode(self):
        return self.caches[0].mode if self.caches else None


def _check_finite(a, layer, what):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite {what} at layer {layer}")


def forward(model: ModelState, batch, mode=NormMode.SOURCE_EMA, *, init=InitStrategy.FIRST,
            update_stats=True, rd=None):
    """Run the network on a B x D batch.

    Uninitialized test-time statistics are seeded on the fly with ``init``.
    Returns ``(logits, probs, trace, new_model)``; ``new_model`` differs from
    ``model`` only in normalization statistics.
    """
    mode = NormMode(mode)
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim or x.shape[0] < 1:
        raise ConfigError(f"batch shape {x.shape} does not match input_dim={model.spec.input_dim}")
    trace = ForwardTrace()
    norms = []
    h = x
    for i, ((w, b), state) in enumerate(zip(model.dense, model.norms)):
        trace.inputs.append(h)
        v = h @ w + b
        if mode in nz.EMA_MODES and not state.initialized:
            first = nz.batch_stats(v, state.eps) if InitStrategy(init) is InitStrategy.FIRST else None
            state = nz.init_stats(state, init, first)
        out, cache, state = nz.normalize_forward(v, state, mode, update_stats=update_stats,
                                                 rd=None if rd is None else rd[i])
        _check_finite(out, i, "normalized activation")
        mask = out > 0
        h = np.where(mask, out, 0.0)
        trace.caches.append(cache)
        trace.relu_masks.append(mask)
        norms.append(state)
    trace.head_input = h
    logits = h @ model.head[0] + model.head[1]
    _check_finite(logits, len(model.dense), "logit")
    probs = softmax(logits)
    trace.logits, trace.probs = logits, probs
    return logits, probs, trace, model.with_norms(norms)


def predict(model: ModelState, x, mode=NormMode.SOURCE_EMA):
    return forward(model, x, mode, update_stats=False)[1]


def backward_affine(model: ModelState, trace: ForwardTrace, grad_logits, sample_weights=None, *,
                    allow_test_ema=False):
    """Gradient of ``1/B * sum_b w_b L_b`` w.r.t. every (gamma, beta).

    ``grad_logits`` holds per-sample ``dL_b/dlogits``. Returns a flat list in
    :meth:`ModelState.affine_params` order.
    """
    g = np.asarray(grad_logits, dtype=np.float64)
    n = g.shape[0]
    if trace.logits is None or trace.logits.shape != g.shape:
        raise ContractError("gradient shape does not match the forward trace")
    for c in trace.caches:
        if c.mode is NormMode.SOURCE_EMA:
            raise ContractError("source-ema forward traces carry no adaptation gradient")
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n,) or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ContractError("sample weights must be finite, non-negative, one per sample")
    g = g * w[:, None] / n
    dh = g @ model.head[0].T
    grads = [None] * (2 * len(trace.caches))
    for i in range(len(trace.caches) - 1, -1, -1):
        dv = np.where(trace.relu_masks[i], dh, 0.0)
        g_in, g_gamma, g_beta = nz.normalize_backward(dv, trace.caches[i], allow_test_ema=allow_test_ema)
        grads[2 * i], grads[2 * i + 1] = g_gamma, g_beta
        if i:
            dh = g_in @ model.dense[i][0].T
    return grads


def frozen_rd(trace: ForwardTrace):
    return [None if c.r is None else (c.r, c.d) for c in trace.caches]


def finite_diff_check(model: ModelState, batch, loss_spec: LossSpec, h=1e-5, mode=NormMode.TBR,
                      sample_weights=None, init=InitStrategy.FIRST, floor=1e-6):
    """Worst relative error between :func:`backward_affine` and central differences.

    Stop-gradient quantities (TBR's ``r``/``d``, pseudo labels, loss gates and
    Ent-W weights) are frozen at the unperturbed point. The denominator is
    floored at ``floor``: components that are exactly zero (for example a
    bias whose shift the next batch normalization removes) would otherwise
    compare differencing roundoff (about ``1e-16 * |loss| / h``) against itself.
    """
    if not h > 0:
        raise InputError("finite-difference step must be positive")
    mode = NormMode(mode)
    x = np.asarray(batch, dtype=np.float64)
    n = x.shape[0]
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    # seed the moving averages (if any) without advancing them afterwards
    model = forward(model, x, mode, init=init, update_stats=False)[3]
    logits, probs, trace, _ = forward(model, x, mode, update_stats=False)
    base = evaluate(loss_spec, logits, probs)
    analytic = backward_affine(model, trace, base.grad, w, allow_test_ema=True)
    rd = frozen_rd(trace)

    def objective(m):
        lg, pr, _, _ = forward(m, x, mode, update_stats=False, rd=rd)
        return float(np.sum(w * evaluate(loss_spec, lg, pr, frozen=base).loss) / n)

    params = model.affine_params()
    worst = 0.0
    for pi, p in enumerate(params):
        for c in range(p.shape[0]):
            vals = []
            for sign in (1.0, -1.0):
                q = p.copy()
                q[c] += sign * h
                trial = list(params)
                trial[pi] = q
                vals.append(objective(model.with_affine_params(trial)))
            numeric = (vals[0] - vals[1]) / (2 * h)
            a = analytic[pi][c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


# --- optimizers -------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")


@dataclass(frozen=True)
class OptimizerState:
    t: int = 0
    m: tuple = ()
    v: tuple = ()


def optimizer_step(params, grads, state: OptimizerState | None, config: OptimizerConfig):
    """One SGD or bias-corrected Adam step; returns ``(new_params, new_state)``."""
    state = state or OptimizerState()
    if len(params) != len(grads):
        raise ContractError("parameter/gradient count mismatch")
    if config.kind == "sgd":
        return [p - config.lr * g for p, g in zip(params, grads)], replace(state, t=state.t + 1)
    t = state.t + 1
    m_prev = state.m or tuple(np.zeros_like(p) for p in params)
    v_prev = state.v or tuple(np.zeros_like(p) for p in params)
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        m_hat = m / (1 - config.beta1 ** t)
        v_hat = v / (1 - config.beta2 ** t)
        new_p.append(p - config.lr * m_hat / (np.sqrt(v_hat) + config.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, OptimizerState(t, tuple(new_m), tuple(new_v))


# --- source training ----------------------------------------------------------

def _train_step(model: ModelState, x, y, running, momentum):
    """Cross-entropy gradient for every parameter under training-mode normalization."""
    logits, probs, trace, _ = forward(model, x, NormMode.BATCH_STAT, update_stats=False)
    n = x.shape[0]
    g = probs.copy()
    g[np.arange(n), y] -= 1.0
    g /= n
    w_head = model.head[0]
    grads_head = (trace.head_input.T @ g, g.sum(axis=0))
    dh = g @ w_head.T
    dense_grads = [None] * len(model.dense)
    affine_grads = [None] * (2 * len(model.dense))
    for i in range(len(model.dense) - 1, -1, -1):
        dv = np.where(trace.relu_masks[i], dh, 0.0)
        g_in, g_gamma, g_beta = nz.normalize_backward(dv, trace.caches[i])
        affine_grads[2 * i], affine_grads[2 * i + 1] = g_gamma, g_beta
        dense_grads[i] = (trace.inputs[i].T @ g_in, g_in.sum(axis=0))
        dh = g_in @ model.dense[i][0].T
    for i, cache in enumerate(trace.caches):
        mu, var = running[i]
        running[i] = ((1 - momentum) * mu + momentum * cache.mu,
                      (1 - momentum) * var + momentum * (cache.sigma ** 2 - model.norms[i].eps))
    loss = -np.mean(np.log(probs[np.arange(n), y] + 1e-300))
    return loss, dense_grads, affine_grads, grads_head


def train_source(spec: ModelSpec, train, epochs=20, lr=1e-2, bn_momentum=0.1, seed=None,
                 batch_size=64, alpha=nz.DEFAULT_ALPHA) -> ModelState:
    """Fit all parameters with Adam on cross-entropy; track source statistics by EMA."""
    x = np.asarray(train.x, dtype=np.float64)
    y = np.asarray(train.y, dtype=np.int64)
    if x.shape[0] == 0:
        raise InputError("cannot train on an empty dataset")
    if np.any(y < 0) or np.any(y >= spec.num_classes):
        raise InputError("labels outside [0, K)")
    model = init_model(spec, alpha=alpha)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    running = [(np.zeros(s.channels), np.ones(s.channels)) for s in model.norms]
    opt_state = None
    cfg = OptimizerConfig("adam", lr)
    for _ in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], batch_size):
            idx = order[start:start + batch_size]
            if idx.size < 2:
                continue
            _, dg, ag, hg = _train_step(model, x[idx], y[idx], running, bn_momentum)
            params = [a for wb in model.dense for a in wb] + model.affine_params() + list(model.head)
            grads = [a for wb in dg for a in wb] + ag + list(hg)
            params, opt_state = optimizer_step(params, grads, opt_state, cfg)
            nd = 2 * len(model.dense)
            dense = tuple((params[2 * i], params[2 * i + 1]) for i in range(len(model.dense)))
            model = replace(model, dense=dense, head=(params[-2], params[-1]))
            model = model.with_affine_params(params[nd:-2])
    norms = [replace(s, mu_src=mu, sigma_src=np.sqrt(np.maximum(var, 0.0) + s.eps))
             for s, (mu, var) in zip(model.norms, running)]
    return model.with_norms(norms)
