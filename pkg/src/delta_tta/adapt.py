"""Online adaptation: dynamic re-weighting, method presets and the per-batch step."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import netcore
from .errors import ConfigError, ContractError
from .losses import LossKind, LossSpec, evaluate, softmax
from .netcore import OptimizerConfig, OptimizerState
from .normalize import GRADIENT_MODES, InitStrategy, NormMode

DEFAULT_LAMBDA = 0.9
DEFAULT_WEIGHT_EPS = 1e-6


class DotVariant(str, enum.Enum):
    HARD = "hard"
    SOFT = "soft"


class Strategy(str, enum.Enum):
    NONE = "none"
    LA = "la"
    SAMPLE_DROP = "sample-drop"


# --- re-weighting primitives ----------------------------------------------------

def uniform_z(num_classes):
    return np.full(num_classes, 1.0 / num_classes)


def dot_weights(probs, z, variant=DotVariant.HARD, eps=DEFAULT_WEIGHT_EPS):
    """Raw per-sample weights, inversely proportional to the tracked class frequency."""
    probs = np.asarray(probs, dtype=np.float64)
    inv = 1.0 / (np.asarray(z, dtype=np.float64) + eps)
    if DotVariant(variant) is DotVariant.HARD:
        # argmax returns the lowest index on ties
        return inv[np.argmax(probs, axis=1)]
    return probs @ inv


def normalize_weights(w):
    """Rescale to mean one. Equal inputs give exactly ones."""
    w = np.asarray(w, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise ContractError("weights must have a positive sum")
    if np.all(w == w[0]):
        return np.ones_like(w)
    return w.shape[0] * w / total


def update_z(z, probs, lam=DEFAULT_LAMBDA):
    probs = np.asarray(probs, dtype=np.float64)
    return lam * np.asarray(z, dtype=np.float64) + (1.0 - lam) * probs.mean(axis=0)


def la_adjust(logits, z, tau=1.0, eps=DEFAULT_WEIGHT_EPS):
    """Logit adjustment by the estimated class prior: ``softmax(logits - tau * log z)``."""
    return softmax(np.asarray(logits, dtype=np.float64) - tau * log_prior(z, eps))


def log_prior(z, eps=DEFAULT_WEIGHT_EPS):
    return np.log(np.maximum(np.asarray(z, dtype=np.float64), eps))


def sample_drop_filter(used_counts, pseudo_labels):
    """Drop samples whose pseudo class has been used more often than average."""
    counts = np.asarray(used_counts, dtype=np.float64)
    return counts[np.asarray(pseudo_labels)] <= counts.mean()


# --- method presets ---------------------------------------------------------------

@dataclass(frozen=True)
class MethodSpec:
    name: str
    norm: NormMode = NormMode.SOURCE_EMA
    loss: LossSpec | None = None
    dot: bool = False
    dot_variant: DotVariant = DotVariant.HARD
    lam: float = DEFAULT_LAMBDA
    weight_eps: float = DEFAULT_WEIGHT_EPS
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    strategy: Strategy = Strategy.NONE
    la_tau: float = 1.0
    init: InitStrategy = InitStrategy.FIRST
    # gradients through pure moving-average normalization; negative control only
    allow_test_ema_grad: bool = False

    def __post_init__(self):
        if self.dot and self.loss is None:
            raise ConfigError("re-weighting needs a gradient-based loss")
        if self.loss is not None and self.norm not in GRADIENT_MODES:
            if not (self.norm is NormMode.TEST_EMA and self.allow_test_ema_grad):
                raise ConfigError(f"{self.norm.value} normalization cannot carry adaptation gradients")
        if self.strategy is not Strategy.NONE and self.loss is None:
            raise ConfigError(f"{self.strategy.value} needs a gradient-based loss")

    @property
    def tracks_z(self) -> bool:
        return self.dot or self.strategy is not Strategy.NONE

    @property
    def adapts(self) -> bool:
        return self.loss is not None


_BASES = {
    "source": (NormMode.SOURCE_EMA, None),
    "bn-adapt": (NormMode.BATCH_STAT, None),
    "tema": (NormMode.TEST_EMA, None),
    "pl": (NormMode.BATCH_STAT, LossKind.PL),
    "tent": (NormMode.BATCH_STAT, LossKind.ENTROPY),
    "ent-w": (NormMode.BATCH_STAT, LossKind.ENTW),
}

PRESETS = ("source", "bn-adapt", "tema", "pl", "tent", "tent+tbr", "tent+dot", "tent+delta",
           "ent-w", "ent-w+delta")


def method_from_name(name: str, **overrides) -> MethodSpec:
    """Parse ``base[+component...][:soft]``.

    Bases: source, bn-adapt, tema, pl, tent, ent-w. Components: ``tbr``,
    ``dot``, ``delta`` (= tbr + dot), ``tema`` (negative control), ``la``,
    ``sample-drop``. Keyword overrides go straight to :class:`MethodSpec`.
    """
    text = name.strip().lower()
    variant = DotVariant.HARD
    if ":" in text:
        text, suffix = text.split(":", 1)
        if suffix != "soft":
            raise ConfigError(f"unknown suffix {suffix!r} in {name!r}")
        variant = DotVariant.SOFT
    base, *mods = text.split("+")
    if base not in _BASES:
        raise ConfigError(f"unknown method {name!r}; bases are {sorted(_BASES)}")
    norm, loss_kind = _BASES[base]
    kw = dict(dot=False, strategy=Strategy.NONE, allow_test_ema_grad=False)
    for m in mods:
        if m == "tbr":
            norm = NormMode.TBR
        elif m == "dot":
            kw["dot"] = True
        elif m == "delta":
            norm, kw["dot"] = NormMode.TBR, True
        elif m == "tema":
            norm, kw["allow_test_ema_grad"] = NormMode.TEST_EMA, True
        elif m == "la":
            kw["strategy"] = Strategy.LA
        elif m == "sample-drop":
            kw["strategy"] = Strategy.SAMPLE_DROP
        else:
            raise ConfigError(f"unknown component {m!r} in {name!r}")
    if variant is DotVariant.SOFT and not kw["dot"]:
        raise ConfigError(":soft only applies to methods with re-weighting")
    loss = None if loss_kind is None else LossSpec(loss_kind)
    kw.update(overrides)
    return MethodSpec(name=name, norm=norm, loss=loss, dot_variant=variant, **kw)


# --- the per-batch step ---------------------------------------------------------------

@dataclass(frozen=True)
class AdaptState:
    """Episode-owned mutable-by-replacement state besides the model."""

    z: np.ndarray
    opt: OptimizerState = field(default_factory=OptimizerState)
    used_counts: np.ndarray | None = None
    updates: int = 0

    @classmethod
    def start(cls, num_classes):
        return cls(uniform_z(num_classes), OptimizerState(), np.zeros(num_classes, dtype=np.int64))


@dataclass(frozen=True)
class StepResult:
    probs: np.ndarray  # logged predictions
    pseudo_labels: np.ndarray
    model: netcore.ModelState
    state: AdaptState
    updated: bool
    loss: float
    trace: netcore.ForwardTrace | None = None


def _weights(method, probs, state):
    n = probs.shape[0]
    if method.dot:
        return normalize_weights(dot_weights(probs, state.z, method.dot_variant, method.weight_eps))
    return np.ones(n)


def update_from_trace(model, trace, logits, probs, method, state, keep=None):
    """Loss, weights and optimizer step for an already computed forward pass.

    Returns ``(model, opt_state, updated, loss)``.
    """
    ev = evaluate(method.loss, logits, probs)
    w = _weights(method, probs, state)
    mask = ev.used if keep is None else ev.used & keep
    loss = float(np.sum(w * np.where(mask, ev.loss, 0.0)) / probs.shape[0])
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite adaptation loss")
    if not mask.any():
        return model, state.opt, False, loss
    grads = netcore.backward_affine(model, trace, np.where(mask[:, None], ev.grad, 0.0), w,
                                    allow_test_ema=method.allow_test_ema_grad)
    params, opt = netcore.optimizer_step(model.affine_params(), grads, state.opt, method.optimizer)
    return model.with_affine_params(params), opt, True, loss


def adapt_step(model, batch, method: MethodSpec, state: AdaptState, *, learn=True,
               update_stats=True) -> StepResult:
    """Predict a mini-batch with the current parameters, then adapt.

    ``learn=False`` only predicts (and advances normalization statistics);
    the small-batch schedule uses it for its fast-inference passes and calls
    ``update_stats=False`` for the slow update over samples already seen.
    """
    logits, raw_probs, trace, model = netcore.forward(model, batch, method.norm, init=method.init,
                                                      update_stats=update_stats)
    probs = raw_probs
    if method.strategy is Strategy.LA:
        probs = la_adjust(logits, state.z, method.la_tau, method.weight_eps)
        logits = logits - method.la_tau * log_prior(state.z, method.weight_eps)
    pseudo = np.argmax(probs, axis=1)
    updated, loss = False, 0.0
    opt = state.opt
    counts = state.used_counts
    if method.adapts and learn:
        keep = None
        if method.strategy is Strategy.SAMPLE_DROP:
            keep = sample_drop_filter(counts, pseudo)
        model, opt, updated, loss = update_from_trace(model, trace, logits, probs, method, state, keep)
        if keep is not None:
            counts = counts + np.bincount(pseudo[keep], minlength=counts.shape[0])
    z = update_z(state.z, raw_probs, method.lam) if method.tracks_z and learn else state.z
    new_state = replace(state, z=z, opt=opt, used_counts=counts, updates=state.updates + int(updated))
    return StepResult(probs, pseudo, model, new_state, updated, loss, trace)
