"""Three-gradient adversarial training loop.

Per batch: a standard pass yields the parameter gradient plus input-space
gradients at both embedding levels; those input gradients become unit-norm
perturbations scaled to the configured budgets; one extra pass per level
re-runs the pipeline under its perturbation; the parameter update applies the
sum of the collected gradients through the configured optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradientMap, normalize_scale
from .data import Batch, Event, batch as make_batches
from .model import (
    POST_VECTORS,
    WORD_VECTORS,
    DropoutMasks,
    ForwardResult,
    HierarchicalModel,
    forward,
    make_dropout_masks,
)

MODES = ("standard", "post-adv-only", "event-adv-only", "full-hat")


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class HatConfig:
    """Hyperparameters of one training run.

    ``eps_post`` and ``eps_event`` are the L2 budgets of the word-level and
    post-level perturbations; ``alpha`` mixes the auxiliary post loss into
    the total; ``mode`` selects which adversarial passes contribute to the
    update.
    """

    eps_post: float = 1.0
    eps_event: float = 0.3
    alpha: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    mode: str = "full-hat"
    optimizer: str = "adam"  # "adam" or "sgd"
    dropout: float = 0.5
    clip_norm: float | None = 5.0

    def validate(self) -> None:
        if self.eps_post < 0 or self.eps_event < 0:
            raise ValueError("perturbation budgets must be nonnegative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size/max_epochs must be >= 1 and patience >= 0")


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_post: float
    loss_event: float
    loss_post_adv: float | None
    loss_event_adv: float | None
    val_accuracy: float
    clipped_batches: int = 0

    def format_line(self) -> str:
        def fmt(x: float | None) -> str:
            return "-" if x is None else f"{x:.6f}"

        return (
            f"epoch={self.epoch} loss_total={self.loss_total:.6f} "
            f"loss_post={self.loss_post:.6f} loss_event={self.loss_event:.6f} "
            f"loss_post_adv={fmt(self.loss_post_adv)} "
            f"loss_event_adv={fmt(self.loss_event_adv)} "
            f"val_accuracy={self.val_accuracy:.4f} clipped={self.clipped_batches}"
        )


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    best_val_accuracy: float
    history: list[EpochRecord] = field(default_factory=list)
    epochs_run: int = 0
    stopped_early: bool = False


class Sgd:
    """Plain gradient descent, matching the literal update rule."""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: dict[str, np.ndarray], grads: GradientMap) -> None:
        for name, p in params.items():
            p -= self.learning_rate * grads[name]


class Adam:
    """Adaptive-moment estimation with bias correction."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: GradientMap) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p -= self.learning_rate * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(config: HatConfig):
    return Adam(config.learning_rate) if config.optimizer == "adam" else Sgd(config.learning_rate)


@dataclass
class StandardPass:
    """Standard pass outputs: total-loss parameter gradient plus the cached
    input gradients that seed both perturbations."""

    grads: GradientMap                       # d loss_total / d theta
    loss_total: float
    loss_post: float
    loss_event: float
    word_grad: np.ndarray | None             # d loss_total / d word vectors
    post_vector_grad: np.ndarray | None      # d loss_event / d post vectors
    event_grads: GradientMap | None          # d loss_event / d theta
    result: ForwardResult


def _theta_subset(grads: GradientMap, model: HierarchicalModel) -> GradientMap:
    return {name: grads[name] for name in model.parameters()}


def standard_pass(model: HierarchicalModel, batch_: Batch, alpha: float,
                  dropout: DropoutMasks | None = None,
                  need_word_grad: bool = True,
                  need_event_grads: bool = True) -> StandardPass:
    """Forward once; backward from the total loss, and (when requested) from
    the event loss to harvest the post-vector gradient on the same tape."""
    result = forward(model, batch_, alpha=alpha, dropout=dropout)
    if not math.isfinite(result.loss_total.item()):
        raise NumericError(f"non-finite loss: {result.loss_total.item()}")
    total_grads = result.tape.backward(result.loss_total)
    event_grads = result.tape.backward(result.loss_event) if need_event_grads else None
    return StandardPass(
        grads=_theta_subset(total_grads, model),
        loss_total=result.loss_total.item(),
        loss_post=result.loss_post.item(),
        loss_event=result.loss_event.item(),
        word_grad=total_grads[WORD_VECTORS] if need_word_grad else None,
        post_vector_grad=event_grads[POST_VECTORS] if event_grads is not None else None,
        event_grads=_theta_subset(event_grads, model) if event_grads is not None else None,
        result=result,
    )


def _per_event_scale(grad: np.ndarray, epsilon: float) -> np.ndarray:
    """normalize_scale applied independently to each event's block."""
    out = np.empty_like(grad)
    for e in range(grad.shape[0]):
        out[e] = normalize_scale(grad[e], epsilon)
    return out


def post_perturbation(word_grad: np.ndarray, eps_post: float) -> np.ndarray:
    """Word-level perturbation: per event, eps * g / ||g||2 over the whole
    word-vector block (zero when the gradient is degenerate)."""
    return _per_event_scale(word_grad, eps_post)


def event_perturbation(post_vector_grad: np.ndarray, eps_event: float) -> np.ndarray:
    """Post-level perturbation from the event-loss gradient, per event."""
    return _per_event_scale(post_vector_grad, eps_event)


@dataclass
class AdvPass:
    grads: GradientMap
    loss_total: float
    loss_post: float
    loss_event: float


def post_adv_pass(model: HierarchicalModel, batch_: Batch, r_post: np.ndarray,
                  alpha: float, dropout: DropoutMasks | None = None) -> AdvPass:
    """Re-run with displaced word vectors; gradient of the adversarial TOTAL loss."""
    result = forward(model, batch_, r_post=r_post, alpha=alpha, dropout=dropout)
    grads = result.tape.backward(result.loss_total)
    return AdvPass(
        grads=_theta_subset(grads, model),
        loss_total=result.loss_total.item(),
        loss_post=result.loss_post.item(),
        loss_event=result.loss_event.item(),
    )


def event_adv_pass(model: HierarchicalModel, batch_: Batch, r_event: np.ndarray,
                   alpha: float, dropout: DropoutMasks | None = None) -> AdvPass:
    """Re-run with displaced post vectors; gradient of the adversarial EVENT
    loss only (the auxiliary post loss is excluded in this pass)."""
    result = forward(model, batch_, r_event=r_event, alpha=alpha, dropout=dropout)
    grads = result.tape.backward(result.loss_event)
    return AdvPass(
        grads=_theta_subset(grads, model),
        loss_total=result.loss_total.item(),
        loss_post=result.loss_post.item(),
        loss_event=result.loss_event.item(),
    )


def zero_grads_like(params: dict[str, np.ndarray]) -> GradientMap:
    return {name: np.zeros_like(arr) for name, arr in params.items()}


def hat_update(params: dict[str, np.ndarray], grads: GradientMap,
               grads_post_adv: GradientMap, grads_event_adv: GradientMap,
               optimizer, clip_norm: float | None = None) -> bool:
    """Apply one update from the summed three-part gradient.

    Returns True when the global-norm clip engaged.  All three maps must
    cover exactly the parameter set.
    """
    for label, gmap in (("standard", grads), ("post-adversarial", grads_post_adv),
                        ("event-adversarial", grads_event_adv)):
        if set(gmap) != set(params):
            raise ValueError(f"{label} gradient map does not cover the parameter set")
    combined = {
        name: grads[name] + grads_post_adv[name] + grads_event_adv[name]
        for name in params
    }
    clipped = False
    if clip_norm is not None and clip_norm > 0:
        global_norm = math.sqrt(sum(float((g * g).sum()) for g in combined.values()))
        if global_norm > clip_norm:
            factor = clip_norm / global_norm
            combined = {name: g * factor for name, g in combined.items()}
            clipped = True
    optimizer.step(params, combined)
    return clipped


def _clear_padding_row(grads: GradientMap) -> None:
    # The embedding padding row is frozen at zero.
    if "embedding.weights" in grads:
        grads["embedding.weights"][0, :] = 0.0


def train_batch(model: HierarchicalModel, batch_: Batch, config: HatConfig,
                optimizer, dropout: DropoutMasks | None = None) -> tuple[StandardPass, AdvPass | None, AdvPass | None, bool]:
    """Run the passes dictated by ``config.mode`` on one batch and update."""
    params = model.parameters()
    need_word = config.mode in ("post-adv-only", "full-hat")
    need_event = config.mode in ("event-adv-only", "full-hat")
    std = standard_pass(model, batch_, config.alpha, dropout=dropout,
                        need_word_grad=need_word, need_event_grads=need_event)

    post_adv = None
    event_adv = None
    if need_word:
        r_post = post_perturbation(std.word_grad, config.eps_post)
        post_adv = post_adv_pass(model, batch_, r_post, config.alpha, dropout=dropout)
    if need_event:
        r_event = event_perturbation(std.post_vector_grad, config.eps_event)
        event_adv = event_adv_pass(model, batch_, r_event, config.alpha, dropout=dropout)

    g_post = post_adv.grads if post_adv is not None else zero_grads_like(params)
    g_event = event_adv.grads if event_adv is not None else zero_grads_like(params)
    for gmap in (std.grads, g_post, g_event):
        _clear_padding_row(gmap)
    clipped = hat_update(params, std.grads, g_post, g_event, optimizer,
                         clip_norm=config.clip_norm)
    return std, post_adv, event_adv, clipped


def train(model: HierarchicalModel, train_events: list[Event], val_events: list[Event],
          config: HatConfig, log_fn=None) -> TrainState:
    """Full loop: shuffled mini-batches, mode-dependent passes, early stopping
    on validation accuracy, best checkpoint restored into the model."""
    from .evaluation import evaluate  # local import; evaluation depends on model only

    config.validate()
    if not train_events or not val_events:
        raise ValueError("train and validation splits must both be nonempty")

    rng = np.random.default_rng([config.seed, 1])
    optimizer = make_optimizer(config)
    state = TrainState(
        params=model.parameters(),
        best_params=model.copy_parameters(),
        best_val_accuracy=-1.0,
    )
    epochs_since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_events))
        shuffled = [train_events[i] for i in order]
        sums = {"total": 0.0, "post": 0.0, "event": 0.0, "post_adv": 0.0, "event_adv": 0.0}
        counts = {"post_adv": 0, "event_adv": 0}
        clipped_batches = 0
        n_batches = 0
        for batch_ in make_batches(shuffled, config.batch_size):
            dropout = make_dropout_masks(model, batch_, config.dropout, rng)
            std, post_adv, event_adv, clipped = train_batch(
                model, batch_, config, optimizer, dropout=dropout
            )
            n_batches += 1
            clipped_batches += int(clipped)
            sums["total"] += std.loss_total
            sums["post"] += std.loss_post
            sums["event"] += std.loss_event
            if post_adv is not None:
                sums["post_adv"] += post_adv.loss_total
                counts["post_adv"] += 1
            if event_adv is not None:
                sums["event_adv"] += event_adv.loss_event
                counts["event_adv"] += 1

        val_accuracy = evaluate(model, val_events, batch_size=config.batch_size).accuracy
        record = EpochRecord(
            epoch=epoch,
            loss_total=sums["total"] / n_batches,
            loss_post=sums["post"] / n_batches,
            loss_event=sums["event"] / n_batches,
            loss_post_adv=sums["post_adv"] / counts["post_adv"] if counts["post_adv"] else None,
            loss_event_adv=sums["event_adv"] / counts["event_adv"] if counts["event_adv"] else None,
            val_accuracy=val_accuracy,
            clipped_batches=clipped_batches,
        )
        state.history.append(record)
        state.epochs_run = epoch
        if log_fn is not None:
            log_fn(record.format_line())

        if val_accuracy > state.best_val_accuracy:
            state.best_val_accuracy = val_accuracy
            state.best_params = model.copy_parameters()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best > config.patience:
                state.stopped_early = True
                break

    model.set_parameters(state.best_params)
    return state
