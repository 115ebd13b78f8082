"""Metrics, early-detection curves, the gradient-based embedding attack, and
the loss-landscape scanner."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import DTYPE, normalize_scale
from .data import Event, RUMOR, batch as make_batches
from .model import WORD_VECTORS, HierarchicalModel, forward

DEFAULT_EARLY_KS = (5, 10, 15, 20, 25, 30, 35, 40, 45)


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def _harmonic(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if (p + r) else 0.0


@dataclass
class Metrics:
    """Accuracy plus macro-averaged precision/recall/F1 over the two classes,
    with rumor-positive binary metrics and raw confusion counts alongside."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    rumor_precision: float
    rumor_recall: float
    rumor_f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "Metrics":
        total = tp + fp + tn + fn
        if total == 0:
            raise ValueError("cannot compute metrics over zero predictions")
        p_rumor = _safe_div(tp, tp + fp)
        r_rumor = _safe_div(tp, tp + fn)
        p_other = _safe_div(tn, tn + fn)
        r_other = _safe_div(tn, tn + fp)
        precision = (p_rumor + p_other) / 2.0
        recall = (r_rumor + r_other) / 2.0
        return cls(
            accuracy=(tp + tn) / total,
            precision=precision,
            recall=recall,
            f1=_harmonic(precision, recall),
            rumor_precision=p_rumor,
            rumor_recall=r_rumor,
            rumor_f1=_harmonic(p_rumor, r_rumor),
            tp=tp, fp=fp, tn=tn, fn=fn,
        )

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision_macro": self.precision,
            "recall_macro": self.recall,
            "f1_macro": self.f1,
            "precision_rumor": self.rumor_precision,
            "recall_rumor": self.rumor_recall,
            "f1_rumor": self.rumor_f1,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
        }


def predict(model: HierarchicalModel, events: list[Event],
            batch_size: int = 64) -> np.ndarray:
    """Event-level predicted labels (1 = rumor), evaluation mode."""
    preds = []
    for batch_ in make_batches(events, batch_size):
        result = forward(model, batch_, trainable=False)
        preds.append(result.predictions())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: HierarchicalModel, events: list[Event],
             batch_size: int = 64) -> Metrics:
    """Confusion-based metrics with rumor as the positive class."""
    if not events:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(model, events, batch_size)
    labels = np.asarray([e.label for e in events], dtype=np.int64)
    tp = int(((preds == RUMOR) & (labels == RUMOR)).sum())
    fp = int(((preds == RUMOR) & (labels != RUMOR)).sum())
    tn = int(((preds != RUMOR) & (labels != RUMOR)).sum())
    fn = int(((preds != RUMOR) & (labels == RUMOR)).sum())
    return Metrics.from_counts(tp, fp, tn, fn)


def truncate_event(event: Event, k: int) -> Event:
    """First min(k, len(posts)) posts; the source post is index 0, so it stays."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return replace(event, posts=event.posts[:k])


def early_detection(model: HierarchicalModel, events: list[Event],
                    k_list: tuple[int, ...] = DEFAULT_EARLY_KS,
                    batch_size: int = 64) -> list[tuple[int, float]]:
    """Accuracy per truncation size k over the given events."""
    rows = []
    for k in k_list:
        truncated = [truncate_event(e, k) for e in events]
        rows.append((k, evaluate(model, truncated, batch_size).accuracy))
    return rows


def write_early_detection_csv(path: str | Path, rows: list[tuple[int, float]]) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        handle.write("k,accuracy\n")
        for k, accuracy in rows:
            handle.write(f"{k},{accuracy!r}\n")


@dataclass
class AttackOutcome:
    event_id: str
    label: int
    clean_prediction: int
    attacked_prediction: int


def fgm_attack(model: HierarchicalModel, event: Event, eps_attack: float,
               alpha: float = 0.1) -> AttackOutcome:
    """Gradient-based embedding attack on one event.

    The event loss at the true label is differentiated with respect to the
    event's word-vector block; the block is displaced by the unit-norm ascent
    direction scaled to ``eps_attack`` and the forward pass re-runs.  Only the
    inputs move, parameters are untouched.
    """
    if eps_attack < 0:
        raise ValueError(f"attack budget must be nonnegative, got {eps_attack}")
    batch_ = make_batches([event], 1)[0]
    clean = forward(model, batch_, alpha=alpha, trainable=False, watch_inputs=True)
    grads = clean.tape.backward(clean.loss_event)
    direction = normalize_scale(grads[WORD_VECTORS], eps_attack)
    attacked = forward(model, batch_, r_post=direction, alpha=alpha,
                       trainable=False, watch_inputs=False)
    return AttackOutcome(
        event_id=event.id,
        label=event.label,
        clean_prediction=int(clean.predictions()[0]),
        attacked_prediction=int(attacked.predictions()[0]),
    )


@dataclass
class AttackReport:
    eps_attack: float
    clean_accuracy: float
    attacked_accuracy: float

    @property
    def degradation(self) -> float:
        return self.clean_accuracy - self.attacked_accuracy

    def to_dict(self) -> dict:
        return {
            "eps_attack": self.eps_attack,
            "clean_accuracy": self.clean_accuracy,
            "attacked_accuracy": self.attacked_accuracy,
            "degradation": self.degradation,
        }


def attack_report(model: HierarchicalModel, events: list[Event],
                  eps_attack: float, alpha: float = 0.1) -> AttackReport:
    """Clean vs attacked accuracy over a labeled set."""
    if not events:
        raise ValueError("cannot attack an empty dataset")
    clean_hits = 0
    attacked_hits = 0
    for event in events:
        outcome = fgm_attack(model, event, eps_attack, alpha=alpha)
        clean_hits += int(outcome.clean_prediction == event.label)
        attacked_hits += int(outcome.attacked_prediction == event.label)
    n = len(events)
    return AttackReport(eps_attack, clean_hits / n, attacked_hits / n)


def random_directions(params: dict[str, np.ndarray],
                      seed: int) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Two weight-scaled Gaussian directions over the parameter blocks.

    2-D blocks are rescaled row-by-row so that each row's norm matches the
    corresponding parameter row (a zero row yields a zero direction row);
    vectors and scalars are rescaled as whole blocks.
    """
    rng = np.random.default_rng(seed)

    def draw() -> dict[str, np.ndarray]:
        direction = {}
        for name, arr in params.items():
            d = rng.standard_normal(arr.shape)
            if arr.ndim == 2:
                d_norm = np.linalg.norm(d, axis=1, keepdims=True)
                p_norm = np.linalg.norm(arr, axis=1, keepdims=True)
                factor = np.divide(p_norm, d_norm, out=np.zeros_like(p_norm),
                                   where=d_norm > 0)
                d = d * factor
            else:
                d_norm = np.linalg.norm(d.ravel())
                p_norm = np.linalg.norm(arr.ravel())
                d = d * (p_norm / d_norm) if d_norm > 0 else np.zeros_like(d)
            direction[name] = d.astype(DTYPE)
        return direction

    return draw(), draw()


@dataclass
class LandscapeGrid:
    """Loss values over a symmetric 2-D slice of parameter space."""

    alphas: np.ndarray          # row coordinates
    betas: np.ndarray           # column coordinates
    losses: np.ndarray          # [steps, steps], rows follow alphas
    seed: int
    value_range: tuple[float, float]
    steps: int
    checkpoint_id: str = ""

    def center_loss(self) -> float:
        c = self.steps // 2
        return float(self.losses[c, c])

    def mean_abs_deviation(self) -> float:
        """Grid mean of |f - f(0, 0)|, a scalar flatness summary."""
        return float(np.abs(self.losses - self.center_loss()).mean())

    def write(self, path: str | Path) -> None:
        """CSV (header row of betas, first column of alphas) plus a JSON
        sidecar at <path>.meta.json."""
        path = Path(path)
        with path.open("w", encoding="utf-8") as handle:
            handle.write("alpha\\beta," + ",".join(repr(float(b)) for b in self.betas) + "\n")
            for a, row in zip(self.alphas, self.losses):
                handle.write(f"{float(a)!r}," + ",".join(repr(float(v)) for v in row) + "\n")
        sidecar = {
            "seed": self.seed,
            "range": list(self.value_range),
            "steps": self.steps,
            "checkpoint_id": self.checkpoint_id,
            "center_loss": self.center_loss(),
        }
        Path(f"{path}.meta.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def _symmetric_axis(extent: float, steps: int) -> np.ndarray:
    # Built around the center index so the midpoint is exactly 0.0.
    half = steps // 2
    return (np.arange(steps) - half) * (extent / half)


def mean_event_loss(model: HierarchicalModel, events: list[Event],
                    batch_size: int = 64) -> float:
    """Mean event-level cross-entropy over ``events`` (evaluation mode)."""
    total = 0.0
    for batch_ in make_batches(events, batch_size):
        result = forward(model, batch_, trainable=False)
        total += result.loss_event.item() * batch_.num_events
    return total / len(events)


def landscape_scan(model: HierarchicalModel, events: list[Event],
                   value_range: tuple[float, float] = (-1.0, 1.0), steps: int = 51,
                   seed: int = 0, sample_size: int = 256, batch_size: int = 64,
                   checkpoint_id: str = "") -> LandscapeGrid:
    """Mean event loss on a fixed sample at theta* + a*dx + b*dy per grid cell.

    Parameters are restored bitwise afterwards, and the center cell is
    evaluated at theta* itself.
    """
    if steps < 3 or steps % 2 == 0:
        raise ValueError(f"steps must be an odd number >= 3, got {steps}")
    lo, hi = value_range
    if not (lo < 0.0 < hi) or abs(lo) != abs(hi):
        raise ValueError(f"value range must be symmetric about 0, got {value_range}")
    if not events:
        raise ValueError("cannot scan a landscape on an empty dataset")

    rng = np.random.default_rng([seed, 7])
    if len(events) > sample_size:
        picked = rng.choice(len(events), size=sample_size, replace=False)
        sample = [events[i] for i in sorted(picked)]
    else:
        sample = list(events)

    params = model.parameters()
    backup = {name: arr.copy() for name, arr in params.items()}
    dx, dy = random_directions(params, seed)
    axis = _symmetric_axis(hi, steps)
    losses = np.zeros((steps, steps), dtype=DTYPE)
    try:
        for i, a in enumerate(axis):
            for j, b in enumerate(axis):
                if a == 0.0 and b == 0.0:
                    for name, arr in params.items():
                        np.copyto(arr, backup[name])
                else:
                    for name, arr in params.items():
                        np.copyto(arr, backup[name] + a * dx[name] + b * dy[name])
                losses[i, j] = mean_event_loss(model, sample, batch_size)
    finally:
        for name, arr in params.items():
            np.copyto(arr, backup[name])
    return LandscapeGrid(
        alphas=axis.copy(), betas=axis.copy(), losses=losses, seed=seed,
        value_range=value_range, steps=steps, checkpoint_id=checkpoint_id,
    )
