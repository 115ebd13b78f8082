"""Two-level adversarial training for event/post sequence classification."""

from .autodiff import GradientMap, ShapeError, Tape, Tensor, normalize_scale
from .data import (
    Batch,
    DataError,
    Event,
    Post,
    SyntheticSpec,
    Vocabulary,
    batch,
    build_vocab,
    encode_events,
    gen_synthetic,
    load_events,
    split,
    tokenize,
    tokenize_events,
)
from .evaluation import (
    Metrics,
    attack_report,
    early_detection,
    evaluate,
    fgm_attack,
    landscape_scan,
    random_directions,
)
from .model import (
    HierarchicalModel,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    HatConfig,
    TrainState,
    event_perturbation,
    hat_update,
    post_perturbation,
    standard_pass,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "DataError",
    "Event",
    "GradientMap",
    "HatConfig",
    "HierarchicalModel",
    "Metrics",
    "Post",
    "ShapeError",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TrainState",
    "attack_report",
    "batch",
    "build_vocab",
    "early_detection",
    "encode_events",
    "evaluate",
    "event_perturbation",
    "fgm_attack",
    "forward",
    "gen_synthetic",
    "hat_update",
    "landscape_scan",
    "load_checkpoint",
    "load_events",
    "normalize_scale",
    "post_perturbation",
    "random_directions",
    "save_checkpoint",
    "split",
    "standard_pass",
    "tokenize",
    "tokenize_events",
    "train",
]
