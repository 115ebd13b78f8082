"""Command-line entry point: train, eval, attack, landscape, gen-synthetic.

Every command resolves its configuration (file values overridden by flags),
writes the resolved config next to its outputs, and never mutates input data.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from . import data as dp
from .data import DataError, SyntheticSpec
from .evaluation import (
    DEFAULT_EARLY_KS,
    attack_report,
    early_detection,
    evaluate,
    landscape_scan,
    write_early_detection_csv,
)
from .model import HierarchicalModel, load_checkpoint, load_pretrained_embeddings, save_checkpoint
from .training import HatConfig, NumericError, train


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's default 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunConfig:
    """Resolved settings of one command; serializes to a flat JSON object."""

    data: str = ""
    data_format: str = dp.FLAT_JSONL
    out: str = "run"
    seed: int = 0
    mode: str = "full-hat"
    eps_post: float = 1.0
    eps_event: float = 0.3
    alpha: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    optimizer: str = "adam"
    dropout: float = 0.5
    clip_norm: float = 5.0
    embedding_dim: int = 32
    post_hidden: int = 32
    event_hidden: int = 32
    vocab_size: int = 80000
    max_post_tokens: int = 64
    max_event_posts: int = 128
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    embeddings: str = ""

    def to_hat_config(self) -> HatConfig:
        return HatConfig(
            eps_post=self.eps_post, eps_event=self.eps_event, alpha=self.alpha,
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience, seed=self.seed,
            mode=self.mode, optimizer=self.optimizer, dropout=self.dropout,
            clip_norm=self.clip_norm if self.clip_norm > 0 else None,
        )

    @property
    def split_ratios(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_val, self.split_test)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults <- config file <- explicit flags, in that order."""
    values = dataclasses.asdict(RunConfig())
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}") from exc
        unknown = set(loaded) - set(values)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for key in values:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    config = RunConfig(**values)
    try:
        config.to_hat_config().validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return config


def _write_resolved(config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True)
    (out_dir / "config.json").write_text(payload + "\n", encoding="utf-8")


def _load_corpus(config: RunConfig) -> list[dp.Event]:
    if not config.data:
        raise UsageError("--data is required")
    events = dp.load_events(config.data, config.data_format)
    events = dp.tokenize_events(events)
    if not events:
        raise DataError(f"no usable events in {config.data}")
    return events


def _prepare_splits(config: RunConfig, events):
    train_ev, val_ev, test_ev = dp.split(events, config.split_ratios, seed=config.seed)
    vocab = dp.build_vocab(train_ev, max_size=config.vocab_size)
    encode = lambda evs: dp.encode_events(
        evs, vocab, config.max_post_tokens, config.max_event_posts
    )
    return encode(train_ev), encode(val_ev), encode(test_ev), vocab


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out_dir = Path(config.out)
    _write_resolved(config, out_dir)
    events = _load_corpus(config)
    train_ev, val_ev, test_ev, vocab = _prepare_splits(config, events)

    model = HierarchicalModel.create(
        vocab_size=vocab.size, embedding_dim=config.embedding_dim,
        post_hidden=config.post_hidden, event_hidden=config.event_hidden,
        seed=config.seed,
    )
    if config.embeddings:
        matched = load_pretrained_embeddings(config.embeddings, vocab, model.embedding)
        print(f"loaded pretrained vectors for {matched} tokens")

    log_path = out_dir / "train.log"
    with log_path.open("w", encoding="utf-8") as log_file:
        def log_fn(line: str) -> None:
            log_file.write(line + "\n")
            log_file.flush()
            print(line)

        state = train(model, train_ev, val_ev, config.to_hat_config(), log_fn=log_fn)

    checkpoint_path = out_dir / "checkpoint.npz"
    save_checkpoint(checkpoint_path, model, vocab, dataclasses.asdict(config))
    test_metrics = evaluate(model, test_ev, batch_size=config.batch_size)
    summary = {
        "best_val_accuracy": state.best_val_accuracy,
        "epochs_run": state.epochs_run,
        "stopped_early": state.stopped_early,
        "test": test_metrics.to_dict(),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"checkpoint: {checkpoint_path}")
    print(f"best_val_accuracy={state.best_val_accuracy:.4f} "
          f"test_accuracy={test_metrics.accuracy:.4f}")
    return 0


def _load_for_eval(args: argparse.Namespace):
    """Checkpoint plus the requested slice of the given corpus."""
    model, vocab, stored = load_checkpoint(args.checkpoint)
    stored_config = RunConfig(**{k: v for k, v in stored.items()
                                 if k in {f.name for f in dataclasses.fields(RunConfig)}})
    data_path = args.data or stored_config.data
    if not data_path:
        raise UsageError("--data is required (checkpoint carries no data path)")
    fmt = args.data_format or stored_config.data_format
    events = dp.tokenize_events(dp.load_events(data_path, fmt))
    if not events:
        raise DataError(f"no usable events in {data_path}")
    split_name = getattr(args, "split", "all") or "all"
    if split_name != "all":
        parts = dict(zip(("train", "val", "test"),
                         dp.split(events, stored_config.split_ratios, seed=stored_config.seed)))
        events = parts[split_name]
    events = dp.encode_events(events, vocab, stored_config.max_post_tokens,
                              stored_config.max_event_posts)
    return model, events, stored_config


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        key: (str(value) if isinstance(value, Path) else value)
        for key, value in vars(args).items()
        if key != "func" and value is not None
    }
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True,
                                                default=str) + "\n", encoding="utf-8")
    return out


def cmd_eval(args: argparse.Namespace) -> int:
    model, events, _ = _load_for_eval(args)
    metrics = evaluate(model, events)
    out_dir = _out_dir(args)
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    for key, value in metrics.to_dict().items():
        if key != "confusion":
            print(f"{key}={value:.4f}")
    print(f"confusion tp={metrics.tp} fp={metrics.fp} tn={metrics.tn} fn={metrics.fn}")

    if args.early_detection:
        rows = early_detection(model, events, DEFAULT_EARLY_KS)
        csv_path = out_dir / "early_detection.csv"
        write_early_detection_csv(csv_path, rows)
        print(f"early-detection curve: {csv_path}")
    return 0


def cmd_attack(args: argparse.Namespace) -> int:
    model, events, _ = _load_for_eval(args)
    report = attack_report(model, events, args.eps)
    out_dir = _out_dir(args)
    (out_dir / "attack.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    print(f"clean_accuracy={report.clean_accuracy:.4f} "
          f"attacked_accuracy={report.attacked_accuracy:.4f} "
          f"degradation={report.degradation:.4f}")
    return 0


def cmd_landscape(args: argparse.Namespace) -> int:
    model, events, _ = _load_for_eval(args)
    checkpoint_id = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()[:12]
    grid = landscape_scan(
        model, events, value_range=(-args.range, args.range), steps=args.steps,
        seed=args.dir_seed, sample_size=args.sample, checkpoint_id=checkpoint_id,
    )
    out_dir = _out_dir(args)
    grid_path = out_dir / "landscape.csv"
    grid.write(grid_path)
    print(f"landscape grid: {grid_path} (center loss {grid.center_loss():.6f})")
    return 0


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        num_events=args.events,
        signal_strength=args.signal,
        label_noise=args.noise,
        posts_per_event=(args.posts_min, args.posts_max),
        words_per_post=(args.words_min, args.words_max),
        seed=args.seed,
    )
    events = dp.gen_synthetic(spec)
    dp.write_jsonl(args.out, events)
    rumors = sum(e.label for e in events)
    print(f"wrote {len(events)} events ({rumors} rumors) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hieradv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train_p = sub.add_parser("train", help="train a model")
    train_p.add_argument("--config", help="JSON config file (flags override it)")
    train_p.add_argument("--data")
    train_p.add_argument("--data-format", dest="data_format",
                         choices=(dp.FLAT_JSONL, dp.EVENT_TREE_JSON))
    train_p.add_argument("--out")
    train_p.add_argument("--seed", type=int)
    train_p.add_argument("--mode", choices=("standard", "post-adv-only",
                                            "event-adv-only", "full-hat"))
    train_p.add_argument("--eps-p", dest="eps_post", type=float)
    train_p.add_argument("--eps-e", dest="eps_event", type=float)
    train_p.add_argument("--alpha", type=float)
    train_p.add_argument("--lr", dest="learning_rate", type=float)
    train_p.add_argument("--batch", dest="batch_size", type=int)
    train_p.add_argument("--epochs", dest="max_epochs", type=int)
    train_p.add_argument("--patience", type=int)
    train_p.add_argument("--optimizer", choices=("adam", "sgd"))
    train_p.add_argument("--dropout", type=float)
    train_p.add_argument("--clip-norm", dest="clip_norm", type=float)
    train_p.add_argument("--emb-dim", dest="embedding_dim", type=int)
    train_p.add_argument("--post-hidden", dest="post_hidden", type=int)
    train_p.add_argument("--event-hidden", dest="event_hidden", type=int)
    train_p.add_argument("--vocab-size", dest="vocab_size", type=int)
    train_p.add_argument("--embeddings", help="pretrained word-vector text file")
    train_p.set_defaults(func=cmd_train)

    def eval_like(name: str, help_: str):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data")
        p.add_argument("--data-format", dest="data_format",
                       choices=(dp.FLAT_JSONL, dp.EVENT_TREE_JSON))
        p.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
        p.add_argument("--out")
        return p

    eval_p = eval_like("eval", "evaluate a checkpoint")
    eval_p.add_argument("--early-detection", action="store_true",
                        help="also write the k-sweep accuracy CSV")
    eval_p.set_defaults(func=cmd_eval)

    attack_p = eval_like("attack", "embedding-space gradient attack")
    attack_p.add_argument("--eps", type=float, required=True)
    attack_p.set_defaults(func=cmd_attack)

    landscape_p = eval_like("landscape", "loss-landscape grid scan")
    landscape_p.add_argument("--range", type=float, default=1.0)
    landscape_p.add_argument("--steps", type=int, default=51)
    landscape_p.add_argument("--dir-seed", dest="dir_seed", type=int, default=0)
    landscape_p.add_argument("--sample", type=int, default=256)
    landscape_p.set_defaults(func=cmd_landscape)

    gen_p = sub.add_parser("gen-synthetic", help="generate a synthetic corpus")
    gen_p.add_argument("--events", type=int, required=True)
    gen_p.add_argument("--signal", type=float, default=0.6)
    gen_p.add_argument("--noise", type=float, default=0.0)
    gen_p.add_argument("--seed", type=int, default=0)
    gen_p.add_argument("--posts-min", type=int, default=3)
    gen_p.add_argument("--posts-max", type=int, default=9)
    gen_p.add_argument("--words-min", type=int, default=4)
    gen_p.add_argument("--words-max", type=int, default=12)
    gen_p.add_argument("--out", required=True)
    gen_p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
