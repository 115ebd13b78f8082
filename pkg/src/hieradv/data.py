"""Event/post ingestion, tokenization, vocabulary, splits, batching, and a
synthetic corpus generator for desk-scale experiments.

Everything here is a pure function of its inputs and, where randomness is
involved, an explicit seed.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

RUMOR = 1
NON_RUMOR = 0

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

EVENT_TREE_JSON = "event-tree-json"
FLAT_JSONL = "flat-jsonl"


class DataError(Exception):
    """Malformed or unusable input data."""


@dataclass
class Post:
    id: str
    text: str
    timestamp: int
    is_source: bool = False
    terms: list[str] | None = None    # token strings, filled by tokenize_events
    tokens: list[int] | None = None   # vocabulary ids, filled by encode_events


@dataclass
class Event:
    id: str
    posts: list[Post]
    label: int  # RUMOR or NON_RUMOR


@dataclass
class Batch:
    """One padded mini-batch: ids plus boolean masks at both levels."""

    token_ids: np.ndarray   # [events, max_posts, max_tokens] int64, PAD_ID padded
    word_mask: np.ndarray   # [events, max_posts, max_tokens] float64 in {0, 1}
    post_mask: np.ndarray   # [events, max_posts] float64 in {0, 1}
    labels: np.ndarray      # [events] int64
    event_ids: list[str]

    @property
    def num_events(self) -> int:
        return self.token_ids.shape[0]


_URL_RE = re.compile(r"https?://\S+|www\.\S+")
_USER_RE = re.compile(r"@\w+")
_PIECE_RE = re.compile(r"<url>|<user>|[a-z0-9_]+|[^\x00-\x7f]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation boundaries.

    URLs collapse to ``<url>``, user mentions to ``<user>``, pure numbers to
    ``<num>``; a hashtag keeps its word. Non-ASCII text (no segmenter bundled)
    splits per character. Punctuation only delimits, it is not emitted.
    """
    text = _USER_RE.sub(" <user> ", _URL_RE.sub(" <url> ", text.lower()))
    out = []
    for match in _PIECE_RE.finditer(text):
        token = match.group()
        out.append("<num>" if token.isdigit() else token)
    return out


def tokenize_events(events: list[Event]) -> list[Event]:
    """Tokenize every post; drop posts that tokenize empty.

    Events that lose their source post (or all posts) are dropped with one
    warning naming the count.
    """
    kept: list[Event] = []
    dropped = 0
    for event in events:
        posts = []
        for post in event.posts:
            terms = tokenize(post.text)
            if terms:
                posts.append(replace(post, terms=terms))
        if posts and posts[0].is_source:
            kept.append(replace(event, posts=posts))
        else:
            dropped += 1
    if dropped:
        logger.warning("dropped %d event(s) with no usable source post", dropped)
    return kept


@dataclass
class Vocabulary:
    """token -> dense id map; id 0 is padding, id 1 unknown."""

    index: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.index) + 2

    def id_for(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, terms: list[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in terms]

    def to_tokens(self) -> list[str]:
        """Tokens in id order, padding and unknown included."""
        ordered = sorted(self.index.items(), key=lambda kv: kv[1])
        return [PAD_TOKEN, UNK_TOKEN] + [token for token, _ in ordered]

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocabulary":
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise DataError("vocabulary list must start with padding and unknown tokens")
        return cls({token: i + 2 for i, token in enumerate(tokens[2:])})


def build_vocab(train_events: list[Event], max_size: int = 80000) -> Vocabulary:
    """Frequency-ranked vocabulary from the training split only.

    Ties in frequency break lexicographically, so the result is deterministic
    for a given corpus.
    """
    counts: Counter[str] = Counter()
    for event in train_events:
        for post in event.posts:
            if post.terms is None:
                raise DataError("build_vocab requires tokenized events (run tokenize_events)")
            counts.update(post.terms)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max_size - 2]
    return Vocabulary({token: i + 2 for i, (token, _) in enumerate(ranked)})


def encode_events(events: list[Event], vocab: Vocabulary,
                  max_post_tokens: int = 64, max_event_posts: int = 128) -> list[Event]:
    """Map token strings to ids, applying the post/event length caps."""
    out = []
    for event in events:
        posts = [
            replace(post, tokens=vocab.encode(post.terms)[:max_post_tokens])
            for post in event.posts[:max_event_posts]
        ]
        out.append(replace(event, posts=posts))
    return out


def _parse_label(raw) -> int | None:
    if isinstance(raw, bool):
        return RUMOR if raw else NON_RUMOR
    if isinstance(raw, (int, float)) and raw in (0, 1):
        return int(raw)
    if isinstance(raw, str):
        low = raw.strip().lower()
        if low in ("rumor", "rumour", "rumours", "rumors", "1", "true"):
            return RUMOR
        if low in ("non-rumor", "non-rumour", "nonrumor", "nonrumour",
                   "non-rumours", "non-rumors", "0", "false"):
            return NON_RUMOR
    return None


def _parse_timestamp(raw) -> int:
    if raw is None:
        return 0
    if isinstance(raw, bool):
        return 0
    if isinstance(raw, (int, float)):
        return int(raw)
    text = str(raw).strip()
    if text.isdigit():
        return int(text)
    for fmt in ("%a %b %d %H:%M:%S %z %Y",):
        try:
            return int(datetime.strptime(text, fmt).timestamp())
        except ValueError:
            pass
    try:
        return int(datetime.fromisoformat(text.replace("Z", "+00:00")).timestamp())
    except ValueError:
        return 0


def _order_posts(source: Post, replies: list[Post]) -> list[Post]:
    replies = sorted(replies, key=lambda p: (p.timestamp, p.id))
    return [source] + replies


def _load_flat_jsonl(path: Path) -> tuple[list[Event], int]:
    events: list[Event] = []
    skipped = 0
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            label = _parse_label(obj.get("label"))
            raw_posts = obj.get("posts") or []
            if label is None or not raw_posts:
                skipped += 1
                continue
            posts = []
            for i, rp in enumerate(raw_posts):
                posts.append(Post(
                    id=str(rp.get("id", f"{obj.get('id', lineno)}-{i}")),
                    text=str(rp.get("text", "")),
                    timestamp=_parse_timestamp(rp.get("created_at")),
                    is_source=bool(rp.get("is_source", i == 0)),
                ))
            sources = [p for p in posts if p.is_source]
            if len(sources) != 1:
                skipped += 1
                continue
            replies = [p for p in posts if not p.is_source]
            events.append(Event(
                id=str(obj.get("id", f"line{lineno}")),
                posts=_order_posts(sources[0], replies),
                label=label,
            ))
    return events, skipped


def _read_tweet(path: Path) -> Post | None:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, OSError) as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    text = obj.get("text") or obj.get("full_text")
    if text is None:
        return None
    return Post(
        id=str(obj.get("id_str") or obj.get("id") or path.stem),
        text=str(text),
        timestamp=_parse_timestamp(obj.get("created_at")),
    )


def _tree_label(event_dir: Path) -> int | None:
    for name in ("annotation.json", "label.json"):
        candidate = event_dir / name
        if candidate.exists():
            try:
                obj = json.loads(candidate.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise DataError(f"{candidate}: invalid JSON ({exc})") from exc
            label = _parse_label(obj.get("is_rumour", obj.get("label")))
            if label is not None:
                return label
    for part in reversed(event_dir.parts):
        label = _parse_label(part)
        if label is not None:
            return label
    return None


def _load_event_tree(root: Path) -> tuple[list[Event], int]:
    events: list[Event] = []
    skipped = 0
    source_dirs = sorted(root.rglob("source-tweets"))
    if not source_dirs and (root / "source-tweets").exists():
        source_dirs = [root / "source-tweets"]
    for src_dir in source_dirs:
        event_dir = src_dir.parent
        tweet_files = sorted(src_dir.glob("*.json"))
        preferred = src_dir / f"{event_dir.name}.json"
        if preferred.exists():
            tweet_files = [preferred]
        if not tweet_files:
            skipped += 1
            continue
        source = _read_tweet(tweet_files[0])
        label = _tree_label(event_dir)
        if source is None or label is None:
            skipped += 1
            continue
        source.is_source = True
        replies = []
        for sub in ("reactions", "replies"):
            for reply_file in sorted((event_dir / sub).glob("*.json")) if (event_dir / sub).exists() else []:
                reply = _read_tweet(reply_file)
                if reply is not None:
                    replies.append(reply)
        events.append(Event(id=event_dir.name, posts=_order_posts(source, replies), label=label))
    return events, skipped


def load_events(path: str | Path, fmt: str = FLAT_JSONL) -> list[Event]:
    """Load events from disk; source first, replies in timestamp order.

    Events without a usable label are skipped (one warning names the count);
    a structurally malformed file raises :class:`DataError`.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"data path does not exist: {path}")
    if fmt == FLAT_JSONL:
        events, skipped = _load_flat_jsonl(path)
    elif fmt == EVENT_TREE_JSON:
        events, skipped = _load_event_tree(path)
    else:
        raise ValueError(f"unknown data format: {fmt!r}")
    if skipped:
        logger.warning("skipped %d event(s) without a label or source post", skipped)
    return events


def split(events: list[Event], ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> tuple[list[Event], list[Event], list[Event]]:
    """Seeded shuffle-and-cut split with a label-balance guard.

    Each split's rumor fraction must sit within 5 percentage points of the
    full corpus; violating draws are retried up to 100 times, after which the
    split is stratified by label.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    if len(events) < 10:
        raise DataError(f"need at least 10 events to split, got {len(events)}")

    n = len(events)
    cut1 = int(round(n * ratios[0]))
    cut2 = cut1 + int(round(n * ratios[1]))
    overall = sum(e.label for e in events) / n

    def balanced(parts: tuple[list[Event], ...]) -> bool:
        for part in parts:
            if not part:
                return False
            frac = sum(e.label for e in part) / len(part)
            if abs(frac - overall) > 0.05:
                return False
        return True

    for attempt in range(100):
        rng = np.random.default_rng([seed, attempt])
        order = rng.permutation(n)
        shuffled = [events[i] for i in order]
        parts = (shuffled[:cut1], shuffled[cut1:cut2], shuffled[cut2:])
        if balanced(parts):
            return parts

    # Stratified fallback: per-label shuffle, proportional allocation.
    rng = np.random.default_rng([seed, 100])
    groups: dict[int, list[Event]] = {}
    for event in events:
        groups.setdefault(event.label, []).append(event)
    train: list[Event] = []
    val: list[Event] = []
    test: list[Event] = []
    for label in sorted(groups):
        group = groups[label]
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        g1 = int(round(len(group) * ratios[0]))
        g2 = min(g1 + int(round(len(group) * ratios[1])), len(group))
        train += shuffled[:g1]
        val += shuffled[g1:g2]
        test += shuffled[g2:]
    return train, val, test


@dataclass
class SyntheticSpec:
    """Parameters for the label-signal synthetic corpus.

    ``signal_strength`` is the probability that a post carries one token from
    its event label's indicative pool; all other words are neutral.  The
    recorded label flips with probability ``label_noise`` after the posts are
    generated. Token pools are disjoint by construction.
    """

    num_events: int
    signal_strength: float = 0.6
    label_noise: float = 0.0
    posts_per_event: tuple[int, int] = (3, 9)
    words_per_post: tuple[int, int] = (4, 12)
    rumor_pool: int = 25
    nonrumor_pool: int = 25
    neutral_pool: int = 200
    seed: int = 0

    def pools(self) -> tuple[list[str], list[str], list[str]]:
        rumor = [f"alarm{i:03d}" for i in range(self.rumor_pool)]
        nonrumor = [f"calm{i:03d}" for i in range(self.nonrumor_pool)]
        neutral = [f"word{i:03d}" for i in range(self.neutral_pool)]
        return rumor, nonrumor, neutral


def gen_synthetic(spec: SyntheticSpec) -> list[Event]:
    """Generate a corpus fully determined by ``spec`` (including its seed)."""
    if not 0.0 <= spec.signal_strength <= 1.0:
        raise ValueError(f"signal_strength must be in [0, 1], got {spec.signal_strength}")
    if not 0.0 <= spec.label_noise <= 1.0:
        raise ValueError(f"label_noise must be in [0, 1], got {spec.label_noise}")
    rumor_pool, nonrumor_pool, neutral_pool = spec.pools()
    rng = np.random.default_rng(spec.seed)
    events = []
    for e in range(spec.num_events):
        true_label = RUMOR if rng.random() < 0.5 else NON_RUMOR
        n_posts = int(rng.integers(spec.posts_per_event[0], spec.posts_per_event[1] + 1))
        posts = []
        for p in range(n_posts):
            n_words = int(rng.integers(spec.words_per_post[0], spec.words_per_post[1] + 1))
            words = [neutral_pool[rng.integers(len(neutral_pool))] for _ in range(n_words)]
            if rng.random() < spec.signal_strength:
                pool = rumor_pool if true_label == RUMOR else nonrumor_pool
                words[rng.integers(n_words)] = pool[rng.integers(len(pool))]
            posts.append(Post(
                id=f"e{e:05d}-p{p:03d}",
                text=" ".join(words),
                timestamp=p,
                is_source=(p == 0),
            ))
        label = true_label
        if rng.random() < spec.label_noise:
            label = RUMOR + NON_RUMOR - label
        events.append(Event(id=f"e{e:05d}", posts=posts, label=label))
    return events


def write_jsonl(path: str | Path, events: list[Event]) -> None:
    """Write events in the flat-jsonl interchange format."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for event in events:
            obj = {
                "id": event.id,
                "label": "rumor" if event.label == RUMOR else "non-rumor",
                "posts": [
                    {
                        "id": post.id,
                        "text": post.text,
                        "created_at": post.timestamp,
                        "is_source": post.is_source,
                    }
                    for post in event.posts
                ],
            }
            handle.write(json.dumps(obj, ensure_ascii=False) + "\n")


def batch(events: list[Event], batch_size: int, pad_id: int = PAD_ID) -> list[Batch]:
    """Group consecutive events into padded blocks with masks at both levels."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    batches = []
    for start in range(0, len(events), batch_size):
        chunk = events[start:start + batch_size]
        for event in chunk:
            if any(post.tokens is None for post in event.posts):
                raise DataError("batch requires encoded events (run encode_events)")
        max_posts = max(len(e.posts) for e in chunk)
        max_tokens = max(len(p.tokens) for e in chunk for p in e.posts)
        n = len(chunk)
        ids = np.full((n, max_posts, max_tokens), pad_id, dtype=np.int64)
        word_mask = np.zeros((n, max_posts, max_tokens), dtype=np.float64)
        post_mask = np.zeros((n, max_posts), dtype=np.float64)
        labels = np.zeros(n, dtype=np.int64)
        for i, event in enumerate(chunk):
            labels[i] = event.label
            for j, post in enumerate(event.posts):
                ids[i, j, : len(post.tokens)] = post.tokens
                word_mask[i, j, : len(post.tokens)] = 1.0
                post_mask[i, j] = 1.0
        batches.append(Batch(ids, word_mask, post_mask, labels, [e.id for e in chunk]))
    return batches


TOKENIZED_FORMAT = "tokenized-events"
TOKENIZED_VERSION = 1


def save_tokenized(path: str | Path, events: list[Event], seed: int = 0) -> None:
    """Cache tokenized events as versioned, seed-stamped JSON lines."""
    path = Path(path)
    header = {"format": TOKENIZED_FORMAT, "version": TOKENIZED_VERSION, "seed": seed}
    with path.open("w", encoding="utf-8") as handle:
        handle.write(json.dumps(header) + "\n")
        for event in events:
            obj = {
                "id": event.id,
                "label": event.label,
                "posts": [
                    {
                        "id": p.id,
                        "timestamp": p.timestamp,
                        "is_source": p.is_source,
                        "terms": p.terms,
                    }
                    for p in event.posts
                ],
            }
            handle.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_tokenized(path: str | Path) -> tuple[list[Event], int]:
    """Load a cache written by :func:`save_tokenized`; returns (events, seed)."""
    path = Path(path)
    with path.open(encoding="utf-8") as handle:
        header = json.loads(handle.readline())
        if header.get("format") != TOKENIZED_FORMAT or header.get("version") != TOKENIZED_VERSION:
            raise DataError(f"{path}: not a tokenized-events cache (or wrong version)")
        events = []
        for line in handle:
            obj = json.loads(line)
            posts = [
                Post(
                    id=p["id"],
                    text=" ".join(p["terms"]),
                    timestamp=p["timestamp"],
                    is_source=p["is_source"],
                    terms=list(p["terms"]),
                )
                for p in obj["posts"]
            ]
            events.append(Event(id=obj["id"], posts=posts, label=int(obj["label"])))
    return events, int(header.get("seed", 0))
