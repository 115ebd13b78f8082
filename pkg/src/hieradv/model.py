"""Two-level bidirectional LSTM classifier with perturbation hooks.

Word vectors feed a post-level BiLSTM whose joined final states become post
vectors; those feed an event-level BiLSTM whose joined final states become
the event vector.  An auxiliary head classifies every post (posts inherit
their event's label) and a primary head classifies the event.  The forward
pass registers the word-vector block and the post-vector block as gradient
targets so that input-space perturbations can be built from one backward
sweep and injected additively on a later pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, ShapeError, Tape, Tensor
from .data import Batch, DataError, Event, Vocabulary

# Registry names for the two perturbation targets.
WORD_VECTORS = "word_vectors"
POST_VECTORS = "post_vectors"

# Probabilities are clamped to this band before any log.
PROB_FLOOR = 1e-12

CHECKPOINT_FORMAT = "hieradv-checkpoint"
CHECKPOINT_VERSION = 1

# Column layout of classifier outputs: index 0 is the rumor probability.
RUMOR_COLUMN = 0


@dataclass
class EmbeddingTable:
    """Token embedding matrix; row 0 is the padding row and stays all-zero."""

    weights: np.ndarray  # [vocab_size, dim]

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class BiLstmParams:
    """One bidirectional LSTM layer.

    Gate columns are packed as [input | forget | candidate | output], so
    ``w_x_*`` is [input_dim, 4*hidden], ``w_h_*`` is [hidden, 4*hidden] and
    ``b_*`` is [4*hidden].  The forget-gate slice of each bias starts at 1.
    """

    input_dim: int
    hidden_dim: int
    w_x_fw: np.ndarray
    w_h_fw: np.ndarray
    b_fw: np.ndarray
    w_x_bw: np.ndarray
    w_h_bw: np.ndarray
    b_bw: np.ndarray

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim


@dataclass
class ClassifierHead:
    weight: np.ndarray  # [2, in_dim]
    bias: np.ndarray    # [2]


@dataclass
class HierarchicalModel:
    embedding: EmbeddingTable
    post_rnn: BiLstmParams
    event_rnn: BiLstmParams
    post_head: ClassifierHead
    event_head: ClassifierHead

    def __post_init__(self):
        if self.event_rnn.input_dim != self.post_rnn.output_dim:
            raise ShapeError(
                f"event encoder expects input {self.post_rnn.output_dim}, "
                f"got {self.event_rnn.input_dim}"
            )

    @classmethod
    def create(cls, vocab_size: int, embedding_dim: int, post_hidden: int,
               event_hidden: int, seed: int = 0) -> "HierarchicalModel":
        """Seeded initialization: weights uniform in [-0.1, 0.1], forget bias 1."""
        rng = np.random.default_rng([seed, 0])

        def uniform(*shape: int) -> np.ndarray:
            return rng.uniform(-0.1, 0.1, shape).astype(DTYPE)

        def rnn(input_dim: int, hidden: int) -> BiLstmParams:
            arrays = {}
            for tag in ("fw", "bw"):
                arrays[f"w_x_{tag}"] = uniform(input_dim, 4 * hidden)
                arrays[f"w_h_{tag}"] = uniform(hidden, 4 * hidden)
                b = uniform(4 * hidden)
                b[hidden: 2 * hidden] = 1.0
                arrays[f"b_{tag}"] = b
            return BiLstmParams(input_dim, hidden, **arrays)

        table = uniform(vocab_size, embedding_dim)
        table[0] = 0.0
        return cls(
            embedding=EmbeddingTable(table),
            post_rnn=rnn(embedding_dim, post_hidden),
            event_rnn=rnn(2 * post_hidden, event_hidden),
            post_head=ClassifierHead(uniform(2, 2 * post_hidden), uniform(2)),
            event_head=ClassifierHead(uniform(2, 2 * event_hidden), uniform(2)),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed by stable names, in a fixed order."""
        out = {"embedding.weights": self.embedding.weights}
        for prefix, rnn in (("post_rnn", self.post_rnn), ("event_rnn", self.event_rnn)):
            for tag in ("fw", "bw"):
                out[f"{prefix}.{tag}.w_x"] = getattr(rnn, f"w_x_{tag}")
                out[f"{prefix}.{tag}.w_h"] = getattr(rnn, f"w_h_{tag}")
                out[f"{prefix}.{tag}.b"] = getattr(rnn, f"b_{tag}")
        out["post_head.weight"] = self.post_head.weight
        out["post_head.bias"] = self.post_head.bias
        out["event_head.weight"] = self.event_head.weight
        out["event_head.bias"] = self.event_head.bias
        return out

    def copy_parameters(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.parameters().items()}

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(values) != set(params):
            raise ValueError("parameter name sets differ")
        for name, arr in params.items():
            np.copyto(arr, values[name])

    def register(self, tape: Tape, trainable: bool = True) -> dict[str, Tensor]:
        """Place every parameter on ``tape`` (as leaves, or constants for eval)."""
        if trainable:
            return {name: tape.leaf(arr, name) for name, arr in self.parameters().items()}
        return {name: tape.constant(arr) for name, arr in self.parameters().items()}

    @property
    def dims(self) -> dict[str, int]:
        return {
            "vocab_size": self.embedding.vocab_size,
            "embedding_dim": self.embedding.dim,
            "post_hidden": self.post_rnn.hidden_dim,
            "event_hidden": self.event_rnn.hidden_dim,
        }


@dataclass
class DropoutMasks:
    """Inverted-dropout keep masks, drawn once per batch and shared by every
    pass over that batch so that matched passes stay bitwise comparable."""

    post_keep: np.ndarray   # [events, max_posts, 2*post_hidden]
    event_keep: np.ndarray  # [events, 2*event_hidden]


def make_dropout_masks(model: HierarchicalModel, batch_: Batch, rate: float,
                       rng: np.random.Generator) -> DropoutMasks | None:
    if rate <= 0.0:
        return None
    if not rate < 1.0:
        raise ValueError(f"dropout rate must be below 1, got {rate}")
    keep = 1.0 - rate
    n, max_posts = batch_.post_mask.shape
    post = (rng.random((n, max_posts, model.post_rnn.output_dim)) < keep) / keep
    event = (rng.random((n, model.event_rnn.output_dim)) < keep) / keep
    return DropoutMasks(post_keep=post, event_keep=event)


def embed_event(event: Event, table: EmbeddingTable) -> list[np.ndarray]:
    """One [len(post), dim] word-vector block per post; padding ids map to row 0."""
    blocks = []
    for post in event.posts:
        if post.tokens is None:
            raise DataError("embed_event requires encoded posts")
        for tid in post.tokens:
            if not 0 <= tid < table.vocab_size:
                raise ValueError(
                    f"token id {tid} out of range for vocabulary of {table.vocab_size}"
                )
        blocks.append(table.weights[np.asarray(post.tokens, dtype=np.int64)].copy())
    return blocks


def _lstm_direction(tape: Tape, x: Tensor, mask: np.ndarray, w_x: Tensor,
                    w_h: Tensor, b: Tensor, reverse: bool) -> Tensor:
    """One LSTM direction over x [batch, steps, input]; returns final hidden.

    Masked steps carry cell and hidden state unchanged, so padded positions
    never advance the recurrence and the final state equals the state at the
    last real step of each row.  The packed gate weights are sliced once up
    front; the recurrence then works entirely on [batch, hidden] blocks, which
    keeps per-step temporaries small.
    """
    n, steps, input_dim = x.shape
    hidden = w_h.shape[0]
    wx = [ad.narrow(w_x, 1, k * hidden, hidden) for k in range(4)]
    wh = [ad.narrow(w_h, 1, k * hidden, hidden) for k in range(4)]
    bias = [ad.narrow(b, 0, k * hidden, hidden) for k in range(4)]
    h = tape.constant(np.zeros((n, hidden), dtype=DTYPE))
    c = tape.constant(np.zeros((n, hidden), dtype=DTYPE))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        x_t = ad.reshape(ad.narrow(x, 1, t, 1), (n, input_dim))
        pre = [
            ad.add(ad.add(ad.matmul(x_t, wx[k]), ad.matmul(h, wh[k])), bias[k])
            for k in range(4)
        ]
        gate_in = ad.sigmoid(pre[0])
        gate_forget = ad.sigmoid(pre[1])
        candidate = ad.tanh(pre[2])
        gate_out = ad.sigmoid(pre[3])
        c_next = ad.add(ad.mul(gate_forget, c), ad.mul(gate_in, candidate))
        h_next = ad.mul(gate_out, ad.tanh(c_next))
        col = mask[:, t]
        if col.all():
            c, h = c_next, h_next
        else:
            keep = col.reshape(n, 1)
            carry = 1.0 - keep
            c = ad.add(ad.mul(c_next, keep), ad.mul(c, carry))
            h = ad.add(ad.mul(h_next, keep), ad.mul(h, carry))
    return h


def _encode_sequences(tape: Tape, leaves: dict[str, Tensor], prefix: str,
                      x: Tensor, mask: np.ndarray) -> Tensor:
    """BiLSTM over x [batch, steps, input]; joined final states [batch, 2*hidden]."""
    forward_h = _lstm_direction(
        tape, x, mask, leaves[f"{prefix}.fw.w_x"], leaves[f"{prefix}.fw.w_h"],
        leaves[f"{prefix}.fw.b"], reverse=False,
    )
    backward_h = _lstm_direction(
        tape, x, mask, leaves[f"{prefix}.bw.w_x"], leaves[f"{prefix}.bw.w_h"],
        leaves[f"{prefix}.bw.b"], reverse=True,
    )
    return ad.concat([forward_h, backward_h], axis=1)


def encode_post(model: HierarchicalModel, word_vectors: np.ndarray,
                perturbation: np.ndarray | None = None,
                length: int | None = None) -> np.ndarray:
    """Encode one post's word-vector block into its joined final states.

    ``length`` marks the real prefix when the block carries padding rows.
    """
    wv = np.asarray(word_vectors, dtype=DTYPE)
    if wv.ndim != 2 or wv.shape[1] != model.post_rnn.input_dim:
        raise ShapeError(
            f"encode_post: expected [steps, {model.post_rnn.input_dim}], got {wv.shape}"
        )
    if perturbation is not None:
        pert = np.asarray(perturbation, dtype=DTYPE)
        if pert.shape != wv.shape:
            raise ShapeError(
                f"perturbation shape {pert.shape} does not match word vectors {wv.shape}"
            )
        wv = wv + pert
    steps = wv.shape[0]
    mask = np.ones((1, steps), dtype=DTYPE)
    if length is not None:
        mask[0, length:] = 0.0
    tape = Tape()
    leaves = model.register(tape, trainable=False)
    out = _encode_sequences(tape, leaves, "post_rnn", tape.constant(wv[None]), mask)
    return out.data.reshape(-1)


def encode_event(model: HierarchicalModel, post_vectors: np.ndarray,
                 perturbation: np.ndarray | None = None,
                 length: int | None = None) -> np.ndarray:
    """Encode a [num_posts, 2*post_hidden] block into the event vector."""
    pv = np.asarray(post_vectors, dtype=DTYPE)
    if pv.ndim != 2 or pv.shape[1] != model.event_rnn.input_dim:
        raise ShapeError(
            f"encode_event: expected [posts, {model.event_rnn.input_dim}], got {pv.shape}"
        )
    if pv.shape[0] == 0:
        raise ValueError("encode_event: an event must contain at least one post")
    if perturbation is not None:
        pert = np.asarray(perturbation, dtype=DTYPE)
        if pert.shape != pv.shape:
            raise ShapeError(
                f"perturbation shape {pert.shape} does not match post vectors {pv.shape}"
            )
        pv = pv + pert
    mask = np.ones((1, pv.shape[0]), dtype=DTYPE)
    if length is not None:
        mask[0, length:] = 0.0
    tape = Tape()
    leaves = model.register(tape, trainable=False)
    out = _encode_sequences(tape, leaves, "event_rnn", tape.constant(pv[None]), mask)
    return out.data.reshape(-1)


def classify(vec: np.ndarray, head: ClassifierHead) -> np.ndarray:
    """softmax(W @ vec + b) as a (rumor, non-rumor) probability pair."""
    vec = np.asarray(vec, dtype=DTYPE)
    if vec.shape != (head.weight.shape[1],):
        raise ShapeError(
            f"classify: vector shape {vec.shape} does not match head input "
            f"({head.weight.shape[1]},)"
        )
    logits = head.weight @ vec + head.bias
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def loss_bce(probs: np.ndarray, label: int) -> float:
    """Two-class cross-entropy with probabilities clamped away from {0, 1}."""
    p = np.clip(np.asarray(probs, dtype=DTYPE), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = 1.0 if label == 1 else 0.0
    return float(-(y * np.log(p[RUMOR_COLUMN]) + (1.0 - y) * np.log(p[1 - RUMOR_COLUMN])))


def total_loss(loss_post, loss_event, alpha: float):
    """alpha * post loss + (1 - alpha) * event loss."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"loss weight alpha must be in [0, 1], got {alpha}")
    if isinstance(loss_post, Tensor) or isinstance(loss_event, Tensor):
        return ad.add(ad.scale(loss_post, alpha), ad.scale(loss_event, 1.0 - alpha))
    return alpha * loss_post + (1.0 - alpha) * loss_event


def _label_onehot(labels: np.ndarray) -> np.ndarray:
    y = labels.astype(DTYPE)
    return np.stack([y, 1.0 - y], axis=1)  # column order (rumor, non-rumor)


def _cross_entropy_rows(probs: Tensor, labels: np.ndarray) -> Tensor:
    clamped = ad.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    picked = ad.mul(ad.log(clamped), _label_onehot(labels))
    return ad.scale(ad.sum_(picked, axis=1), -1.0)


def _head_probs(tape: Tape, leaves: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    logits = ad.add(ad.matmul(x, ad.transpose(leaves[f"{prefix}.weight"])),
                    leaves[f"{prefix}.bias"])
    return ad.softmax(logits)


@dataclass
class ForwardResult:
    """Everything one differentiable pass exposes.

    ``word_vectors`` [events, max_posts, max_tokens, dim] and
    ``post_vectors`` [events, max_posts, 2*post_hidden] are the registered
    perturbation targets; gradient maps from ``tape.backward`` carry their
    gradients under those names.
    """

    tape: Tape
    leaves: dict[str, Tensor]
    post_probs: Tensor
    event_probs: Tensor
    loss_post: Tensor
    loss_event: Tensor
    loss_total: Tensor
    word_vectors: Tensor
    post_vectors: Tensor
    batch: Batch

    def predictions(self) -> np.ndarray:
        """Event-level predicted labels (1 = rumor)."""
        probs = self.event_probs.data
        return (probs[:, RUMOR_COLUMN] >= probs[:, 1 - RUMOR_COLUMN]).astype(np.int64)


def forward(model: HierarchicalModel, batch_: Batch,
            r_post: np.ndarray | None = None, r_event: np.ndarray | None = None,
            alpha: float = 0.1, dropout: DropoutMasks | None = None,
            trainable: bool = True, watch_inputs: bool | None = None) -> ForwardResult:
    """Run the full differentiable pipeline over one batch on a fresh tape.

    At most one of ``r_post`` (added to the word-vector block) and
    ``r_event`` (added to the post-vector block) may be supplied; the
    perturbations are constants, so no gradient flows into them.
    """
    if r_post is not None and r_event is not None:
        raise ValueError("supply at most one perturbation per pass")
    if watch_inputs is None:
        watch_inputs = trainable

    n_events, max_posts, max_tokens = batch_.token_ids.shape
    dim = model.embedding.dim
    flat_posts = n_events * max_posts
    if batch_.token_ids.size and batch_.token_ids.max() >= model.embedding.vocab_size:
        raise ValueError(
            f"token id {batch_.token_ids.max()} out of range for vocabulary "
            f"of {model.embedding.vocab_size}"
        )

    tape = Tape()
    leaves = model.register(tape, trainable=trainable)

    emb = ad.select_rows(leaves["embedding.weights"], batch_.token_ids.reshape(-1))
    word_vectors = ad.reshape(emb, (n_events, max_posts, max_tokens, dim))
    if watch_inputs:
        tape.watch(word_vectors, WORD_VECTORS)
    x_words = word_vectors
    if r_post is not None:
        r_post = np.asarray(r_post, dtype=DTYPE)
        if r_post.shape != word_vectors.shape:
            raise ShapeError(
                f"word perturbation shape {r_post.shape} does not match "
                f"{word_vectors.shape}"
            )
        x_words = ad.add(x_words, tape.constant(r_post))

    # The post encoder runs over real posts only; padded slots re-enter as
    # exact zero rows through the scatter, which is what a masked recurrence
    # from a zero initial state would produce for them anyway.
    real_slots = np.flatnonzero(batch_.post_mask.reshape(-1))
    gathered = ad.select_rows(
        ad.reshape(x_words, (flat_posts, max_tokens * dim)), real_slots
    )
    post_in = ad.reshape(gathered, (len(real_slots), max_tokens, dim))
    word_mask = batch_.word_mask.reshape(flat_posts, max_tokens)[real_slots]
    post_real = _encode_sequences(tape, leaves, "post_rnn", post_in, word_mask)
    post_flat = ad.scatter_rows(post_real, real_slots, flat_posts)
    post_vectors = ad.reshape(post_flat, (n_events, max_posts, model.post_rnn.output_dim))
    if watch_inputs:
        tape.watch(post_vectors, POST_VECTORS)

    x_posts = post_vectors
    if r_event is not None:
        r_event = np.asarray(r_event, dtype=DTYPE)
        if r_event.shape != post_vectors.shape:
            raise ShapeError(
                f"post perturbation shape {r_event.shape} does not match "
                f"{post_vectors.shape}"
            )
        x_posts = ad.add(x_posts, tape.constant(r_event))
    if dropout is not None:
        x_posts = ad.mul(x_posts, tape.constant(dropout.post_keep))

    event_vec = _encode_sequences(tape, leaves, "event_rnn", x_posts, batch_.post_mask)
    if dropout is not None:
        event_vec = ad.mul(event_vec, tape.constant(dropout.event_keep))

    post_vec_rows = ad.reshape(x_posts, (flat_posts, model.post_rnn.output_dim))
    post_probs = _head_probs(tape, leaves, "post_head", post_vec_rows)
    event_probs = _head_probs(tape, leaves, "event_head", event_vec)

    post_labels = np.repeat(batch_.labels, max_posts)
    post_ce = _cross_entropy_rows(post_probs, post_labels)
    post_weights = batch_.post_mask.reshape(flat_posts)
    # Mean over the real posts of the batch; padded rows carry zero weight.
    loss_post = ad.sum_(ad.mul(post_ce, post_weights / post_weights.sum()))
    loss_event = ad.mean(_cross_entropy_rows(event_probs, batch_.labels))
    loss_t = total_loss(loss_post, loss_event, alpha)

    return ForwardResult(
        tape=tape, leaves=leaves, post_probs=post_probs, event_probs=event_probs,
        loss_post=loss_post, loss_event=loss_event, loss_total=loss_t,
        word_vectors=word_vectors, post_vectors=post_vectors, batch=batch_,
    )


def save_checkpoint(path: str | Path, model: HierarchicalModel, vocab: Vocabulary,
                    config: dict | None = None) -> None:
    """Self-describing container: parameter arrays, vocabulary and run config.

    Arrays are stored verbatim (float64 .npy entries inside the .npz), so a
    save/load cycle is bitwise exact.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": model.dims,
        "vocab": vocab.to_tokens(),
        "config": config or {},
    }
    meta_bytes = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    arrays = {name.replace(".", "__"): arr for name, arr in model.parameters().items()}
    np.savez(Path(path), __meta__=meta_bytes, **arrays)


def load_checkpoint(path: str | Path) -> tuple[HierarchicalModel, Vocabulary, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint does not exist: {path}")
    with np.load(path) as blob:
        try:
            meta = json.loads(bytes(blob["__meta__"]).decode("utf-8"))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: not a readable checkpoint ({exc})") from exc
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: unrecognized checkpoint format")
        arrays = {key.replace("__", "."): blob[key] for key in blob.files if key != "__meta__"}
    dims = meta["dims"]
    model = HierarchicalModel.create(
        vocab_size=dims["vocab_size"], embedding_dim=dims["embedding_dim"],
        post_hidden=dims["post_hidden"], event_hidden=dims["event_hidden"],
    )
    params = model.parameters()
    if set(arrays) != set(params):
        raise DataError(f"{path}: checkpoint parameter names do not match the model")
    for name, arr in params.items():
        if arrays[name].shape != arr.shape:
            raise DataError(
                f"{path}: shape mismatch for {name}: checkpoint {arrays[name].shape} "
                f"vs config {arr.shape}"
            )
        np.copyto(arr, arrays[name])
    vocab = Vocabulary.from_tokens(meta["vocab"])
    if vocab.size != dims["vocab_size"]:
        raise DataError(
            f"{path}: vocabulary size {vocab.size} does not match embedding rows "
            f"{dims['vocab_size']}"
        )
    return model, vocab, meta.get("config", {})


def load_pretrained_embeddings(path: str | Path, vocab: Vocabulary,
                               table: EmbeddingTable) -> int:
    """Overwrite table rows for tokens found in a "word v1 ... v_d" text file.

    Returns the number of vocabulary tokens that matched.  The padding row is
    never touched.
    """
    path = Path(path)
    matched = 0
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            token, values = parts[0], parts[1:]
            if len(values) != table.dim:
                raise DataError(
                    f"{path}:{lineno}: expected {table.dim} values, got {len(values)}"
                )
            row = vocab.index.get(token)
            if row is None or row == 0:
                continue
            table.weights[row] = np.asarray([float(v) for v in values], dtype=DTYPE)
            matched += 1
    return matched
