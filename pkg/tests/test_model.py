import math

import numpy as np
import pytest

from hieradv.autodiff import ShapeError
from hieradv.data import Event, Post, Vocabulary, batch
from hieradv.model import (
    POST_VECTORS,
    WORD_VECTORS,
    ClassifierHead,
    EmbeddingTable,
    HierarchicalModel,
    classify,
    embed_event,
    encode_event,
    encode_post,
    forward,
    load_checkpoint,
    loss_bce,
    make_dropout_masks,
    save_checkpoint,
    total_loss,
)

from _helpers import assert_grads_close, central_difference, tiny_events, tiny_model


@pytest.fixture(scope="module")
def small_setup():
    events, vocab_size = tiny_events(seed=1)
    model = tiny_model(vocab_size, seed=2)
    return model, events


def _encoded_post(tokens, pid="p", source=True):
    return Post(pid, "", 0, source, tokens=list(tokens))


def test_embed_event_padding_rows_are_zero(small_setup):
    model, _ = small_setup
    event = Event("e", [_encoded_post([0, 0, 0])], 1)
    blocks = embed_event(event, model.embedding)
    assert np.array_equal(blocks[0], np.zeros((3, model.embedding.dim)))


def test_embed_event_single_token_is_table_row(small_setup):
    model, _ = small_setup
    event = Event("e", [_encoded_post([5])], 0)
    blocks = embed_event(event, model.embedding)
    np.testing.assert_array_equal(blocks[0][0], model.embedding.weights[5])


def test_embed_event_shapes(small_setup):
    model, _ = small_setup
    event = Event("e", [
        _encoded_post([1, 2]), _encoded_post([3], "r1", False),
        _encoded_post([4, 5, 6], "r2", False),
    ], 1)
    blocks = embed_event(event, model.embedding)
    assert [b.shape for b in blocks] == [(2, 4), (1, 4), (3, 4)]


def test_embed_event_rejects_out_of_range(small_setup):
    model, _ = small_setup
    event = Event("e", [_encoded_post([10**6])], 1)
    with pytest.raises(ValueError, match="out of range"):
        embed_event(event, model.embedding)


def test_encode_post_zero_perturbation_identical(small_setup):
    model, _ = small_setup
    rng = np.random.default_rng(0)
    wv = rng.normal(size=(5, model.post_rnn.input_dim))
    base = encode_post(model, wv)
    perturbed = encode_post(model, wv, perturbation=np.zeros_like(wv))
    assert np.array_equal(base, perturbed)


def test_encode_post_padding_does_not_advance_state(small_setup):
    model, _ = small_setup
    rng = np.random.default_rng(1)
    wv = rng.normal(size=(4, model.post_rnn.input_dim))
    padded = np.vstack([wv, np.zeros((3, model.post_rnn.input_dim))])
    np.testing.assert_allclose(
        encode_post(model, padded, length=4), encode_post(model, wv), atol=1e-12
    )


def test_encode_post_rejects_perturbation_shape(small_setup):
    model, _ = small_setup
    wv = np.zeros((3, model.post_rnn.input_dim))
    with pytest.raises(ShapeError, match="perturbation"):
        encode_post(model, wv, perturbation=np.zeros((2, model.post_rnn.input_dim)))


def test_encode_post_matches_hand_computed_lstm_step():
    # Single token, zero initial state: h = sigmoid(z_o) * tanh(sigmoid(z_i) *
    # tanh(z_g)).  Expected values computed from those gate equations directly
    # (gate packing [input | forget | candidate | output]).
    model = tiny_model(vocab_size=4, seed=0, embedding_dim=2, post_hidden=2,
                       event_hidden=2)
    model.post_rnn.w_x_fw[:] = [
        [0.1, -0.2, 0.3, 0.0, -0.1, 0.2, 0.4, -0.3],
        [0.2, 0.1, -0.1, 0.3, 0.0, -0.2, 0.1, 0.2],
    ]
    model.post_rnn.b_fw[:] = [0.05, -0.05, 1.0, 1.0, 0.1, -0.1, 0.0, 0.2]
    model.post_rnn.w_x_bw[:] = [
        [-0.3, 0.1, 0.2, -0.1, 0.3, 0.1, -0.2, 0.0],
        [0.0, 0.2, -0.3, 0.1, 0.2, -0.1, 0.3, 0.1],
    ]
    model.post_rnn.b_bw[:] = [-0.1, 0.2, 1.0, 1.0, 0.0, 0.15, -0.05, 0.1]
    # w_h contributes nothing on the first step; randomize to prove it.
    out = encode_post(model, np.array([[0.5, -1.0]]))
    expected = [
        0.012456083498974714,
        0.039874050129705046,
        -0.008515110869019963,
        0.0740987507151486,
    ]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_encode_event_single_post(small_setup):
    model, _ = small_setup
    rng = np.random.default_rng(2)
    pv = rng.normal(size=(1, model.event_rnn.input_dim))
    out = encode_event(model, pv)
    assert out.shape == (model.event_rnn.output_dim,)
    assert np.isfinite(out).all()


def test_encode_event_zero_perturbation(small_setup):
    model, _ = small_setup
    pv = np.random.default_rng(3).normal(size=(4, model.event_rnn.input_dim))
    assert np.array_equal(encode_event(model, pv),
                          encode_event(model, pv, perturbation=np.zeros_like(pv)))


def test_encode_event_prefix_consistency(small_setup):
    # Truncating the block equals masking the suffix at each prefix size.
    model, _ = small_setup
    pv = np.random.default_rng(4).normal(size=(5, model.event_rnn.input_dim))
    for k in (1, 2, 4):
        np.testing.assert_allclose(
            encode_event(model, pv[:k]),
            encode_event(model, pv, length=k),
            atol=1e-12,
        )


def test_encode_event_rejects_empty(small_setup):
    model, _ = small_setup
    with pytest.raises(ValueError, match="at least one post"):
        encode_event(model, np.zeros((0, model.event_rnn.input_dim)))


def test_classify_uniform_when_zero_head():
    head = ClassifierHead(np.zeros((2, 6)), np.zeros(2))
    np.testing.assert_allclose(classify(np.ones(6), head), [0.5, 0.5])


def test_classify_saturates_with_large_bias():
    head = ClassifierHead(np.zeros((2, 3)), np.array([10.0, -10.0]))
    probs = classify(np.zeros(3), head)
    np.testing.assert_allclose(probs, [1.0, 0.0], atol=1e-4)


def test_classify_argmax_matches_logits():
    rng = np.random.default_rng(8)
    head = ClassifierHead(rng.normal(size=(2, 5)), rng.normal(size=2))
    for _ in range(20):
        vec = rng.normal(size=5)
        logits = head.weight @ vec + head.bias
        assert np.argmax(classify(vec, head)) == np.argmax(logits)


def test_classify_rejects_dimension_mismatch():
    head = ClassifierHead(np.zeros((2, 4)), np.zeros(2))
    with pytest.raises(ShapeError, match="does not match"):
        classify(np.zeros(5), head)


def test_classify_outputs_sum_to_one():
    rng = np.random.default_rng(9)
    head = ClassifierHead(rng.normal(size=(2, 4)), rng.normal(size=2))
    for _ in range(50):
        probs = classify(rng.normal(size=4), head)
        assert probs.min() >= 0
        assert abs(probs.sum() - 1.0) < 1e-9


def test_loss_bce_values():
    assert abs(loss_bce(np.array([0.5, 0.5]), 1) - math.log(2)) < 1e-12
    assert abs(loss_bce(np.array([0.5, 0.5]), 0) - math.log(2)) < 1e-12
    assert loss_bce(np.array([1.0, 0.0]), 1) <= 1e-11
    assert abs(loss_bce(np.array([0.9, 0.1]), 1) - (-math.log(0.9))) < 1e-12


def test_total_loss_values():
    assert abs(total_loss(1.0, 2.0, 0.1) - 1.9) < 1e-12
    assert total_loss(1.0, 2.0, 0.0) == 2.0
    assert total_loss(1.0, 2.0, 1.0) == 1.0
    with pytest.raises(ValueError, match="alpha"):
        total_loss(1.0, 2.0, 1.5)


def test_forward_rejects_both_perturbations(small_setup):
    model, events = small_setup
    b = batch(events, len(events))[0]
    shape_words = b.token_ids.shape + (model.embedding.dim,)
    shape_posts = b.post_mask.shape + (model.post_rnn.output_dim,)
    with pytest.raises(ValueError, match="at most one perturbation"):
        forward(model, b, r_post=np.zeros(shape_words), r_event=np.zeros(shape_posts))


def test_forward_zero_perturbation_bitwise(small_setup):
    model, events = small_setup
    b = batch(events, len(events))[0]
    base = forward(model, b)
    zero_w = forward(model, b, r_post=np.zeros(base.word_vectors.shape))
    zero_p = forward(model, b, r_event=np.zeros(base.post_vectors.shape))
    for perturbed in (zero_w, zero_p):
        assert perturbed.loss_total.item() == base.loss_total.item()
        assert np.array_equal(perturbed.event_probs.data, base.event_probs.data)
        assert np.array_equal(perturbed.post_probs.data, base.post_probs.data)


def test_forward_probabilities_are_distributions(small_setup):
    model, events = small_setup
    b = batch(events, len(events))[0]
    result = forward(model, b)
    for probs in (result.post_probs.data, result.event_probs.data):
        assert (probs >= 0).all()
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_forward_rejects_perturbation_shape(small_setup):
    model, events = small_setup
    b = batch(events, len(events))[0]
    with pytest.raises(ShapeError, match="perturbation"):
        forward(model, b, r_post=np.zeros((1, 1, 1, 1)))


def test_padding_invariance_across_batch_layouts(small_setup):
    model, events = small_setup
    whole = forward(model, batch(events, len(events))[0])
    singly = [forward(model, b) for b in batch(events, 1)]
    for i, single in enumerate(singly):
        np.testing.assert_allclose(
            whole.event_probs.data[i], single.event_probs.data[0], atol=1e-9
        )


def test_padding_invariance_extra_post_padding(small_setup):
    model, events = small_setup
    event = events[0]
    b = batch([event], 1)[0]
    # Rebuild the same batch with extra all-padding token columns.
    extra = 3
    ids = np.pad(b.token_ids, ((0, 0), (0, 0), (0, extra)))
    wmask = np.pad(b.word_mask, ((0, 0), (0, 0), (0, extra)))
    padded = type(b)(ids, wmask, b.post_mask, b.labels, b.event_ids)
    np.testing.assert_allclose(
        forward(model, padded).event_probs.data,
        forward(model, b).event_probs.data,
        atol=1e-9,
    )


def test_event_truncation_matches_component_encoders(small_setup):
    model, events = small_setup
    event = max(events, key=lambda e: len(e.posts))
    post_vectors = np.stack([
        encode_post(model, block)
        for block in embed_event(event, model.embedding)
    ])
    head = model.event_head
    for k in range(1, len(event.posts) + 1):
        truncated = Event(event.id, event.posts[:k], event.label)
        via_forward = forward(model, batch([truncated], 1)[0]).event_probs.data[0]
        via_pieces = classify(encode_event(model, post_vectors[:k]), head)
        np.testing.assert_allclose(via_forward, via_pieces, atol=1e-9)


def test_forward_gradients_match_finite_differences(small_setup):
    model, events = small_setup
    b = batch(events, len(events))[0]

    def run():
        return forward(model, b, alpha=0.3)

    result = run()
    analytic = result.tape.backward(result.loss_total)
    numeric = central_difference(lambda: run().loss_total.item(), model.parameters())
    assert_grads_close({k: analytic[k] for k in numeric}, numeric)


def test_input_gradients_match_finite_differences(small_setup):
    model, events = small_setup
    b = batch(events, len(events))[0]
    result = forward(model, b, alpha=0.3)
    word_grad = result.tape.backward(result.loss_total)[WORD_VECTORS]
    post_grad = result.tape.backward(result.loss_event)[POST_VECTORS]

    r_words = np.zeros(result.word_vectors.shape)
    numeric_w = central_difference(
        lambda: forward(model, b, r_post=r_words, alpha=0.3).loss_total.item(),
        {"w": r_words},
    )
    assert_grads_close({"w": word_grad}, numeric_w)

    r_posts = np.zeros(result.post_vectors.shape)
    numeric_p = central_difference(
        lambda: forward(model, b, r_event=r_posts, alpha=0.3).loss_event.item(),
        {"p": r_posts},
    )
    assert_grads_close({"p": post_grad}, numeric_p)


def test_word_perturbation_ascends_loss(small_setup):
    # First-order check by direct evaluation: the scaled gradient direction
    # should not decrease the total loss for a small budget.
    _, events = small_setup
    wins = 0
    trials = 40
    for seed in range(trials):
        model = tiny_model(50, seed=seed)
        b = batch(events, len(events))[0]
        result = forward(model, b)
        grad = result.tape.backward(result.loss_total)[WORD_VECTORS]
        from hieradv.training import post_perturbation

        r = post_perturbation(grad, 1e-3)
        perturbed = forward(model, b, r_post=r)
        wins += perturbed.loss_total.item() >= result.loss_total.item()
    assert wins >= 0.95 * trials


def test_dropout_masks_shapes_and_scaling(small_setup):
    model, events = small_setup
    b = batch(events, len(events))[0]
    rng = np.random.default_rng(0)
    masks = make_dropout_masks(model, b, 0.5, rng)
    assert masks.post_keep.shape == b.post_mask.shape + (model.post_rnn.output_dim,)
    assert masks.event_keep.shape == (b.num_events, model.event_rnn.output_dim)
    assert set(np.unique(masks.post_keep)) <= {0.0, 2.0}
    assert make_dropout_masks(model, b, 0.0, rng) is None
    with pytest.raises(ValueError, match="below 1"):
        make_dropout_masks(model, b, 1.0, rng)


def test_create_initializes_forget_gate_bias_to_one():
    model = tiny_model(vocab_size=30, seed=9, post_hidden=5, event_hidden=4)
    for rnn in (model.post_rnn, model.event_rnn):
        h = rnn.hidden_dim
        for bias in (rnn.b_fw, rnn.b_bw):
            assert np.array_equal(bias[h: 2 * h], np.ones(h))
            assert (np.abs(bias[:h]) <= 0.1).all()


def test_create_zeroes_padding_row():
    model = tiny_model(vocab_size=30, seed=9)
    assert np.array_equal(model.embedding.weights[0], np.zeros(model.embedding.dim))


def test_model_rejects_mismatched_event_input():
    model = tiny_model(vocab_size=10, seed=0, post_hidden=3, event_hidden=3)
    import dataclasses

    with pytest.raises(ShapeError, match="event encoder expects"):
        HierarchicalModel(
            embedding=model.embedding,
            post_rnn=model.post_rnn,
            event_rnn=dataclasses.replace(model.event_rnn, input_dim=5),
            post_head=model.post_head,
            event_head=model.event_head,
        )


def test_load_pretrained_embeddings(tmp_path):
    from hieradv.model import load_pretrained_embeddings

    model = tiny_model(vocab_size=6, seed=1, embedding_dim=3)
    vocab = Vocabulary({"alpha": 2, "beta": 3, "gamma": 4, "delta": 5})
    path = tmp_path / "vectors.txt"
    path.write_text(
        "alpha 1.0 2.0 3.0\n"
        "gamma -1.0 0.5 0.25\n"
        "elsewhere 9.0 9.0 9.0\n",
        encoding="utf-8",
    )
    matched = load_pretrained_embeddings(path, vocab, model.embedding)
    assert matched == 2
    np.testing.assert_array_equal(model.embedding.weights[2], [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(model.embedding.weights[4], [-1.0, 0.5, 0.25])
    assert np.array_equal(model.embedding.weights[0], np.zeros(3))


def test_checkpoint_round_trip_bitwise(tmp_path, small_setup):
    model, events = small_setup
    vocab = Vocabulary({f"tok{i}": i + 2 for i in range(model.embedding.vocab_size - 2)})
    path = tmp_path / "model.npz"
    save_checkpoint(path, model, vocab, {"mode": "standard", "seed": 3})
    loaded, loaded_vocab, config = load_checkpoint(path)
    for name, arr in model.parameters().items():
        assert np.array_equal(loaded.parameters()[name], arr), name
    assert loaded_vocab.index == vocab.index
    assert config == {"mode": "standard", "seed": 3}


def test_checkpoint_shape_mismatch_reports_both(tmp_path, small_setup):
    model, _ = small_setup
    vocab = Vocabulary({f"tok{i}": i + 2 for i in range(model.embedding.vocab_size - 2)})
    path = tmp_path / "model.npz"
    save_checkpoint(path, model, vocab)

    import json
    import numpy as np_

    with np_.load(path) as blob:
        arrays = {k: blob[k] for k in blob.files}
    meta = json.loads(bytes(arrays["__meta__"]).decode())
    meta["dims"]["post_hidden"] += 1  # claim a different architecture
    arrays["__meta__"] = np_.frombuffer(json.dumps(meta).encode(), dtype=np_.uint8)
    np_.savez(path, **arrays)

    from hieradv.data import DataError

    with pytest.raises(DataError, match="shape mismatch"):
        load_checkpoint(path)
