import math

import numpy as np
import pytest

from crossmap import gradcheck
from crossmap import navworld as nw
from crossmap.model import (
    AttentionBlock,
    CrossMapTransformer,
    TrajectoryRecord,
    attention_block,
    build_mask,
    make_batch,
    path_loss,
    path_mask_loss,
    path_mask_positions,
    record_attention,
    rollout,
    rollout_batch,
    teacher_forced_input,
)
from crossmap.numerics import NEG_INF, Tensor, no_grad
from crossmap.textcodec import build_vocab, encode

from support import candidate_probs, ce_oracle, perturb_future, perturb_pad_ids, small_config, small_setup, tf_batch


@pytest.fixture(scope="module")
def setup(world20):
    return small_setup(world20)


def test_causal_mask_three():
    m = build_mask("causal", 3)
    expected = np.array([[0, NEG_INF, NEG_INF], [0, 0, NEG_INF], [0, 0, 0]])
    np.testing.assert_array_equal(m, expected)


def test_bidirectional_and_padding_masks():
    assert np.all(build_mask("bidirectional", 4) == 0)
    p = build_mask("padding", 4, key_lengths=[2])
    assert p.shape == (1, 1, 4)
    np.testing.assert_array_equal(p[0, 0], [0, 0, NEG_INF, NEG_INF])
    composed = build_mask("causal", 4) + p[0]
    assert composed[3, 1] == 0 and composed[3, 2] < NEG_INF / 2 and composed[0, 1] < NEG_INF / 2
    with pytest.raises(ValueError):
        build_mask("padding", 4, key_lengths=[0])


def _layer_norm(v):
    mu = sum(v) / len(v)
    var = sum((a - mu) ** 2 for a in v) / len(v)
    return [(a - mu) / math.sqrt(var + 1e-5) for a in v]


def _lin(v, w, b):
    return [sum(v[i] * w[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]


def test_attention_block_hand_oracle():
    block = AttentionBlock(np.random.default_rng(0), 2, 1, 2, 0.0)
    W = {
        "q": [[1.0, 0.5], [-0.3, 0.8]], "k": [[0.2, -1.0], [0.7, 0.4]],
        "v": [[0.9, 0.1], [0.0, -0.6]], "o": [[1.1, -0.2], [0.3, 0.5]],
        "ff1": [[0.5, -0.4], [1.2, 0.3]], "ff2": [[-0.7, 0.2], [0.6, 0.9]],
    }
    B = {"q": [0.1, 0.0], "k": [0.0, -0.2], "v": [0.05, 0.1], "o": [0.0, 0.3], "ff1": [-0.1, 0.2], "ff2": [0.0, 0.1]}
    lins = {"q": block.attn.q, "k": block.attn.k, "v": block.attn.v, "o": block.attn.o, "ff1": block.ff1,
            "ff2": block.ff2}
    for name, lin in lins.items():
        lin.weight.data = np.array(W[name])
        lin.bias.data = np.array(B[name])
    x = [[0.3, -1.2], [0.8, 0.4]]

    q = [_lin(r, W["q"], B["q"]) for r in x]
    k = [_lin(r, W["k"], B["k"]) for r in x]
    v = [_lin(r, W["v"], B["v"]) for r in x]
    expected = []
    for i in range(2):
        s = [sum(q[i][d] * k[j][d] for d in range(2)) / math.sqrt(2) for j in range(2)]
        e = [math.exp(a - max(s)) for a in s]
        p = [a / sum(e) for a in e]
        ctx = [sum(p[j] * v[j][d] for j in range(2)) for d in range(2)]
        a = _lin(ctx, W["o"], B["o"])
        h = _layer_norm([x[i][d] + a[d] for d in range(2)])
        f = _lin([max(0.0, u) for u in _lin(h, W["ff1"], B["ff1"])], W["ff2"], B["ff2"])
        expected.append(_layer_norm([h[d] + f[d] for d in range(2)]))
    xt = Tensor(np.array(x))
    got = attention_block(xt, xt, None, block).data
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_attention_single_position_and_masked_context(rng):
    block = AttentionBlock(rng, 8, 2, 12, 0.0)
    x = Tensor(rng.normal(size=(1, 8)))
    out = block(x, x)
    assert out.shape == (1, 8) and np.all(np.isfinite(out.data))
    ctx = Tensor(rng.normal(size=(3, 8)))
    with record_attention() as trace:
        block(x, ctx, np.full((1, 1, 3), NEG_INF))
    assert np.all(trace[0] == 0.0)
    with pytest.raises(ValueError):
        block(x, Tensor(rng.normal(size=(3, 4))))


def test_context_widths(setup, world20):
    model, vocab, eps = setup
    batch = tf_batch(model, world20, eps, vocab)
    h_l0, h_v0 = model.encode_contexts(batch.ids, batch.lang_mask, batch.view_feats, batch.view_angles)
    assert h_l0.shape == h_v0.shape == (batch.ids.shape[0], model.config.hidden)
    with pytest.raises(ValueError):
        model.encode_contexts(batch.ids, batch.lang_mask, batch.view_feats[:, :35], batch.view_angles[:, :35])


def test_cls_ignores_pad_slots(setup, world20, rng):
    model, vocab, eps = setup
    batch = tf_batch(model, world20, eps, vocab)
    view_emb = model.embed_views(batch.view_feats, batch.view_angles, False, None)
    with no_grad(), record_attention() as trace:
        _, base = model.encode_language(batch.ids, batch.lang_mask, view_emb)
    width = trace[0].shape[-1]
    pad = batch.lang_mask[:, :width] <= NEG_INF / 2
    # the CLS query row puts no mass on PAD keys
    assert np.all(trace[0][:, :, 0, :][np.broadcast_to(pad[:, None, :], trace[0][:, :, 0, :].shape)] == 0.0)
    ids = perturb_pad_ids(batch.ids, batch.lang_mask, len(vocab), rng)
    with no_grad():
        _, other = model.encode_language(ids, batch.lang_mask, view_emb)
    np.testing.assert_array_equal(base.data, other.data)


def test_future_history_does_not_leak(setup, world20, rng):
    model, vocab, eps = setup
    batch = tf_batch(model, world20, eps, vocab)
    base = candidate_probs(model, batch)
    for t in range(batch.valid.shape[1] - 1):
        probs = candidate_probs(model, perturb_future(batch, t, rng))
        np.testing.assert_array_equal(probs[:, : t + 1], base[:, : t + 1])


def test_distributions_normalised(setup, world20):
    model, vocab, eps = setup
    batch = tf_batch(model, world20, eps, vocab)
    probs = candidate_probs(model, batch)
    np.testing.assert_allclose(probs[batch.valid].sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(probs[~batch.cand_valid] == 0.0)


def test_logits_are_candidate_dot_products(setup, world20):
    model, vocab, eps = setup
    batch = tf_batch(model, world20, eps[:1], vocab)
    with no_grad():
        logits, _, _, h = model.forward(batch)
    W, b = model.act_proj.weight.data, model.act_proj.bias.data
    stop_feat = model.stop_feature.data
    for t in range(batch.valid.shape[1]):
        for c in np.flatnonzero(batch.cand_valid[0, t]):
            feat = batch.cand_feat[0, t, c] + batch.cand_stop[0, t, c] * stop_feat
            emb = np.concatenate([feat, batch.cand_pos5[0, t, c]]) @ W + b
            assert logits.data[0, t, c] == pytest.approx(float(emb @ h.data[0, t]), abs=1e-10)


def test_stop_only_candidate_has_probability_one(setup, world20):
    model, vocab, eps = setup
    ep = eps[0]
    g = nw.NavGraph(world20.id, {ep.path[0]: world20.nodes[ep.path[0]]}, {ep.path[0]: []}, world20.d_sem,
                    world20.d_vis)
    lone = nw.Episode("lone", g.id, ep.instruction, (ep.path[0],))
    probs = candidate_probs(model, make_batch([teacher_forced_input(g, lone, vocab)], model.config.feature_width))
    assert probs.shape == (1, 1, 1) and probs[0, 0, 0] == 1.0


def test_candidate_permutation_equivariance(setup, world20):
    model, vocab, eps = setup
    batch = tf_batch(model, world20, eps[:1], vocab)
    base = candidate_probs(model, batch)
    n = int(batch.cand_valid[0, 0].sum())
    perm = np.r_[np.arange(n)[::-1], np.arange(n, batch.cand_valid.shape[2])]
    for name in ("cand_feat", "cand_pos5", "cand_stop", "cand_valid"):
        arr = getattr(batch, name)
        arr[0, 0] = arr[0, 0][perm]
    probs = candidate_probs(model, batch)
    np.testing.assert_allclose(probs[0, 0], base[0, 0][perm], atol=1e-12)


def test_uniform_model_loss_is_mean_log_k(world20):
    model, vocab, eps = small_setup(world20, seed=3)
    model.act_proj.weight.data = np.zeros_like(model.act_proj.weight.data)
    model.act_proj.bias.data = np.zeros_like(model.act_proj.bias.data)
    batch = tf_batch(model, world20, eps, vocab)
    ks = batch.cand_valid.sum(axis=-1)[batch.valid]
    with no_grad():
        loss = path_loss(model, batch).item()
    assert loss == pytest.approx(float(np.mean(np.log(ks))), abs=1e-12)


def test_immediate_stop_matches_ce_oracle(setup, world20):
    model, vocab, eps = setup
    ep = nw.Episode("s", world20.id, eps[0].instruction, (eps[0].path[0],))
    batch = make_batch([teacher_forced_input(world20, ep, vocab)], model.config.feature_width)
    with no_grad():
        logits, cmask, _, _ = model.forward(batch)
        loss = path_loss(model, batch).item()
    k = int(batch.cand_valid[0, 0].sum())
    assert batch.labels[0, 0] == k - 1
    assert loss == pytest.approx(ce_oracle(logits.data[0, 0], cmask[0, 0], k - 1), abs=1e-12)


def test_path_loss_non_negative(setup, world20):
    model, vocab, eps = setup
    with no_grad():
        assert path_loss(model, tf_batch(model, world20, eps, vocab)).item() >= 0.0


def test_path_mask_loss_is_path_loss_at_m(setup, world20):
    model, vocab, eps = setup
    batch = tf_batch(model, world20, eps, vocab)
    m = path_mask_positions(batch, np.random.default_rng(5))
    assert np.array_equal(m, path_mask_positions(batch, np.random.default_rng(5)))
    assert np.all(m >= 0) and np.all(m < np.asarray(batch.lengths) - 1)
    with no_grad():
        logits, cmask, _, _ = model.forward(batch)
        got = path_mask_loss(model, batch, None, positions=m).item()
    terms = [ce_oracle(logits.data[e, t], cmask[e, t], batch.labels[e, t]) for e, t in enumerate(m)]
    assert got == pytest.approx(float(np.mean(terms)), abs=1e-12)


def test_path_mask_at_zero_sees_only_contexts(setup, world20, rng):
    model, vocab, eps = setup
    batch = tf_batch(model, world20, eps, vocab)
    zeros = np.zeros(len(eps), dtype=np.int64)
    with no_grad():
        a = path_mask_loss(model, batch, None, positions=zeros).item()
        b = path_mask_loss(model, perturb_future(batch, 0, rng), None, positions=zeros).item()
    assert a == b


def test_bidirectional_path_mask_variant(world20):
    model, vocab, eps = small_setup(world20, bidirectional_path_mask=True)
    batch = tf_batch(model, world20, eps, vocab)
    loss = path_mask_loss(model, batch, np.random.default_rng(0))
    assert np.isfinite(loss.item()) and loss.item() > 0


def test_path_masking_rejects_stop_only():
    g, ep = gradcheck.two_node_world(0)
    lone = nw.Episode("x", g.id, "stay", (ep.path[0],))
    vocab = build_vocab(["stay"])
    model = CrossMapTransformer(small_config(len(vocab), d_sem=6, d_vis=6))
    batch = make_batch([teacher_forced_input(g, lone, vocab)], model.config.feature_width)
    with pytest.raises(ValueError):
        path_mask_loss(model, batch, np.random.default_rng(0))


def test_rollout_modes(setup, world20):
    model, vocab, eps = setup
    tf = rollout_batch(model, {world20.id: world20}, eps, vocab, "teacher_forced")
    for rec, ep in zip(tf, eps):
        assert rec.nodes == list(ep.path)
        assert len(rec.actions) == len(ep.path)
        assert not rec.truncated
    g1 = rollout_batch(model, {world20.id: world20}, eps, vocab, "greedy")
    g2 = rollout_batch(model, {world20.id: world20}, eps, vocab, "greedy")
    assert [r.nodes for r in g1] == [r.nodes for r in g2]
    s1 = rollout(model, world20, eps[0], vocab, "sample", np.random.default_rng(9))
    s2 = rollout(model, world20, eps[0], vocab, "sample", np.random.default_rng(9))
    assert s1.nodes == s2.nodes and s1.distributions == s2.distributions
    with pytest.raises(ValueError):
        rollout(model, world20, eps[0], vocab, "sample")


def test_rollout_matches_batched_forward(setup, world20):
    model, vocab, eps = setup
    recs = rollout_batch(model, {world20.id: world20}, eps, vocab, "teacher_forced")
    probs = candidate_probs(model, tf_batch(model, world20, eps, vocab))
    for e, rec in enumerate(recs):
        for t, d in enumerate(rec.distributions):
            np.testing.assert_allclose(d, probs[e, t, : len(d)], atol=1e-12)
        assert rec.latents.shape == (len(rec.actions), model.config.hidden)


def test_truncation_is_recorded(setup, world20):
    model, vocab, eps = setup
    rec = rollout(model, world20, eps[0], vocab, "teacher_forced", max_path=1)
    assert rec.truncated == (len(eps[0].path) > 1)
    out = rec.to_json(world20, eps[0].goal)
    assert out["success"] is False and isinstance(out["probabilities"], list)
    assert isinstance(rec, TrajectoryRecord)


def test_encoded_instruction_reused(setup, world20):
    model, vocab, eps = setup
    instr = encode(vocab, "something else entirely")
    recs = rollout_batch(model, {world20.id: world20}, eps[:2], vocab, "greedy", instructions=[instr, instr])
    assert len(recs) == 2


@pytest.mark.slow
def test_end_to_end_gradients():
    results = gradcheck.run_model_suite(0)
    bad = [(r.name, r.rel_error) for r in results if not r.ok]
    assert not bad, bad
    assert len(results) > 50
