"""Small builders and oracles shared by the test modules."""

import numpy as np

from crossmap import navworld as nw
from crossmap.model import CrossMapTransformer, ModelConfig, make_batch, teacher_forced_input
from crossmap.numerics import NEG_INF, Tensor, masked_softmax, no_grad
from crossmap.textcodec import build_vocab


def small_config(vocab_size, **kw):
    base = dict(hidden=16, heads=2, ff_size=24, d_sem=8, d_vis=8, vocab_size=vocab_size, max_path=8,
                dropout=0.0, env_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def small_setup(graph, n_episodes=6, seed=0, **kw):
    eps = nw.generate_episodes(seed, graph, n_episodes, path_len_range=(2, 5))
    vocab = build_vocab([ep.instruction for ep in eps])
    model = CrossMapTransformer(small_config(len(vocab), init_seed=seed, **kw))
    return model, vocab, eps


def tf_batch(model, graph, eps, vocab):
    return make_batch([teacher_forced_input(graph, ep, vocab) for ep in eps], model.config.feature_width)


def candidate_probs(model, batch):
    with no_grad():
        logits, cmask, _, _ = model.forward(batch)
    return masked_softmax(logits, cmask).data


def perturb_future(batch, t, rng):
    """Copy of ``batch`` with every history slot and step context after ``t`` replaced by noise."""
    b = batch.__class__(**{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in vars(batch).items()})
    b.prev_feat[:, t + 1:] = rng.normal(size=b.prev_feat[:, t + 1:].shape)
    b.prev_pos5[:, t + 1:] = rng.normal(size=b.prev_pos5[:, t + 1:].shape)
    b.prev_stop[:, t + 1:] = rng.random(b.prev_stop[:, t + 1:].shape)
    rows = b.row_index[:, t + 1:][b.valid[:, t + 1:]]
    b.view_feats[rows] = rng.normal(size=b.view_feats[rows].shape)
    b.view_angles[rows] = rng.normal(size=b.view_angles[rows].shape)
    return b


def perturb_pad_ids(ids, lang_mask, vocab_size, rng):
    out = ids.copy()
    pad = lang_mask <= NEG_INF / 2
    out[pad] = rng.integers(0, vocab_size, size=int(pad.sum()))
    return out


def ce_oracle(logits_row, mask_row, target):
    z = np.where(mask_row > NEG_INF / 2, logits_row, -np.inf)
    m = z.max()
    return -(z[target] - m - np.log(np.exp(z - m).sum()))


__all__ = ["Tensor", "small_config", "small_setup", "tf_batch", "candidate_probs", "perturb_future",
           "perturb_pad_ids", "ce_oracle"]
