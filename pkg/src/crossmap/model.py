"""The cross-modal path transformer: language encoder, visual encoder, action decoder.

Shapes follow a batch-first convention.  Per decision step the language and
visual encoders turn (instruction, current panorama) into two summary vectors;
the action decoder runs causally over the step sequence of a trajectory.
Trajectories of different length are padded at the end, which the causal mask
keeps invisible to every real step.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import navworld as nw
from .numerics import (
    NEG_INF,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    add,
    concat,
    cross_entropy,
    dropout,
    embedding,
    masked_softmax,
    matmul,
    mul,
    no_grad,
    parameter,
    relu,
    reshape,
    scale,
    take,
    transpose,
)
from .textcodec import MAX_LEN, EncodedInstruction, Vocabulary, encode


@dataclass
class ModelConfig:
    hidden: int = 384
    layers_per_stack: int = 2
    heads: int = 12
    ff_size: int = 1534
    dropout: float = 0.1
    env_dropout: float = 0.4
    max_instr: int = MAX_LEN
    max_path: int = 12
    lr: float = 5e-4
    beta1: float = 0.99
    beta2: float = 0.9
    adam_eps: float = 1e-8
    lambda_threshold: float = 20.0
    batch_size: int = 50
    d_sem: int = 40
    d_vis: int = 128
    vocab_size: int = 0
    mlm_rate: float = 0.15
    bidirectional_path_mask: bool = False
    freeze_cmt_in_speaker: bool = False
    score_metric: str = "cider"
    dbt_rounds: int = 2
    init_seed: int = 0

    def validate(self) -> list[str]:
        bad = []
        if self.hidden <= 0 or self.heads <= 0 or self.hidden % self.heads:
            bad.append("hidden must be a positive multiple of heads")
        for name in ("dropout", "env_dropout", "mlm_rate"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                bad.append(f"{name} must lie in [0, 1)")
        if self.layers_per_stack < 1:
            bad.append("layers_per_stack must be >= 1")
        if self.max_instr != MAX_LEN:
            bad.append(f"max_instr is fixed at {MAX_LEN}")
        if self.max_path < 1 or self.batch_size < 1:
            bad.append("max_path and batch_size must be >= 1")
        return bad

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config keys: {unknown}")
        return cls(**d)

    @property
    def feature_width(self) -> int:
        return self.d_sem + self.d_vis


# ---------------------------------------------------------------------------
# masks


def build_mask(kind: str, length: int, key_lengths: Sequence[int] | None = None, key_len: int | None = None) -> np.ndarray:
    """Additive attention mask of 0 / ``NEG_INF``.

    ``causal`` and ``bidirectional`` give a ``[length, length]`` matrix;
    ``padding`` gives ``[len(key_lengths), 1, key_len]`` with the columns past each
    valid length blocked.  Masks compose by addition.
    """
    if kind == "causal":
        return np.triu(np.full((length, length), NEG_INF), k=1)
    if kind == "bidirectional":
        return np.zeros((length, length))
    if kind == "padding":
        key_len = key_len or length
        lens = np.asarray(key_lengths)
        if np.any(lens <= 0):
            raise ValueError("lengths must be positive")
        cols = np.arange(key_len)[None, :]
        return np.where(cols < lens[:, None], 0.0, NEG_INF)[:, None, :]
    raise ValueError(f"unknown mask kind {kind!r}")


def padding_mask_from_valid(valid: np.ndarray) -> np.ndarray:
    """``[B, S]`` boolean validity -> ``[B, 1, 1, S]`` additive key mask."""
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


# ---------------------------------------------------------------------------
# attention


_attention_trace: list | None = None


@contextlib.contextmanager
def record_attention():
    """Collect every attention probability array computed inside the block."""
    global _attention_trace
    prev = _attention_trace
    _attention_trace = []
    try:
        yield _attention_trace
    finally:
        _attention_trace = prev


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, hidden: int, heads: int):
        self.q = Linear(rng, hidden, hidden)
        self.k = Linear(rng, hidden, hidden)
        self.v = Linear(rng, hidden, hidden)
        self.o = Linear(rng, hidden, hidden)
        self._heads = heads

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        h = self._heads
        y = reshape(x, (*lead, n, h, d // h))
        nl = len(lead)
        return transpose(y, (*range(nl), nl + 1, nl, nl + 2))

    def __call__(self, x: Tensor, context: Tensor, mask=None) -> Tensor:
        *lead, n, d = x.shape
        if context.shape[-1] != d:
            raise ValueError(f"attention width mismatch: {d} vs {context.shape[-1]}")
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d // self._heads))
        probs = masked_softmax(scores, mask)
        if _attention_trace is not None:
            _attention_trace.append(probs.data)
        out = matmul(probs, v)
        nl = len(lead)
        out = transpose(out, (*range(nl), nl + 1, nl, nl + 2))
        return self.o(reshape(out, (*lead, n, d)))


class AttentionBlock(Module):
    """Masked multi-head attention + residual + norm, then ReLU feed-forward + residual + norm.

    Self-attention when ``context is x``; cross-modal otherwise (queries from
    ``x``, keys and values from ``context``).
    """

    def __init__(self, rng: np.random.Generator, hidden: int, heads: int, ff_size: int, drop: float):
        self.attn = MultiHeadAttention(rng, hidden, heads)
        self.norm1 = LayerNorm(hidden)
        self.ff1 = Linear(rng, hidden, ff_size)
        self.ff2 = Linear(rng, ff_size, hidden)
        self.norm2 = LayerNorm(hidden)
        self._drop = drop

    def __call__(self, x: Tensor, context: Tensor, mask=None, training: bool = False, rng=None) -> Tensor:
        a = dropout(self.attn(x, context, mask), self._drop, rng, training)
        h = self.norm1(add(x, a))
        f = dropout(self.ff2(relu(self.ff1(h))), self._drop, rng, training)
        return self.norm2(add(h, f))


def attention_block(x: Tensor, context: Tensor, mask, params: AttentionBlock, training=False, rng=None) -> Tensor:
    return params(x, context, mask, training, rng)


class EncoderLayer(Module):
    """Self-attention over one modality followed by cross-attention to the other."""

    def __init__(self, rng, cfg: ModelConfig):
        self.self_block = AttentionBlock(rng, cfg.hidden, cfg.heads, cfg.ff_size, cfg.dropout)
        self.cross_block = AttentionBlock(rng, cfg.hidden, cfg.heads, cfg.ff_size, cfg.dropout)

    def __call__(self, x, self_mask, context, cross_mask, training, rng):
        h = self.self_block(x, x, self_mask, training, rng)
        return self.cross_block(h, context, cross_mask, training, rng)


# ---------------------------------------------------------------------------
# batches


@dataclass
class TrajectoryInput:
    """One trajectory to score: poses per decision step and the action taken at each."""

    episode: nw.Episode
    instruction: EncodedInstruction
    graph: nw.NavGraph
    poses: list[nw.Pose]
    candidates: list[list[nw.ActionCandidate]]
    taken: list[int]
    labels: list[int] | None = None


@dataclass
class StepBatch:
    ids: np.ndarray            # [N, 42] token ids, one row per decision step
    lang_mask: np.ndarray      # [N, 42]
    view_feats: np.ndarray     # [N, 36, D]
    view_angles: np.ndarray    # [N, 36, 4]
    row_index: np.ndarray      # [E, T] -> row in N
    valid: np.ndarray          # [E, T]
    prev_feat: np.ndarray      # [E, T, D]
    prev_pos5: np.ndarray      # [E, T, 5]
    prev_stop: np.ndarray      # [E, T]
    start_flag: np.ndarray     # [E, T]
    cand_feat: np.ndarray      # [E, T, C, D]
    cand_pos5: np.ndarray      # [E, T, C, 5]
    cand_stop: np.ndarray      # [E, T, C]
    cand_valid: np.ndarray     # [E, T, C]
    labels: np.ndarray         # [E, T], -1 where unsupervised
    lengths: list[int] = field(default_factory=list)


def context_rows(items: Sequence[tuple[EncodedInstruction, nw.NavGraph, nw.Pose]]):
    """Encoder inputs for (instruction, graph, pose) triples."""
    n = len(items)
    ids = np.zeros((n, MAX_LEN), dtype=np.int64)
    lmask = np.zeros((n, MAX_LEN))
    feats, angles = [], []
    for i, (instr, graph, pose) in enumerate(items):
        ids[i] = instr.ids
        lmask[i] = instr.attention_mask
        feats.append(graph.view_feature_matrix(pose.node_id))
        angles.append(nw.relative_view_angles(graph, pose))
    return ids, lmask, np.stack(feats), np.stack(angles)


def make_batch(trajs: Sequence[TrajectoryInput], feature_width: int) -> StepBatch:
    E = len(trajs)
    T = max(len(t.poses) for t in trajs)
    C = max(len(c) for t in trajs for c in t.candidates)
    D = feature_width
    rows = []
    row_index = np.zeros((E, T), dtype=np.int64)
    valid = np.zeros((E, T), dtype=bool)
    prev_feat = np.zeros((E, T, D))
    prev_pos5 = np.zeros((E, T, 5))
    prev_stop = np.zeros((E, T))
    start_flag = np.zeros((E, T))
    cand_feat = np.zeros((E, T, C, D))
    cand_pos5 = np.zeros((E, T, C, 5))
    cand_stop = np.zeros((E, T, C))
    cand_valid = np.zeros((E, T, C), dtype=bool)
    labels = np.full((E, T), -1, dtype=np.int64)
    for e, tr in enumerate(trajs):
        for t, pose in enumerate(tr.poses):
            row_index[e, t] = len(rows)
            rows.append((tr.instruction, tr.graph, pose))
            valid[e, t] = True
            if t == 0:
                start_flag[e, t] = 1.0
            else:
                prev = tr.candidates[t - 1][tr.taken[t - 1]]
                prev_pos5[e, t] = prev.positional5
                if prev.is_stop:
                    prev_stop[e, t] = 1.0
                else:
                    prev_feat[e, t] = prev.feature
            for c, cand in enumerate(tr.candidates[t]):
                cand_valid[e, t, c] = True
                cand_pos5[e, t, c] = cand.positional5
                if cand.is_stop:
                    cand_stop[e, t, c] = 1.0
                else:
                    cand_feat[e, t, c] = cand.feature
            if tr.labels is not None and t < len(tr.labels) and tr.labels[t] is not None:
                labels[e, t] = tr.labels[t]
    ids, lmask, feats, angles = context_rows(rows)
    return StepBatch(
        ids, lmask, feats, angles, row_index, valid, prev_feat, prev_pos5, prev_stop, start_flag,
        cand_feat, cand_pos5, cand_stop, cand_valid, labels, [len(t.poses) for t in trajs],
    )


# ---------------------------------------------------------------------------
# network


class CrossMapTransformer(Module):
    def __init__(self, cfg: ModelConfig):
        bad = cfg.validate()
        if bad:
            raise ValueError("; ".join(bad))
        if cfg.vocab_size <= 0:
            raise ValueError("vocab_size must be set")
        rng = np.random.default_rng(cfg.init_seed)
        H, D = cfg.hidden, cfg.feature_width
        self._cfg = cfg
        self.tok_emb = parameter(rng, (cfg.vocab_size, H), std=0.1)
        self.lang_pos = parameter(rng, (MAX_LEN, H), std=0.1)
        self.lang_layers = [EncoderLayer(rng, cfg) for _ in range(cfg.layers_per_stack)]
        self.view_proj = Linear(rng, D + 4, H)
        self.vis_summary = parameter(rng, (1, H), std=0.1)
        self.vis_layers = [EncoderLayer(rng, cfg) for _ in range(cfg.layers_per_stack)]
        self.act_proj = Linear(rng, D + 5, H)
        self.stop_feature = parameter(rng, (D,), std=0.1)
        self.start_emb = parameter(rng, (H,), std=0.1)
        self.mask_emb = parameter(rng, (H,), std=0.1)
        self.step_pos = parameter(rng, (cfg.max_path + 1, H), std=0.1)
        self.dec_first = AttentionBlock(rng, H, cfg.heads, cfg.ff_size, cfg.dropout)
        self.fuse = Linear(rng, 3 * H, H)
        self.dec_rest = [
            AttentionBlock(rng, H, cfg.heads, cfg.ff_size, cfg.dropout) for _ in range(cfg.layers_per_stack - 1)
        ]

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    # -- encoders ----------------------------------------------------------

    def embed_views(self, view_feats: np.ndarray, view_angles: np.ndarray, training: bool, rng) -> Tensor:
        feats = view_feats
        rate = self._cfg.env_dropout
        if training and rate > 0:
            # one feature-dimension mask per step, shared by all 36 views
            keep = (rng.random((feats.shape[0], 1, feats.shape[2])) >= rate) / (1.0 - rate)
            feats = feats * keep
        return self.view_proj(Tensor(np.concatenate([feats, view_angles], axis=-1), _check=False))

    def encode_language(self, ids: np.ndarray, lang_mask: np.ndarray, visual_ctx: Tensor, training=False, rng=None):
        """Per-token states ``[N, 42, H]`` and the CLS summary ``[N, H]``."""
        # slots past the longest instruction are PAD everywhere and never attended
        width = int((lang_mask > NEG_INF / 2).sum(axis=1).max())
        ids, lang_mask = ids[:, :width], lang_mask[:, :width]
        x = add(embedding(self.tok_emb, ids), take(self.lang_pos, np.arange(width), axis=0))
        self_mask = lang_mask[:, None, None, :]
        for layer in self.lang_layers:
            x = layer(x, self_mask, visual_ctx, None, training, rng)
        return x, take(x, 0, axis=1)

    def encode_visual(self, view_emb: Tensor, lang_states: Tensor, lang_mask: np.ndarray, training=False, rng=None):
        """Per-slot states ``[N, 37, H]`` (slot 0 is the summary) and ``h_v0`` ``[N, H]``."""
        n = view_emb.shape[0]
        summary = add(Tensor(np.zeros((n, 1, self._cfg.hidden)), _check=False), self.vis_summary)
        x = concat([summary, view_emb], axis=1)
        cross_mask = lang_mask[:, None, None, :]
        for layer in self.vis_layers:
            x = layer(x, None, lang_states, cross_mask, training, rng)
        return x, take(x, 0, axis=1)

    def encode_contexts(self, ids, lang_mask, view_feats, view_angles, training=False, rng=None):
        """``(h_l0, h_v0)`` for each row of encoder inputs."""
        if view_feats.shape[1] != nw.N_VIEWS:
            raise ValueError(f"expected {nw.N_VIEWS} views, got {view_feats.shape[1]}")
        view_emb = self.embed_views(view_feats, view_angles, training, rng)
        lang_states, h_l0 = self.encode_language(ids, lang_mask, view_emb, training, rng)
        _, h_v0 = self.encode_visual(view_emb, lang_states, lang_mask[:, : lang_states.shape[1]], training, rng)
        return h_l0, h_v0

    # -- decoder -----------------------------------------------------------

    def _action_embed(self, feat: np.ndarray, pos5: np.ndarray, stop: np.ndarray) -> Tensor:
        f = add(Tensor(feat, _check=False), mul(Tensor(stop[..., None], _check=False), self.stop_feature))
        return self.act_proj(concat([f, Tensor(pos5, _check=False)], axis=-1))

    def decode_action(self, batch: StepBatch, h_l0: Tensor, h_v0: Tensor, training=False, rng=None,
                      masked_slots: np.ndarray | None = None, bidirectional: bool = False):
        """Candidate logits ``[E, T, C]``, additive candidate mask, ``o_a`` and ``h_a`` (``[E, T, H]``)."""
        E, T = batch.valid.shape
        x = self._action_embed(batch.prev_feat, batch.prev_pos5, batch.prev_stop)
        start = batch.start_flag[..., None]
        x = add(mul(x, Tensor(1.0 - start, _check=False)), mul(Tensor(start, _check=False), self.start_emb))
        if masked_slots is not None:
            ms = masked_slots[..., None].astype(float)
            x = add(mul(x, Tensor(1.0 - ms, _check=False)), mul(Tensor(ms, _check=False), self.mask_emb))
        steps = np.minimum(np.arange(T), self._cfg.max_path)
        x = add(x, take(self.step_pos, steps, axis=0))
        mask = build_mask("bidirectional" if bidirectional else "causal", T)[None, None]
        if bidirectional:
            mask = mask + padding_mask_from_valid(batch.valid)
        o_a = self.dec_first(x, x, mask, training, rng)
        ctx_l = take(h_l0, batch.row_index, axis=0)
        ctx_v = take(h_v0, batch.row_index, axis=0)
        h = self.fuse(concat([o_a, ctx_l, ctx_v], axis=-1))
        for block in self.dec_rest:
            h = block(h, h, mask, training, rng)
        cand = self._action_embed(batch.cand_feat, batch.cand_pos5, batch.cand_stop)
        logits = reshape(matmul(cand, reshape(h, (E, T, self._cfg.hidden, 1))), (E, T, cand.shape[2]))
        cand_mask = np.where(batch.cand_valid, 0.0, NEG_INF)
        return logits, cand_mask, o_a, h

    def forward(self, batch: StepBatch, training=False, rng=None, masked_slots=None, bidirectional=False):
        h_l0, h_v0 = self.encode_contexts(batch.ids, batch.lang_mask, batch.view_feats, batch.view_angles, training, rng)
        return self.decode_action(batch, h_l0, h_v0, training, rng, masked_slots, bidirectional)


def action_distribution(logits: Tensor, cand_mask: np.ndarray) -> np.ndarray:
    return masked_softmax(logits, cand_mask).data


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryRecord:
    episode_id: str
    nodes: list[str]
    actions: list[int]
    distributions: list[list[float]]
    latents: np.ndarray
    truncated: bool
    final_pose: nw.Pose
    mode: str = "greedy"
    poses: list[nw.Pose] = field(default_factory=list)

    def to_json(self, graph: nw.NavGraph | None = None, goal: str | None = None) -> dict:
        out = {
            "episode_id": self.episode_id,
            "nodes": self.nodes,
            "actions": self.actions,
            "probabilities": self.distributions,
            "truncated": self.truncated,
            "mode": self.mode,
        }
        if graph is not None and goal is not None:
            ne = nw.shortest_path_length(graph, self.nodes[-1], goal)
            out["navigation_error"] = ne
            out["success"] = (not self.truncated) and ne is not None and ne <= 3.0
        return out


def teacher_forced_input(graph: nw.NavGraph, ep: nw.Episode, vocab: Vocabulary,
                         instruction: EncodedInstruction | None = None) -> TrajectoryInput:
    """Poses and labels that follow the episode path and end with STOP."""
    instr = instruction or encode(vocab, ep.instruction)
    pose = nw.Pose(ep.path[0], nw.wrap_angle(ep.start_heading))
    poses, cands, taken = [], [], []
    for nxt in list(ep.path[1:]) + [None]:
        cs = nw.candidate_actions(graph, pose)
        poses.append(pose)
        cands.append(cs)
        if nxt is None:
            taken.append(len(cs) - 1)
        else:
            idx = next((i for i, c in enumerate(cs) if not c.is_stop and c.edge.to_id == nxt), None)
            if idx is None:
                raise nw.ContractViolation(f"{ep.id}: {pose.node_id} -> {nxt} is not an edge")
            taken.append(idx)
            pose = nw.step(pose, cs[idx])
    return TrajectoryInput(ep, instr, graph, poses, cands, taken, list(taken))


def shortest_path_labels(graph: nw.NavGraph, goal: str, poses: Sequence[nw.Pose],
                         cands: Sequence[Sequence[nw.ActionCandidate]]) -> list[int]:
    """Label each step with the first edge of a shortest path to the goal (STOP at the goal)."""
    labels = []
    for pose, cs in zip(poses, cands):
        hop = nw.next_hop(graph, pose.node_id, goal)
        if hop is None:
            labels.append(len(cs) - 1)
        else:
            labels.append(next(i for i, c in enumerate(cs) if not c.is_stop and c.edge.to_id == hop))
    return labels


def rollout_batch(model: CrossMapTransformer, graphs: dict[str, nw.NavGraph], episodes: Sequence[nw.Episode],
                  vocab: Vocabulary, mode: str = "greedy", rng: np.random.Generator | None = None,
                  max_path: int | None = None, instructions: Sequence[EncodedInstruction] | None = None
                  ) -> list[TrajectoryRecord]:
    """Run episodes in lockstep until each stops or reaches ``max_path`` decisions.

    ``greedy`` takes the argmax, ``sample`` draws from the distribution using
    ``rng``, ``teacher_forced`` follows the ground-truth path while recording
    the model's distributions.
    """
    if mode not in ("greedy", "sample", "teacher_forced"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    max_path = max_path or model.config.max_path
    E = len(episodes)
    if E == 0:
        return []
    for ep in episodes:
        if ep.graph_id not in graphs:
            raise KeyError(f"episode {ep.id} refers to unknown graph {ep.graph_id}")
    instrs = list(instructions) if instructions is not None else [encode(vocab, ep.instruction) for ep in episodes]
    H = model.config.hidden
    poses = [[nw.Pose(ep.path[0], nw.wrap_angle(ep.start_heading))] for ep in episodes]
    cands = [[nw.candidate_actions(graphs[ep.graph_id], poses[i][0])] for i, ep in enumerate(episodes)]
    taken: list[list[int]] = [[] for _ in episodes]
    dists: list[list[list[float]]] = [[] for _ in episodes]
    ctx_l = [[] for _ in episodes]
    ctx_v = [[] for _ in episodes]
    done = [False] * E
    truncated = [False] * E
    latents = [np.zeros((0, H)) for _ in episodes]
    with no_grad():
        while not all(done):
            active = [i for i in range(E) if not done[i]]
            rows = [(instrs[i], graphs[episodes[i].graph_id], poses[i][-1]) for i in active]
            ids, lmask, feats, angles = context_rows(rows)
            hl, hv = model.encode_contexts(ids, lmask, feats, angles)
            for j, i in enumerate(active):
                ctx_l[i].append(hl.data[j])
                ctx_v[i].append(hv.data[j])
            trajs = [
                TrajectoryInput(episodes[i], instrs[i], graphs[episodes[i].graph_id], poses[i], cands[i], taken[i])
                for i in active
            ]
            batch = make_batch(trajs, model.config.feature_width)
            T = batch.valid.shape[1]
            hl_rows = np.zeros((batch.ids.shape[0], H))
            hv_rows = np.zeros_like(hl_rows)
            for j, i in enumerate(active):
                for t in range(len(poses[i])):
                    hl_rows[batch.row_index[j, t]] = ctx_l[i][t]
                    hv_rows[batch.row_index[j, t]] = ctx_v[i][t]
            logits, cmask, o_a, _ = model.decode_action(batch, Tensor(hl_rows, _check=False), Tensor(hv_rows, _check=False))
            probs = masked_softmax(logits, cmask).data
            for j, i in enumerate(active):
                t = len(poses[i]) - 1
                cs = cands[i][t]
                p = probs[j, t, : len(cs)]
                dists[i].append(p.tolist())
                latents[i] = o_a.data[j, : t + 1].copy()
                ep = episodes[i]
                if mode == "greedy":
                    choice = int(np.argmax(p))
                elif mode == "sample":
                    choice = int(rng.choice(len(cs), p=p / p.sum()))
                else:
                    if t + 1 < len(ep.path):
                        nxt = ep.path[t + 1]
                        choice = next(k for k, c in enumerate(cs) if not c.is_stop and c.edge.to_id == nxt)
                    else:
                        choice = len(cs) - 1
                taken[i].append(choice)
                new_pose = nw.step(poses[i][-1], cs[choice])
                if new_pose is nw.TERMINAL:
                    done[i] = True
                elif len(poses[i]) >= max_path:
                    # movement used the last decision without stopping
                    poses[i].append(new_pose)
                    truncated[i] = True
                    done[i] = True
                else:
                    poses[i].append(new_pose)
                    cands[i].append(nw.candidate_actions(graphs[ep.graph_id], new_pose))
    records = []
    for i, ep in enumerate(episodes):
        decided = poses[i][: len(taken[i])]
        records.append(TrajectoryRecord(
            ep.id,
            [p.node_id for p in decided] + ([poses[i][-1].node_id] if truncated[i] else []),
            taken[i],
            dists[i],
            latents[i],
            truncated[i],
            poses[i][-1],
            mode,
            decided,
        ))
    return records


def rollout(model, graph: nw.NavGraph, episode: nw.Episode, vocab: Vocabulary, mode: str = "greedy",
            rng=None, max_path: int | None = None) -> TrajectoryRecord:
    if episode.graph_id != graph.id:
        raise ValueError(f"episode {episode.id} belongs to graph {episode.graph_id}, not {graph.id}")
    return rollout_batch(model, {graph.id: graph}, [episode], vocab, mode, rng, max_path)[0]


def record_to_input(record: TrajectoryRecord, graph: nw.NavGraph, episode: nw.Episode,
                    instruction: EncodedInstruction) -> TrajectoryInput:
    """Re-score a recorded trajectory; labels follow the shortest path to the goal."""
    poses = list(record.poses)
    cands = [nw.candidate_actions(graph, p) for p in poses]
    labels = shortest_path_labels(graph, episode.goal, poses, cands)
    return TrajectoryInput(episode, instruction, graph, poses, cands, list(record.actions), labels)


# ---------------------------------------------------------------------------
# losses


def path_loss(model: CrossMapTransformer, batch: StepBatch, training=False, rng=None) -> Tensor:
    """Mean cross-entropy of the batch labels (teacher forced), STOP steps included."""
    logits, cmask, _, _ = model.forward(batch, training, rng)
    return cross_entropy(logits, batch.labels, cmask)


def path_mask_positions(batch: StepBatch, rng: np.random.Generator) -> np.ndarray:
    """One masked movement step per trajectory, uniform over ``[0, T-1]`` with ``T`` moves."""
    moves = np.asarray(batch.lengths) - 1
    if np.any(moves < 1):
        raise ValueError("path masking needs at least one movement per trajectory")
    return np.array([int(rng.integers(0, m)) for m in moves], dtype=np.int64)


def path_mask_loss(model: CrossMapTransformer, batch: StepBatch, rng: np.random.Generator,
                   training=False, positions: np.ndarray | None = None, return_outputs=False):
    """Cross-entropy of the action at one sampled position per trajectory.

    With the default causal decoder the prediction at ``m`` sees actions before
    ``m`` only.  ``bidirectional_path_mask`` instead hides the masked action's
    slot and lets every step attend to the whole sequence.
    """
    m = path_mask_positions(batch, rng) if positions is None else np.asarray(positions)
    labels = np.full_like(batch.labels, -1)
    rows = np.arange(len(m))
    labels[rows, m] = batch.labels[rows, m]
    if model.config.bidirectional_path_mask:
        slots = np.zeros(batch.valid.shape, dtype=bool)
        nxt = m + 1
        ok = nxt < batch.valid.shape[1]
        slots[rows[ok], nxt[ok]] = True
        out = model.forward(batch, training, rng, masked_slots=slots, bidirectional=True)
    else:
        out = model.forward(batch, training, rng)
    logits, cmask = out[0], out[1]
    loss = cross_entropy(logits, labels, cmask)
    return (loss, out) if return_outputs else loss


def teacher_forced_accuracy(model: CrossMapTransformer, batch: StepBatch) -> float:
    with no_grad():
        logits, cmask, _, _ = model.forward(batch)
    pred = np.argmax(logits.data + cmask, axis=-1)
    live = batch.labels >= 0
    return float((pred[live] == batch.labels[live]).mean()) if live.any() else 0.0
