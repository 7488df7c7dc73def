"""Instruction generator fed by the path model's latent action features.

Token positions self-attend (causally for generation, bidirectionally for the
masked-token objective) and then cross-attend to the latent action sequence.
The input table has one extra row beyond the vocabulary for the MASK token;
the output head covers the vocabulary only, so MASK can never be emitted.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import metrics
from .model import AttentionBlock, ModelConfig, build_mask, padding_mask_from_valid
from .numerics import NEG_INF, Linear, Module, Tensor, add, cross_entropy, embedding, no_grad, parameter, take
from .textcodec import CLS, EOS, MAX_LEN, PAD, EncodedInstruction, Vocabulary, decode

CAUSAL_GEN = "causal_gen"
BIDIRECTIONAL_MLM = "bidirectional_mlm"
_REDRAWS = 20


class SpeakerLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.self_block = AttentionBlock(rng, cfg.hidden, cfg.heads, cfg.ff_size, cfg.dropout)
        self.cross_block = AttentionBlock(rng, cfg.hidden, cfg.heads, cfg.ff_size, cfg.dropout)


class CrossMapSpeaker(Module):
    def __init__(self, cfg: ModelConfig):
        if cfg.vocab_size <= 0:
            raise ValueError("vocab_size must be set")
        rng = np.random.default_rng(cfg.init_seed + 1)
        H = cfg.hidden
        self._cfg = cfg
        self.tok_emb = parameter(rng, (cfg.vocab_size + 1, H), std=0.1)
        self.tok_pos = parameter(rng, (MAX_LEN, H), std=0.1)
        self.lat_proj = Linear(rng, H, H)
        self.lat_pos = parameter(rng, (cfg.max_path + 1, H), std=0.1)
        self.layers = [SpeakerLayer(rng, cfg) for _ in range(cfg.layers_per_stack)]
        self.head = Linear(rng, H, cfg.vocab_size)

    @property
    def mask_id(self) -> int:
        return self._cfg.vocab_size

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def __call__(self, latents: Tensor, latent_valid: np.ndarray, ids: np.ndarray, mode: str,
                 training: bool = False, rng=None) -> Tensor:
        """Vocabulary logits ``[E, L, V]`` for input ids ``[E, L]``."""
        E, L = ids.shape
        T = latents.shape[1]
        steps = np.minimum(np.arange(T), self._cfg.max_path)
        lat = add(self.lat_proj(latents), take(self.lat_pos, steps, axis=0))
        x = add(embedding(self.tok_emb, ids), take(self.tok_pos, np.arange(L), axis=0))
        pad_keys = padding_mask_from_valid(ids != PAD)
        if mode == CAUSAL_GEN:
            self_mask = build_mask("causal", L)[None, None] + pad_keys
        elif mode == BIDIRECTIONAL_MLM:
            self_mask = pad_keys
        else:
            raise ValueError(f"unknown speaker mode {mode!r}")
        cross_mask = padding_mask_from_valid(latent_valid)
        for layer in self.layers:
            x = layer.self_block(x, x, self_mask, training, rng)
            x = layer.cross_block(x, lat, cross_mask, training, rng)
        return self.head(x)


def _stack_targets(targets: Sequence[EncodedInstruction]) -> np.ndarray:
    return np.stack([t.ids for t in targets])


def mlm_draw(ids: np.ndarray, rate: float, rng: np.random.Generator, mask_id: int):
    """Replace a random ``rate`` share of content tokens by ``mask_id``.

    Redraws while nothing got masked; returns ``None`` when no content token exists.
    """
    content = (ids != PAD) & (ids != CLS) & (ids != EOS)
    if not content.any():
        return None
    for _ in range(_REDRAWS):
        chosen = content & (rng.random(ids.shape) < rate)
        if chosen.any():
            break
    else:
        # force one masked slot after repeated empty draws
        flat = np.flatnonzero(content)
        chosen = np.zeros_like(content)
        chosen.reshape(-1)[flat[int(rng.integers(len(flat)))]] = True
    inputs = np.where(chosen, mask_id, ids)
    labels = np.where(chosen, ids, -1)
    return inputs, labels


def speaker_loss(speaker: CrossMapSpeaker, latents: Tensor, latent_valid: np.ndarray,
                 targets: Sequence[EncodedInstruction], mode: str, rng: np.random.Generator | None = None,
                 training: bool = False) -> Tensor:
    """Mean token cross-entropy.

    ``causal_gen`` predicts every next token after CLS up to EOS.
    ``bidirectional_mlm`` predicts only the masked content tokens.
    """
    ids = _stack_targets(targets)
    ids = ids[:, : int((ids != PAD).sum(axis=1).max())]
    if mode == CAUSAL_GEN:
        inputs = ids[:, :-1]
        labels = np.where(ids[:, 1:] == PAD, -1, ids[:, 1:])
    elif mode == BIDIRECTIONAL_MLM:
        if rng is None:
            raise ValueError("bidirectional mode needs an rng")
        drawn = mlm_draw(ids, speaker.config.mlm_rate, rng, speaker.mask_id)
        if drawn is None:
            return Tensor(0.0)
        inputs, labels = drawn
    else:
        raise ValueError(f"unknown speaker mode {mode!r}")
    logits = speaker(latents, latent_valid, inputs, mode, training, rng)
    return cross_entropy(logits, labels)


def generate_instruction(speaker: CrossMapSpeaker, latents: np.ndarray | Tensor, latent_valid: np.ndarray,
                         vocab: Vocabulary, max_len: int = MAX_LEN) -> list[tuple[list[int], str]]:
    """Greedy left-to-right decoding from CLS until EOS or ``max_len`` ids."""
    lat = latents if isinstance(latents, Tensor) else Tensor(latents, _check=False)
    E = lat.shape[0]
    if E == 0:
        return []
    if np.any(~np.asarray(latent_valid).any(axis=1)):
        raise ValueError("every latent sequence must be non-empty")
    seqs = np.full((E, 1), CLS, dtype=np.int64)
    finished = np.zeros(E, dtype=bool)
    banned = np.zeros(speaker.config.vocab_size)
    banned[[PAD, CLS]] = NEG_INF
    with no_grad():
        while seqs.shape[1] < max_len and not finished.all():
            if seqs.shape[1] == max_len - 1:
                nxt = np.full(E, EOS)
            else:
                logits = speaker(lat, latent_valid, seqs, CAUSAL_GEN).data[:, -1, :] + banned
                nxt = np.argmax(logits, axis=-1)
            nxt = np.where(finished, PAD, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            finished |= nxt == EOS
    out = []
    for row in seqs:
        ids = [int(i) for i in row]
        if EOS in ids:
            ids = ids[: ids.index(EOS) + 1]
        out.append((ids, decode(vocab, ids)))
    return out


def score_generated(candidate: str, references: Sequence[str], metric_id: str,
                    cider_scorer: "metrics.CiderScorer | None" = None) -> float:
    """Score one generated instruction with a caption metric on the 0-100 scale."""
    if not references:
        raise ValueError("references must be non-empty")
    if metric_id == "bleu4":
        return metrics.bleu4(candidate, references)
    if metric_id == "rouge_l":
        return metrics.rouge_l(candidate, references)
    if metric_id == "cider":
        scorer = cider_scorer or metrics.CiderScorer(list(references))
        return scorer.score(candidate, references)
    raise KeyError(f"unknown metric id {metric_id!r}")
