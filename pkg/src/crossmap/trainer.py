"""Training phases: mutual pretraining, sampled-exploration fine-tuning, double back-translation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from . import navworld as nw
from .model import (
    CrossMapTransformer,
    ModelConfig,
    TrajectoryRecord,
    make_batch,
    path_loss,
    path_mask_loss,
    record_to_input,
    rollout_batch,
    teacher_forced_accuracy,
    teacher_forced_input,
)
from .numerics import AdamState, adam_step, cross_entropy, load_checkpoint, no_grad, params_digest, save_checkpoint
from .speaker import BIDIRECTIONAL_MLM, CAUSAL_GEN, CrossMapSpeaker, generate_instruction, score_generated, speaker_loss
from .textcodec import Vocabulary, encode

log = logging.getLogger(__name__)

TRAINABLE_ROLES = frozenset({"train", "unlabeled", "generated"})
PHASE_CODES = {"pretrain": 1, "finetune": 2, "dbt": 3}


class TrainingAborted(RuntimeError):
    pass


class RoleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model bundle and optimiser


@dataclass
class Bundle:
    """Path model, speaker, vocabulary and optimiser state that travel together."""

    config: ModelConfig
    vocab: Vocabulary
    cmt: CrossMapTransformer
    cms: CrossMapSpeaker
    adam: AdamState = field(default_factory=AdamState)
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocabulary) -> "Bundle":
        config.vocab_size = len(vocab)
        return cls(config, vocab, CrossMapTransformer(config), CrossMapSpeaker(config))

    def parameters(self) -> dict:
        out = {f"cmt.{k}": v for k, v in self.cmt.named_parameters().items()}
        out.update({f"cms.{k}": v for k, v in self.cms.named_parameters().items()})
        return out

    def cmt_digest(self) -> str:
        return params_digest(self.cmt.named_parameters().items())

    def cms_digest(self) -> str:
        return params_digest(self.cms.named_parameters().items())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def step(self, only: str | None = None) -> None:
        params = self.parameters()
        if only is not None:
            params = {k: v for k, v in params.items() if k.startswith(only + ".")}
        grads = {k: p.grad for k, p in params.items()}
        cfg = self.config
        adam_step(params, grads, self.adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, self.adam.step + 1)

    def save(self, path, extra: dict | None = None) -> None:
        tensors = {k: v.data for k, v in self.parameters().items()}
        for k, m in self.adam.m.items():
            tensors[f"adam.m.{k}"] = m
            tensors[f"adam.v.{k}"] = self.adam.v[k]
        meta = {
            "config": self.config.to_dict(),
            "vocab": self.vocab.token_to_id,
            "adam_step": self.adam.step,
            **self.meta,
            **(extra or {}),
        }
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "Bundle":
        tensors, meta = load_checkpoint(path)
        cfg = ModelConfig.from_dict(meta["config"])
        vocab = Vocabulary(meta["vocab"])
        b = cls(cfg, vocab, CrossMapTransformer(cfg), CrossMapSpeaker(cfg))
        b.cmt.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("cmt.")})
        b.cms.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("cms.")})
        b.adam.step = int(meta.get("adam_step", 0))
        for k, v in tensors.items():
            if k.startswith("adam.m."):
                b.adam.m[k[7:]] = v.copy()
            elif k.startswith("adam.v."):
                b.adam.v[k[7:]] = v.copy()
        b.meta = {k: v for k, v in meta.items() if k not in ("config", "vocab", "adam_step")}
        return b


def epoch_rng(seed: int, phase: str, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, PHASE_CODES[phase], epoch])


def _check_roles(episodes: Sequence[nw.Episode]) -> None:
    bad = sorted({ep.role for ep in episodes} - TRAINABLE_ROLES)
    if bad:
        raise RoleError(f"episodes with role(s) {bad} may not be used for gradient computation")


def _batches(items: Sequence, size: int, rng: np.random.Generator) -> list[list]:
    order = rng.permutation(len(items))
    return [[items[i] for i in order[k:k + size]] for k in range(0, len(items), size)]


def _finite(loss, what: str) -> float:
    v = float(loss.data)
    if not math.isfinite(v):
        raise TrainingAborted(f"non-finite {what} loss ({v})")
    return v


def _speaker_mode(batch_index: int) -> str:
    return CAUSAL_GEN if batch_index % 2 == 0 else BIDIRECTIONAL_MLM


def _latents_for_speaker(bundle: Bundle, o_a):
    return o_a.detach() if bundle.config.freeze_cmt_in_speaker else o_a


# ---------------------------------------------------------------------------
# phases


def pretrain(bundle: Bundle, graphs: dict[str, nw.NavGraph], episodes: Sequence[nw.Episode], epochs: int, seed: int,
             path_masking: bool = True, start_epoch: int = 1,
             on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Joint pretraining on ground-truth paths.

    Each batch adds the teacher-forced path loss, the path-masking loss (when
    ``path_masking``) and the speaker loss on the batch's latent action
    features; the speaker mode alternates per batch.
    """
    _check_roles(episodes)
    history = []
    cfg = bundle.config
    inputs = [teacher_forced_input(graphs[ep.graph_id], ep, bundle.vocab) for ep in episodes]
    batch_index = (start_epoch - 1) * math.ceil(len(inputs) / cfg.batch_size)
    for epoch in range(start_epoch, epochs + 1):
        rng = epoch_rng(seed, "pretrain", epoch)
        totals = {"loss": 0.0, "path": 0.0, "mask": 0.0, "speaker": 0.0}
        n_batches = 0
        for chunk in _batches(inputs, cfg.batch_size, rng):
            batch = make_batch(chunk, cfg.feature_width)
            bundle.zero_grad()
            lmask = None
            if path_masking and not cfg.bidirectional_path_mask:
                # causal decoder: the masked-step prediction shares the teacher-forced pass
                lmask, out = path_mask_loss(bundle.cmt, batch, rng, training=True, return_outputs=True)
            else:
                out = bundle.cmt.forward(batch, True, rng)
                if path_masking:
                    lmask = path_mask_loss(bundle.cmt, batch, rng, training=True)
            lpath = cross_entropy(out[0], batch.labels, out[1])
            o_a = _latents_for_speaker(bundle, out[2])
            lspk = speaker_loss(bundle.cms, o_a, batch.valid, [t.instruction for t in chunk],
                                _speaker_mode(batch_index), rng, training=True)
            total = lpath + lspk if lmask is None else lpath + lmask + lspk
            totals["loss"] += _finite(total, "pretrain")
            totals["path"] += float(lpath.data)
            totals["mask"] += float(lmask.data) if lmask is not None else 0.0
            totals["speaker"] += float(lspk.data)
            total.backward()
            bundle.step()
            batch_index += 1
            n_batches += 1
        row = {"phase": "pretrain", "epoch": epoch, **{k: v / max(1, n_batches) for k, v in totals.items()}}
        history.append(row)
        if on_epoch:
            on_epoch(row)
    return history


def sampled_inputs(bundle: Bundle, graphs, episodes: Sequence[nw.Episode], rng, instructions=None):
    """Sample-mode rollouts turned into supervised inputs with shortest-path labels."""
    records = rollout_batch(bundle.cmt, graphs, episodes, bundle.vocab, "sample", rng, instructions=instructions)
    out = []
    for i, (rec, ep) in enumerate(zip(records, episodes)):
        instr = instructions[i] if instructions is not None else encode(bundle.vocab, ep.instruction)
        out.append(record_to_input(rec, graphs[ep.graph_id], ep, instr))
    return out, records


def _exploration_step(bundle: Bundle, graphs, chunk: Sequence[nw.Episode], rng, batch_index: int,
                      with_speaker: bool) -> dict:
    cfg = bundle.config
    trajs, _ = sampled_inputs(bundle, graphs, chunk, rng)
    batch = make_batch(trajs, cfg.feature_width)
    bundle.zero_grad()
    lnav = path_loss(bundle.cmt, batch, training=True, rng=rng)
    total = lnav
    spk = 0.0
    if with_speaker:
        tf = [teacher_forced_input(graphs[ep.graph_id], ep, bundle.vocab) for ep in chunk]
        tb = make_batch(tf, cfg.feature_width)
        _, _, o_a, _ = bundle.cmt.forward(tb, True, rng)
        lspk = speaker_loss(bundle.cms, _latents_for_speaker(bundle, o_a), tb.valid, [t.instruction for t in tf],
                            _speaker_mode(batch_index), rng, training=True)
        total = lnav + lspk
        spk = float(lspk.data)
    value = _finite(total, "finetune")
    total.backward()
    bundle.step()
    return {"loss": value, "nav": float(lnav.data), "speaker": spk}


def finetune(bundle: Bundle, graphs, episodes: Sequence[nw.Episode], epochs: int, seed: int,
             val_sets: dict[str, Sequence[nw.Episode]] | None = None, eval_every: int = 1,
             with_speaker: bool = True, start_epoch: int = 1,
             on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Student-forced training: sampled rollouts labelled by the shortest path to the goal."""
    _check_roles(episodes)
    cfg = bundle.config
    history = []
    batch_index = (start_epoch - 1) * math.ceil(len(episodes) / cfg.batch_size)
    for epoch in range(start_epoch, epochs + 1):
        rng = epoch_rng(seed, "finetune", epoch)
        sums: dict[str, float] = {}
        n = 0
        for chunk in _batches(list(episodes), cfg.batch_size, rng):
            out = _exploration_step(bundle, graphs, chunk, rng, batch_index, with_speaker)
            for k, v in out.items():
                sums[k] = sums.get(k, 0.0) + v
            batch_index += 1
            n += 1
        row = {"phase": "finetune", "epoch": epoch, **{k: v / max(1, n) for k, v in sums.items()}}
        if val_sets and (epoch % eval_every == 0 or epoch == epochs):
            for name, eps in val_sets.items():
                row[f"sr_{name}"] = evaluate(bundle, graphs, eps).sr if eps else float("nan")
        history.append(row)
        if on_epoch:
            on_epoch(row)
    return history


# ---------------------------------------------------------------------------
# double back-translation


@dataclass
class DbtState:
    successful_trajectories: list[TrajectoryRecord] = field(default_factory=list)
    generated_instructions: list[dict] = field(default_factory=list)
    speaker_val_score: float = float("nan")
    log: list[dict] = field(default_factory=list)

    def add_trajectory(self, record: TrajectoryRecord, success: bool) -> None:
        assert success, f"stage-1 pool only admits successful trajectories ({record.episode_id})"
        self.successful_trajectories.append(record)

    def add_instruction(self, item: dict, lam: float) -> None:
        assert item["score"] >= lam, f"pooled instruction scored {item['score']} < lambda {lam}"
        self.generated_instructions.append(item)


def _record_success(graph: nw.NavGraph, rec: TrajectoryRecord, goal: str) -> bool:
    if rec.truncated:
        return False
    d = nw.shortest_path_length(graph, rec.nodes[-1], goal)
    return d is not None and d <= metrics.SUCCESS_DISTANCE


def ground_truth_latents(bundle: Bundle, graphs, episodes: Sequence[nw.Episode]):
    """Latent action features along ground-truth paths (no gradient)."""
    tf = [teacher_forced_input(graphs[ep.graph_id], ep, bundle.vocab) for ep in episodes]
    batch = make_batch(tf, bundle.config.feature_width)
    with no_grad():
        _, _, o_a, _ = bundle.cmt.forward(batch)
    return o_a.data, batch.valid


def speak(bundle: Bundle, graphs, episodes: Sequence[nw.Episode], chunk: int = 64) -> list[str]:
    texts = []
    for k in range(0, len(episodes), chunk):
        part = list(episodes[k:k + chunk])
        lat, valid = ground_truth_latents(bundle, graphs, part)
        texts.extend(t for _, t in generate_instruction(bundle.cms, lat, valid, bundle.vocab))
    return texts


def make_scorer(metric_id: str, corpus: Sequence[str]):
    return metrics.CiderScorer([[c] for c in corpus]) if metric_id == "cider" else None


def _train_speaker_on(bundle: Bundle, graphs, pairs: Sequence[tuple[TrajectoryRecord, nw.Episode]], rng) -> list[float]:
    cfg = bundle.config
    losses = []
    for chunk in _batches(list(pairs), cfg.batch_size, rng):
        trajs = [record_to_input(rec, graphs[ep.graph_id], ep, encode(bundle.vocab, ep.instruction)) for rec, ep in chunk]
        batch = make_batch(trajs, cfg.feature_width)
        bundle.zero_grad()
        with no_grad():
            _, _, o_a, _ = bundle.cmt.forward(batch)
        loss = speaker_loss(bundle.cms, o_a, batch.valid, [t.instruction for t in trajs], CAUSAL_GEN, rng,
                            training=True)
        losses.append(_finite(loss, "dbt speaker"))
        loss.backward()
        # this stage trains the speaker only; the path model just supplies its latents
        bundle.step("cms")
    return losses


def _train_follower_on(bundle: Bundle, graphs, episodes: Sequence[nw.Episode], rng,
                       originals: Sequence[nw.Episode] = ()) -> list[float]:
    """One exploration epoch over the generated pairs, shuffled together with ``originals``."""
    episodes = list(episodes) + list(originals)
    _check_roles(episodes)
    losses = []
    for i, chunk in enumerate(_batches(episodes, bundle.config.batch_size, rng)):
        losses.append(_exploration_step(bundle, graphs, chunk, rng, i, with_speaker=False)["loss"])
    return losses


def dbt_round(state: DbtState, bundle: Bundle, graphs, datasets: dict[str, Sequence[nw.Episode]],
              seed: int, round_index: int = 1, lam: float | None = None, metric_id: str | None = None,
              scorer=None) -> DbtState:
    """One round of the three-stage double back-translation.

    1. successful greedy rollouts of the path model train the speaker on the
       original instruction;
    2. the speaker labels ground-truth training paths; labels scoring at least
       ``lam`` train the path model;
    3. when the speaker's mean validation score reaches ``lam`` it labels the
       unlabeled paths, which train the path model again.
    Generated pairs are mixed with the original training pairs when the path
    model trains on them.  Empty pools are logged and skipped.
    """
    lam = bundle.config.lambda_threshold if lam is None else lam
    metric_id = metric_id or bundle.config.score_metric
    rng = epoch_rng(seed, "dbt", round_index)
    train = list(datasets.get("train", []))
    _check_roles(train)
    if scorer is None:
        scorer = make_scorer(metric_id, [ep.instruction for ep in train])

    # stage 1
    records = rollout_batch(bundle.cmt, graphs, train, bundle.vocab, "greedy") if train else []
    pairs = []
    for rec, ep in zip(records, train):
        if _record_success(graphs[ep.graph_id], rec, ep.goal):
            state.add_trajectory(rec, True)
            pairs.append((rec, ep))
    s1 = _train_speaker_on(bundle, graphs, pairs, rng) if pairs else []
    state.log.append({"round": round_index, "stage": 1, "pool": len(pairs), "rollouts": len(records),
                      "loss": float(np.mean(s1)) if s1 else None, "cmt_digest": bundle.cmt_digest()})
    if not pairs:
        log.info("dbt stage 1: no successful trajectories, skipped")

    # stage 2
    texts = speak(bundle, graphs, train) if train else []
    kept = []
    for ep, text in zip(train, texts):
        score = score_generated(text, [ep.instruction], metric_id, scorer)
        if score >= lam:
            item = {"episode_id": ep.id, "text": text, "score": score, "metric": metric_id, "stage": 2}
            state.add_instruction(item, lam)
            kept.append(ep.with_instruction(text, f"{ep.id}~g{round_index}", "generated"))
    s2 = _train_follower_on(bundle, graphs, kept, rng, train) if kept else []
    state.log.append({"round": round_index, "stage": 2, "pool": len(kept), "generated": len(texts),
                      "loss": float(np.mean(s2)) if s2 else None, "cmt_digest": bundle.cmt_digest()})

    # stage 3
    val = list(datasets.get("val_seen", [])) + list(datasets.get("val_unseen", []))
    if val:
        val_texts = speak(bundle, graphs, val)
        val_scorer = make_scorer(metric_id, [ep.instruction for ep in val]) if metric_id == "cider" else None
        state.speaker_val_score = float(np.mean([
            score_generated(t, [ep.instruction], metric_id, val_scorer) for t, ep in zip(val_texts, val)
        ]))
    unlabeled = list(datasets.get("unlabeled", []))
    kept3 = []
    if unlabeled and state.speaker_val_score >= lam:
        for ep, text in zip(unlabeled, speak(bundle, graphs, unlabeled)):
            # unlabeled paths have no reference; they inherit the validated speaker score
            item = {"episode_id": ep.id, "text": text, "score": state.speaker_val_score, "metric": metric_id, "stage": 3}
            state.add_instruction(item, lam)
            kept3.append(ep.with_instruction(text, f"{ep.id}~u{round_index}", "generated"))
    s3 = _train_follower_on(bundle, graphs, kept3, rng, train) if kept3 else []
    state.log.append({"round": round_index, "stage": 3, "pool": len(kept3), "speaker_val_score": state.speaker_val_score,
                      "loss": float(np.mean(s3)) if s3 else None, "cmt_digest": bundle.cmt_digest()})
    return state


def filtered_pool_size(texts: Sequence[str], references: Sequence[str], lam: float, metric_id: str, scorer=None) -> int:
    return sum(score_generated(t, [r], metric_id, scorer) >= lam for t, r in zip(texts, references))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(bundle: Bundle | None, graphs, episodes: Sequence[nw.Episode], mode: str = "greedy",
             policy: str = "model", seed: int = 0) -> metrics.MetricsReport:
    """Roll out every episode and aggregate navigation metrics.

    ``policy`` may be ``model``, ``oracle`` (follow the ground truth) or ``stop``
    (stop immediately).
    """
    episodes = list(episodes)
    if policy == "oracle":
        paths = [(list(ep.path), False) for ep in episodes]
    elif policy == "stop":
        paths = [([ep.path[0]], False) for ep in episodes]
    elif policy == "model":
        rng = np.random.default_rng(seed) if mode == "sample" else None
        records = rollout_batch(bundle.cmt, graphs, episodes, bundle.vocab, mode, rng) if episodes else []
        paths = [(r.nodes, r.truncated) for r in records]
    else:
        raise ValueError(f"unknown policy {policy!r}")
    outcomes = [
        metrics.NavOutcome(ep.id, tuple(p), ep.goal, graphs[ep.graph_id], ep.path[0], trunc)
        for ep, (p, trunc) in zip(episodes, paths)
    ]
    report = metrics.nav_metrics(outcomes)
    # a truncated trajectory never stopped, so it is scored as a failure
    changed = False
    for row in report.episodes:
        if row["truncated"] and row["success"]:
            row["success"] = False
            row["spl"] = 0.0
            changed = True
    if changed:
        n = len(report.episodes)
        report.sr = sum(r["success"] for r in report.episodes) / n
        report.spl = sum(r["spl"] for r in report.episodes) / n
    return report


def tf_accuracy(bundle: Bundle, graphs, episodes: Sequence[nw.Episode]) -> float:
    tf = [teacher_forced_input(graphs[ep.graph_id], ep, bundle.vocab) for ep in episodes]
    return teacher_forced_accuracy(bundle.cmt, make_batch(tf, bundle.config.feature_width))
