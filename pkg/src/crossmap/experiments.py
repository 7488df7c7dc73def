"""Small synthetic benchmark and the pipeline variants used for ablations.

The widths here are far below the full model defaults so that one seed of
the three-variant ablation fits in a few minutes on one CPU.  With fewer
than about 200 training pairs the toy follower memorises its training set
and scores near chance on held-out pairs, which leaves nothing to compare.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import navworld as nw
from . import trainer as tr
from .metrics import MetricsReport
from .model import ModelConfig
from .textcodec import build_vocab

VARIANTS = ("full", "type2", "type1")


def toy_config(**overrides) -> ModelConfig:
    # conventional Adam moments: the (0.99, 0.9) default diverges under on-policy fine-tuning at this width
    base = dict(hidden=32, heads=4, ff_size=64, batch_size=16, lr=1e-3, beta1=0.9, beta2=0.999,
                dropout=0.0, env_dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ToyBenchmark:
    graphs: dict[str, nw.NavGraph]
    datasets: dict[str, list[nw.Episode]]

    @property
    def corpus(self) -> list[str]:
        return [ep.instruction for ep in self.datasets["train"]]


def toy_benchmark(seed: int, num_nodes: int = 30, n_train: int = 200, n_val: int = 64,
                  n_unlabeled: int = 128) -> ToyBenchmark:
    """One seeded world with disjoint train, val_seen and unlabeled start-goal pairs."""
    graph, _ = nw.generate_world(seed, nw.WorldSpec(num_nodes=num_nodes), graph_id=f"toy{seed}")
    train = nw.generate_episodes(seed + 1, graph, n_train, role="train", id_prefix="tr")
    used = {(ep.path[0], ep.goal) for ep in train}
    val = nw.generate_episodes(seed + 2, graph, n_val, role="val_seen", id_prefix="vs", exclude_pairs=used)
    used |= {(ep.path[0], ep.goal) for ep in val}
    unl = nw.generate_episodes(seed + 3, graph, n_unlabeled, role="unlabeled", id_prefix="un", exclude_pairs=used)
    return ToyBenchmark({graph.id: graph}, {"train": train, "val_seen": val, "unlabeled": unl})


def run_variant(bench: ToyBenchmark, seed: int, variant: str, pretrain_epochs: int = 30,
                finetune_epochs: int = 4, dbt_rounds: int | None = None, config: ModelConfig | None = None,
                bundle: tr.Bundle | None = None) -> tuple[tr.Bundle, MetricsReport]:
    """Train one ablation variant and score it greedily on ``val_seen``.

    ``type1`` drops path masking and back-translation, ``type2`` drops
    back-translation only, ``full`` keeps everything.  Passing the ``type2``
    bundle as ``bundle`` with ``variant="full"`` only runs the extra rounds.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if bundle is None:
        cfg = config or toy_config(init_seed=seed)
        bundle = tr.Bundle.create(cfg, build_vocab(bench.corpus))
        train = bench.datasets["train"]
        tr.pretrain(bundle, bench.graphs, train, pretrain_epochs, seed, path_masking=variant != "type1")
        tr.finetune(bundle, bench.graphs, train, finetune_epochs, seed)
    if variant == "full":
        state = tr.DbtState()
        for r in range(1, (dbt_rounds or bundle.config.dbt_rounds) + 1):
            tr.dbt_round(state, bundle, bench.graphs, bench.datasets, seed, round_index=r)
    return bundle, tr.evaluate(bundle, bench.graphs, bench.datasets["val_seen"])
