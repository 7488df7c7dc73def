"""Command line entry point.

Every command writes a run manifest (command, config hash, seed, input and
output digests, wall-clock, version) next to its outputs.  Exit status is 0 on
success, 2 for invalid input and 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from . import experiments
from . import gradcheck as gc
from . import metrics
from . import navworld as nw
from . import plotting
from . import trainer as tr
from .model import ModelConfig, rollout_batch
from .numerics import NonFiniteError, tune_allocator
from .textcodec import build_vocab

log = logging.getLogger("crossmap")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
PLAN_VERSION = 1
PLAN_KEYS = {"version", "phase", "epochs", "seed", "preset", "config", "worlds", "datasets", "init",
             "path_masking", "rounds", "lambda", "metric", "eval_every", "with_speaker"}
DATASET_KEYS = ("train", "val_seen", "val_unseen", "unlabeled")
COMMAND_PHASE = {"pretrain": "pretrain", "train": "finetune", "dbt": "dbt"}


class InvalidInput(ValueError):
    pass


class PlanError(InvalidInput):
    def __init__(self, keys: list[str], detail: str = ""):
        self.keys = keys
        super().__init__(f"invalid plan keys: {', '.join(keys)}" + (f" ({detail})" if detail else ""))


# ---------------------------------------------------------------------------
# manifests and small file helpers


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}
        self.seed = getattr(args, "seed", None)
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()
        self.extra: dict = {}

    def read(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise InvalidInput(f"input file not found: {p}")
        self.inputs[str(p)] = file_digest(p)
        return p

    def wrote(self, path) -> Path:
        p = Path(path)
        if p not in self.outputs:
            self.outputs.append(p)
        return p

    def manifest(self) -> dict:
        return {
            "command": self.command,
            "version": __version__,
            "config_hash": config_hash(self.settings),
            "settings": self.settings,
            "seed": self.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {str(p): file_digest(p) for p in self.outputs if p.exists()},
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
            **self.extra,
        }

    def finish(self, manifest_path) -> dict:
        m = self.manifest()
        Path(manifest_path).parent.mkdir(parents=True, exist_ok=True)
        Path(manifest_path).write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")
        return m


def _manifest_for_file(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _load_worlds(run: Run, paths) -> dict[str, nw.NavGraph]:
    graphs = {}
    for p in paths:
        g = nw.load_world(run.read(p))
        graphs[g.id] = g
    return graphs


def _load_eps(run: Run, path, role: str | None = None) -> list[nw.Episode]:
    p = run.read(path)
    if p.suffix == ".json":
        return nw.load_r2r_json(p, role or "train")
    return nw.load_episodes(p, role)


def _check_graph_ids(graphs, episodes) -> None:
    missing = sorted({ep.graph_id for ep in episodes} - set(graphs))
    if missing:
        raise InvalidInput(f"episodes refer to graph ids not in the given worlds: {missing}")


class CsvLog:
    def __init__(self, path: Path):
        self.path = path
        self.fields: list[str] | None = None
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("")

    def __call__(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            if self.fields is None:
                self.fields = list(row)
                csv.DictWriter(fh, self.fields).writeheader()
            csv.DictWriter(fh, self.fields, extrasaction="ignore", restval="").writerow(row)


# ---------------------------------------------------------------------------
# plans


def load_structured(path) -> dict:
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".toml":
        try:
            import tomllib
        except ImportError as exc:  # python < 3.11
            raise InvalidInput("TOML files need python >= 3.11; use JSON") from exc
        return tomllib.loads(text)
    return json.loads(text)


def validate_plan(plan: dict, command: str, base: Path) -> list[str]:
    """Offending keys of a training plan (empty when valid)."""
    bad = sorted(set(plan) - PLAN_KEYS)
    phase = COMMAND_PHASE[command]
    if plan.get("version") != PLAN_VERSION:
        bad.append("version")
    if plan.get("phase") != phase:
        bad.append("phase")
    if not isinstance(plan.get("seed"), int):
        bad.append("seed")
    if phase != "dbt" and not (isinstance(plan.get("epochs"), int) and plan["epochs"] >= 1):
        bad.append("epochs")
    if phase == "dbt" and "rounds" in plan and not (isinstance(plan["rounds"], int) and plan["rounds"] >= 1):
        bad.append("rounds")
    if plan.get("preset", "default") not in ("default", "toy"):
        bad.append("preset")
    cfg = plan.get("config", {})
    if not isinstance(cfg, dict):
        bad.append("config")
    else:
        known = set(ModelConfig.__dataclass_fields__)
        bad += [f"config.{k}" for k in sorted(set(cfg) - known)]
    worlds = plan.get("worlds")
    if not isinstance(worlds, list) or not worlds:
        bad.append("worlds")
    else:
        bad += [f"worlds[{i}]" for i, w in enumerate(worlds) if not (base / str(w)).exists()]
    ds = plan.get("datasets")
    if not isinstance(ds, dict) or "train" not in ds:
        bad.append("datasets.train")
    if isinstance(ds, dict):
        bad += [f"datasets.{k}" for k in sorted(set(ds) - set(DATASET_KEYS))]
        bad += [f"datasets.{k}" for k in DATASET_KEYS if k in ds and not (base / str(ds[k])).exists()]
    if phase in ("finetune", "dbt"):
        if "init" not in plan or not (base / str(plan["init"])).exists():
            bad.append("init")
    elif "init" in plan and not (base / str(plan["init"])).exists():
        bad.append("init")
    if plan.get("metric", "cider") not in ("cider", "bleu4", "rouge_l"):
        bad.append("metric")
    return list(dict.fromkeys(bad))


def _plan_config(plan: dict) -> ModelConfig:
    overrides = dict(plan.get("config", {}))
    if plan.get("preset") == "toy":
        return experiments.toy_config(**overrides)
    return ModelConfig(**overrides)


def _prepare(run: Run, args, command: str):
    plan_path = run.read(args.plan)
    try:
        plan = load_structured(plan_path)
    except (json.JSONDecodeError, ValueError) as exc:
        raise InvalidInput(f"plan is not valid JSON/TOML: {exc}") from exc
    base = plan_path.parent
    bad = validate_plan(plan, command, base)
    if bad:
        raise PlanError(bad)
    graphs = _load_worlds(run, [base / w for w in plan["worlds"]])
    datasets = {k: _load_eps(run, base / v, k) for k, v in plan["datasets"].items()}
    for eps in datasets.values():
        _check_graph_ids(graphs, eps)
    run.seed = plan["seed"]
    run.settings["plan"] = plan
    return plan, base, graphs, datasets


def _bundle_for(run: Run, plan: dict, base: Path, datasets, resume) -> tuple[tr.Bundle, int]:
    if resume:
        b = tr.Bundle.load(run.read(resume))
        if b.meta.get("phase") != plan["phase"]:
            raise InvalidInput(f"resume checkpoint is from phase {b.meta.get('phase')!r}, not {plan['phase']!r}")
        return b, int(b.meta.get("epoch", 0)) + 1
    if "init" in plan:
        b = tr.Bundle.load(run.read(base / plan["init"]))
        b.meta = {}
        return b, 1
    cfg = _plan_config(plan)
    bad = cfg.validate()
    if bad:
        raise PlanError(["config"], "; ".join(bad))
    if not datasets["train"]:
        raise InvalidInput("a fresh model needs training episodes to build its vocabulary; pass init instead")
    return tr.Bundle.create(cfg, build_vocab(ep.instruction for ep in datasets["train"])), 1


def _train_phase(args, command: str) -> int:
    run = Run(command, args)
    plan, base, graphs, datasets = _prepare(run, args, command)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    phase = plan["phase"]
    bundle, start = _bundle_for(run, plan, base, datasets, args.resume)
    epochs = plan["epochs"]
    csv_log = CsvLog(out / f"{phase}_epochs.csv")
    rows: list[dict] = []
    last = out / "last.ckpt"

    def on_epoch(row: dict) -> None:
        rows.append(row)
        csv_log(row)
        bundle.save(last, {"phase": phase, "epoch": row["epoch"], "seed": plan["seed"]})
        log.info("%s epoch %d loss %.4f", phase, row["epoch"], row["loss"])

    if phase == "pretrain":
        tr.pretrain(bundle, graphs, datasets["train"], epochs, plan["seed"],
                    path_masking=plan.get("path_masking", True), start_epoch=start, on_epoch=on_epoch)
    else:
        vals = {k: datasets[k] for k in ("val_seen", "val_unseen") if k in datasets}
        tr.finetune(bundle, graphs, datasets["train"], epochs, plan["seed"], val_sets=vals,
                    eval_every=plan.get("eval_every", 1), with_speaker=plan.get("with_speaker", True),
                    start_epoch=start, on_epoch=on_epoch)
    final = out / f"{phase}.ckpt"
    bundle.save(final, {"phase": phase, "epoch": epochs, "seed": plan["seed"]})
    for p in (csv_log.path, final):
        run.wrote(p)
    if last.exists():
        run.wrote(last)
    if rows:
        run.wrote(plotting.plot_curves(rows, out / f"{phase}_curves.svg", title=phase))
    run.extra["cmt_digest"] = bundle.cmt_digest()
    run.extra["cms_digest"] = bundle.cms_digest()
    run.finish(out / f"{phase}.manifest.json")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _train_phase(args, "pretrain")


def cmd_train(args) -> int:
    return _train_phase(args, "train")


def cmd_dbt(args) -> int:
    run = Run("dbt", args)
    plan, base, graphs, datasets = _prepare(run, args, "dbt")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle, _ = _bundle_for(run, plan, base, datasets, None)
    rounds = plan.get("rounds", bundle.config.dbt_rounds)
    lam = float(plan.get("lambda", bundle.config.lambda_threshold))
    metric_id = plan.get("metric", bundle.config.score_metric)
    state = tr.DbtState()
    csv_log = CsvLog(out / "dbt_epochs.csv")
    for r in range(1, rounds + 1):
        tr.dbt_round(state, bundle, graphs, datasets, plan["seed"], round_index=r, lam=lam, metric_id=metric_id)
        for row in state.log:
            if row["round"] == r:
                csv_log({"phase": "dbt", "epoch": r, "stage": row["stage"], "pool": row["pool"],
                         "loss": row["loss"] if row["loss"] is not None else "",
                         "speaker_val_score": row.get("speaker_val_score", "")})
    ckpt = out / "dbt.ckpt"
    bundle.save(ckpt, {"phase": "dbt", "epoch": rounds, "seed": plan["seed"], "lambda": lam, "metric": metric_id})
    with open(out / "dbt_log.jsonl", "w") as fh:
        for row in state.log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(out / "generated.jsonl", "w") as fh:
        for item in state.generated_instructions:
            fh.write(json.dumps(item, sort_keys=True) + "\n")
    for p in (csv_log.path, ckpt, out / "dbt_log.jsonl", out / "generated.jsonl"):
        run.wrote(p)
    run.extra.update(cmt_digest=bundle.cmt_digest(), cms_digest=bundle.cms_digest(), metric=metric_id)
    run.finish(out / "dbt.manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# data commands


def cmd_gen_world(args) -> int:
    run = Run("gen-world", args)
    spec = nw.WorldSpec(num_nodes=args.nodes, d_sem=args.d_sem, d_vis=args.d_vis)
    graph, _ = nw.generate_world(args.seed, spec, graph_id=args.graph_id)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nw.save_world(graph, out)
    run.wrote(out)
    run.finish(_manifest_for_file(out))
    return EXIT_OK


def cmd_gen_episodes(args) -> int:
    run = Run("gen-episodes", args)
    graph = nw.load_world(run.read(args.world))
    exclude = set()
    for p in args.exclude or []:
        exclude |= {(ep.path[0], ep.goal) for ep in _load_eps(run, p)}
    eps = nw.generate_episodes(args.seed, graph, args.count, (args.min_nodes, args.max_nodes),
                               min_goal_distance=args.min_goal_distance, role=args.role,
                               id_prefix=args.id_prefix, exclude_pairs=exclude)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nw.save_episodes(eps, out)
    run.wrote(out)
    run.finish(_manifest_for_file(out))
    return EXIT_OK


def cmd_validate(args) -> int:
    run = Run("validate", args)
    report: dict = {"worlds": {}, "episodes": {}}
    graphs = {}
    for p in args.world:
        g = nw.load_world(run.read(p))
        graphs[g.id] = g
        report["worlds"][str(p)] = nw.validate_graph(g)
    for p in args.episodes or []:
        problems = []
        for ep in _load_eps(run, p):
            if ep.graph_id not in graphs:
                problems.append(f"{ep.id}: unknown graph {ep.graph_id}")
            else:
                problems += [f"{ep.id}: {m}" for m in nw.validate_episode(graphs[ep.graph_id], ep)]
        report["episodes"][str(p)] = problems
    ok = not any(report["worlds"].values()) and not any(report["episodes"].values())
    report["ok"] = ok
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        run.wrote(out)
        run.finish(_manifest_for_file(out))
    else:
        print(text)
    return EXIT_OK if ok else EXIT_INVALID


# ---------------------------------------------------------------------------
# evaluation and generation


def cmd_evaluate(args) -> int:
    run = Run("evaluate", args)
    graphs = _load_worlds(run, args.world)
    episodes = _load_eps(run, args.episodes)
    _check_graph_ids(graphs, episodes)
    bundle = None
    if args.policy == "model":
        if not args.model:
            raise InvalidInput("missing required option --model for the model policy")
        bundle = tr.Bundle.load(run.read(args.model))
    report = tr.evaluate(bundle, graphs, episodes, mode=args.mode, policy=args.policy, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    run.wrote(out)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "sr", "ne", "spl", "osr"])
            w.writerow([args.split, f"{report.sr:.4f}", f"{report.ne:.4f}", f"{report.spl:.4f}", f"{report.osr:.4f}"])
        run.wrote(args.csv)
    if args.render_svg:
        if bundle is not None:
            paths = [r.nodes for r in rollout_batch(bundle.cmt, graphs, episodes, bundle.vocab, "greedy")]
        elif args.policy == "oracle":
            paths = [list(ep.path) for ep in episodes]
        else:
            paths = [[ep.path[0]] for ep in episodes]
        for ep, p in zip(episodes, paths):
            run.wrote(plotting.render_episode(graphs[ep.graph_id], ep, p, Path(args.render_svg) / f"{ep.id}.svg"))
    run.extra["sr"] = report.sr
    run.finish(_manifest_for_file(out))
    return EXIT_OK


def cmd_speak(args) -> int:
    run = Run("speak", args)
    graphs = _load_worlds(run, args.world)
    episodes = _load_eps(run, args.episodes)
    _check_graph_ids(graphs, episodes)
    bundle = tr.Bundle.load(run.read(args.model))
    metric_id = args.metric or bundle.config.score_metric
    texts = tr.speak(bundle, graphs, episodes)
    refs = [ep.instruction for ep in episodes]
    scorer = tr.make_scorer(metric_id, refs) if refs else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for ep, text in zip(episodes, texts):
            score = tr.score_generated(text, [ep.instruction], metric_id, scorer) if ep.instruction else None
            fh.write(json.dumps({"episode_id": ep.id, "reference": ep.instruction, "text": text,
                                 "score": score, "metric": metric_id}, sort_keys=True) + "\n")
    run.wrote(out)
    if args.csv and episodes:
        table = metrics.caption_table(texts, [[r] for r in refs])
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "bleu4", "cider", "rouge_l"])
            w.writerow([args.split] + [f"{table[k]:.2f}" for k in ("bleu4", "cider", "rouge_l")])
        run.wrote(args.csv)
    run.finish(_manifest_for_file(out))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = Run("gradcheck", args)
    results, elapsed = gc.run(args.scope, args.seed)
    failed = [r for r in results if not r.ok]
    for r in results:
        if args.verbose or not r.ok:
            print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<48} rel_err={r.rel_error:.3e} tol={r.tol:.0e}")
    print(f"gradcheck {args.scope}: {len(results) - len(failed)}/{len(results)} passed in {elapsed:.1f}s")
    run.extra.update(checks=len(results), failed=[r.name for r in failed])
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps([{"name": r.name, "rel_error": r.rel_error, "tol": r.tol, "ok": r.ok}
                                   for r in results], indent=1) + "\n")
        run.wrote(out)
        run.finish(_manifest_for_file(out))
    else:
        print(json.dumps(run.manifest(), sort_keys=True))
    return EXIT_OK if not failed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser


REQUIRED = {
    "gen-world": ["out"],
    "gen-episodes": ["world", "count", "out"],
    "validate": ["world"],
    "pretrain": ["plan", "out"],
    "train": ["plan", "out"],
    "dbt": ["plan", "out"],
    "evaluate": ["world", "episodes", "out"],
    "speak": ["model", "world", "episodes", "out"],
    "gradcheck": [],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossmap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"crossmap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON or TOML file of option values; explicit flags win")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    p = add("gen-world", cmd_gen_world, "generate a synthetic navigation world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nodes", type=int, default=40)
    p.add_argument("--d-sem", type=int, default=40)
    p.add_argument("--d-vis", type=int, default=128)
    p.add_argument("--graph-id")
    p.add_argument("--out")

    p = add("gen-episodes", cmd_gen_episodes, "sample template-instruction episodes on a world")
    p.add_argument("--world")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--role", default="train")
    p.add_argument("--id-prefix", default="ep")
    p.add_argument("--min-nodes", type=int, default=3)
    p.add_argument("--max-nodes", type=int, default=5)
    p.add_argument("--min-goal-distance", type=float, default=3.0)
    p.add_argument("--exclude", nargs="*", help="episode files whose start-goal pairs are excluded")
    p.add_argument("--out")

    p = add("validate", cmd_validate, "check worlds and episode files")
    p.add_argument("--world", nargs="+")
    p.add_argument("--episodes", nargs="*")
    p.add_argument("--out")

    for name, func, help_ in (("pretrain", cmd_pretrain, "joint pretraining from a plan file"),
                              ("train", cmd_train, "sampled-exploration fine-tuning from a plan file")):
        p = add(name, func, help_)
        p.add_argument("--plan")
        p.add_argument("--out", help="output directory")
        p.add_argument("--resume", help="checkpoint written by an interrupted run of the same plan")

    p = add("dbt", cmd_dbt, "double back-translation rounds from a plan file")
    p.add_argument("--plan")
    p.add_argument("--out", help="output directory")

    p = add("evaluate", cmd_evaluate, "navigation metrics report")
    p.add_argument("--model")
    p.add_argument("--world", nargs="+")
    p.add_argument("--episodes")
    p.add_argument("--policy", choices=["model", "oracle", "stop"], default="model")
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="eval", help="row label in the CSV table")
    p.add_argument("--csv")
    p.add_argument("--render-svg", metavar="DIR")
    p.add_argument("--out")

    p = add("speak", cmd_speak, "generate instructions for episode paths")
    p.add_argument("--model")
    p.add_argument("--world", nargs="+")
    p.add_argument("--episodes")
    p.add_argument("--metric", choices=["cider", "bleu4", "rouge_l"])
    p.add_argument("--split", default="eval")
    p.add_argument("--csv")
    p.add_argument("--out")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    p.add_argument("--scope", choices=["ops", "model", "all"], default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return parser


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        try:
            values = load_structured(args.config)
        except (OSError, ValueError) as exc:
            raise InvalidInput(f"cannot read config file {args.config}: {exc}") from exc
        known = {a.dest for a in sub._actions} - {"help", "config", "func"}
        values = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(set(values) - known)
        if unknown:
            raise InvalidInput(f"unknown keys in config file: {unknown}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) in (None, [])]
    if missing:
        raise InvalidInput("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    tune_allocator()
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (InvalidInput, nw.ContractViolation, nw.R2RFormatError, tr.RoleError, KeyError,
            json.JSONDecodeError, nw.EpisodeGenerationError, nw.WorldGenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (tr.TrainingAborted, NonFiniteError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
