import dataclasses
import json

import pytest

from crossmap import cli
from crossmap import navworld as nw
from crossmap.plotting import svg_node_count

SMALL = {"hidden": 16, "heads": 2, "ff_size": 24, "d_sem": 8, "d_vis": 8, "batch_size": 4}


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_plan(path, **plan):
    path.write_text(json.dumps(plan))
    return path


def make_data(d, seed=1):
    assert run("gen-world", "--seed", seed, "--nodes", 16, "--d-sem", 8, "--d-vis", 8, "--graph-id", "w",
               "--out", d / "w.json") == 0
    common = ("--world", d / "w.json", "--min-nodes", 2, "--max-nodes", 4)
    assert run("gen-episodes", *common, "--count", 8, "--seed", 1, "--out", d / "train.jsonl") == 0
    assert run("gen-episodes", *common, "--count", 4, "--seed", 2, "--role", "val_seen", "--id-prefix", "v",
               "--exclude", d / "train.jsonl", "--out", d / "val.jsonl") == 0
    assert run("gen-episodes", *common, "--count", 4, "--seed", 3, "--role", "unlabeled", "--id-prefix", "u",
               "--out", d / "unl.jsonl") == 0


def pipeline(d):
    """World, episodes, pretrain, fine-tune, one DBT round and an evaluation report; returns the report path."""
    make_data(d)
    base = dict(version=1, seed=0, preset="toy", config=SMALL, worlds=["w.json"])
    write_plan(d / "pre.json", phase="pretrain", epochs=2, datasets={"train": "train.jsonl"}, **base)
    assert run("pretrain", "--plan", d / "pre.json", "--out", d / "pre") == 0
    write_plan(d / "ft.json", phase="finetune", epochs=1, init="pre/pretrain.ckpt",
               datasets={"train": "train.jsonl", "val_seen": "val.jsonl"}, **base)
    assert run("train", "--plan", d / "ft.json", "--out", d / "ft") == 0
    write_plan(d / "dbt.json", phase="dbt", rounds=1, init="ft/finetune.ckpt", **{"lambda": 0.0},
               datasets={"train": "train.jsonl", "unlabeled": "unl.jsonl", "val_seen": "val.jsonl"}, **base)
    assert run("dbt", "--plan", d / "dbt.json", "--out", d / "dbt") == 0
    assert run("evaluate", "--model", d / "dbt/dbt.ckpt", "--world", d / "w.json", "--episodes", d / "val.jsonl",
               "--out", d / "report.json", "--csv", d / "table.csv", "--split", "val_seen") == 0
    return d / "report.json"


@pytest.fixture(scope="module")
def piped(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    return d, pipeline(d)


def test_pipeline_outputs(piped):
    d, report = piped
    rep = json.loads(report.read_text())
    assert rep["count"] == 4 and 0.0 <= rep["sr"] <= 1.0
    assert (d / "table.csv").read_text().splitlines()[0] == "split,sr,ne,spl,osr"
    rows = (d / "dbt/dbt_log.jsonl").read_text().splitlines()
    assert [json.loads(r)["stage"] for r in rows] == [1, 2, 3]
    for name in ("pre/pretrain_epochs.csv", "pre/pretrain_curves.svg", "ft/finetune_epochs.csv",
                 "dbt/generated.jsonl", "report.json.manifest.json"):
        assert (d / name).exists(), name


def test_manifest_digests_match_files(piped):
    d, _ = piped
    m = json.loads((d / "pre/pretrain.manifest.json").read_text())
    assert m["command"] == "pretrain" and m["seed"] == 0
    for path, digest in list(m["outputs"].items()) + list(m["inputs"].items()):
        assert cli.file_digest(path) == digest
    assert any(p.endswith("train.jsonl") for p in m["inputs"])
    assert len(m["config_hash"]) == 64 and m["cmt_digest"]


def test_reruns_are_byte_identical(piped, tmp_path):
    d, report = piped
    assert pipeline(tmp_path).read_bytes() == report.read_bytes()
    assert (tmp_path / "dbt/dbt.ckpt").read_bytes() == (d / "dbt/dbt.ckpt").read_bytes()


def test_speak_and_render(piped, tmp_path):
    d, _ = piped
    assert run("speak", "--model", d / "ft/finetune.ckpt", "--world", d / "w.json", "--episodes", d / "val.jsonl",
               "--out", tmp_path / "s.jsonl", "--csv", tmp_path / "s.csv", "--metric", "bleu4") == 0
    lines = [json.loads(x) for x in (tmp_path / "s.jsonl").read_text().splitlines()]
    assert len(lines) == 4 and all(x["metric"] == "bleu4" for x in lines)
    assert run("evaluate", "--policy", "oracle", "--world", d / "w.json", "--episodes", d / "val.jsonl",
               "--out", tmp_path / "o.json", "--render-svg", tmp_path / "svg") == 0
    assert json.loads((tmp_path / "o.json").read_text())["sr"] == 1.0
    svgs = sorted((tmp_path / "svg").glob("*.svg"))
    assert len(svgs) == 4 and svg_node_count(svgs[0]) == 16


def test_resume_matches_uninterrupted(piped, tmp_path):
    d, _ = piped
    plan = json.loads((d / "pre.json").read_text())
    plan.update(worlds=[str(d / "w.json")], datasets={"train": str(d / "train.jsonl")}, epochs=1)
    write_plan(tmp_path / "one.json", **plan)
    assert run("pretrain", "--plan", tmp_path / "one.json", "--out", tmp_path / "a") == 0
    plan["epochs"] = 2
    write_plan(tmp_path / "two.json", **plan)
    assert run("pretrain", "--plan", tmp_path / "two.json", "--out", tmp_path / "b",
               "--resume", tmp_path / "a/last.ckpt") == 0
    full = json.loads((d / "pre/pretrain.manifest.json").read_text())
    resumed = json.loads((tmp_path / "b/pretrain.manifest.json").read_text())
    assert resumed["cmt_digest"] == full["cmt_digest"] and resumed["cms_digest"] == full["cms_digest"]


def test_validate_reports(piped, tmp_path, capsys):
    d, _ = piped
    assert run("validate", "--world", d / "w.json", "--episodes", d / "train.jsonl", d / "val.jsonl") == 0
    assert json.loads(capsys.readouterr().out)["ok"] is True
    bad = nw.load_episodes(d / "val.jsonl")
    bad[0] = dataclasses.replace(bad[0], path=(bad[0].path[0], bad[0].path[0]))
    nw.save_episodes(bad, tmp_path / "bad.jsonl")
    assert run("validate", "--world", d / "w.json", "--episodes", tmp_path / "bad.jsonl",
               "--out", tmp_path / "v.json") == 2
    assert json.loads((tmp_path / "v.json").read_text())["ok"] is False


def test_invalid_input_exit_codes(piped, tmp_path, capsys):
    d, _ = piped
    assert run("evaluate", "--world", d / "w.json", "--episodes", tmp_path / "none.jsonl", "--out", tmp_path / "r") == 2
    assert run("evaluate", "--world", d / "w.json", "--episodes", d / "val.jsonl", "--out", tmp_path / "r") == 2
    assert "--model" in capsys.readouterr().err
    assert run("gen-episodes", "--world", d / "w.json", "--out", tmp_path / "e.jsonl") == 2
    assert run("no-such-command") == 2


def test_plan_errors_name_keys(piped, tmp_path, capsys):
    d, _ = piped
    plan = dict(version=1, phase="pretrain", seed=0, epochs=0, worlds=[str(d / "w.json")],
                datasets={"train": str(d / "train.jsonl"), "test": "x.jsonl"}, colour="red")
    write_plan(tmp_path / "p.json", **plan)
    assert run("pretrain", "--plan", tmp_path / "p.json", "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    for key in ("colour", "epochs", "datasets.test"):
        assert key in err
    del plan["colour"], plan["datasets"]["test"]
    plan.update(epochs=1, phase="finetune")
    write_plan(tmp_path / "f.json", **plan)
    assert run("train", "--plan", tmp_path / "f.json", "--out", tmp_path / "o") == 2
    assert "init" in capsys.readouterr().err
    plan.pop("datasets")
    write_plan(tmp_path / "m.json", **plan)
    assert run("train", "--plan", tmp_path / "m.json", "--out", tmp_path / "o") == 2
    assert "datasets.train" in capsys.readouterr().err
    (tmp_path / "junk.json").write_text("{not json")
    assert run("pretrain", "--plan", tmp_path / "junk.json", "--out", tmp_path / "o") == 2


def test_empty_training_set_needs_init(tmp_path):
    make_data(tmp_path)
    (tmp_path / "empty.jsonl").write_text("")
    write_plan(tmp_path / "p.json", version=1, phase="pretrain", seed=0, epochs=1, preset="toy", config=SMALL,
               worlds=["w.json"], datasets={"train": "empty.jsonl"})
    assert run("pretrain", "--plan", tmp_path / "p.json", "--out", tmp_path / "o") == 2


def test_zero_count_writes_empty_file(piped, tmp_path):
    d, _ = piped
    assert run("gen-episodes", "--world", d / "w.json", "--count", 0, "--out", tmp_path / "z.jsonl") == 0
    assert nw.load_episodes(tmp_path / "z.jsonl") == []


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"nodes": 12, "seed": 4, "d-sem": 8, "d_vis": 8, "out": str(tmp_path / "a.json")}))
    args = cli.parse_args(["gen-world", "--config", str(cfg), "--seed", "9"])
    assert (args.nodes, args.seed, args.d_sem, args.out) == (12, 9, 8, str(tmp_path / "a.json"))
    assert run("gen-world", "--config", cfg) == 0
    assert len(nw.load_world(tmp_path / "a.json").nodes) == 12
    cfg.write_text(json.dumps({"nodez": 3}))
    assert run("gen-world", "--config", cfg, "--out", tmp_path / "b.json") == 2


def test_gradcheck_ops_command(tmp_path):
    assert run("gradcheck", "--scope", "ops", "--out", tmp_path / "g.json") == 0
    rows = json.loads((tmp_path / "g.json").read_text())
    assert rows and all(r["ok"] for r in rows)
