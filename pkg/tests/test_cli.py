import csv
import io
import json

import pytest

from egdarts import schemas
from egdarts.config import DESK_SCALE, ConfigError, desk_scale, from_json
from egdarts.config import load as load_config
from egdarts.evo import PARETO_COLUMNS
from runs import TINY_CONFIG, artifacts, run, run_pipeline, write_config


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "config.json")
    out = root / "run"
    codes = run_pipeline(cfg, out)
    return cfg, out, codes


def test_pipeline_exit_codes(pipeline):
    _, _, codes = pipeline
    assert codes == {"search-blocks": 0, "search-network": 0, "decide": 0, "train": 0, "eval": 0}


def test_artifacts_match_their_schemas(pipeline):
    _, out, _ = pipeline
    schemas.validate(json.loads((out / "genotype.json").read_text()), "genotype")
    schemas.validate(json.loads((out / "decision.json").read_text()), "decision")
    schemas.validate(json.loads((out / "selected_genome.json").read_text()), "genome")
    for d in (out / "train", out / "eval"):
        schemas.validate(json.loads((d / "metrics.json").read_text()), "metrics")
        schemas.validate(json.loads((d / "run-manifest.json").read_text()), "manifest")
    trace = list(csv.reader(io.StringIO((out / "trace.csv").read_text())))
    assert trace[0] == ["step", "x_k", "y_k", "theta1", "grad_theta", "sigma", "phi"]
    pareto = list(csv.reader(io.StringIO((out / "pareto.csv").read_text())))
    assert tuple(pareto[0]) == PARETO_COLUMNS
    assert len(list((out / "genomes").glob("genome_*.json"))) == len(pareto) - 1


def test_manifest_hashes_inputs_and_outputs(pipeline):
    cfg, out, _ = pipeline
    m = json.loads((out / "run-manifest.json").read_text())
    assert m["command"] == "decide"
    assert set(m["outputs"]) == {"decision.json", "selected_genome.json"}
    assert m["config_hash"] == load_config(cfg).digest()


def test_eval_reproduces_train_metrics(pipeline):
    _, out, _ = pipeline
    t = json.loads((out / "train" / "metrics.json").read_text())
    e = json.loads((out / "eval" / "metrics.json").read_text())
    for k in ("err", "params", "flops", "depth", "eval_set", "eval_size"):
        assert t[k] == e[k]


def test_rerun_is_byte_identical(pipeline, tmp_path):
    cfg, out, _ = pipeline
    again = tmp_path / "run"
    assert set(run_pipeline(cfg, again).values()) == {0}
    assert artifacts(again) == artifacts(out)


def test_unknown_config_key_exits_2_with_path(tmp_path, capsys):
    bad = {**TINY_CONFIG, "network_search": {**TINY_CONFIG["network_search"], "popsize": 3}}
    code = run("search-network", "--config", write_config(tmp_path / "c.json", bad), "--out", tmp_path)
    assert code == 2
    assert "network_search.popsize" in capsys.readouterr().err


def test_missing_genotype_exits_2(tmp_path, capsys):
    assert run("search-network", "--config", write_config(tmp_path / "c.json"), "--out", tmp_path / "x") == 2
    assert "genotype not found" in capsys.readouterr().err


def test_malformed_genome_exits_2(tmp_path):
    g = tmp_path / "g.json"
    g.write_text(json.dumps({"v0": 8, "v1": 1, "v2": 1, "v3": 1, "v4": 1.0, "v5": 1.0,
                             "normal": [["warp_drive", 0]], "reduce": []}))
    assert run("train", "--config", write_config(tmp_path / "c.json"), "--out", tmp_path, "--genome", g) == 2


def test_missing_output_directory_exits_2(tmp_path):
    assert run("search-blocks", "--config", write_config(tmp_path / "c.json")) == 2


def test_missing_cifar_exits_3(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("EGDARTS_DATA_DIR", raising=False)
    cfg = {**TINY_CONFIG, "data": {"dataset": "cifar10", "path": str(tmp_path / "nowhere")}}
    assert run("search-blocks", "--config", write_config(tmp_path / "c.json", cfg), "--out", tmp_path) == 3
    assert "does not exist" in capsys.readouterr().err


def test_corrupt_cifar_exits_3(tmp_path):
    d = tmp_path / "cifar"
    d.mkdir()
    for i in range(1, 6):
        (d / f"data_batch_{i}.bin").write_bytes(b"\0" * 3000)
    cfg = {**TINY_CONFIG, "data": {"dataset": "cifar10", "path": str(d)}}
    assert run("search-blocks", "--config", write_config(tmp_path / "c.json", cfg), "--out", tmp_path) == 3


def _pareto(path, rows):
    lines = [",".join(PARETO_COLUMNS)]
    for params, err in rows:
        lines.append(f"8,1,1,1,1.0,1.0,{params},{err},,,3")
    path.write_text("\n".join(lines) + "\n")
    return path


def test_decide_on_hand_front(tmp_path, capsys):
    p = _pareto(tmp_path / "pareto.csv", [(1, 10), (9, 2), (2, 3), (5, 6)])
    assert run("decide", "--pareto", p) == 0
    d = json.loads((tmp_path / "decision.json").read_text())
    assert d["index"] == 2 and d["genome"] is None and not d["degenerate"]
    assert d["line"]["A"] == pytest.approx(0.01) and d["distances"][0] == 0.0
    assert "selected row 2" in capsys.readouterr().out


def test_degenerate_front_exits_4_unless_allowed(tmp_path):
    p = _pareto(tmp_path / "pareto.csv", [(5, 0.0)])
    assert run("decide", "--pareto", p) == 4
    assert run("decide", "--pareto", p, "--allow-degenerate") == 0
    assert json.loads((tmp_path / "decision.json").read_text())["degenerate"] is True


def test_bad_pareto_header_exits_2(tmp_path):
    p = tmp_path / "pareto.csv"
    p.write_text("params,err\n1,2\n")
    assert run("decide", "--pareto", p) == 2


def test_surrogate_evaluator_override(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "run"
    (out).mkdir()
    (out / "genotype.json").write_text(json.dumps(
        {"normal": [["sep_conv_3x3", 0], ["skip_connect", 1]], "reduce": [["max_pool_3x3", 0], ["eca_net_3x3", 1]],
         "nodes": 4}))
    assert run("search-network", "--config", cfg, "--out", out, "--evaluator", "surrogate") == 0
    m = json.loads((out / "run-manifest.json").read_text())
    assert m["config"]["network_search"]["evaluator"] == "surrogate"


# configuration ---------------------------------------------------------------------------

def test_default_config_carries_published_hyperparameters():
    cfg = from_json({})
    bs, ns, tr = cfg.block_search, cfg.network_search, cfg.train
    assert (bs.batch_size, bs.weight_decay, bs.epochs, bs.lr) == (96, 5e-4, 40, 0.025)
    assert (ns.batch_size, ns.weight_decay, ns.epochs, ns.lr) == (128, 5e-4, 36, 0.025)
    assert (tr.batch_size, tr.epochs) == (128, 600)
    assert (ns.population, ns.generations, ns.crossover, ns.mutation) == (15, 20, 0.9, 0.1)
    assert bs.stages == ((5, 8), (11, 4), (17, 1))


def test_config_digest_ignores_output_directory():
    a = from_json({"out": "/a"})
    b = from_json({"out": "/b"})
    assert a.digest() == b.digest() != from_json({"seed": 1}).digest()


@pytest.mark.parametrize("obj, path", [
    ({"data": {"dataset": "mnist"}}, "data.dataset"),
    ({"block_search": {"stages": [[2, 8], [3, 8], [4, 1]]}}, "block_search"),
    ({"network_search": {"population": "many"}}, "network_search.population"),
    ({"train": {"augment": 1}}, "train.augment"),
    ({"data": {"synth": {"colour": 3}}}, "data.synth.colour"),
])
def test_config_errors_name_the_field(obj, path):
    with pytest.raises(ConfigError) as info:
        from_json(obj)
    assert info.value.path == path


def test_desk_scale_config():
    cfg = desk_scale()
    assert cfg.block_search.stages == ((2, 8), (3, 4), (4, 1))
    assert (cfg.network_search.population, cfg.network_search.generations, cfg.network_search.epochs) == (8, 5, 3)
    assert (cfg.data.synth.n, cfg.data.synth.classes, cfg.data.synth.size) == (2000, 4, 16)
    assert from_json(json.loads(json.dumps(DESK_SCALE))) == cfg
