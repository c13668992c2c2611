import csv
import io
import json

import pytest

from prompt_transfer import cli
from prompt_transfer.config import OUT_ENV, ExperimentConfig
from prompt_transfer.errors import ConfigError
from prompt_transfer.pipeline import CACHE_ENV, Pipeline

TINY = {
    "suite": {"splits": [64, 32, 32]},
    "models": {
        "source": {"num_layers": 2, "hidden_dim": 16, "ffn_dim": 32, "num_heads": 2,
                   "pretrain": {"steps": 20, "records": 400}},
        "target": {"num_layers": 2, "hidden_dim": 12, "ffn_dim": 24, "num_heads": 2,
                   "pretrain": {"steps": 20, "records": 400}},
    },
    "pt": {"max_steps": 40, "eval_every": 10, "patience_window": 20, "prompt_length": 4},
    "projector": {"steps": 8, "hidden_dim": 8},
    "layer_selection": "top2",
    "seeds": [0, 1],
    "random_prompts": 3,
}
SEQUENCE = ["pretrain", "tune", "matrix", "tpt-task", "train-projector", "project", "tpt-model", "indicators"]


@pytest.fixture(autouse=True)
def no_shared_cache(monkeypatch):
    monkeypatch.delenv(CACHE_ENV, raising=False)
    monkeypatch.delenv(OUT_ENV, raising=False)


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_defaults_validate():
    cfg = ExperimentConfig.from_dict({})
    assert cfg["pt"]["prompt_length"] == 8 and cfg["pt"]["learning_rate"] == 0.001
    assert cfg["projector"]["learning_rate"] == 0.005 and cfg["projector"]["hidden_dim"] == 128
    assert cfg["layer_selection"] == "top3"


@pytest.mark.parametrize("doc,path", [
    ({"pt": {"learning_rate": "fast"}}, "pt.learning_rate"),
    ({"models": {"source": {"num_layers": 0}}}, "models.source.num_layers"),
    ({"suite": {"types": ["SA", "QA"]}}, "suite.types.1"),
    ({"projector": {"objective": "magic"}}, "projector.objective"),
    ({"bogus": 1}, "<root>"),
    ({"pt": {"eval_every": 70}}, "pt.patience_window"),
])
def test_schema_errors_name_the_field(doc, path):
    with pytest.raises(ConfigError, match=rf"^{path.replace('.', '[.]')}"):
        ExperimentConfig.from_dict(doc)


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = ExperimentConfig.from_dict({"output_dir": "from_file"})
    assert cfg.with_overrides().output_dir.name == "from_file"
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "from_env"))
    assert cfg.with_overrides().output_dir.name == "from_env"
    assert cfg.with_overrides(out=str(tmp_path / "flag")).output_dir.name == "flag"
    assert cfg.with_overrides(seed=7)["suite"]["seed"] == 7


def test_no_subcommand_prints_usage(capsys):
    assert cli.main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_bad_config_is_a_field_path_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"pt": {"batch_size": -1}})
    assert cli.main(["tune", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "pt.batch_size" in capsys.readouterr().err
    assert cli.main(["tune", "--config", str(tmp_path / "missing.json")]) == 1


def run_all(cfg, out):
    for cmd in SEQUENCE:
        assert cli.main([cmd, "--config", cfg, "--out", str(out)]) == 0, cmd


def reports(out):
    return {p.relative_to(out).as_posix(): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.suffix in (".csv", ".json") and p.name != "timing.json"}


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json", TINY)
    mp = pytest.MonkeyPatch()
    mp.delenv(CACHE_ENV, raising=False)
    mp.delenv(OUT_ENV, raising=False)
    try:
        run_all(cfg, root / "a")
        run_all(cfg, root / "b")
    finally:
        mp.undo()
    return cfg, root / "a", root / "b"


def test_replay_is_byte_identical(tiny_runs):
    _, a, b = tiny_runs
    ra, rb = reports(a), reports(b)
    assert ra.keys() == rb.keys()
    assert [k for k in ra if ra[k] != rb[k]] == []
    assert "reports/matrix_source_s0.csv" in ra and "manifest.json" in ra


def test_matrix_csv_is_five_by_four_with_header(tiny_runs):
    _, a, _ = tiny_runs
    rows = list(csv.reader(io.StringIO((a / "reports/matrix_source_s0.csv").read_text())))
    assert rows[0][0] == "source" and len(rows[0]) == 5
    assert [r[0] for r in rows[1:]] == ["sa_a", "sa_b", "nli_a", "nli_b", "random"]
    for r in rows[1:]:
        for v in r[1:]:
            float(v)
            assert "," not in v


def test_manifest_covers_artifacts_and_figures_exist(tiny_runs):
    _, a, _ = tiny_runs
    manifest = json.loads((a / "manifest.json").read_text())["artifacts"]
    for rel in ("reports/indicators_source.csv", "reports/tpt_model.csv", "reports/similarity_source.csv",
                "projectors/task_tuning.ptj", "models/source.ptx", "figures/matrix_source_s0.png",
                "figures/indicators_source.png"):
        assert rel in manifest and (a / rel).exists()
    assert "timing.json" not in manifest


def test_indicators_rerun_reuses_stored_artifacts(tiny_runs, capsys):
    cfg, a, _ = tiny_runs
    before = (a / "reports/indicators_source.csv").read_bytes()
    assert cli.main(["indicators", "--config", cfg, "--out", str(a)]) == 0
    assert (a / "reports/indicators_source.csv").read_bytes() == before
    timing = json.loads((a / "timing.json").read_text())
    assert not any(k.startswith(("pretrain", "trained")) for k in timing)


def test_indicator_sweeps_are_written(tiny_runs, capsys):
    cfg, a, _ = tiny_runs
    rows = list(csv.reader(io.StringIO((a / "reports/indicators_source.csv").read_text())))
    assert [r[0] for r in rows[1:]] == ["e_concat", "e_average", "c_concat", "c_average", "on", "on_i"]
    rows = list(csv.reader(io.StringIO((a / "reports/indicators_layers_source.csv").read_text())))
    assert [r[0] for r in rows[1:]] == ["on@layer1", "on@layer2", "on@bottom2", "on@top2", "on@all"]
    assert cli.main(["indicators", "--config", cfg, "--out", str(a), "--model", "all"]) == 0
    rows = list(csv.reader(io.StringIO((a / "reports/indicators_by_model.csv").read_text())))
    assert [r[:3] for r in rows] == [["model", "num_layers", "hidden_dim"], ["source", "2", "16"], ["target", "2", "12"]]
    assert set(json.loads(capsys.readouterr().out)) == {"source", "target"}


def test_retrieve_returns_the_argmax(tiny_runs, capsys):
    cfg, a, _ = tiny_runs
    capsys.readouterr()
    assert cli.main(["retrieve", "--config", cfg, "--out", str(a), "--metric", "c_concat", "--target", "sa_a"]) == 0
    got = json.loads(capsys.readouterr().out)
    pipe = Pipeline(ExperimentConfig.load(cfg).with_overrides(out=str(a)))
    prompts = {}
    for s in pipe.seeds:
        for k, (p, _) in pipe.prompts("source", s).items():
            prompts[(k, s)] = p
    from prompt_transfer.indicators import c_concat

    query = prompts[("sa_a", 0)]
    best = max(((c_concat(p, query), k) for k, p in prompts.items() if k[0] != "sa_a"), key=lambda x: x[0])
    assert (got["task"], got["seed"]) == best[1]
    assert got["similarity"] == best[0]
    assert cli.main(["retrieve", "--config", cfg, "--out", str(a), "--metric", "on", "--target", "nope"]) == 1
