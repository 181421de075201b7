import json
import subprocess
import sys

import pytest

from erasure_lab.cli import dispatch


def run(*argv):
    return dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def sentiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("sent")
    assert run("synth", "--kind", "sentiment", "--out-dir", root, "--n-examples", 240, "--dim", 8,
               "--min-len", 4, "--max-len", 7, "--seed", 1) == 0
    assert run("train", "--embeddings", root / "embeddings.txt", "--train", root / "train.tsv",
               "--dev", root / "dev.tsv", "--arch", "lstm", "--hidden-size", 6, "--epochs", 4,
               "--lr", 0.01, "--out", root / "m.json") == 0
    return root


def data_lines(path):
    return [line for line in path.read_text().splitlines() if not line.startswith("#")]


def test_synth_outputs(sentiment):
    for name in ("embeddings.txt", "train.tsv", "dev.tsv", "test.tsv", "spec.json"):
        assert (sentiment / name).exists()
    spec = json.loads((sentiment / "spec.json").read_text())
    assert spec["spec"]["kind"] == "sentiment" and spec["metadata"]["seed"] == 1


def test_eval(sentiment, capsys):
    assert run("eval", "--model", sentiment / "m.json", "--data", sentiment / "test.tsv") == 0
    result = json.loads(capsys.readouterr().out)
    assert 0.0 <= result["accuracy"] <= 1.0 and result["n"] > 0


def test_importance_csv_and_svg(sentiment):
    out, svg = sentiment / "dims.csv", sentiment / "dims.svg"
    assert run("importance", "--model", sentiment / "m.json", "--data", sentiment / "test.tsv",
               "--out", out, "--heatmap", svg, "--detail", sentiment / "detail.csv",
               "--report", sentiment / "rep.json", "--log-scale") == 0
    rows = data_lines(out)
    assert rows[0] == "target,I,n,skipped" and len(rows) == 9
    assert svg.read_text().count("<rect") == 8
    assert json.loads((sentiment / "rep.json").read_text())["reports"][0]["target"] == "dim:0"
    assert run("render", "--csv", out, "--out", sentiment / "again.svg") == 0
    assert (sentiment / "again.svg").read_text().count("<rect") == 8


def test_word_level_commands(sentiment):
    m, te = sentiment / "m.json", sentiment / "test.tsv"
    assert run("importance", "--model", m, "--data", te, "--level", "word", "--word-mode", "zero",
               "--out", sentiment / "words.csv") == 0
    assert data_lines(sentiment / "words.csv")[1].startswith("word:")
    assert run("importance", "--model", m, "--data", te, "--level", "unit", "--out", sentiment / "units.csv") == 0
    assert len(data_lines(sentiment / "units.csv")) == 7
    assert run("word-ranking", "--model", m, "--data", te, "--sign", "negative", "--top-k", 5,
               "--out", sentiment / "rank.csv") == 0
    assert data_lines(sentiment / "rank.csv")[0] == "rank,token,I,support"
    assert len(data_lines(sentiment / "rank.csv")) == 6
    assert run("histogram", "--model", m, "--model", m, "--data", te, "--edges=-1,0,1",
               "--out", sentiment / "hist.csv") == 0
    hist = data_lines(sentiment / "hist.csv")
    assert hist[0] == "model,[-inf:0),[0:inf)" and len(hist) == 3
    assert run("layer-importance", "--model", m, "--data", te, "--out", sentiment / "layers.csv",
               "--heatmap", sentiment / "layers.svg") == 0
    meta = json.loads((sentiment / "layers.csv").read_text().splitlines()[0][2:])
    assert set(meta["concentration"]) == {"input", "layer1"}
    assert run("render", "--csv", sentiment / "layers.csv", "--out", sentiment / "layers2.svg") == 0


def test_rl_pipeline(sentiment):
    m, te = sentiment / "m.json", sentiment / "test.tsv"
    assert run("rl-train", "--model", m, "--data", sentiment / "dev.tsv", "--epochs", 1,
               "--out", sentiment / "p.json") == 0
    assert run("rl-apply", "--model", m, "--policy", sentiment / "p.json", "--data", te,
               "--mode", "sample_best(8)", "--out", sentiment / "rl.jsonl", "--render", sentiment / "rl.txt") == 0
    recs = [json.loads(line) for line in data_lines(sentiment / "rl.jsonl")]
    assert len(recs) == len(data_lines(te))
    assert all(r["size"] == len(r["removed"]) for r in recs)
    assert "->" in (sentiment / "rl.txt").read_text()
    assert run("oracle", "--model", m, "--data", te, "--out", sentiment / "oracle.jsonl") == 0
    oracle = {r["id"]: r for r in map(json.loads, data_lines(sentiment / "oracle.jsonl"))}
    for r in recs:
        if r["flipped"]:
            assert oracle[r["id"]]["flipped"] and oracle[r["id"]]["size"] <= r["size"]
    assert run("render", "--records", sentiment / "oracle.jsonl", "--data", te, "--model", m,
               "--out", sentiment / "renders") == 0
    assert len(list((sentiment / "renders").glob("*.svg"))) == len(recs)


def test_config_file_and_precedence(sentiment, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"level": "unit", "layer": 1}))
    out = tmp_path / "u.csv"
    assert run("importance", "--config", cfg, "--model", sentiment / "m.json", "--data",
               sentiment / "test.tsv", "--out", out) == 0
    assert data_lines(out)[1].startswith("layer1:")
    assert run("importance", "--config", cfg, "--level", "dim", "--model", sentiment / "m.json",
               "--data", sentiment / "test.tsv", "--out", out) == 0
    assert data_lines(out)[1].startswith("dim:")


def test_unknown_config_key_exits_2(sentiment, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"levle": "unit"}))
    code = run("importance", "--config", cfg, "--model", sentiment / "m.json", "--data",
               sentiment / "test.tsv", "--out", tmp_path / "x.csv")
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error: UsageError:") and "levle" in err and err.count("\n") == 1


def test_usage_errors(capsys):
    assert run("bogus") == 2
    assert run("importance", "--no-such-flag", 1) == 2
    assert run("train") == 2
    err = capsys.readouterr().err
    assert all(line.startswith("error: UsageError:") for line in err.splitlines())


def test_runtime_errors_are_one_line(tmp_path, capsys):
    assert run("eval", "--model", tmp_path / "missing.json", "--data", tmp_path / "d.tsv") == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1
    bad = tmp_path / "e.txt"
    bad.write_text("a 1 2\nb 1\n")
    freqs = tmp_path / "f.tsv"
    freqs.write_text("1.0\ta\n")
    assert run("freq-corr", "--embeddings", bad, "--freqs", freqs, "--dim", 0) == 1
    assert "ParseError" in capsys.readouterr().err


def test_freq_corr(tmp_path, capsys):
    assert run("synth", "--kind", "frequency", "--out-dir", tmp_path, "--vocab-size", 500, "--seed", 2) == 0
    spec = json.loads((tmp_path / "spec.json").read_text())["spec"]
    dim = spec["planted"][0]
    assert run("freq-corr", "--embeddings", tmp_path / "embeddings.txt", "--freqs", tmp_path / "train.tsv",
               "--dim", dim, "--out", tmp_path / "fit.json") == 0
    fit = json.loads(capsys.readouterr().out)
    assert fit["r_squared"] > 0.5 and fit["dim"] == dim


def test_window_mlp_pipeline_is_byte_reproducible(tmp_path):
    names = ("embeddings.txt", "train.tsv", "m.json", "i.csv", "i.svg")
    runs = []
    for _ in range(2):
        assert run("synth", "--kind", "planted_dims", "--out-dir", tmp_path, "--vocab-size", 300, "--seed", 5) == 0
        assert run("train", "--embeddings", tmp_path / "embeddings.txt", "--train", tmp_path / "train.tsv",
                   "--dev", tmp_path / "dev.tsv", "--window", 1, "--hidden-size", 8, "--epochs", 3,
                   "--dropout", 0.2, "--seed", 5, "--out", tmp_path / "m.json") == 0
        assert run("importance", "--model", tmp_path / "m.json", "--data", tmp_path / "test.tsv",
                   "--out", tmp_path / "i.csv", "--heatmap", tmp_path / "i.svg", "--seed", 5) == 0
        runs.append({n: (tmp_path / n).read_bytes() for n in names})
    assert runs[0] == runs[1]


def test_console_script():
    proc = subprocess.run([sys.executable, "-m", "erasure_lab.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "rl-apply" in proc.stdout


def test_oracle_skips_over_budget_examples(sentiment, capsys):
    out = sentiment / "small_oracle.jsonl"
    assert run("oracle", "--model", sentiment / "m.json", "--data", sentiment / "test.tsv",
               "--max-n", 5, "--out", out) == 0
    summary = json.loads(capsys.readouterr().out)
    meta = json.loads(out.read_text().splitlines()[0][2:])
    assert summary["over_budget"] == len(meta["over_budget"]) > 0
    assert summary["solved"] + summary["over_budget"] == summary["examples"] == len(data_lines(sentiment / "test.tsv"))
    assert len(data_lines(out)) == summary["solved"]
