import json

import pytest

from qa_adapt import cli
from qa_adapt.cli import run_cli

SPEC = """
n_train = 160
n_val = 40
n_test = 80
text_dim = 6
image_dim = 5
num_decoys = 3
concept_count = 14

[answer_shift]
mix = 0.5
offset = 1.5
seed = 2
"""

SCORER = ["--epochs", "2", "--lr", "1e-3", "--hidden", "16"]
ADAPT = ["--iterations", "3", "--k", "5", "--l", "2", "--adapt-batch-size", "20", "--adapt-lr", "1e-3",
         "--disc-hidden", "16", "--transform-hidden", "8"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.toml").write_text(SPEC)
    assert run_cli(["gen-synth", "--spec", str(root / "spec.toml"), "--out-dir", str(root / "data")]) == 0
    assert run_cli(["train-vqa", "--data", str(root / "data/source"), "--out-dir", str(root / "m"), *SCORER]) == 0
    return root


def test_gen_synth_outputs(workspace):
    names = sorted(p.name for p in (workspace / "data").iterdir())
    assert names == ["source.images.qafv", "source.jsonl", "source.text.qafv", "stats.json",
                     "target.images.qafv", "target.jsonl", "target.text.qafv"]
    stats = json.loads((workspace / "data/stats.json").read_text())
    assert stats["source"]["splits"]["train"]["count"] == 160


def test_gen_synth_seed_flag_overrides_spec(workspace, tmp_path):
    assert run_cli(["gen-synth", "--spec", str(workspace / "spec.toml"), "--out-dir", str(tmp_path / "a"),
                    "--seed", "7"]) == 0
    assert (tmp_path / "a/source.jsonl").read_bytes() != (workspace / "data/source.jsonl").read_bytes()


def test_gen_synth_builtin_benchmark(tmp_path):
    assert run_cli(["gen-synth", "--benchmark", "null", "--out-dir", str(tmp_path)]) == 0
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert stats["target"]["splits"]["test"]["count"] == 1000


def test_gen_synth_rejects_bad_spec(tmp_path, capsys):
    (tmp_path / "bad.toml").write_text("bogus = 1\n")
    assert run_cli(["gen-synth", "--spec", str(tmp_path / "bad.toml"), "--out-dir", str(tmp_path)]) == 1
    assert "bogus" in capsys.readouterr().err
    (tmp_path / "broken.toml").write_text("n_train = \n")
    assert run_cli(["gen-synth", "--spec", str(tmp_path / "broken.toml"), "--out-dir", str(tmp_path)]) == 1


def test_train_vqa_outputs(workspace):
    meta = json.loads((workspace / "m/scorer_IQC.json").read_text())
    assert meta["mode"] == "IQC" and meta["config"]["epochs"] == 2
    assert 0.0 <= meta["val"]["accuracy"] <= 1.0


def adapt_args(workspace, out, *extra):
    return ["adapt", "--source", str(workspace / "data/source"), "--target", str(workspace / "data/target"),
            "--scorer", str(workspace / "m/scorer_IQC.ckpt"), "--out-dir", str(out), *ADAPT, *extra]


def test_adapt_writes_transforms_and_diagnostics(workspace, tmp_path):
    assert run_cli(adapt_args(workspace, tmp_path, "--setting", "QTD", "--lambda", "0.5")) == 0
    assert (tmp_path / "adapt_QTD.transforms.ckpt").exists()
    lines = (tmp_path / "adapt_QTD.diagnostics.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,disc_loss,transform_loss,surrogate_loss,jsd_estimate") and len(lines) == 4
    assert "lam = 0.5" in (tmp_path / "adapt_QTD.config.txt").read_text()


@pytest.mark.parametrize("setting,lam", [("TD", "0.5"), ("QT", "0.1"), ("Q", "0.1")])
def test_adapt_default_lambda(workspace, tmp_path, setting, lam):
    assert run_cli(adapt_args(workspace, tmp_path, "--setting", setting)) == 0
    assert f"lam = {lam}\n" in (tmp_path / f"adapt_{setting}.config.txt").read_text()


def test_adapt_bogus_setting(workspace, tmp_path, capsys):
    assert run_cli(adapt_args(workspace, tmp_path, "--setting", "BOGUS")) == 1
    err = capsys.readouterr().err
    assert "valid settings: Q, T, T+D, Q+T, Q+T+D" in err


def test_adapt_rejects_non_iqc_scorer(workspace, tmp_path):
    assert run_cli(["train-vqa", "--data", str(workspace / "data/source"), "--mode", "C", "--out-dir", str(tmp_path),
                    *SCORER]) == 0
    args = adapt_args(workspace, tmp_path, "--setting", "T")
    args[args.index("--scorer") + 1] = str(tmp_path / "scorer_C.ckpt")
    assert run_cli(args) == 1


def test_eval_with_transforms(workspace, tmp_path):
    assert run_cli(adapt_args(workspace, tmp_path, "--setting", "T")) == 0
    assert run_cli(["eval", "--data", str(workspace / "data/target"), "--scorer", str(workspace / "m/scorer_IQC.ckpt"),
                    "--transforms", str(tmp_path / "adapt_T.transforms.ckpt"), "--out-dir", str(tmp_path)]) == 0
    result = json.loads((tmp_path / "eval_mc_test.json").read_text())
    assert result["n"] == 80 and result["metric"] == "MC"


def test_eval_vqa10(workspace, tmp_path):
    assert run_cli(["eval", "--data", str(workspace / "data/target"), "--scorer", str(workspace / "m/scorer_IQC.ckpt"),
                    "--metric", "vqa10", "--split", "val", "--out-dir", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "eval_vqa10_val.json").read_text())["metric"] == "VQA10"


def compare_args(workspace, out, *extra):
    return ["compare", "--source", str(workspace / "data/source"), "--target", str(workspace / "data/target"),
            "--out-dir", str(out), *SCORER, *ADAPT, *extra]


def test_compare_subsample_annotation(workspace, tmp_path):
    assert run_cli(compare_args(workspace, tmp_path, "--subsample", "0.0625", "--seeds", "5")) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["rows"][0]["subsample_fraction"] == 0.0625 and report["rows"][0]["seed_count"] == 5
    assert "| 1/16 | 5 |" in (tmp_path / "report.md").read_text()


def test_compare_five_settings(workspace, tmp_path):
    assert run_cli(compare_args(workspace, tmp_path, "--settings", "Q,T,TD,QT,QTD", "--seeds", "1")) == 0
    md = (tmp_path / "report.md").read_text()
    assert "| DA Q | DA T | DA T+D | DA Q+T | DA Q+T+D |" in md
    assert len(json.loads((tmp_path / "report.json").read_text())["rows"]) == 5


@pytest.mark.parametrize("fraction", ["0", "1.5", "-1"])
def test_compare_rejects_bad_subsample(workspace, tmp_path, fraction):
    assert run_cli(compare_args(workspace, tmp_path, "--subsample", fraction)) == 1


def test_report_reemits(workspace, tmp_path):
    assert run_cli(compare_args(workspace, tmp_path / "c", "--seeds", "1")) == 0
    assert run_cli(["report", "--input", str(tmp_path / "c/report.json"), "--format", "csv",
                    "--out-dir", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r/report.csv").read_bytes() == (tmp_path / "c/report.csv").read_bytes()
    (tmp_path / "junk.json").write_text("{}")
    assert run_cli(["report", "--input", str(tmp_path / "junk.json"), "--out-dir", str(tmp_path)]) == 1


def test_train_probe(workspace, tmp_path):
    assert run_cli(["train-probe", "--a", str(workspace / "data/source"), "--b", str(workspace / "data/target"),
                    "--components", "Q;T", "--sizes", "100,40,100", "--out-dir", str(tmp_path), *SCORER]) == 0
    lines = (tmp_path / "probe.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines] == ["components", "Q", "T"]
    assert run_cli(["train-probe", "--a", str(workspace / "data/source"), "--b", str(workspace / "data/target"),
                    "--components", "QX", "--out-dir", str(tmp_path)]) == 1


def test_config_file_defaults_and_override(workspace, tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("epochs = 1\nhidden = 8\nlr = 0.001\niterations = 50  # adapt-only key, skipped here\n")
    assert run_cli(["train-vqa", "--data", str(workspace / "data/source"), "--config", str(conf),
                    "--out-dir", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a/scorer_IQC.json").read_text())["config"]["epochs"] == 1
    assert run_cli(["train-vqa", "--data", str(workspace / "data/source"), "--config", str(conf), "--epochs", "2",
                    "--out-dir", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b/scorer_IQC.json").read_text())["config"]["epochs"] == 2
    conf.write_text("nonsense = 1\n")
    assert run_cli(["train-vqa", "--data", str(workspace / "data/source"), "--config", str(conf),
                    "--out-dir", str(tmp_path)]) == 1


def test_missing_input_is_user_error(tmp_path, capsys):
    assert run_cli(["train-vqa", "--data", str(tmp_path / "nope"), "--out-dir", str(tmp_path)]) == 1
    assert "not found" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert run_cli([]) == 1
    assert run_cli(["frobnicate"]) == 1
    assert run_cli(["train-vqa", "--out-dir", str(tmp_path)]) == 1
    assert run_cli(["--help"]) == 0


def test_internal_error_exit_two(workspace, tmp_path, monkeypatch, capsys):
    def boom(args):
        raise RuntimeError("kaput")

    monkeypatch.setitem(cli.HANDLERS, "eval", boom)
    assert run_cli(["eval", "--data", "x", "--scorer", "y", "--out-dir", str(tmp_path)]) == 2
    assert "kaput" in capsys.readouterr().err


def test_rerun_is_byte_identical(workspace, tmp_path):
    runs = []
    for name in ("one", "two"):
        out = tmp_path / name
        assert run_cli(["gen-synth", "--spec", str(workspace / "spec.toml"), "--out-dir", str(out / "data")]) == 0
        assert run_cli(["train-vqa", "--data", str(out / "data/source"), "--out-dir", str(out), *SCORER]) == 0
        assert run_cli(adapt_args(workspace, out, "--setting", "QTD")) == 0
        assert run_cli(compare_args(workspace, out, "--seeds", "2", "--coral")) == 0
        runs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    assert runs[0].keys() == runs[1].keys() and len(runs[0]) > 10
    for key in runs[0]:
        assert runs[0][key] == runs[1][key], key
