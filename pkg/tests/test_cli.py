import csv

import numpy as np
import pytest

from rarec import checkpoint as ck
from rarec import cli, config, pipeline
from rarec.alignment import VARIANTS

TINY = """
[synthetic]
num_users = 120
num_items = 60
[id_model]
embedding_dim = 8
num_epochs = 2
[encoder]
num_layers = 1
hidden_dim = 8
num_heads = 2
ffn_dim = 16
vocab_size = 512
[alignment]
steps = 12
batch_size = 8
holdout_size = 16
[eval]
export_samples = 7
"""

COMMANDS = ["generate", "pretrain", "build-align-set", "train-align", "eval", "export"]


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY)
    return path


def run_all(cfg_path, out, *extra):
    for cmd in COMMANDS:
        assert cli.main([cmd, "--config", str(cfg_path), "--out", str(out), *extra]) == 0, cmd


@pytest.fixture(scope="module")
def run_dir(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run_all(tiny_config, out, "--seed", "5")
    return out


def test_all_commands_write_their_artifacts(run_dir, capsys):
    names = {p.name for p in run_dir.iterdir()}
    for expected in ("corpus.jsonl", "id_model.manifest", "id_model.bin", "item_map.tsv",
                     "align_set-efficient.jsonl", "align_set-efficient.report", "encoder.manifest",
                     "align-full-efficient.manifest", "loss-full-efficient.tsv",
                     "metrics-full-efficient.txt", "export-full-efficient", "config.effective.ini"):
        assert expected in names
    loss_lines = (run_dir / "loss-full-efficient.tsv").read_text().splitlines()
    assert len(loss_lines) == 12 and all(len(l.split("\t")) == 5 for l in loss_lines)
    enc = ck.load(run_dir / "encoder")
    assert enc.meta["hash_function"] == "blake2b64-mod" and enc.meta["encoder.vocab_size"] == "512"


def test_effective_config_reproduces_the_run(run_dir):
    cfg = config.load(run_dir / "config.effective.ini")
    assert cfg.run.seed == 5 and cfg.run.out == str(run_dir)
    assert cfg.synthetic.num_users == 120


def test_metrics_file_has_records_and_comparison(run_dir):
    text = (run_dir / "metrics-full-efficient.txt").read_text()
    first = text.splitlines()[0]
    assert first.startswith("rarec HR@10=") and "users=" in first
    assert "aligned model vs hard-prompt baseline" in text and "rel" in text


def test_eval_rerun_is_identical(tiny_config, run_dir):
    before = (run_dir / "metrics-full-efficient.txt").read_bytes()
    assert cli.main(["eval", "--config", str(tiny_config), "--out", str(run_dir), "--seed", "5"]) == 0
    assert (run_dir / "metrics-full-efficient.txt").read_bytes() == before


def test_export_round_trip_and_external_loading(tiny_config, run_dir):
    export = run_dir / "export-full-efficient"
    files = sorted(p.name for p in export.iterdir())
    assert files == ["item_aligned_l1.tsv", "item_id.tsv", "item_text_l1.tsv",
                     "user_aligned_l1.tsv", "user_id.tsv", "user_text_l1.tsv"]
    for name in files:
        labels, mat = pipeline.read_matrix(export / name)
        assert mat.shape[0] == 7 and set(labels) == {name.split("_")[1] if "_l" in name else "id"}
        # generic readers see the same numbers without any conversion step
        loaded = np.loadtxt(export / name, delimiter="\t", skiprows=1,
                            usecols=range(4, 4 + mat.shape[1]), dtype=np.float32, ndmin=2)
        assert loaded.tobytes() == mat.tobytes()
        with open(export / name, newline="") as f:
            rows = list(csv.DictReader(f, delimiter="\t"))
        assert rows[0]["source"] in ("id", "text", "aligned") and rows[0]["v0"]
    # ID rows match the checkpointed table bitwise
    cfg = config.load(run_dir / "config.effective.ini")
    model = pipeline.load_aligned_model(cfg)
    item_map = ck.read_item_map(run_dir / "item_map.tsv")
    with open(export / "item_id.tsv", newline="") as f:
        ents = [r["entity"] for r in csv.DictReader(f, delimiter="\t")]
    _, mat = pipeline.read_matrix(export / "item_id.tsv")
    table = model.id_embeddings.item_table[[item_map[e] for e in ents]].astype(np.float32)
    assert mat.tobytes() == table.tobytes()


def test_determinism_across_reruns(tiny_config, run_dir, tmp_path):
    run_all(tiny_config, tmp_path, "--seed", "5")
    for p in run_dir.rglob("*"):
        if p.is_file() and p.name != "config.effective.ini":
            assert (tmp_path / p.relative_to(run_dir)).read_bytes() == p.read_bytes(), p.name


def test_every_variant_trains_from_the_same_config(tiny_config, run_dir, capsys):
    for variant in VARIANTS:
        assert cli.main(["train-align", "--config", str(tiny_config), "--out", str(run_dir), "--seed", "5",
                         "--variant", variant]) == 0
        out = capsys.readouterr().out
        assert f"variant={variant}" in out
        if variant == "full":
            line = out.splitlines()[0]
            count = line.split("trainable_parameters=")[1].split()[0]
            assert line.endswith(f"closed_form={count}")
        assert (run_dir / f"align-{variant}-efficient.manifest").exists()


def test_zero_lambda_run_is_reported(tiny_config, run_dir, tmp_path, capsys):
    cfg = tmp_path / "lam0.ini"
    cfg.write_text(TINY.replace("[alignment]\n", "[alignment]\nlam = 0\n") + "[run]\nname = lam0\n")
    assert cli.main(["train-align", "--config", str(cfg), "--out", str(run_dir), "--seed", "5"]) == 0
    assert "monitoring only" in capsys.readouterr().out


def test_errors_are_one_parsable_line(tiny_config, tmp_path, capsys):
    assert cli.main(["eval", "--config", str(tiny_config), "--out", str(tmp_path / "empty")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error=PipelineError command=eval message=")
    bad = tmp_path / "bad.ini"
    bad.write_text("[alignment]\nlamda = 1\n")
    assert cli.main(["generate", "--config", str(bad)]) == 1
    assert capsys.readouterr().err.startswith("error=ConfigError command=generate")
    with pytest.raises(SystemExit):
        cli.main(["train-align", "--variant", "bogus"])
