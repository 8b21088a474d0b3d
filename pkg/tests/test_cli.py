import json

import numpy as np
import pytest

from zeroner import cli, corpus, evaluation

from conftest import GOLDEN_GOLD, GOLDEN_PRED, SYNTH_TRAIN, SYNTH_VECTORS

TINY_KEYS = ("hidden_size = 8\nnum_layers = 1\nexpert_dim = 6\n"
             "learning_rate = 0.003\nbatch_size = 4\ndropout = 0.0\n"
             "epochs = 2\npatience = 5\nseed = 5\nngram_buckets = 32\n"
             "freeze_embeddings = true\n")


@pytest.fixture
def tiny_corpus(tmp_path):
    """First ten synthetic sentences, for fast CLI runs."""
    raw = corpus.read_raw(SYNTH_TRAIN)[:10]
    path = tmp_path / "tiny.conll"
    corpus.write_tagged(path, raw)
    return str(path)


def write_config(tmp_path, body):
    path = tmp_path / "run.cfg"
    path.write_text(body)
    return str(path)


def train_tiny(tmp_path, tiny_corpus, extra="", out_name="run", argv_extra=()):
    out_dir = tmp_path / out_name
    config = write_config(tmp_path, TINY_KEYS + (
        "train = %s\nvectors = %s\nout = %s\n%s"
        % (tiny_corpus, SYNTH_VECTORS, out_dir, extra)))
    code = cli.main(["train", "--config", config, *argv_extra])
    return code, out_dir


def test_train_writes_artifacts(tmp_path, tiny_corpus):
    code, out_dir = train_tiny(tmp_path, tiny_corpus)
    assert code == 0
    assert (out_dir / "checkpoint.bin").exists()
    metrics = (out_dir / "metrics.jsonl").read_text().splitlines()
    assert len(metrics) == 2  # one record per epoch
    record = json.loads(metrics[0])
    assert set(record) == {"epoch", "l_task1", "l_task2", "l_gate", "total",
                           "val_f1"}
    resolved = cli.read_config_file(str(out_dir / "config.resolved"))
    assert resolved["seed"] == 5
    assert resolved["epochs"] == 2


def test_train_missing_vectors_file_names_path(tmp_path, tiny_corpus, capsys):
    config = write_config(tmp_path, TINY_KEYS + (
        "train = %s\nvectors = /nowhere/vectors.vec\nout = %s\n"
        % (tiny_corpus, tmp_path / "out")))
    code = cli.main(["train", "--config", config])
    assert code == 2
    assert "/nowhere/vectors.vec" in capsys.readouterr().err


def test_train_no_moee_zeroes_gate_loss(tmp_path, tiny_corpus):
    code, out_dir = train_tiny(tmp_path, tiny_corpus, argv_extra=["--no-moee"])
    assert code == 0
    for line in (out_dir / "metrics.jsonl").read_text().splitlines():
        assert json.loads(line)["l_gate"] == 0.0


def test_flags_override_config_file(tmp_path, tiny_corpus):
    code, out_dir = train_tiny(tmp_path, tiny_corpus,
                               argv_extra=["--epochs", "1", "--seed", "9"])
    assert code == 0
    resolved = cli.read_config_file(str(out_dir / "config.resolved"))
    assert resolved["epochs"] == 1 and resolved["seed"] == 9
    assert len((out_dir / "metrics.jsonl").read_text().splitlines()) == 1


def test_unknown_config_key_is_usage_error(tmp_path, tiny_corpus, capsys):
    config = write_config(tmp_path, "trian = oops\n")
    assert cli.main(["train", "--config", config]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_missing_required_path_is_usage_error(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path)]) == 1


def test_eval_reports_match_written_predictions(tmp_path, tiny_corpus):
    code, out_dir = train_tiny(tmp_path, tiny_corpus)
    assert code == 0
    eval_dir = tmp_path / "eval"
    code = cli.main(["eval", "--checkpoint", str(out_dir / "checkpoint.bin"),
                     "--test", tiny_corpus, "--out", str(eval_dir)])
    assert code == 0
    report = json.loads((eval_dir / "report.json").read_text())
    refreshed, _ = evaluation.score_files(tiny_corpus,
                                          str(eval_dir / "predictions.conll"))
    assert report["micro"]["f1"] == refreshed.micro_f1
    assert report["seed"] == 5
    assert (eval_dir / "report.txt").read_text().startswith("seed = 5")


def test_eval_empty_test_file(tmp_path, tiny_corpus, capsys):
    code, out_dir = train_tiny(tmp_path, tiny_corpus)
    empty = tmp_path / "empty.conll"
    empty.write_text("\n")
    code = cli.main(["eval", "--checkpoint", str(out_dir / "checkpoint.bin"),
                     "--test", str(empty), "--out", str(tmp_path / "eval")])
    assert code == 2
    assert "no sentences" in capsys.readouterr().err


def test_eval_scheme_mismatch(tmp_path, tiny_corpus, capsys):
    code, out_dir = train_tiny(tmp_path, tiny_corpus)
    alien = tmp_path / "alien.conll"
    alien.write_text("x B-GENE\n")
    code = cli.main(["eval", "--checkpoint", str(out_dir / "checkpoint.bin"),
                     "--test", str(alien), "--out", str(tmp_path / "out2")])
    assert code == 2
    assert "B-GENE" in capsys.readouterr().err


def test_predict_gate_export(tmp_path, tiny_corpus):
    code, out_dir = train_tiny(tmp_path, tiny_corpus)
    single = tmp_path / "single.conll"
    single.write_text("anna B-PER\nvisited O\nberlin B-LOC\n")
    pred_dir = tmp_path / "pred"
    code = cli.main(["predict", "--checkpoint",
                     str(out_dir / "checkpoint.bin"), "--input", str(single),
                     "--out", str(pred_dir), "--gate"])
    assert code == 0
    lines = (pred_dir / "gate.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    assert header[:3] == ["token", "gold_tag", "predicted_tag"]
    assert header[3:] == ["O", "LOC", "MISC", "ORG", "PER"]
    rows = [line for line in lines[1:] if line]
    assert len(rows) == 3  # one row per token
    for row in rows:
        fields = row.split("\t")
        confidences = [float(v) for v in fields[3:]]
        assert len(confidences) == 5
        assert abs(sum(confidences) - 1.0) < 1e-5
    assert rows[0].split("\t")[1] == "B-PER"  # gold column from input tags


def test_predict_output_is_valid_iob_and_deterministic(tmp_path, tiny_corpus):
    code, out_dir = train_tiny(tmp_path, tiny_corpus)
    tokens_only = tmp_path / "tokens.txt"
    tokens_only.write_text("anna\nvisited\nberlin\n\noslo\ncalls\n")
    first = tmp_path / "p1"
    second = tmp_path / "p2"
    for target in (first, second):
        code = cli.main(["predict", "--checkpoint",
                         str(out_dir / "checkpoint.bin"),
                         "--input", str(tokens_only), "--out", str(target)])
        assert code == 0
    out_a = (first / "predictions.conll").read_bytes()
    assert out_a == (second / "predictions.conll").read_bytes()
    raw = corpus.read_raw(str(first / "predictions.conll"))
    scheme = corpus.TagScheme(["LOC", "MISC", "ORG", "PER"])
    for _, tags in raw:
        ids = [scheme.task2_id(t) for t in tags]
        assert corpus.validate_iob(ids, scheme.task2_tags) is None


def test_predict_gate_without_moee_checkpoint(tmp_path, tiny_corpus, capsys):
    code, out_dir = train_tiny(tmp_path, tiny_corpus,
                               argv_extra=["--no-moee"])
    single = tmp_path / "single.conll"
    single.write_text("anna B-PER\n")
    code = cli.main(["predict", "--checkpoint",
                     str(out_dir / "checkpoint.bin"), "--input", str(single),
                     "--out", str(tmp_path / "pg"), "--gate"])
    assert code == 1


def test_score_identity_and_golden(tmp_path, capsys):
    assert cli.main(["score", "--gold", GOLDEN_GOLD, "--pred", GOLDEN_GOLD]) == 0
    out = capsys.readouterr().out
    assert "F1 100.00" in out
    assert cli.main(["score", "--gold", GOLDEN_GOLD, "--pred", GOLDEN_PRED,
                     "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert abs(report["micro"]["f1"] - 100.0 * 14 / 27) < 1e-12


def test_score_misaligned_files(tmp_path, capsys):
    gold = tmp_path / "gold.conll"
    pred = tmp_path / "pred.conll"
    gold.write_text("a O\nb O\n")
    pred.write_text("a O\n")
    assert cli.main(["score", "--gold", str(gold), "--pred", str(pred)]) == 2


def test_trained_gate_routes_tokens_to_their_category_expert(tmp_path,
                                                             overfit_run):
    """After overfitting, the supervised gate should put its confidence on
    the gold category's expert (the O expert for non-entity tokens)."""
    pred_dir = tmp_path / "gatecheck"
    code = cli.main(["predict", "--checkpoint", overfit_run.checkpoint,
                     "--input", SYNTH_TRAIN, "--out", str(pred_dir),
                     "--gate"])
    assert code == 0
    lines = (pred_dir / "gate.tsv").read_text().splitlines()
    experts = lines[0].split("\t")[3:]
    hits, total = 0, 0
    for line in lines[1:]:
        if not line:
            continue
        fields = line.split("\t")
        gold = fields[1]
        confidences = [float(v) for v in fields[3:]]
        top = experts[int(np.argmax(confidences))]
        expected = "O" if gold == "O" else gold[2:]
        hits += (top == expected)
        total += 1
    assert total > 300
    assert hits / total >= 0.9


def test_multi_seed_replicas(tmp_path, tiny_corpus):
    out_dir = tmp_path / "multi"
    config = write_config(tmp_path, TINY_KEYS.replace("epochs = 2", "epochs = 1")
                          + "train = %s\nout = %s\n" % (tiny_corpus, out_dir))
    code = cli.main(["train", "--config", config, "--seeds", "2"])
    assert code == 0
    summary = json.loads((out_dir / "seeds.json").read_text())
    assert sorted(summary["per_seed"]) == ["5", "6"]
    for seed in (5, 6):
        assert (out_dir / ("seed%d" % seed) / "checkpoint.bin").exists()
