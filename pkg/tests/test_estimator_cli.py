import json

import numpy as np
import pytest
from sklearn.base import clone

from distillforge import cli
from distillforge.estimator import BpeSegmenter, Seq2SeqTranslator, check_parallel, check_sentences
from distillforge.synth import SyntheticTaskSpec, generate_bitext

SMALL = dict(bpe_merges=10, embed_size=8, hidden_size=8, initial_learning_rate=0.02, batch_size=200,
             checkpoint_frequency=10, max_checkpoints=3, beam_size=2)


def test_validation_helpers():
    assert check_sentences(["a b", ["c", "d"]]) == [("a", "b"), ("c", "d")]
    assert check_sentences(np.array(["a b"], dtype=object)) == [("a", "b")]
    with pytest.raises(TypeError):
        check_sentences("a b")
    with pytest.raises(ValueError):
        check_sentences(np.array([["a"]]))
    with pytest.raises(ValueError, match="different lengths"):
        check_parallel(["a"], ["a", "b"])
    with pytest.raises(ValueError, match="empty"):
        check_parallel([], [])


def test_bpe_segmenter_roundtrip():
    seg = BpeSegmenter(num_merges=5).fit(["lower lowest", "newer"])
    parts = seg.transform(["lowest newer"])
    assert seg.inverse_transform(parts) == ["lowest newer"]
    assert seg.get_params() == {"num_merges": 5, "min_count": 1}
    assert clone(seg).get_params() == seg.get_params()
    with pytest.raises(Exception):
        BpeSegmenter().transform(["x"])


def test_translator_estimator_fit_predict_score():
    data = generate_bitext(SyntheticTaskSpec(source_vocab=6, seed=2), {"train": 60, "valid": 5, "test": 5})
    X = [" ".join(s) for s in data["train"].sources]
    y = [" ".join(t) for t in data["train"].targets]
    est = Seq2SeqTranslator(**SMALL)
    assert clone(est).get_params() == est.get_params()
    est.fit(X, y)
    assert len(est.metrics_) == 3 and est.n_params_ > 0
    pred = est.predict(X[:4])
    assert len(pred) == 4 and all(isinstance(p, str) for p in pred)
    nb = est.predict(X[:2], nbest=2)
    assert all(1 <= len(c) <= 2 for c in nb)
    assert 0.0 <= est.score(X[:10], y[:10]) <= 100.0
    with pytest.raises(ValueError):
        est.score(X[:2], y[:2], sample_weight=[1, 1])
    with pytest.raises(Exception):
        Seq2SeqTranslator().predict(["a"])


def _run(argv):
    return cli.main([str(a) for a in argv])


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    spec = tmp_path / "spec.json"
    SyntheticTaskSpec(source_vocab=6, seed=3).save(spec)
    assert _run(["synth", "--spec", spec, "--n", 40, "--valid-n", 5, "--test-n", 5, "--out-dir", data]) == 0
    assert (data / "oracle.json").exists() and (data / "train.src").read_text().count("\n") == 40

    model = tmp_path / "model"
    common = ["--bpe", 10, "--num-embed", 8, "--num-hidden", 8, "--batch-size", 100, "--checkpoint-frequency", 3,
              "--max-checkpoints", 2, "--initial-learning-rate", 0.01, "--rnn-dropout-inputs", "0:0"]
    assert _run(["train", "--train", data / "train", "--valid", data / "valid", "--out-dir", model, *common]) == 0
    assert (model / "metrics.tsv").exists() and (model / "best" / "params.bin").exists()

    hyp = tmp_path / "hyp.txt"
    assert _run(["translate", "--input", data / "test.src", "--output", hyp, "--checkpoint", model / "best"]) == 0
    assert hyp.read_text().count("\n") == 5
    capsys.readouterr()
    assert _run(["score", "--hyp", data / "test.trg", "--ref", data / "test.trg"]) == 0
    assert capsys.readouterr().out.startswith("100.00")

    kd = tmp_path / "kd"
    assert _run(["distill", "--recipe", "base+kd", "--train", data / "train", "--teacher", model / "best", "--out-dir", kd]) == 0
    manifest = json.loads((kd / "manifest.json").read_text())
    assert manifest["name"] == "base+kd" and (kd / "base+kd.src").exists()

    assert _run(["distill", "--recipe", "kd", "--train", data / "train", "--out-dir", kd]) == 2
    with pytest.raises(SystemExit):
        _run(["train", "--train", data / "train", "--valid", data / "valid", "--out-dir", model, "--rnn-dropout-inputs", "0.1:0.2"])


def test_cli_experiment_and_report(tmp_path):
    cfg = {
        "task": {"source_vocab": 6, "seed": 4},
        "model": "SMALL",
        "recipe": "base",
        "trials": [1],
        "desk": {"small": {"bpe_merges": 10, "embed_size": 4, "hidden_size": 4},
                 "train": {"initial_learning_rate": 0.01, "batch_size": 100, "checkpoint_frequency": 2,
                           "max_checkpoints": 2, "valid_beam_size": 1},
                 "sizes": [30, 5, 5]},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "out"
    assert _run(["experiment", "--config", path, "--out-dir", out]) == 0
    assert (out / "table1.tsv").exists()
    assert _run(["report", "--results-dir", out]) == 0

    cfg["grid"] = {"bpe_merges": [10], "hidden_size": [4]}
    cfg["variants"] = ["base"]
    path.write_text(json.dumps(cfg))
    assert _run(["grid", "--config", path, "--out-dir", tmp_path / "grid"]) == 0
    assert (tmp_path / "grid" / "scatter.tsv").exists()
