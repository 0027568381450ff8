import math
from collections import Counter
from itertools import product

import numpy as np
import pytest
from scipy import stats

from distillforge.synth import (
    SyntheticTask,
    SyntheticTaskSpec,
    conditional_entropy,
    enumerate_targets,
    generate_bitext,
    load_oracle,
    oracle_mode_translation,
    write_task,
)
from distillforge.textproc import Bitext


def test_spec_validation_and_roundtrip(tmp_path):
    with pytest.raises(ValueError):
        SyntheticTaskSpec(modes_per_phrase=2, mode_probs=(0.3, 0.7))
    with pytest.raises(ValueError):
        SyntheticTaskSpec(modes_per_phrase=2, mode_probs=(0.6, 0.3))
    with pytest.raises(ValueError):
        SyntheticTaskSpec(noise_rate=1.0)
    with pytest.raises(ValueError):
        SyntheticTaskSpec.from_dict({"bogus": 1})
    spec = SyntheticTaskSpec(seed=4, modes_per_phrase=2, mode_probs=None)
    assert spec.mode_probs == (0.5, 0.5)
    spec.save(tmp_path / "s.json")
    assert SyntheticTaskSpec.load(tmp_path / "s.json") == spec


def test_inventory_invariants():
    task = SyntheticTaskSpec().task
    assert len(task.phrases) == 60 and all(len(m) == 3 for m in task.modes)
    for modes in task.modes:
        assert len(set(modes)) == 3
    src_words = [w for p in task.phrases for w in p]
    trg_words = [w for ms in task.modes for m in ms for w in m]
    assert len(set(src_words)) == len(src_words)
    assert len(set(trg_words)) == len(trg_words) and not (set(trg_words) & set(task.rare))
    assert len(task.rare) == 100


def test_generation_deterministic_and_splits_differ():
    spec = SyntheticTaskSpec(seed=3)
    a, b = generate_bitext(spec, 200), generate_bitext(spec, 200)
    assert a["train"].pairs == b["train"].pairs and a["test"].pairs == b["test"].pairs
    assert len(a["valid"]) == len(a["test"]) == 10
    assert a["train"].pairs[:10] != a["test"].pairs
    assert generate_bitext(SyntheticTaskSpec(seed=4), 200)["train"].pairs != a["train"].pairs
    for s, _ in a["train"].pairs:
        assert 3 <= len(spec.task.parse_source(s)) <= 8


def test_prefix_stable_generation():
    spec = SyntheticTaskSpec(seed=1)
    small = generate_bitext(spec, {"train": 50, "valid": 5, "test": 5})
    large = generate_bitext(spec, {"train": 100, "valid": 5, "test": 5})
    assert large["train"].pairs[:50] == small["train"].pairs


def _mode_counts(spec, n):
    task = spec.task
    counts = Counter()
    for s, t in generate_bitext(spec, {"train": n, "valid": 1, "test": 1})["train"].pairs:
        for pid, chunk in task.segment(s, t):
            counts[task.modes[pid].index(chunk)] += 1
    return counts


def test_mode_frequencies_match_probabilities():
    spec = SyntheticTaskSpec(modes_per_phrase=2, mode_probs=(0.7, 0.3), noise_rate=0.0, seed=5)
    counts = _mode_counts(spec, 10_000)
    total = sum(counts.values())
    assert abs(counts[0] / total - 0.7) < 0.02 and abs(counts[1] / total - 0.3) < 0.02


def test_chi_square_goodness_of_fit():
    spec = SyntheticTaskSpec(noise_rate=0.0, seed=6)
    counts = _mode_counts(spec, 10_000)
    obs = np.array([counts[i] for i in range(3)])
    assert stats.chisquare(obs, obs.sum() * np.array(spec.mode_probs)).pvalue > 0.01


def test_deterministic_task_translation_and_zero_entropy():
    spec = SyntheticTaskSpec(modes_per_phrase=1, mode_probs=(1.0,), noise_rate=0.0, seed=2)
    data = generate_bitext(spec, 500)
    for s, t in data["test"].pairs:
        assert list(t) == oracle_mode_translation(spec, s)
    assert conditional_entropy(data["train"], spec) == 0.0


def test_fair_coin_entropy_is_one_bit():
    spec = SyntheticTaskSpec(modes_per_phrase=2, mode_probs=(0.5, 0.5), noise_rate=0.0, seed=8)
    h = conditional_entropy(generate_bitext(spec, 5000)["train"], spec)
    assert abs(h - 1.0) < 0.05


def test_oracle_mode_output_has_lower_entropy():
    spec = SyntheticTaskSpec(seed=0)
    base = generate_bitext(spec, 2000)["train"]
    modes = Bitext(tuple((s, tuple(oracle_mode_translation(spec, s))) for s, _ in base.pairs))
    assert conditional_entropy(modes, spec) == 0.0 < conditional_entropy(base, spec)


def _tiny_task(noise):
    spec = SyntheticTaskSpec(source_vocab=2, modes_per_phrase=2, mode_probs=(0.7, 0.3), noise_rate=noise,
                             mode_len=(1, 2), rare_pool=2, seed=11, phrase_inventory=(("a",), ("b",)))
    return spec.task


@pytest.mark.parametrize("noise", [0.0, 0.1])
def test_exact_distribution_normalizes_and_mode_is_argmax(noise):
    task = _tiny_task(noise)
    vocab = sorted({w for ms in task.modes for m in ms for w in m} | set(task.rare))
    source = ["a", "b"]
    table = enumerate_targets(task, source, vocab, 4)
    assert math.fsum(math.exp(v) for v in table.values()) == pytest.approx(1.0, abs=1e-9)
    best = max(table, key=table.get)
    assert list(best) == oracle_mode_translation(task, source)


def test_log_prob_matches_sampling_frequency():
    task = _tiny_task(0.1)
    rng = np.random.default_rng(0)
    counts = Counter()
    n = 20_000
    for _ in range(n):
        s, t = task.sample(rng)
        if s == ["a", "b", "a"]:
            counts[tuple(t)] += 1
    top, k = counts.most_common(1)[0]
    m = sum(counts.values())
    assert k / m == pytest.approx(math.exp(task.log_prob(["a", "b", "a"], top)), abs=0.03)


def test_unknown_phrase_raises():
    task = SyntheticTaskSpec().task
    with pytest.raises(ValueError, match="unknown source word"):
        oracle_mode_translation(task, ["nonsense"])


def test_segment_handles_impossible_targets():
    task = SyntheticTaskSpec().task
    s, _ = task.sample(np.random.default_rng(1))
    chunks = task.segment(s, ["zzz"] * 30)
    assert len(chunks) == len(task.parse_source(s))
    assert sum(len(c) for _, c in chunks) == 30


def test_write_and_load_oracle(tmp_path):
    spec = SyntheticTaskSpec(seed=9)
    data = generate_bitext(spec, 30)
    write_task(spec.task, data, tmp_path)
    back = load_oracle(tmp_path / "oracle.json")
    assert back.phrases == spec.task.phrases and back.modes == spec.task.modes
    assert (tmp_path / "train.src").read_text().count("\n") == 30
    assert SyntheticTaskSpec.load(tmp_path / "spec.json") == spec
