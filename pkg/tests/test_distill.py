import json

import pytest

from distillforge.decode import Translator
from distillforge.distill import (
    DatasetRecipe,
    bitext_hash,
    build_recipe,
    concat_datasets,
    make_best2_dataset,
    make_bt_dataset,
    make_kd_dataset,
    write_recipe,
)
from distillforge.synth import SyntheticTaskSpec, generate_bitext, oracle_mode_translation
from distillforge.textproc import Bitext, Codec, read_bitext
from distillforge.train import TrainConfig, train_loop

from conftest import tiny_config


def _train(data: Bitext, updates: int, hidden: int = 16) -> Translator:
    src, trg = Codec.fit(data.sources, 0), Codec.fit(data.targets, 0)
    cfg = TrainConfig(initial_learning_rate=0.02, batch_size=200, checkpoint_frequency=updates, max_checkpoints=1,
                      label_smoothing=0.0, valid_beam_size=1)
    model = tiny_config(embed_size=hidden, hidden_size=hidden)
    return train_loop(model, cfg, data, Bitext(data.pairs[:5]), src, trg, log_timing=False).translator


@pytest.fixture(scope="module")
def memorized():
    spec = SyntheticTaskSpec(source_vocab=6, modes_per_phrase=1, mode_probs=(1.0,), noise_rate=0.0,
                             sentence_len=(1, 3), seed=1)
    base = generate_bitext(spec, {"train": 50, "valid": 1, "test": 1})["train"]
    return base, _train(base, 250), _train(base.swapped(), 250)


@pytest.fixture(scope="module")
def two_mode():
    spec = SyntheticTaskSpec(source_vocab=4, modes_per_phrase=2, mode_probs=(0.6, 0.4), noise_rate=0.0,
                             sentence_len=(1, 1), phrase_len=(1, 1), mode_len=(1, 1), seed=2)
    base = generate_bitext(spec, {"train": 400, "valid": 1, "test": 1})["train"]
    return spec, base, _train(base, 150)


def test_recipe_parsing():
    r = DatasetRecipe.parse("base+kd+bt")
    assert r.components == ("base", "kd", "bt") and r.name == "base+kd+bt"
    assert DatasetRecipe.parse("base+best-2").components == ("base", "best2")
    assert DatasetRecipe.parse("baseline").name == "base"
    assert r.needs_teacher and r.needs_reverse_teacher
    assert not DatasetRecipe.parse("base").needs_teacher
    with pytest.raises(ValueError):
        DatasetRecipe.parse("base+magic")
    with pytest.raises(ValueError):
        DatasetRecipe(())


def test_concat_properties():
    a = Bitext((( ("x",), ("X",) ),), "a")
    b = Bitext((( ("y",), ("Y",) ), (("x",), ("X",))), "b")
    c = Bitext((( ("z",), ("Z",) ),), "c")
    assert concat_datasets([a]) is a
    ab = concat_datasets([a, b])
    assert len(ab) == 3 and ab.name == "a+b" and ab.pairs.count((("x",), ("X",))) == 2
    assert concat_datasets([ab, c]).pairs == concat_datasets([a, concat_datasets([b, c])]).pairs
    with pytest.raises(ValueError):
        concat_datasets([])


def test_kd_of_memorizing_teacher_matches_base(memorized):
    base, teacher, _ = memorized
    kd = make_kd_dataset(teacher, base)
    assert kd.sources == base.sources
    agree = sum(a == b for a, b in zip(kd.targets, base.targets)) / len(base)
    assert agree >= 0.9
    assert bitext_hash(make_kd_dataset(teacher, base)) == bitext_hash(kd)


def test_bt_keeps_gold_targets(memorized):
    base, _, reverse = memorized
    bt = make_bt_dataset(reverse, base)
    assert len(bt) == len(base) and bt.targets == base.targets


def test_bt_sources_differ_for_imperfect_teacher():
    spec = SyntheticTaskSpec(seed=3)
    base = generate_bitext(spec, {"train": 40, "valid": 1, "test": 1})["train"]
    weak = _train(base.swapped(), 5, hidden=4)
    bt = make_bt_dataset(weak, base)
    assert len(bt) == len(base) and bt.targets == base.targets
    assert sum(a != b for a, b in zip(bt.sources, base.sources)) > 0


def test_best2_recovers_two_modes(two_mode):
    spec, base, teacher = two_mode
    sources = sorted(set(base.sources))
    probe = Bitext(tuple((s, ("-",)) for s in sources))
    data, shortfall = make_best2_dataset(teacher, probe)
    assert shortfall == 0 and len(data) == 2 * len(sources)
    task = spec.task
    for i, s in enumerate(sources):
        pid = task.parse_source(s)[0]
        assert data.pairs[i] == (s, task.modes[pid][0])
        assert data.pairs[len(sources) + i] == (s, task.modes[pid][1])
        assert list(data.pairs[i][1]) == oracle_mode_translation(task, s)
    with pytest.raises(ValueError):
        make_best2_dataset(teacher, probe, beam_size=1)


def test_best2_size_bounds(memorized):
    base, teacher, _ = memorized
    data, shortfall = make_best2_dataset(teacher, base)
    assert len(base) <= len(data) == 2 * len(base) - shortfall <= 2 * len(base)
    counts = {s: data.sources.count(s) for s in set(base.sources)}
    assert all(1 <= c <= 2 * base.sources.count(s) for s, c in counts.items())


def test_build_recipe_sizes_and_cache(memorized, tmp_path):
    base, teacher, reverse = memorized
    cache = {}
    full = build_recipe("base+kd+bt", base, teacher, reverse, cache=cache)
    assert len(full.bitext) == len(base) + len(full.parts["kd"]) + len(full.parts["bt"])
    assert full.bitext.name == "base+kd+bt"
    again = build_recipe("base+kd", base, teacher, cache=cache)
    assert again.parts["kd"] is full.parts["kd"]
    b2 = build_recipe("base+best-2", base, teacher, cache=cache)
    assert len(b2.bitext) == 3 * len(base) - b2.shortfall
    with pytest.raises(ValueError, match="needs a teacher"):
        build_recipe("kd", base)
    with pytest.raises(ValueError, match="reverse teacher"):
        build_recipe("bt", base, teacher)

    path = write_recipe(full, tmp_path, teacher="t/ckpt", reverse_teacher="r/ckpt", seeds={"task": 1})
    manifest = json.loads(path.read_text())
    assert manifest["name"] == "base+kd+bt" and manifest["size"] == len(full.bitext)
    assert [c["name"] for c in manifest["components"]] == ["base", "kd", "bt"]
    assert manifest["sha256"] == bitext_hash(full.bitext) and manifest["teacher"] == "t/ckpt"
    assert read_bitext(tmp_path / "base+kd+bt").pairs == full.bitext.pairs
