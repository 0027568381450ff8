import pytest
from hypothesis import given, settings, strategies as st

from distillforge.textproc import (
    EOS,
    SPECIALS,
    UNK,
    Bitext,
    BpeModel,
    Codec,
    Vocabulary,
    apply_bpe,
    build_vocab,
    corpus_stats,
    filter_long_pairs,
    learn_bpe,
    read_bitext,
    reverse_bpe,
    write_bitext,
)

words = st.text(alphabet="abcdeé", min_size=1, max_size=8)
sentences = st.lists(words, min_size=1, max_size=6)


def test_learn_bpe_examples():
    assert learn_bpe(["ab", "ab", "ac"], 1).merges == (("a", "b"),)
    assert learn_bpe(["ab cd", "ef"], 0).merges == ()
    assert learn_bpe(["aa", "aa"], 2).merges == (("a", "a"),)


def test_learn_bpe_ties_are_lexicographic():
    # "ba" and "ab" both occur twice; ("a", "b") sorts first
    assert learn_bpe(["ab", "ba", "ab ba"], 1).merges == (("a", "b"),)


def test_learn_bpe_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        learn_bpe([], 3)


def test_apply_bpe_examples():
    assert apply_bpe(["ab"], BpeModel((("a", "b"),))) == ["ab"]
    assert apply_bpe(["ab"], BpeModel(())) == ["a@@", "b"]
    assert apply_bpe(["xyz"], BpeModel((("a", "b"),))) == ["x@@", "y@@", "z"]


def test_merge_priority_follows_order():
    model = BpeModel((("b", "c"), ("a", "b")))
    assert apply_bpe("abc", model) == ["a@@", "bc"]


@settings(max_examples=200, deadline=None)
@given(corpus=st.lists(sentences, min_size=1, max_size=8), sent=sentences, n=st.integers(0, 30))
def test_bpe_roundtrip(corpus, sent, n):
    model = learn_bpe(corpus, n)
    assert reverse_bpe(apply_bpe(sent, model)) == list(sent)


@settings(max_examples=50, deadline=None)
@given(corpus=st.lists(sentences, min_size=1, max_size=8), n=st.integers(0, 20))
def test_bpe_deterministic_and_unique(corpus, n):
    a, b = learn_bpe(corpus, n), learn_bpe(list(corpus), n)
    assert a == b
    assert len(set(a.merges)) == len(a.merges) <= n


def test_bpe_file_format(tmp_path):
    model = BpeModel((("a", "b"), ("ab", "c")))
    model.save(tmp_path / "m.bpe")
    lines = (tmp_path / "m.bpe").read_text().splitlines()
    assert lines == ["#bpe v1 marker=@@", "a b", "ab c"]
    assert BpeModel.load(tmp_path / "m.bpe") == model


def test_build_vocab_examples():
    v = build_vocab(["a a b"], 1)
    assert len(v) == 6 and v.tokens[:4] == SPECIALS and v.tokens[4:] == ("a", "b")
    v2 = build_vocab(["a"], 2)
    assert len(v2) == 4 and v2.encode(["a"]) == [UNK]


@settings(max_examples=50, deadline=None)
@given(corpus=st.lists(sentences, min_size=1, max_size=8))
def test_vocab_covers_corpus_and_is_contiguous(corpus):
    v = build_vocab(corpus, 1)
    assert sorted(v.token_to_id.values()) == list(range(len(v)))
    for s in corpus:
        assert UNK not in v.encode(s)


def test_vocab_decode_and_file(tmp_path):
    v = build_vocab(["x y y"])
    ids = v.encode(["y", "x"]) + [EOS, v.token_to_id["x"]]
    assert v.decode(ids) == ["y", "x"]
    v.save(tmp_path / "v.txt")
    assert (tmp_path / "v.txt").read_text().splitlines()[0] == "<pad>\t0"
    assert Vocabulary.load(tmp_path / "v.txt") == v


def test_corpus_stats_example():
    assert corpus_stats(Bitext.from_lists(["a b"], ["x y x"])) == {"avg_tokens": 3, "vocab_size": 2}


def test_corpus_stats_skips_empty_targets():
    bt = Bitext.from_lists(["a", "b"], ["x y", ""])
    assert corpus_stats(bt) == {"avg_tokens": 2, "vocab_size": 2}


def test_bitext_validation():
    with pytest.raises(ValueError):
        Bitext.from_lists(["a"], ["b", "c"])
    with pytest.raises(ValueError):
        Bitext(((("a b",), ("c",)),))


def test_bitext_files_and_length_filter(tmp_path):
    bt = Bitext.from_lists(["a b", "c " * 120, "", "d"], ["x", "y", "z", "w"])
    write_bitext(bt, tmp_path / "corpus")
    assert (tmp_path / "corpus.src").read_text().count("\n") == 4
    back = read_bitext(tmp_path / "corpus", max_seq_len=100)
    assert back.sources == [("a", "b"), ("d",)]
    codec = Codec.fit(["aaaa bbbb"], 0)
    kept, dropped = filter_long_pairs(Bitext.from_lists(["aaaa", "aaaa bbbb"], ["a", "b"]), codec, codec, 5)
    assert dropped == 1 and len(kept) == 1


def test_codec_roundtrip():
    corpus = ["low lower lowest", "new newer"]
    codec = Codec.fit(corpus, 5)
    for s in corpus:
        assert codec.decode(codec.encode(s)) == s.split()
