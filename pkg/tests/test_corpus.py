import pytest
from hypothesis import given
from hypothesis import strategies as st

from domain_ensemble.corpus import (BOS_ID, EOS_ID, UNK_ID, BpeModel, CorpusFormatError, Sentence, Vocabulary,
                                    apply_bpe, build_vocab, filter_pair, load_parallel, tokenize, train_bpe)


def toks(n):
    return ["w"] * n


def test_tokenize_splits_punctuation():
    assert tokenize("Hello, world!") == ("Hello", ",", "world", "!")
    assert tokenize("  a   b ") == ("a", "b")


@pytest.mark.parametrize("n,m,expected", [
    (3, 3, True),
    (2, 3, False),
    (10, 2, False),    # 10/2 = 5 > 4.5
    (120, 120, True),
    (121, 120, False),
])
def test_filter_pair_examples(n, m, expected):
    assert filter_pair(toks(n), toks(m), min_len=3, max_len=120, max_ratio=4.5) is expected


def test_filter_pair_ratio_boundary_is_inclusive():
    assert filter_pair(toks(9), toks(2), min_len=1, max_ratio=4.5)
    assert not filter_pair(toks(10), toks(2), min_len=1, max_ratio=4.5)


@given(st.integers(3, 120), st.integers(3, 120), st.floats(1.0, 10.0))
def test_filter_pair_symmetric(n, m, ratio):
    assert filter_pair(toks(n), toks(m), max_ratio=ratio) == filter_pair(toks(m), toks(n), max_ratio=ratio)


def test_bpe_first_merge_is_most_frequent_pair():
    model = train_bpe([Sentence(("aaab",))], merges=1)
    # pairs in a a a b</w>: (a,a) x2, (a,b</w>) x1
    assert model.merges == (("a", "a"),)


def test_bpe_zero_merges_is_character_level():
    model = train_bpe([Sentence(("abc", "de"))], merges=0)
    assert model.merge_count == 0
    assert apply_bpe(model, Sentence(("abc", "de"))).tokens == ("a@@", "b@@", "c", "d@@", "e")
    assert apply_bpe(BpeModel(), Sentence(("xy",))).tokens == ("x@@", "y")


def test_bpe_stops_when_no_pairs_remain():
    model = train_bpe([Sentence(("ab",))], merges=10)
    assert model.merge_count == 1
    assert apply_bpe(model, Sentence(("ab",))).tokens == ("ab",)


def test_bpe_tie_break_is_lexicographic():
    # (a,b</w>) and (c,d</w>) both occur once
    model = train_bpe([Sentence(("cd", "ab"))], merges=1)
    assert model.merges == (("a", "b</w>"),)


def test_bpe_rejects_empty_corpus():
    with pytest.raises(ValueError):
        train_bpe([], merges=3)


words = st.text(alphabet="abcde", min_size=1, max_size=8)
sentences = st.lists(words, min_size=1, max_size=6).map(lambda ws: Sentence(tuple(ws)))


@given(st.lists(sentences, min_size=1, max_size=5), st.integers(0, 15))
def test_bpe_deterministic_and_idempotent(corpus, merges):
    model = train_bpe(corpus, merges)
    assert train_bpe(corpus, merges) == model
    for s in corpus:
        once = apply_bpe(model, s)
        assert apply_bpe(model, once) == once
        assert "".join(t.replace("@@", "") for t in once.tokens) == "".join(s.tokens)
        # segmenting with a fresh copy of the model gives the same answer
        assert apply_bpe(BpeModel(tuple(model.merges)), s) == once


def test_bpe_save_load(tmp_path):
    model = train_bpe([Sentence(("low", "lower", "lowest"))], merges=5)
    path = tmp_path / "bpe.txt"
    model.save(path)
    assert BpeModel.load(path) == model


def test_load_parallel_filters_and_reports(tmp_path):
    path = tmp_path / "news.tsv"
    path.write_text(
        "a b c\tx y z\n"
        "a b\tx y z\n"                       # source too short
        "a b c d\tw x y z\n"
        "a b c d e f g h i j k l m n\tx y z\n"  # ratio 14/3 > 4.5
        "one two three\tuno dos tres\n",
        encoding="utf-8",
    )
    corpus, report = load_parallel(path)
    assert len(corpus) == 3
    assert report.dropped == 2
    assert str(report) == "3 kept, 2 dropped"
    assert corpus.domain_tag == "news"


def test_load_parallel_reports_bad_line_numbers(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a b c\tx y z\nno tab here\na\tb\tc\nd e f\tg h i\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError) as info:
        load_parallel(path)
    assert info.value.line_numbers == [2, 3]
    assert "2, 3" in str(info.value)


def test_vocabulary_reserved_ids_and_order():
    vocab = build_vocab([[Sentence(("b", "a", "b")), Sentence(("c",))]])
    assert (vocab.tokens[UNK_ID], vocab.tokens[BOS_ID], vocab.tokens[EOS_ID]) == ("<unk>", "<s>", "</s>")
    assert vocab.tokens[3:] == ["b", "a", "c"]
    assert vocab.encode(["zzz"]) == (UNK_ID,)


def test_vocabulary_min_count():
    vocab = build_vocab([[Sentence(("b", "a", "b"))]], min_count=2)
    assert vocab.tokens[3:] == ["b"]


@given(st.lists(st.sampled_from(["a", "b", "c", "<s>"]), max_size=10))
def test_vocabulary_encode_decode_identity(tokens):
    vocab = build_vocab([[Sentence(("a", "b", "c"))]])
    assert vocab.decode(vocab.encode(tokens)) == tuple(tokens)


def test_vocabulary_save_load(tmp_path):
    vocab = build_vocab([[Sentence(("x", "y", "x"))]])
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt").tokens == vocab.tokens


def test_vocabulary_rejects_bad_layout():
    with pytest.raises(ValueError):
        Vocabulary(["a", "<s>", "</s>"])
    with pytest.raises(ValueError):
        Vocabulary(["<unk>", "<s>", "</s>", "a", "a"])
