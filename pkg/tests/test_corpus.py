import json
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from aste.corpus import (
    CLASS_NAMES,
    AsteFormatError,
    GoldTriplet,
    Polarity,
    ScExample,
    Sentence,
    WordSpan,
    compute_stats,
    example_sentences,
    format_aste_line,
    make_synthetic_fixture,
    parse_aste_file,
    parse_aste_line,
    parse_sc_file,
    split_corpus,
    write_aste_file,
    write_sc_file,
)


@st.composite
def sentences(draw):
    n = draw(st.integers(1, 12))
    words = draw(st.lists(st.text("abcdefgh", min_size=1, max_size=5), min_size=n, max_size=n))
    span = st.integers(0, n - 1).flatmap(lambda s: st.integers(s, n - 1).map(lambda e: WordSpan(s, e)))
    raw = draw(st.lists(st.tuples(span, span, st.sampled_from(list(Polarity))), max_size=5))
    seen, triplets = set(), []
    for a, o, p in raw:
        if (a, o) not in seen:
            seen.add((a, o))
            triplets.append(GoldTriplet(a, o, p))
    return Sentence(tuple(words), tuple(triplets))


class TestSpans:
    def test_from_indices(self):
        assert WordSpan.from_indices([5, 6]) == WordSpan(5, 6)
        assert WordSpan.from_indices([3]).length == 1

    def test_non_contiguous(self):
        with pytest.raises(ValueError):
            WordSpan.from_indices([1, 3])

    @pytest.mark.parametrize("start,end", [(-1, 0), (3, 2)])
    def test_invalid(self, start, end):
        with pytest.raises(ValueError):
            WordSpan(start, end)

    @given(st.integers(0, 20), st.integers(0, 5), st.integers(0, 20), st.integers(0, 5))
    def test_overlap_matches_index_sets(self, s1, l1, s2, l2):
        a, b = WordSpan(s1, s1 + l1), WordSpan(s2, s2 + l2)
        assert a.overlaps(b) == bool(set(a.indices()) & set(b.indices()))


class TestPolarity:
    def test_class_ids(self):
        assert [p.class_id for p in (Polarity.POSITIVE, Polarity.NEGATIVE, Polarity.NEUTRAL)] == [1, 2, 3]
        assert CLASS_NAMES == ("invalid", "Positive", "Negative", "Neutral")
        for p in Polarity:
            assert Polarity.from_class_id(p.class_id) is p

    @pytest.mark.parametrize("text", ["POS", "pos", "Positive", "POSITIVE"])
    def test_parse(self, text):
        assert Polarity.parse(text) is Polarity.POSITIVE

    def test_parse_unknown(self):
        with pytest.raises(ValueError):
            Polarity.parse("MIXED")


class TestAsteLines:
    def test_example_first_line(self):
        s = example_sentences()[0]
        assert s.words[1] == "room" and s.words[8] == "rude"
        assert s.triplets == (
            GoldTriplet(WordSpan(1, 1), WordSpan(3, 3), Polarity.POSITIVE),
            GoldTriplet(WordSpan(6, 6), WordSpan(8, 8), Polarity.NEGATIVE),
        )

    def test_multiword_opinion(self):
        s = example_sentences()[1]
        assert s.triplets[1].opinion == WordSpan(5, 6)
        assert s.triplets[1].opinion.text(s.words) == "extremely pricy"

    @given(sentences())
    def test_round_trip(self, sent):
        back = parse_aste_line(format_aste_line(sent))
        assert back.words == sent.words and back.triplets == sent.triplets

    def test_duplicate_pair_kept_once(self):
        s = parse_aste_line("a b c####[([0], [2], 'POS'), ([0], [2], 'POS')]")
        assert len(s.triplets) == 1

    @pytest.mark.parametrize("line", [
        "a b c [([0], [2], 'POS')]",
        "a b c####[([0], [3], 'POS')]",
        "a b c####[([0], [2], 'XYZ')]",
        "a b c####[([0, 2], [1], 'POS')]",
        "a b c####[([0], [2])]",
        "a b c####[([0], [2], 'POS'), ([0], [2], 'NEG')]",
        "a b c####not a list",
        "####[]",
    ])
    def test_malformed(self, line):
        with pytest.raises(AsteFormatError):
            parse_aste_line(line, 7)

    def test_error_carries_line_number(self):
        with pytest.raises(AsteFormatError) as info:
            parse_aste_line("a b####[([0], [5], 'POS')]", 12)
        assert info.value.line_no == 12 and "line 12" in str(info.value)

    def test_files(self, tmp_path):
        data = make_synthetic_fixture(4, 30)
        path = tmp_path / "split.txt"
        write_aste_file(path, data)
        back = parse_aste_file(path)
        assert [s.triplets for s in back] == [s.triplets for s in data]
        assert back[0].sentence_id == "split:1"

    def test_sc_files(self, tmp_path):
        ex = [ScExample(("good", "food"), Polarity.POSITIVE), ScExample(("meh",), Polarity.NEUTRAL)]
        path = tmp_path / "sc.tsv"
        write_sc_file(path, ex)
        assert parse_sc_file(path) == ex
        path.write_text("no label here\n")
        with pytest.raises(AsteFormatError):
            parse_sc_file(path)


class TestStats:
    def test_example_sentences(self):
        st_ = compute_stats(example_sentences())
        assert st_.n_sentences == 2 and st_.n_triplets == 4
        assert (st_.n_positive, st_.n_negative, st_.n_neutral) == (1, 3, 0)
        assert (st_.n_aspect_phrases, st_.n_opinion_phrases) == (3, 4)
        assert st_.n_multi_word_opinion == 1 and st_.n_multi_word_aspect == 0
        assert (st_.n_one_to_many_aspect_side, st_.n_one_to_many_opinion_side) == (1, 0)
        assert (st_.n_triplets_single_word, st_.n_triplets_multi_word) == (3, 1)

    @given(st.lists(sentences(), max_size=8))
    def test_polarity_counts_partition(self, corpus):
        st_ = compute_stats(corpus)
        assert st_.n_positive + st_.n_negative + st_.n_neutral == st_.n_triplets
        assert st_.n_triplets_single_word + st_.n_triplets_multi_word == st_.n_triplets
        assert st_.n_single_word_aspect + st_.n_multi_word_aspect == st_.n_aspect_phrases

    @given(st.lists(sentences(), max_size=6), st.lists(sentences(), max_size=6))
    def test_additive_over_concatenation(self, a, b):
        sa, sb, sab = compute_stats(a), compute_stats(b), compute_stats(a + b)
        for name in sab.additive_fields():
            assert getattr(sab, name) == getattr(sa, name) + getattr(sb, name)

    def test_serialisations(self):
        st_ = compute_stats(example_sentences())
        assert "n_triplets\t4" in st_.to_text()
        assert json.loads(st_.to_json())["n_triplets"] == 4


class TestSynthetic:
    def test_deterministic(self):
        assert make_synthetic_fixture(3, 20) == make_synthetic_fixture(3, 20)
        assert make_synthetic_fixture(3, 20) != make_synthetic_fixture(4, 20)

    def test_shape(self):
        data = make_synthetic_fixture(0, 300)
        assert all(s.triplets for s in data)
        assert all(s.words[-1] == "." for s in data)
        pols = Counter(t.polarity for s in data for t in s.triplets)
        assert set(pols) == set(Polarity)

    def test_one_to_many_rate(self):
        data = make_synthetic_fixture(0, 1000, one_to_many_rate=0.3)
        frac = sum(compute_stats([s]).n_one_to_many > 0 for s in data) / len(data)
        assert 0.25 < frac < 0.35

    def test_split(self):
        data = make_synthetic_fixture(0, 50)
        tr, dev = split_corpus(data, [40, 10], seed=1)
        assert len(tr) == 40 and len(dev) == 10
        assert not set(map(id, tr)) & set(map(id, dev))
        with pytest.raises(ValueError):
            split_corpus(data, [40, 20])
