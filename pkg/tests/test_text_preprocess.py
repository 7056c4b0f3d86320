import pytest
from hypothesis import given, settings, strategies as st

from reintel.text_preprocess import (
    EmoticonMap,
    SegmenterError,
    SubprocessSegmenter,
    TextStats,
    compress_elongation,
    default_emoticons,
    normalize_emoticons,
    preprocess,
    text_statistics,
    unify_covid_terms,
)

ASCII_MAP = EmoticonMap({":)": "HAPPY", ";)": "HAPPY", "=]]": "HAPPY", "=]": "HAPPY", ":(": "SAD", "=[": "SAD"})


class TestEmoticons:
    def test_basic(self):
        assert normalize_emoticons("hay qua :)", ASCII_MAP) == "hay qua HAPPY"

    def test_empty(self):
        assert normalize_emoticons("", ASCII_MAP) == ""

    def test_longest_match(self):
        assert normalize_emoticons("=]] :(", ASCII_MAP) == "HAPPY SAD"

    def test_glued_to_words_gets_spaces(self):
        assert normalize_emoticons("vui:)qua", ASCII_MAP) == "vui HAPPY qua"

    def test_trailing_repeats_are_one_emoticon(self):
        assert normalize_emoticons("ok :))))) =[[[", ASCII_MAP) == "ok HAPPY SAD"

    def test_empty_map_is_identity(self):
        text = "a  :)\n b"
        assert normalize_emoticons(text, EmoticonMap({})) == text

    def test_default_lexicon_leaves_times_and_labels(self):
        emo = default_emoticons()
        assert normalize_emoticons("lúc 10:30 ID: 5", emo) == "lúc 10:30 ID: 5"
        assert normalize_emoticons("http://x.vn", emo) == "http://x.vn"

    def test_default_lexicon_contains_listed_examples(self):
        emo = default_emoticons()
        for e in (":)", ";)", "=]]"):
            assert emo.pairs[e] == "vui"
        for e in (":(", "=["):
            assert emo.pairs[e] == "buồn"

    def test_token_containing_emoticon_rejected(self):
        with pytest.raises(ValueError):
            EmoticonMap({":)": "x:)"})

    def test_lexicon_file(self, tmp_path):
        path = tmp_path / "emo.tsv"
        path.write_text(":)\thappy\n:(\tsad\n", encoding="utf-8")
        emo = EmoticonMap.from_file(path, "H", "S")
        assert normalize_emoticons(":( :)", emo) == "S H"
        path.write_text(":)\tangry\n", encoding="utf-8")
        with pytest.raises(ValueError, match="happy or sad"):
            EmoticonMap.from_file(path)


class TestElongation:
    @pytest.mark.parametrize(
        "raw, expected",
        [("Coooool", "Cool"), ("*****", "**"), ("Cool", "Cool"), ("", ""), ("!!!???", "!!??")],
    )
    def test_examples(self, raw, expected):
        assert compress_elongation(raw) == expected

    def test_vietnamese_diacritics_are_whole_clusters(self):
        # decomposed "ồ" (o + circumflex + grave) repeated four times
        o = "ồ"
        assert compress_elongation("đ" + o * 4) == "đ" + o * 2
        assert compress_elongation("quáááá") == "quáá"

    def test_max_run_one(self):
        assert compress_elongation("aaabbb", max_run=1) == "ab"
        with pytest.raises(ValueError):
            compress_elongation("x", max_run=0)


class TestCovid:
    def test_examples(self):
        assert unify_covid_terms("dich ncov lan rong") == "dich covid lan rong"
        assert unify_covid_terms("NCoV") == "covid"
        assert unify_covid_terms("covidien") == "covidien"
        assert unify_covid_terms("Convid, COVID-19 và corona") == "covid, covid và covid"

    def test_custom_variants(self):
        assert unify_covid_terms("ncov corona", {"covid", "ncov"}) == "covid corona"
        with pytest.raises(ValueError):
            unify_covid_terms("x", {"ncov"})
        with pytest.raises(ValueError):
            unify_covid_terms("x", set())


class TestPreprocess:
    def test_composition(self):
        assert preprocess("Coooool :)", emoticons=ASCII_MAP) == "Cool HAPPY"

    def test_misspelling_preserved(self):
        assert preprocess("bọn s.áthại dân") == "bọn s.áthại dân"

    def test_segmenter_errors_carry_post_id(self):
        def broken(text):
            raise RuntimeError("boom")

        with pytest.raises(SegmenterError, match="post 42"):
            preprocess("abc", broken, text_id="42")

    def test_custom_segmenter_joins_tokens(self):
        def fake_vn(text):
            return text.replace("Hà Nội", "Hà_Nội").split()

        assert preprocess("ở Hà Nội :)", fake_vn, ASCII_MAP) == "ở Hà_Nội HAPPY"

    def test_subprocess_segmenter(self):
        import sys

        script = "import sys\nfor line in sys.stdin:\n    print(line.strip().upper(), flush=True)\n"
        with SubprocessSegmenter([sys.executable, "-u", "-c", script]) as seg:
            assert seg("xin chào\nbạn") == ["XIN", "CHÀO", "BẠN"]
            assert seg("a b") == ["A", "B"]


class TestStatistics:
    def test_empty(self):
        assert text_statistics("") == TextStats()

    def test_fixture(self):
        stats = text_statistics("tin #hot xem http://a.b ngay!!")
        assert stats == TextStats(
            n_hashtags=1, n_urls=1, n_chars=30, n_words=5, n_question_marks=0, n_exclaim_marks=2
        )

    def test_question_marks(self):
        stats = text_statistics("???")
        assert (stats.n_question_marks, stats.n_words, stats.n_chars) == (3, 1, 3)

    def test_www_and_case(self):
        assert text_statistics("WWW.x.vn HTTPS://a").n_urls == 2

    def test_chars_counts_graphemes(self):
        assert text_statistics("ồ").n_chars == 1


text_alphabet = st.sampled_from(
    list("aeoAC*!?:;()=[]#. \n") + ["ồ", "ô", "đ", "á", "̀", "ncov", "covid", "http://", ":)", "=]]", "Cooo"]
)
random_text = st.lists(text_alphabet, max_size=40).map("".join)


@settings(max_examples=300, deadline=None)
@given(random_text)
def test_elongation_idempotent(text):
    once = compress_elongation(text)
    assert compress_elongation(once) == once


@settings(max_examples=300, deadline=None)
@given(random_text)
def test_preprocess_idempotent(text):
    once = preprocess(text)
    assert preprocess(once) == once


@settings(max_examples=200, deadline=None)
@given(random_text)
def test_no_foreign_characters(text):
    emo = default_emoticons()
    allowed = set(text) | set("".join(emo.pairs.values())) | set("covid") | {" "}
    assert set(preprocess(text, emoticons=emo)) <= allowed


@settings(max_examples=200, deadline=None)
@given(random_text, random_text)
def test_statistics_monotone_under_concatenation(a, b):
    joined = text_statistics(a + " " + b).as_tuple()
    for part in (a, b):
        assert all(x >= y for x, y in zip(joined, text_statistics(part).as_tuple()))


@settings(max_examples=200, deadline=None)
@given(random_text)
def test_stat_invariants(text):
    s = text_statistics(text)
    assert min(s.as_tuple()) >= 0
    assert s.n_chars >= s.n_words
