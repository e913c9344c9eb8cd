import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sadp.corpus import (
    DELIMITED,
    SPECIALS,
    CorpusError,
    Document,
    Vocabulary,
    build_vocab,
    load_corpus,
    load_corpus_with_errors,
    tokenize,
)


def _reference_delimited(text: str) -> list[str]:
    """Hand-written reader: header row, then k=v pairs per well-formed row."""
    rows = [r for r in text.splitlines() if r]
    head = rows[0].split(",")
    out = []
    for r in rows[1:]:
        vals = r.split(",")
        if len(vals) == len(head) and '"' not in r:
            out.append(" ".join(k + "=" + v for k, v in zip(head, vals)))
    return out


class TestLoad:
    def test_plain_lines(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("one\n\ntwo words\nthree\n")
        docs = load_corpus(p)
        assert [d.text for d in docs] == ["one", "two words", "three"]
        assert [d.doc_id for d in docs] == ["L1", "L3", "L4"]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("")
        assert load_corpus(p) == []

    def test_crlf(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_bytes(b"a b\r\nc\r\n")
        assert [d.text for d in load_corpus(p)] == ["a b", "c"]

    def test_delimited_two_rows(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("name,email\nalice,a@x.com\nbob,b@y.org\n")
        docs = load_corpus(p, DELIMITED)
        assert [d.text for d in docs] == ["name=alice email=a@x.com", "name=bob email=b@y.org"]
        assert all(d.source == "delimited_record" for d in docs)

    def test_delimited_matches_reference(self, tmp_path):
        text = "id,name,label\n1,ann,ok\n2,bo,bad,extra\n3,\"q\",ok\n4,cy,ok\n5,di,bad\n"
        p = tmp_path / "d.csv"
        p.write_text(text)
        docs, errors = load_corpus_with_errors(p, DELIMITED)
        assert [d.text for d in docs] == _reference_delimited(text)
        assert [e.row for e in errors] == [3, 4]

    def test_quoted_header_rejected(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text('"a",b\n1,2\n')
        with pytest.raises(CorpusError):
            load_corpus(p, DELIMITED)

    def test_unreadable(self, tmp_path):
        with pytest.raises(CorpusError):
            load_corpus(tmp_path / "missing.txt")

    def test_unknown_format(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("x\n")
        with pytest.raises(ValueError):
            load_corpus(p, "xml")


class TestVocab:
    def test_small(self):
        v = build_vocab([Document("d", "a a b")], 6)
        assert v.id_to_surface == list(SPECIALS) + ["a", "b"]

    def test_tie_break(self):
        v = build_vocab([Document("d", "y x")], 5)
        assert v.id_to_surface[-1] == "x"

    def test_too_small(self):
        with pytest.raises(ValueError):
            build_vocab([], 4)

    def test_deterministic(self, data_dir):
        docs = load_corpus(data_dir / "toy_train.txt")
        assert build_vocab(docs, 300) == build_vocab(list(docs), 300)

    def test_json_round_trip(self):
        v = build_vocab([Document("d", "a b c a")], 10)
        assert Vocabulary.from_json(json.loads(json.dumps(v.to_json()))) == v

    def test_from_json_requires_specials(self):
        with pytest.raises(ValueError):
            Vocabulary.from_json({"surfaces": ["a", "b"]})

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=40), st.integers(5, 12))
    def test_size_and_frequency_order(self, toks, size):
        v = build_vocab([Document("d", " ".join(toks))], size)
        assert len(v.id_to_surface) <= size
        kept = v.id_to_surface[len(SPECIALS):]
        counts = [toks.count(s) for s in kept]
        assert counts == sorted(counts, reverse=True)
        dropped = set(toks) - set(kept)
        if dropped and kept:
            assert max(toks.count(s) for s in dropped) <= min(counts)


class TestTokenize:
    def test_offsets(self):
        v = build_vocab([Document("d", "alice smith")], 10)
        seq = tokenize(Document("d", "alice smith"), v)
        assert len(seq.tokens) == 2
        assert seq.offsets == ((0, 5), (6, 11))

    def test_all_oov(self):
        v = build_vocab([Document("d", "a")], 5)
        seq = tokenize(Document("d", "zz yy"), v)
        assert seq.tokens == (v.unk_id, v.unk_id)

    @settings(max_examples=50, deadline=None)
    @given(st.text(alphabet="ab \t\n.", max_size=60))
    def test_offsets_recover_surfaces(self, text):
        v = build_vocab([Document("d", text)], 200)
        seq = tokenize(Document("d", text), v)
        for tok, (s, e) in zip(seq.tokens, seq.offsets):
            assert v.surface(tok) == text[s:e]
