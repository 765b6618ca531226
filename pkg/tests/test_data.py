import csv
import io
import json

import numpy as np
import pytest

from decsal import data as D


def test_synthetic_plants_exactly_one_class_word():
    ds, truth = D.generate_synthetic(classes=3, planted_per_class=2, vocab_content=30, seq_len=7,
                                     n_samples=300, seed=1)
    planted = {w: c for c, ws in truth.planted.items() for w in ws}
    assert len(planted) == 6
    for rec, pos in zip(ds.records, truth.positions):
        words = rec.text.split()
        assert len(words) == 7
        hits = [w for w in words if w in planted]
        assert hits == [words[pos]]
        assert planted[words[pos]] == rec.label


def test_synthetic_is_deterministic_and_split():
    a, _ = D.generate_synthetic(n_samples=100, seed=4)
    b, _ = D.generate_synthetic(n_samples=100, seed=4)
    c, _ = D.generate_synthetic(n_samples=100, seed=5)
    assert a.records == b.records and a.records != c.records
    assert [len(a.split(s)) for s in D.SPLITS] == [80, 10, 10]


def test_planted_document_frequency():
    ds, truth = D.generate_synthetic(classes=4, vocab_content=60, seq_len=10, n_samples=2000, seed=2)
    for c, (word,) in truth.planted.items():
        in_class = [word in r.text.split() for r in ds.records if r.label == c]
        elsewhere = [word in r.text.split() for r in ds.records if r.label != c]
        assert np.mean(in_class) == 1.0
        assert np.mean(elsewhere) == 0.0
    distractor = D.word_pool(60)[10]
    rate = np.mean([distractor in r.text.split() for r in ds.records])
    expected = 1 - (1 - 1 / 56) ** 9
    assert abs(rate - expected) < 0.03


def test_label_noise_flips_to_another_class():
    ds, truth = D.generate_synthetic(classes=2, n_samples=2000, noise_rate=0.2, seed=3)
    planted = {w: c for c, ws in truth.planted.items() for w in ws}
    flipped = np.mean([planted[r.text.split()[p]] != r.label for r, p in zip(ds.records, truth.positions)])
    assert abs(flipped - 0.2) < 0.03


def test_synthetic_errors():
    with pytest.raises(D.DataError):
        D.generate_synthetic(classes=4, planted_per_class=5, vocab_content=20)
    with pytest.raises(D.DataError):
        D.generate_synthetic(noise_rate=1.0)
    with pytest.raises(D.DataError):
        D.generate_synthetic(classes=1)


def test_jsonl_round_trip(tmp_path):
    ds = D.Dataset([D.Record("a b", 0, "train"), D.Record("c, d", 1, "test")])
    path = tmp_path / "d.jsonl"
    path.write_text(ds.to_jsonl())
    assert D.ingest(path).records == ds.records


def test_csv_quoting_matches_reference_parser(tmp_path):
    text = 'text,label,split\n"hello, world",0,train\n"she said ""hi""",1,train\nplain,1,test\n'
    path = tmp_path / "d.csv"
    path.write_text(text)
    ours = [(r.text, r.label, r.split) for r in D.ingest(path).records]
    ref = [(row["text"], int(row["label"]), row["split"]) for row in csv.DictReader(io.StringIO(text))]
    assert ours == ref
    assert ours[0][0] == "hello, world"


def test_missing_label_reports_line_number(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"text": "a", "label": 0}) + "\n" + json.dumps({"text": "b"}) + "\n")
    with pytest.raises(D.DataError, match=r"d\.jsonl:2: missing field 'label'"):
        D.ingest(path)
    assert D.ingest(path, require_label=False).records[1].label is None


def test_malformed_rows(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"text": "a", "label": 0}\n{oops\n')
    with pytest.raises(D.DataError, match=":2: malformed JSON"):
        D.ingest(bad)
    short = tmp_path / "short.csv"
    short.write_text("text,label\na,0\nb\n")
    with pytest.raises(D.DataError, match=":3: wrong number of fields"):
        D.ingest(short)
    with pytest.raises(D.DataError, match="not an integer"):
        tmp = tmp_path / "f.jsonl"
        tmp.write_text('{"text": "a", "label": "x"}\n')
        D.ingest(tmp)
    with pytest.raises(D.DataError, match="unsupported"):
        D.ingest(tmp_path / "x.parquet")


def test_label_gap_lists_missing(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("".join(json.dumps({"text": "t", "label": y}) + "\n" for y in (0, 3)))
    with pytest.raises(D.DataError, match=r"missing \[1, 2\]"):
        D.ingest(path)


def test_empty_train_text_and_unknown_split_are_rejected():
    with pytest.raises(D.DataError, match="empty text"):
        D.Dataset([D.Record("  ", 0)]).validate()
    with pytest.raises(D.DataError, match="unknown split"):
        D.Dataset([D.Record("a", 0, "dev")]).validate()


def test_without_labels_keeps_text_and_split():
    ds = D.Dataset([D.Record("a", 1, "test")]).without_labels()
    assert ds.records == [D.Record("a", None, "test")]


def test_lm_corpus_copy_lines_repeat_their_first_half():
    words = D.word_pool(50)
    lines = D.generate_lm_corpus(words, n_seqs=50, seq_len=8, copy_fraction=1.0, seed=0)
    for line in lines:
        toks = line.split()
        assert toks[:4] == toks[4:]


def test_lm_corpus_markov_lines_follow_the_shared_grammar():
    words = D.word_pool(40)
    a = D.generate_lm_corpus(words, n_seqs=300, seq_len=10, follow_prob=1.0, copy_fraction=0.0,
                             seed=1, grammar_seed=7)
    b = D.generate_lm_corpus(words, n_seqs=300, seq_len=10, follow_prob=1.0, copy_fraction=0.0,
                             seed=2, grammar_seed=7)
    succ = {}
    for line in a + b:
        toks = line.split()
        for x, y in zip(toks, toks[1:]):
            assert succ.setdefault(x, y) == y


def test_read_documents(tmp_path):
    path = tmp_path / "docs.txt"
    path.write_text("one\n\ntwo three\n")
    assert D.read_documents(path) == ["one", "two three"]
    path.write_text("\n")
    with pytest.raises(D.DataError):
        D.read_documents(path)
