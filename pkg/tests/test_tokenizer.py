from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskllm.tokenizer import (
    TokenizerError,
    TokenizerModel,
    benchmark_fertility,
    byte_level,
    read_fixture_counts,
    split_pieces,
    train_bpe,
)
from oracles import bpe_first_merge_bruteforce

FIXTURES = Path(__file__).parent / "fixtures"

MULTILINGUAL = [
    "Olá, coração! Ação e informação não são a mesma coisa.",
    "Größenordnung, straße, naïve café",
    "Привет, как дела?",
    "東京は日本の首都です。",
    "مرحبا بالعالم",
    "नमस्ते दुनिया",
    "emoji 🦙🇧🇷👩‍💻 and combining é",
    "tabs\tand\nnewlines\r\n  double  spaces ",
    "",
]


def merge_bytes(tok: TokenizerModel, i: int) -> tuple[bytes, bytes]:
    left, right = tok.merges[i]
    return tok.vocab[left], tok.vocab[right]


@pytest.fixture(scope="module")
def corpus() -> str:
    return (FIXTURES / "toy_corpus.txt").read_text(encoding="utf-8")


@pytest.fixture(scope="module")
def trained(corpus) -> TokenizerModel:
    return train_bpe(corpus, 512)


def test_first_merge_matches_bruteforce():
    tok = train_bpe("aaab aaab aaab", 260, special_tokens=())
    pieces = split_pieces(b"aaab aaab aaab")
    assert pieces == [b"aaab", b" aaab", b" aaab"]
    assert merge_bytes(tok, 0) == bpe_first_merge_bruteforce(pieces) == (b"a", b"a")


def test_tie_break_is_lexicographic():
    # "ab" and "cd" both occur twice; the smaller pair wins
    tok = train_bpe("cd ab cd ab", 261, special_tokens=())
    assert merge_bytes(tok, 0) == bpe_first_merge_bruteforce(split_pieces(b"cd ab cd ab"))


def test_training_errors():
    with pytest.raises(TokenizerError):
        train_bpe("", 300)
    with pytest.raises(TokenizerError):
        train_bpe([], 300)
    with pytest.raises(TokenizerError):
        train_bpe("abc", 100)


def test_training_is_deterministic(corpus):
    a, b = train_bpe(corpus, 400), train_bpe(corpus, 400)
    assert a.merges == b.merges
    assert a.dumps() == b.dumps()


def test_min_frequency_stops_training():
    tok = train_bpe("abcdef", 1000, special_tokens=())
    assert tok.merges == [] and tok.vocab_size == 256


def test_layout_specials_bytes_merges(trained):
    assert trained.vocab[:4] == [b"<unk>", b"<s>", b"</s>", b"<pad>"]
    assert trained.special_ids == {"unk": 0, "bos": 1, "eos": 2, "pad": 3}
    assert trained.vocab[4] == b"\x00" and trained.vocab[259] == b"\xff"
    assert trained.vocab[260] == b"".join(merge_bytes(trained, 0))


def test_empty_and_out_of_range(trained):
    assert trained.encode("") == []
    assert trained.decode([]) == ""
    with pytest.raises(TokenizerError):
        trained.decode([trained.vocab_size])
    with pytest.raises(TokenizerError):
        trained.decode([-1])


def test_bos_eos(trained):
    ids = trained.encode("casa", bos=True, eos=True)
    assert ids[0] == 1 and ids[-1] == 2
    assert trained.decode(ids) == "casa"


@pytest.mark.parametrize("text", MULTILINGUAL)
def test_multilingual_round_trip(trained, text):
    assert trained.decode(trained.encode(text)) == text


@settings(max_examples=200, deadline=None)
@given(st.text())
def test_round_trip_any_text(trained, text):
    assert trained.decode(trained.encode(text)) == text


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=300))
def test_round_trip_any_bytes(trained, data):
    assert trained.decode_bytes(trained.encode(data)) == data


def test_one_megabyte_random_bytes_round_trip(trained):
    data = np.random.default_rng(0).integers(0, 256, size=1 << 20, dtype=np.uint8).tobytes()
    assert trained.decode_bytes(trained.encode(data)) == data


def test_unseen_characters_fall_back_to_bytes():
    tok = train_bpe("the cat sat on the mat, the cat sat on the hat", 300)
    text = "日本語"
    ids = tok.encode(text)
    assert len(ids) == len(text.encode("utf-8"))
    assert all(tok.n_special <= i < tok.n_special + 256 for i in ids)


def test_extra_merge_never_lengthens_training_corpus(corpus, trained):
    lengths = [len(trained.truncated(k).encode(corpus)) for k in range(0, len(trained.merges) + 1, 5)]
    assert all(b <= a for a, b in zip(lengths, lengths[1:]))
    full = [len(trained.truncated(k).encode(corpus)) for k in range(len(trained.merges) - 3, len(trained.merges) + 1)]
    assert all(b <= a for a, b in zip(full, full[1:]))


def test_trained_fertility_beats_bytes(corpus, trained):
    # held out: later sentences of the same text, training on the first half only
    paragraphs = corpus.split("\n\n")
    train_part, held = "\n\n".join(paragraphs[:3]), "\n\n".join(paragraphs[3:])
    tok = train_bpe(train_part, 400)
    report = benchmark_fertility([("bpe", tok), ("bytes", byte_level())], held)
    fert = {r.name: r.fertility for r in report.rows}
    assert fert["bpe"] < fert["bytes"]


def test_serialization_round_trip(tmp_path, trained):
    path = tmp_path / "tok.txt"
    trained.save(path)
    loaded = TokenizerModel.load(path)
    assert loaded.vocab == trained.vocab and loaded.merges == trained.merges
    assert loaded.fingerprint() == trained.fingerprint()
    assert loaded.dumps() == trained.dumps()


def test_corrupt_tokenizer_file_rejected():
    with pytest.raises((TokenizerError, ValueError)):
        TokenizerModel.loads("not a tokenizer\n")


def test_fertility_fixture_ordering_and_value():
    rows, words = read_fixture_counts(FIXTURES / "tokenizer_counts_ptbr.csv")
    assert words == 7400
    report = benchmark_fertility(fixtures=rows, word_count=words)
    assert [r.name for r in report.rows] == ["TTL", "GPorTuguese-2", "BERTimbau", "Cabrita-3B", "Sabiá-7B"]
    ttl = report.rows[0]
    assert ttl.token_count == 9937 and f"{ttl.fertility:.4f}" == "1.3428"
    for r in report.rows:
        assert f"{r.fertility:.4f}" == f"{r.token_count / 7400:.4f}"
    assert "1.3428" in report.render()
    assert "TTL,9937,32000,1.3428" in report.to_csv()


def test_fertility_trivial_wordlist():
    tok = train_bpe("a a a a", 300)
    report = benchmark_fertility([("t", tok)], "a a a")
    assert report.rows[0].token_count == 3 and report.rows[0].fertility == 1.0


def test_fertility_word_count_mismatch():
    with pytest.raises(ValueError):
        benchmark_fertility([("b", byte_level())], "one two", word_count=3)
