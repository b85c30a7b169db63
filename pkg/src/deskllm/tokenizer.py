"""Byte-level BPE tokenizer with byte fallback, plus a fertility benchmark.

Text is pre-split into pieces that carry their leading space (the space
byte is the word-initial marker), merges never cross piece boundaries, and
every one of the 256 byte values owns a token, so any input encodes and
decoding is plain concatenation.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import io
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_SPECIALS = ("<unk>", "<s>", "</s>", "<pad>")
_ROLES = {"<unk>": "unk", "<s>": "bos", "</s>": "eos", "<pad>": "pad"}

MAGIC = "DESKBPE"
FORMAT_VERSION = 1

_PIECE_RE = re.compile(rb" ?[^\s]+|\s+(?!\S)|\s+")


class TokenizerError(ValueError):
    pass


def split_pieces(data: bytes) -> list[bytes]:
    return _PIECE_RE.findall(data)


@dataclass
class TokenizerModel:
    vocab: list[bytes]
    merges: list[tuple[int, int]]
    special_tokens: tuple[str, ...] = DEFAULT_SPECIALS
    _ranks: dict = field(default=None, init=False, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        n_special = len(self.special_tokens)
        if len(self.vocab) != n_special + 256 + len(self.merges):
            raise TokenizerError("vocab length does not match specials + bytes + merges")
        for b in range(256):
            if self.vocab[n_special + b] != bytes([b]):
                raise TokenizerError(f"byte token {b} missing or misplaced")
        for i, (l, r) in enumerate(self.merges):
            new_id = n_special + 256 + i
            if not (n_special <= l < new_id and n_special <= r < new_id):
                raise TokenizerError(f"merge {i} refers to a token defined after it")
            if self.vocab[new_id] != self.vocab[l] + self.vocab[r]:
                raise TokenizerError(f"merge {i} does not match its vocab entry")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def n_special(self) -> int:
        return len(self.special_tokens)

    @property
    def special_ids(self) -> dict[str, int]:
        return {_ROLES.get(name, name): i for i, name in enumerate(self.special_tokens)}

    @property
    def bos_id(self) -> int | None:
        return self.special_ids.get("bos")

    @property
    def eos_id(self) -> int | None:
        return self.special_ids.get("eos")

    @property
    def pad_id(self) -> int | None:
        return self.special_ids.get("pad")

    def truncated(self, n_merges: int) -> "TokenizerModel":
        """The same tokenizer with only its first ``n_merges`` merges."""
        keep = self.n_special + 256 + n_merges
        return TokenizerModel(self.vocab[:keep], self.merges[:n_merges], self.special_tokens)

    # -- encode / decode --------------------------------------------------

    def _encode_piece(self, piece: bytes) -> tuple[int, ...]:
        cached = self._cache.get(piece)
        if cached is not None:
            return cached
        off = self.n_special
        ids = [off + b for b in piece]
        ranks = self._ranks
        while len(ids) > 1:
            best, best_rank = -1, None
            for i in range(len(ids) - 1):
                r = ranks.get((ids[i], ids[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best_rank is None:
                break
            pair = (ids[best], ids[best + 1])
            new_id = off + 256 + best_rank
            out, i = [], 0
            while i < len(ids):
                if i < len(ids) - 1 and (ids[i], ids[i + 1]) == pair:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        result = tuple(ids)
        if len(self._cache) < 200_000:
            self._cache[piece] = result
        return result

    def encode(self, text: str | bytes, bos: bool = False, eos: bool = False) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids: list[int] = [self.bos_id] if bos and self.bos_id is not None else []
        for piece in split_pieces(data):
            ids.extend(self._encode_piece(piece))
        if eos and self.eos_id is not None:
            ids.append(self.eos_id)
        return ids

    def decode_bytes(self, ids: Iterable[int], skip_special: bool = True) -> bytes:
        out = []
        n = self.vocab_size
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise TokenizerError(f"token id {i} out of range for vocab of {n}")
            if i < self.n_special:
                if not skip_special:
                    out.append(self.special_tokens[i].encode("utf-8"))
                continue
            out.append(self.vocab[i])
        return b"".join(out)

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        return self.decode_bytes(ids, skip_special).decode("utf-8", errors="replace")

    # -- persistence ------------------------------------------------------

    def dumps(self) -> str:
        lines = [f"{MAGIC} {FORMAT_VERSION} {self.vocab_size} {len(self.merges)} {self.n_special}"]
        for i, tok in enumerate(self.vocab):
            tag = " special" if i < self.n_special else ""
            lines.append(f"v {i} {tok.hex()}{tag}")
        lines.extend(f"m {l} {r}" for l, r in self.merges)
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode("ascii")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="ascii")

    @classmethod
    def loads(cls, text: str) -> "TokenizerModel":
        lines = text.splitlines()
        if not lines:
            raise TokenizerError("empty tokenizer file")
        head = lines[0].split()
        if len(head) != 5 or head[0] != MAGIC:
            raise TokenizerError("not a tokenizer file (bad header)")
        if int(head[1]) != FORMAT_VERSION:
            raise TokenizerError(f"unsupported tokenizer format version {head[1]}")
        vocab_size, n_merges, n_special = map(int, head[2:])
        vocab: list[bytes] = []
        specials: list[str] = []
        merges: list[tuple[int, int]] = []
        for line in lines[1:]:
            parts = line.split()
            if parts[0] == "v":
                if int(parts[1]) != len(vocab):
                    raise TokenizerError(f"vocab entries out of order at id {parts[1]}")
                tok = bytes.fromhex(parts[2]) if len(parts) > 2 and parts[2] != "special" else b""
                vocab.append(tok)
                if parts[-1] == "special":
                    specials.append(tok.decode("utf-8"))
            elif parts[0] == "m":
                merges.append((int(parts[1]), int(parts[2])))
            else:
                raise TokenizerError(f"unrecognised line: {line!r}")
        if len(vocab) != vocab_size or len(merges) != n_merges or len(specials) != n_special:
            raise TokenizerError("tokenizer file counts do not match header")
        return cls(vocab, merges, tuple(specials))

    @classmethod
    def load(cls, path: str | Path) -> "TokenizerModel":
        return cls.loads(Path(path).read_text(encoding="ascii"))


def byte_level(special_tokens: Sequence[str] = DEFAULT_SPECIALS) -> TokenizerModel:
    """A tokenizer with no merges at all (one token per byte)."""
    vocab = [s.encode("utf-8") for s in special_tokens] + [bytes([b]) for b in range(256)]
    return TokenizerModel(vocab, [], tuple(special_tokens))


# -- training -------------------------------------------------------------


def _count_pieces(corpus: Iterable[str | bytes], max_words: int) -> Counter:
    counts: Counter = Counter()
    for doc in corpus:
        data = doc.encode("utf-8") if isinstance(doc, str) else bytes(doc)
        counts.update(split_pieces(data))
        if len(counts) > max_words:
            # deterministic prune: keep the most frequent half, ties by bytes
            keep = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max_words // 2]
            counts = Counter(dict(keep))
    return counts


def train_bpe(
    corpus: str | bytes | Iterable[str | bytes],
    vocab_size: int,
    special_tokens: Sequence[str] = DEFAULT_SPECIALS,
    min_frequency: int = 2,
    max_words: int = 2_000_000,
) -> TokenizerModel:
    """Learn merges until the vocabulary reaches ``vocab_size``.

    The most frequent adjacent pair is merged first; equal counts go to the
    lexicographically smallest (left bytes, right bytes). Training stops
    early when no pair occurs at least ``min_frequency`` times.
    """
    special_tokens = tuple(special_tokens)
    base = len(special_tokens) + 256
    if vocab_size < base:
        raise TokenizerError(f"vocab_size {vocab_size} < 256 bytes + {len(special_tokens)} specials")
    if isinstance(corpus, (str, bytes)):
        corpus = [corpus]
    counts = _count_pieces(corpus, max_words)
    if not counts:
        raise TokenizerError("cannot train on an empty corpus")

    model = byte_level(special_tokens)
    vocab = list(model.vocab)
    off = len(special_tokens)
    pieces = sorted(counts)
    words = [[off + b for b in p] for p in pieces]
    freqs = [counts[p] for p in pieces]

    pair_counts: dict[tuple[int, int], int] = defaultdict(int)
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for wi, w in enumerate(words):
        for pair in zip(w, w[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)

    heap = [(-c, vocab[p[0]], vocab[p[1]], p) for p, c in pair_counts.items()]
    heapq.heapify(heap)
    merges: list[tuple[int, int]] = []

    while len(vocab) < vocab_size and heap:
        neg, _, _, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg:
            continue  # stale entry
        if -neg < min_frequency:
            break
        new_id = len(vocab)
        vocab.append(vocab[pair[0]] + vocab[pair[1]])
        merges.append(pair)
        touched: set[tuple[int, int]] = set()
        for wi in sorted(where.pop(pair, ())):
            w, f = words[wi], freqs[wi]
            for p in zip(w, w[1:]):
                pair_counts[p] -= f
                touched.add(p)
            merged, i = [], 0
            while i < len(w):
                if i < len(w) - 1 and w[i] == pair[0] and w[i + 1] == pair[1]:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(w[i])
                    i += 1
            words[wi] = merged
            for p in zip(merged, merged[1:]):
                pair_counts[p] += f
                where[p].add(wi)
                touched.add(p)
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, vocab[p[0]], vocab[p[1]], p))
            else:
                pair_counts.pop(p, None)
                where.pop(p, None)

    return TokenizerModel(vocab, merges, special_tokens)


# -- fertility benchmark --------------------------------------------------


@dataclass(frozen=True)
class EfficiencyRow:
    name: str
    token_count: int
    vocab_size: int
    fertility: float


@dataclass
class EfficiencyReport:
    word_count: int
    rows: list[EfficiencyRow]

    def render(self) -> str:
        out = io.StringIO()
        out.write(f"words encoded: {self.word_count:,}\n")
        out.write(f"{'tokenizer':<20} {'tokens':>10} {'vocab':>10} {'tokens/word':>12}\n")
        for r in self.rows:
            out.write(f"{r.name:<20} {r.token_count:>10,} {r.vocab_size:>10,} {r.fertility:>12.4f}\n")
        return out.getvalue()

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["tokenizer", "tokens", "vocab_size", "fertility"])
        for r in self.rows:
            w.writerow([r.name, r.token_count, r.vocab_size, f"{r.fertility:.4f}"])
        return out.getvalue()


def read_fixture_counts(path: str | Path) -> tuple[list[tuple[str, int, int]], int | None]:
    """Read externally measured counts: CSV of ``name,tokens,vocab_size``.

    A ``# words=N`` comment line gives the size of the word list the counts
    were measured on.
    """
    rows, words = [], None
    with open(path, newline="", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = re.search(r"words\s*=\s*([\d,]+)", line)
                if m:
                    words = int(m.group(1).replace(",", ""))
                continue
            name, tokens, vocab = next(csv.reader([line]))
            if name == "tokenizer":
                continue
            rows.append((name, int(tokens.replace(",", "")), int(vocab.replace(",", ""))))
    return rows, words


def benchmark_fertility(
    models: dict[str, TokenizerModel] | Sequence[tuple[str, TokenizerModel]] = (),
    wordlist: str | None = None,
    fixtures: Sequence[tuple[str, int, int]] = (),
    word_count: int | None = None,
) -> EfficiencyReport:
    """Tokens needed to encode a word list, per tokenizer.

    Each whitespace-separated word is encoded on its own. Fixture rows are
    counts measured elsewhere on a list of ``word_count`` words.
    """
    words = wordlist.split() if wordlist is not None else []
    if wordlist is not None:
        if not words:
            raise ValueError("word list is empty")
        if word_count is not None and word_count != len(words):
            raise ValueError(f"word list has {len(words)} words, fixtures claim {word_count}")
        word_count = len(words)
    if not word_count or word_count <= 0:
        raise ValueError("need a non-empty word list or a positive word_count")
    items = models.items() if isinstance(models, dict) else models
    counts = []
    for name, tok in items:
        if not words:
            raise ValueError("encoding a tokenizer needs the word list itself")
        counts.append((name, sum(len(tok.encode(w)) for w in words), tok.vocab_size))
    counts.extend(fixtures)
    rows = [EfficiencyRow(n, c, v, c / word_count) for n, c, v in counts]
    rows.sort(key=lambda r: (r.token_count, r.name))
    return EfficiencyReport(word_count, rows)
