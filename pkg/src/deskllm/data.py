"""Corpus -> token stream -> fixed-length packed sequences -> train/eval split.

Dataset file layout (little-endian)::

    magic  b"TTLD"     4 bytes
    version            u32
    sequence_length    u32
    n_sequences        u64
    tokenizer sha256   32 bytes
    manifest length    u32, then that many bytes of UTF-8 JSON
    token ids          n_sequences * sequence_length * i32
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .tokenizer import TokenizerModel

MAGIC = b"TTLD"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ32s")


class DatasetError(ValueError):
    pass


@dataclass
class PackedDataset:
    sequences: np.ndarray  # [n, sequence_length] int32
    sequence_length: int
    tokenizer_fingerprint: str = ""
    manifest: list[dict] = field(default_factory=list)
    dropped_tokens: int = 0

    def __post_init__(self):
        self.sequences = np.ascontiguousarray(self.sequences, dtype=np.int32).reshape(-1, self.sequence_length)

    def __len__(self) -> int:
        return self.sequences.shape[0]

    @property
    def total_tokens(self) -> int:
        return self.sequences.size

    def subset(self, index: np.ndarray) -> "PackedDataset":
        return PackedDataset(self.sequences[index], self.sequence_length, self.tokenizer_fingerprint, self.manifest)

    def to_bytes(self) -> bytes:
        fp = bytes.fromhex(self.tokenizer_fingerprint) if self.tokenizer_fingerprint else b"\0" * 32
        man = json.dumps(self.manifest, sort_keys=True).encode("utf-8")
        head = _HEADER.pack(MAGIC, VERSION, self.sequence_length, len(self), fp)
        return head + struct.pack("<I", len(man)) + man + self.sequences.astype("<i4").tobytes()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, expect_fingerprint: str | None = None) -> "PackedDataset":
        if len(blob) < _HEADER.size + 4:
            raise DatasetError("dataset file truncated")
        magic, version, seq_len, n, fp = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise DatasetError("not a packed dataset file")
        if version != VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        fingerprint = "" if fp == b"\0" * 32 else fp.hex()
        if expect_fingerprint and fingerprint != expect_fingerprint:
            raise DatasetError("dataset was packed with a different tokenizer")
        off = _HEADER.size
        (mlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        manifest = json.loads(blob[off : off + mlen].decode("utf-8"))
        off += mlen
        ids = np.frombuffer(blob, dtype="<i4", count=n * seq_len, offset=off).astype(np.int32)
        return cls(ids.reshape(n, seq_len), seq_len, fingerprint, manifest)

    @classmethod
    def load(cls, path: str | Path, expect_fingerprint: str | None = None) -> "PackedDataset":
        return cls.from_bytes(Path(path).read_bytes(), expect_fingerprint)


def keep_document(text: str, min_chars: int = 1, max_symbol_ratio: float = 1.0) -> bool:
    """Length and non-alphanumeric-ratio ingestion filters."""
    if len(text) < min_chars:
        return False
    if max_symbol_ratio < 1.0 and text:
        symbols = sum(1 for ch in text if not (ch.isalnum() or ch.isspace()))
        if symbols / len(text) > max_symbol_ratio:
            return False
    return True


def tokenize_corpus(tokenizer: TokenizerModel, documents: Iterable[str]) -> Iterator[int]:
    """Token ids of each document followed by eos, in order."""
    eos = tokenizer.eos_id
    if eos is None:
        raise DatasetError("tokenizer has no eos token")
    for doc in documents:
        yield from tokenizer.encode(doc)
        yield eos


def pack(stream: Iterable[int], sequence_length: int, vocab_size: int | None = None) -> PackedDataset:
    """Cut a token stream into back-to-back blocks; a trailing partial block is dropped."""
    if sequence_length < 2:
        raise DatasetError("sequence_length must be >= 2")
    ids = np.fromiter(stream, dtype=np.int64)
    if vocab_size is not None and ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise DatasetError(f"token id out of range for vocab of {vocab_size}")
    n = ids.size // sequence_length
    return PackedDataset(
        ids[: n * sequence_length].astype(np.int32).reshape(n, sequence_length),
        sequence_length,
        dropped_tokens=int(ids.size - n * sequence_length),
    )


def split_eval(dataset: PackedDataset, fraction: float = 0.01, seed: int = 0) -> tuple[PackedDataset, PackedDataset]:
    """Hold out ``round(fraction * n)`` sequences chosen by a seeded permutation.

    Both halves keep the original sequence order.
    """
    if not 0 < fraction < 1:
        raise DatasetError("fraction must lie in (0, 1)")
    n = len(dataset)
    n_eval = int(round(fraction * n))
    if n_eval < 1 or n_eval >= n:
        raise DatasetError(f"{n} sequences are too few for an eval fraction of {fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    eval_idx = np.sort(perm[:n_eval])
    train_idx = np.sort(perm[n_eval:])
    return dataset.subset(train_idx), dataset.subset(eval_idx)


def read_documents(path: str | Path) -> list[str]:
    """Documents from a text file (blank-line separated) or JSONL with a ``text`` field."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if path.suffix == ".jsonl":
        docs = []
        for lineno, line in enumerate(raw.splitlines(), 1):
            if not line.strip():
                continue
            try:
                docs.append(json.loads(line)["text"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad JSONL record ({exc})") from exc
        return docs
    return [d.strip("\n") for d in raw.split("\n\n") if d.strip()]


def build_dataset(
    tokenizer: TokenizerModel,
    files: Iterable[str | Path],
    sequence_length: int = 2048,
    min_chars: int = 1,
    max_symbol_ratio: float = 1.0,
) -> PackedDataset:
    """Filter, tokenize and pack files in the given order, keeping a manifest."""
    manifest, stream = [], []
    for f in files:
        docs = [d for d in read_documents(f) if keep_document(d, min_chars, max_symbol_ratio)]
        ids = list(tokenize_corpus(tokenizer, docs))
        manifest.append({"file": str(f), "documents": len(docs), "tokens": len(ids)})
        stream.extend(ids)
    ds = pack(stream, sequence_length, tokenizer.vocab_size)
    ds.tokenizer_fingerprint = tokenizer.fingerprint()
    ds.manifest = manifest
    return ds


@dataclass
class SFTDataset:
    """Fixed-length prompt/completion samples with a loss mask (1 = scored)."""

    tokens: np.ndarray  # [n, sequence_length]
    loss_mask: np.ndarray  # [n, sequence_length - 1], aligned with targets

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def sequence_length(self) -> int:
        return self.tokens.shape[1]

    def subset(self, index) -> "SFTDataset":
        return SFTDataset(self.tokens[index], self.loss_mask[index])


def build_sft(tokenizer: TokenizerModel, pairs: Iterable[tuple[str, str]], sequence_length: int) -> SFTDataset:
    """bos + prompt + completion + eos, right-padded; only completion targets are scored."""
    pad = tokenizer.pad_id if tokenizer.pad_id is not None else tokenizer.eos_id
    toks, masks = [], []
    for prompt, completion in pairs:
        p = tokenizer.encode(prompt, bos=True)
        c = tokenizer.encode(completion, eos=True)
        seq = (p + c)[:sequence_length]
        n_real = len(seq)
        seq = seq + [pad] * (sequence_length - n_real)
        # target j is seq[j + 1]; score it when it is a completion token
        mask = [1 if len(p) <= j + 1 < n_real else 0 for j in range(sequence_length - 1)]
        toks.append(seq)
        masks.append(mask)
    return SFTDataset(np.asarray(toks, dtype=np.int32), np.asarray(masks, dtype=np.float32))
