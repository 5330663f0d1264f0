"""Byte-level tokenizer, the ALCT corpus container, and deterministic batching.

Corpus layout (little-endian)::

    b"ALCT" | version u32 | vocab_size u32 | n_tokens u64 | n_tokens x u32 ids
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ALCT"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class CorpusError(ValueError):
    pass


class ByteTokenizer:
    """UTF-8 bytes as ids 0..255, plus three special ids."""

    BOS = 256
    EOS = 257
    PAD = 258
    vocab_size = 259

    def encode(self, text: str, bos: bool = False, eos: bool = False) -> list[int]:
        ids = list(text.encode("utf-8"))
        return ([self.BOS] if bos else []) + ids + ([self.EOS] if eos else [])

    def decode(self, ids) -> str:
        return bytes(int(i) for i in ids if 0 <= int(i) < 256).decode("utf-8", errors="replace")

    def token_text(self, token_id: int) -> str:
        """Printable rendering of a single id, for reports."""
        token_id = int(token_id)
        if token_id == self.BOS:
            return "<bos>"
        if token_id == self.EOS:
            return "<eos>"
        if token_id == self.PAD:
            return "<pad>"
        return bytes([token_id]).decode("latin-1")


def write_corpus(path: str | Path, tokens, vocab_size: int) -> None:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise CorpusError("token id outside the vocabulary")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, vocab_size, arr.size))
        fh.write(arr.astype("<u4").tobytes())


def read_corpus(path: str | Path, vocab_size: int | None = None) -> tuple[np.ndarray, int]:
    """Returns ``(tokens, vocab_size)``; validates header, payload and ids."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorpusError(f"{path}: truncated header")
    magic, version, file_vocab, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorpusError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorpusError(f"{path}: unsupported version {version}")
    if n == 0:
        raise CorpusError(f"{path}: empty payload")
    if len(raw) != _HEADER.size + 4 * n:
        raise CorpusError(f"{path}: header says {n} tokens, payload holds {(len(raw) - _HEADER.size) / 4}")
    tokens = np.frombuffer(raw, dtype="<u4", offset=_HEADER.size).astype(np.int64)
    limit = file_vocab if vocab_size is None else min(file_vocab, vocab_size)
    if vocab_size is not None and file_vocab > vocab_size:
        raise CorpusError(f"{path}: corpus vocab {file_vocab} exceeds model vocab {vocab_size}")
    if tokens.max() >= limit:
        raise CorpusError(f"{path}: token id {int(tokens.max())} >= vocab_size {limit}")
    return tokens, file_vocab


def encode_text_file(src: str | Path, dst: str | Path) -> int:
    tok = ByteTokenizer()
    ids = tok.encode(Path(src).read_text(encoding="utf-8", errors="replace"))
    write_corpus(dst, ids, tok.vocab_size)
    return len(ids)


def make_windows(tokens: np.ndarray, length: int) -> np.ndarray:
    """Non-overlapping ``length``-token windows, in file order."""
    n = len(tokens) // length
    if n == 0:
        raise CorpusError(f"corpus of {len(tokens)} tokens is shorter than one window ({length})")
    return np.asarray(tokens[: n * length]).reshape(n, length)


def load_corpus(path: str | Path, length: int, vocab_size: int | None = None) -> np.ndarray:
    tokens, _ = read_corpus(path, vocab_size)
    return make_windows(tokens, length)


@dataclass
class BatchSampler:
    """Stateless batch order: batch ``step`` depends only on (seed, step).

    Each epoch is a fresh permutation seeded by ``(seed, epoch)``, which
    makes resuming from any step trivial.
    """

    n_windows: int
    batch_size: int
    seed: int = 0
    shuffle: bool = True

    def _perm(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(self.n_windows)
        return np.random.default_rng([self.seed, epoch]).permutation(self.n_windows)

    def indices(self, step: int) -> np.ndarray:
        flat = np.arange(step * self.batch_size, (step + 1) * self.batch_size)
        epochs, offsets = np.divmod(flat, self.n_windows)
        perms = {e: self._perm(int(e)) for e in np.unique(epochs)}
        return np.array([perms[e][o] for e, o in zip(epochs, offsets)])


def split_batch(windows: np.ndarray):
    """Inputs are all but the last token of each window; targets are shifted by one."""
    w = torch.as_tensor(windows, dtype=torch.long)
    return w[:, :-1], w[:, 1:]


# -- synthetic text for desk-scale runs --------------------------------------

_NOUNS = ["cat", "dog", "bird", "fox", "owl", "cow", "bee", "ant", "elk", "yak"]
_ADJS = ["red", "big", "old", "shy", "odd", "wet", "hot", "sly"]
_VERBS = ["sees", "likes", "finds", "hears", "bites", "feeds"]


def synthetic_text(n_chars: int, seed: int = 0) -> str:
    """Seeded mixture of easy and hard byte-level text.

    Sentences from a tiny grammar are mostly predictable; two-digit sums
    (``37+45=82``) and word reversals carry tokens that need computation.
    """
    rng = random.Random(seed)
    parts: list[str] = []
    size = 0
    while size < n_chars:
        kind = rng.random()
        if kind < 0.45:
            line = (f"the {rng.choice(_ADJS)} {rng.choice(_NOUNS)} {rng.choice(_VERBS)} "
                    f"the {rng.choice(_NOUNS)}.")
        elif kind < 0.8:
            a, b = rng.randint(10, 99), rng.randint(10, 99)
            line = f"{a}+{b}={a + b};"
        else:
            word = "".join(rng.choice("abcdefgh") for _ in range(rng.randint(3, 5)))
            line = f"{word}>{word[::-1]}|"
        parts.append(line + "\n")
        size += len(line) + 1
    return "".join(parts)[:n_chars]


def write_synthetic_corpus(path: str | Path, n_chars: int, seed: int = 0) -> int:
    tok = ByteTokenizer()
    ids = tok.encode(synthetic_text(n_chars, seed))
    write_corpus(path, ids, tok.vocab_size)
    return len(ids)
