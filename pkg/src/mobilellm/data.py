"""Byte-level tokenizer and on-disk token streams."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TOKEN_MAGIC = b"MTOK"
TOKEN_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, vocab_size, count


class ByteTokenizer:
    """Raw bytes map to ids 0..255; ``bos``/``eos`` follow."""

    bos = 256
    eos = 257
    vocab_size = 258

    def encode(self, text: str | bytes, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids = list(raw)
        if add_bos:
            ids.insert(0, self.bos)
        if add_eos:
            ids.append(self.eos)
        return ids

    def decode(self, ids) -> str:
        return bytes(int(i) for i in ids if int(i) < 256).decode("utf-8", errors="replace")


def write_tokens(path, tokens, vocab_size: int) -> None:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= min(vocab_size, 1 << 16)):
        raise ValueError("token ids must lie in [0, vocab_size) and fit in 16 bits")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, vocab_size, arr.size))
        f.write(arr.astype("<u2").tobytes())


def read_tokens(path) -> tuple[np.ndarray, int]:
    """Return ``(tokens, vocab_size)`` from a pre-tokenized ``MTOK`` file."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated token file header")
    magic, version, vocab, count = _HEADER.unpack_from(raw)
    if magic != TOKEN_MAGIC:
        raise ValueError(f"{path}: not a token file (magic {magic!r})")
    if version != TOKEN_VERSION:
        raise ValueError(f"{path}: unsupported token file version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 2 * count:
        raise ValueError(f"{path}: header promises {count} tokens, body holds {len(body) // 2}")
    return np.frombuffer(body, dtype="<u2").astype(np.int64), vocab


def load_corpus(path) -> tuple[np.ndarray, int]:
    """Token ids and vocab size from either an ``MTOK`` file or raw bytes."""
    head = Path(path).read_bytes()[:4]
    if head == TOKEN_MAGIC:
        return read_tokens(path)
    tok = ByteTokenizer()
    return np.asarray(tok.encode(Path(path).read_bytes()), dtype=np.int64), tok.vocab_size


def sample_batch(tokens: np.ndarray, batch_size: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    """``batch_size`` random contiguous windows of ``seq_len`` tokens."""
    if tokens.size < seq_len:
        raise ValueError(f"corpus of {tokens.size} tokens is shorter than seq_len {seq_len}")
    starts = rng.integers(0, tokens.size - seq_len + 1, size=batch_size)
    return np.stack([tokens[s:s + seq_len] for s in starts])
