"""Byte tokenizer, binary corpus shards, and deterministic window batching.

Shard layout (all integers little-endian, unsigned)::

    magic        8 bytes  b"MLMSHRD1"
    version      u32
    vocab_size   u32
    n_tokens     u64
    n_bounds     u64
    tokens       u32[n_tokens]
    boundaries   u64[n_bounds]
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Union

import numpy as np

SHARD_MAGIC = b"MLMSHRD1"
SHARD_VERSION = 1
_HEADER = struct.Struct("<8sIIQQ")

PAD_ID = 256
MASK_ID = 257
BOS_ID = 258
N_BYTES = 256
VOCAB_SIZE = 259


class ShardError(ValueError):
    pass


class ByteTokenizer:
    vocab_size = VOCAB_SIZE
    pad_id = PAD_ID
    mask_id = MASK_ID
    bos_id = BOS_ID

    def encode(self, text: Union[bytes, str]) -> list:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return list(text)

    def decode(self, ids: Iterable[int]) -> bytes:
        ids = list(ids)
        bad = [i for i in ids if not 0 <= i < N_BYTES]
        if bad:
            raise ValueError(f"cannot decode reserved or out-of-range id {bad[0]}")
        return bytes(ids)


@dataclass
class CorpusShard:
    tokens: np.ndarray
    boundaries: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    vocab_size: int = VOCAB_SIZE
    version: int = SHARD_VERSION

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.uint32).reshape(-1)
        self.boundaries = np.ascontiguousarray(self.boundaries, dtype=np.uint64).reshape(-1)
        if self.tokens.size and int(self.tokens.max()) >= self.vocab_size:
            raise ShardError(f"token id {int(self.tokens.max())} >= vocab_size {self.vocab_size}")
        b = self.boundaries
        if b.size:
            if np.any(np.diff(b.astype(np.int64)) <= 0):
                raise ShardError("document boundaries must be strictly increasing")
            if int(b[-1]) > self.tokens.size:
                raise ShardError("last boundary exceeds token count")

    def __len__(self) -> int:
        return int(self.tokens.size)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(SHARD_MAGIC, self.version, self.vocab_size, self.tokens.size, self.boundaries.size)
        return head + self.tokens.astype("<u4").tobytes() + self.boundaries.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CorpusShard":
        if len(raw) < _HEADER.size:
            raise ShardError("shard truncated before header end")
        magic, version, vocab, n_tok, n_b = _HEADER.unpack_from(raw)
        if magic != SHARD_MAGIC:
            raise ShardError(f"bad shard magic {magic!r}")
        if version != SHARD_VERSION:
            raise ShardError(f"unsupported shard version {version}")
        expected = _HEADER.size + 4 * n_tok + 8 * n_b
        if len(raw) != expected:
            raise ShardError(f"shard size {len(raw)} does not match header ({expected} bytes)")
        off = _HEADER.size
        tokens = np.frombuffer(raw, dtype="<u4", count=n_tok, offset=off)
        bounds = np.frombuffer(raw, dtype="<u8", count=n_b, offset=off + 4 * n_tok)
        return cls(tokens.astype(np.uint32), bounds.astype(np.uint64), vocab, version)


def write_shard(shard: CorpusShard, path: Union[str, os.PathLike]) -> Path:
    path = Path(path)
    try:
        path.write_bytes(shard.to_bytes())
    except OSError as e:
        raise OSError(f"cannot write shard {path}: {e}") from e
    return path


def read_shard(path: Union[str, os.PathLike]) -> CorpusShard:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read shard {path}: {e}") from e
    try:
        return CorpusShard.from_bytes(raw)
    except ShardError as e:
        raise ShardError(f"{path}: {e}") from None


def binarize_lines(lines: Iterable[bytes], tokenizer: ByteTokenizer = ByteTokenizer()) -> CorpusShard:
    """One document per line; trailing newlines are stripped."""
    chunks, bounds, total = [], [], 0
    for line in lines:
        if isinstance(line, str):
            line = line.encode("utf-8")
        ids = tokenizer.encode(line.rstrip(b"\r\n"))
        if not ids:
            continue
        chunks.append(np.asarray(ids, dtype=np.uint32))
        total += len(ids)
        bounds.append(total)
    tokens = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.uint32)
    return CorpusShard(tokens, np.asarray(bounds, dtype=np.uint64), tokenizer.vocab_size)


def binarize(src: Union[str, os.PathLike], dst: Union[str, os.PathLike],
             tokenizer: ByteTokenizer = ByteTokenizer()) -> CorpusShard:
    src = Path(src)
    try:
        with src.open("rb") as fh:
            shard = binarize_lines(fh, tokenizer)
    except OSError as e:
        raise OSError(f"cannot read text {src}: {e}") from e
    write_shard(shard, dst)
    return shard


class WindowBatcher:
    """Contiguous non-overlapping windows, shuffled per epoch.

    Documents are packed across boundaries and the trailing partial window is
    dropped. The order of epoch ``e`` is a permutation seeded by ``(seed, e)``,
    and the last batch of an epoch may be short so that each window is seen
    exactly once per epoch.
    """

    def __init__(self, shard: CorpusShard, seq_len: int, batch_size: int, seed: int):
        if seq_len < 1 or batch_size < 1:
            raise ValueError("seq_len and batch_size must be positive")
        n_windows = len(shard) // seq_len
        if n_windows == 0:
            raise ValueError(f"shard of {len(shard)} tokens is smaller than one window of {seq_len}")
        self.windows = shard.tokens[: n_windows * seq_len].astype(np.int64).reshape(n_windows, seq_len)
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.seed = seed
        self._order_cache: dict = {}

    @property
    def n_windows(self) -> int:
        return self.windows.shape[0]

    @property
    def batches_per_epoch(self) -> int:
        return -(-self.n_windows // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        if epoch not in self._order_cache:
            if len(self._order_cache) > 4:
                self._order_cache.clear()
            rng = np.random.default_rng([self.seed, epoch])
            self._order_cache[epoch] = rng.permutation(self.n_windows)
        return self._order_cache[epoch]

    def batch(self, epoch: int, index: int) -> np.ndarray:
        idx = self.order(epoch)[index * self.batch_size:(index + 1) * self.batch_size]
        return self.windows[idx]

    def at_step(self, step: int) -> tuple:
        """Batch for 1-based training step ``step``, with its (epoch, index)."""
        epoch, index = divmod(step - 1, self.batches_per_epoch)
        return self.batch(epoch, index), epoch, index

    def epoch(self, epoch: int) -> Iterator[np.ndarray]:
        for i in range(self.batches_per_epoch):
            yield self.batch(epoch, i)


def make_batches(shard: CorpusShard, seq_len: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    return WindowBatcher(shard, seq_len, batch_size, seed).epoch(epoch)


def sequential_batches(shard: CorpusShard, seq_len: int, batch_size: int) -> Iterator[np.ndarray]:
    """Windows in corpus order; used for evaluation."""
    n = len(shard) // seq_len
    if n == 0:
        raise ValueError(f"shard of {len(shard)} tokens is smaller than one window of {seq_len}")
    windows = shard.tokens[: n * seq_len].astype(np.int64).reshape(n, seq_len)
    for i in range(0, n, batch_size):
        yield windows[i:i + batch_size]
