"""Grouped-query causal self-attention with rotary positions and a kv-cache."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .architecture import ModelConfig, check
from .numerics import DiffTensor


class CapacityError(RuntimeError):
    """A kv-cache or context window would overflow."""


@dataclass
class AttentionWeights:
    wq: DiffTensor  # [n_heads*head_dim, dim]
    wk: DiffTensor  # [n_kv_heads*head_dim, dim]
    wv: DiffTensor  # [n_kv_heads*head_dim, dim]
    wo: DiffTensor  # [dim, n_heads*head_dim]


class LayerCache:
    """Keys and values already seen by one executed layer.

    Buffers are ``[batch, n_kv_heads, capacity, head_dim]``; only the first
    ``filled`` positions are valid.
    """

    def __init__(self, batch: int, n_kv_heads: int, capacity: int, head_dim: int, dtype=np.float32):
        self.k = np.zeros((batch, n_kv_heads, capacity, head_dim), dtype=dtype)
        self.v = np.zeros_like(self.k)
        self.filled = 0

    @property
    def capacity(self) -> int:
        return self.k.shape[2]

    @property
    def nbytes(self) -> int:
        return self.k.nbytes + self.v.nbytes

    def append(self, k: np.ndarray, v: np.ndarray, positions: np.ndarray) -> None:
        t = k.shape[2]
        expected = np.arange(self.filled, self.filled + t)
        if not np.array_equal(np.asarray(positions), expected):
            raise ValueError(f"cache append must be sequential: expected positions {self.filled}..{self.filled + t - 1}")
        if self.filled + t > self.capacity:
            raise CapacityError(f"kv-cache overflow: {self.filled} + {t} > capacity {self.capacity}")
        self.k[:, :, self.filled:self.filled + t] = k
        self.v[:, :, self.filled:self.filled + t] = v
        self.filled += t

    def history(self) -> tuple[np.ndarray, np.ndarray]:
        return self.k[:, :, :self.filled], self.v[:, :, :self.filled]


class KVCache:
    """One LayerCache per executed layer (shared blocks get a slot per execution)."""

    def __init__(self, config: ModelConfig, batch: int = 1, capacity: int | None = None, dtype=np.float32):
        capacity = config.context_len if capacity is None else capacity
        if capacity > config.context_len:
            raise CapacityError(f"cache capacity {capacity} exceeds context_len {config.context_len}")
        self.slots = [
            LayerCache(batch, config.n_kv_heads, capacity, config.head_dim, dtype)
            for _ in range(config.executed_layers)
        ]

    def __getitem__(self, i: int) -> LayerCache:
        return self.slots[i]

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def filled(self) -> int:
        return self.slots[0].filled if self.slots else 0

    @property
    def nbytes(self) -> int:
        return sum(s.nbytes for s in self.slots)


def cache_bytes(config: ModelConfig, seq_len: int, bytes_per_elem: float = 2) -> int:
    """Bytes of keys plus values held for ``seq_len`` tokens across executed layers."""
    check(config)
    if seq_len > config.context_len:
        raise CapacityError(f"seq_len {seq_len} exceeds context_len {config.context_len}")
    return int(2 * config.executed_layers * config.n_kv_heads * seq_len * config.head_dim * bytes_per_elem)


def causal_mask(q_positions: np.ndarray, k_len: int) -> np.ndarray:
    """Additive mask ``[T, S]``: 0 where key position <= query position, else -inf."""
    q_positions = np.asarray(q_positions)
    allowed = np.arange(k_len)[None, :] <= q_positions[:, None]
    return np.where(allowed, 0.0, -np.inf)


def _split_heads(x: DiffTensor, n: int, head_dim: int) -> DiffTensor:
    b, t, _ = x.shape
    return nx.transpose(nx.reshape(x, (b, t, n, head_dim)), (0, 2, 1, 3))


def gqa_attention(
    x: DiffTensor,
    weights: AttentionWeights,
    n_heads: int,
    n_kv_heads: int,
    cache: LayerCache | None = None,
    positions: np.ndarray | None = None,
    grouped: bool = True,
    rope_base: float = nx.ROPE_BASE,
) -> DiffTensor:
    """Causal attention over ``x`` of shape ``[B, T, dim]``.

    With ``grouped=True`` each kv-head serves its ``n_heads // n_kv_heads``
    query heads by folding the query group into the sequence axis, so the
    repeated keys/values are never materialised. ``grouped=False`` repeats
    the kv-heads explicitly and runs ordinary multi-head attention.
    """
    if n_heads % n_kv_heads:
        raise ValueError(f"n_heads {n_heads} not divisible by n_kv_heads {n_kv_heads}")
    b, t, _ = x.shape
    head_dim = weights.wq.shape[0] // n_heads
    n_rep = n_heads // n_kv_heads
    if positions is None:
        start = cache.filled if cache is not None else 0
        positions = np.arange(start, start + t)
    positions = np.asarray(positions)
    if t > 1 and np.any(np.diff(positions) <= 0):
        raise ValueError("positions must be strictly increasing")

    q = nx.rope(_split_heads(nx.linear(x, weights.wq), n_heads, head_dim), positions, rope_base)
    k = nx.rope(_split_heads(nx.linear(x, weights.wk), n_kv_heads, head_dim), positions, rope_base)
    v = _split_heads(nx.linear(x, weights.wv), n_kv_heads, head_dim)

    if cache is not None:
        past_k, past_v = cache.history()
        past_k, past_v = past_k.copy(), past_v.copy()
        cache.append(k.data, v.data, positions)
        if past_k.shape[2]:
            k = nx.concat([DiffTensor(past_k.astype(x.dtype)), k], axis=2)
            v = nx.concat([DiffTensor(past_v.astype(x.dtype)), v], axis=2)
    s = k.shape[2]
    mask = causal_mask(positions, s)
    inv_sqrt = 1.0 / math.sqrt(head_dim)

    if grouped:
        qg = nx.reshape(q, (b, n_kv_heads, n_rep * t, head_dim))
        scores = nx.scale(nx.matmul(qg, nx.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        scores = nx.add_constant(nx.reshape(scores, (b, n_kv_heads, n_rep, t, s)), mask)
        probs = nx.reshape(nx.softmax(scores, axis=-1), (b, n_kv_heads, n_rep * t, s))
        ctx = nx.reshape(nx.matmul(probs, v), (b, n_heads, t, head_dim))
    else:
        k_rep = nx.repeat(k, n_rep, axis=1)
        v_rep = nx.repeat(v, n_rep, axis=1)
        scores = nx.scale(nx.matmul(q, nx.transpose(k_rep, (0, 1, 3, 2))), inv_sqrt)
        probs = nx.softmax(nx.add_constant(scores, mask), axis=-1)
        ctx = nx.matmul(probs, v_rep)

    merged = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (b, t, n_heads * head_dim))
    return nx.linear(merged, weights.wo)
