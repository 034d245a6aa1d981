"""Decoder-only language model: embeddings, scheduled GQA/SwiGLU blocks, tied head."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Iterator

import numpy as np

from . import numerics as nx
from .architecture import ModelConfig, check
from .attention import AttentionWeights, CapacityError, KVCache, gqa_attention
from .layer_sharing import config_schedule
from .numerics import DiffTensor

INIT_STD = 0.02


class SequenceLengthError(ValueError):
    pass


@dataclass
class Block:
    attn_norm: DiffTensor
    wq: DiffTensor
    wk: DiffTensor
    wv: DiffTensor
    wo: DiffTensor
    ffn_norm: DiffTensor
    w_gate: DiffTensor
    w_up: DiffTensor
    w_down: DiffTensor

    def named(self) -> Iterator[tuple[str, DiffTensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    @property
    def attention(self) -> AttentionWeights:
        return AttentionWeights(self.wq, self.wk, self.wv, self.wo)


BLOCK_FIELDS = tuple(f.name for f in fields(Block))
NORM_FIELDS = ("attn_norm", "ffn_norm")


def _param(arr: np.ndarray, dtype, name: str) -> DiffTensor:
    return DiffTensor(arr, requires_grad=True, dtype=dtype, name=name)


def init_block(config: ModelConfig, rng: np.random.Generator, dtype, prefix: str = "") -> Block:
    d, kv, h = config.embed_dim, config.kv_dim, config.hidden_dim
    shapes = {
        "wq": (d, d), "wk": (kv, d), "wv": (kv, d), "wo": (d, d),
        "w_gate": (h, d), "w_up": (h, d), "w_down": (d, h),
    }
    parts = {}
    for name in BLOCK_FIELDS:
        if name in NORM_FIELDS:
            parts[name] = _param(np.ones(d), dtype, prefix + name)
        else:
            parts[name] = _param(rng.normal(0.0, INIT_STD, shapes[name]), dtype, prefix + name)
    return Block(**parts)


class Model:
    """Pre-norm decoder with rotary attention and SwiGLU feed-forward blocks.

    ``blocks`` holds one weight record per *distinct* layer; the forward pass
    walks the sharing schedule over them. With ``share_embeddings`` the output
    head is the embedding tensor itself.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype="float32"):
        check(config)
        self.config = config
        self.dtype = nx.resolve_dtype(dtype)
        rng = np.random.default_rng(seed)
        v, d = config.vocab_size, config.embed_dim
        self.embedding = _param(rng.normal(0.0, INIT_STD, (v, d)), self.dtype, "embedding")
        self.blocks = [init_block(config, rng, self.dtype, f"blocks.{i}.") for i in range(config.n_layers)]
        self.final_norm = _param(np.ones(d), self.dtype, "final_norm")
        if config.share_embeddings:
            self._head = None
        else:
            self._head = _param(rng.normal(0.0, INIT_STD, (v, d)), self.dtype, "output_head")
        self.schedule = config_schedule(config)
        self.act_quantizer: Callable[[DiffTensor], DiffTensor] | None = None
        self.quantized: dict = {}

    @classmethod
    def from_parts(cls, config: ModelConfig, embedding, blocks, final_norm, output_head=None, dtype="float32") -> "Model":
        """Build a model around existing arrays (or Block records) without random init."""
        check(config)
        self = cls.__new__(cls)
        self.config = config
        self.dtype = nx.resolve_dtype(dtype)
        self.embedding = _param(embedding, self.dtype, "embedding")
        self.blocks = []
        for i, blk in enumerate(blocks):
            src = blk if isinstance(blk, dict) else {n: t.data for n, t in blk.named()}
            self.blocks.append(Block(**{n: _param(np.array(src[n]), self.dtype, f"blocks.{i}.{n}") for n in BLOCK_FIELDS}))
        if len(self.blocks) != config.n_layers:
            raise ValueError(f"config has {config.n_layers} layers but {len(self.blocks)} blocks were given")
        self.final_norm = _param(final_norm, self.dtype, "final_norm")
        if config.share_embeddings:
            if output_head is not None:
                raise ValueError("tied model cannot take a separate output head")
            self._head = None
        else:
            if output_head is None:
                raise ValueError("untied model needs an output head")
            self._head = _param(output_head, self.dtype, "output_head")
        self.schedule = config_schedule(config)
        self.act_quantizer = None
        self.quantized = {}
        return self

    @property
    def output_head(self) -> DiffTensor:
        return self.embedding if self._head is None else self._head

    def named_parameters(self) -> list[tuple[str, DiffTensor]]:
        out = [("embedding", self.embedding)]
        for i, blk in enumerate(self.blocks):
            out.extend((f"blocks.{i}.{n}", t) for n, t in blk.named())
        out.append(("final_norm", self.final_norm))
        if self._head is not None:
            out.append(("output_head", self._head))
        return out

    def parameters(self) -> list[DiffTensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward -------------------------------------------------------
    def _maybe_quant(self, x: DiffTensor) -> DiffTensor:
        return x if self.act_quantizer is None else self.act_quantizer(x)

    def block_forward(self, blk: Block, x: DiffTensor, cache=None, positions=None) -> DiffTensor:
        cfg = self.config
        x = self._maybe_quant(x)
        h = nx.rmsnorm(x, blk.attn_norm)
        x = x + gqa_attention(h, blk.attention, cfg.n_heads, cfg.n_kv_heads, cache=cache, positions=positions)
        h = nx.rmsnorm(x, blk.ffn_norm)
        inner = nx.silu(nx.linear(h, blk.w_gate)) * nx.linear(h, blk.w_up)
        return x + nx.linear(self._maybe_quant(inner), blk.w_down)

    def hidden_states(self, tokens, cache: KVCache | None = None) -> DiffTensor:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        _, t = tokens.shape
        start = cache.filled if cache is not None else 0
        if start + t > self.config.context_len:
            raise SequenceLengthError(f"sequence length {start + t} exceeds context_len {self.config.context_len}")
        positions = np.arange(start, start + t)
        x = nx.embedding(self.embedding, tokens)
        for step, phys in enumerate(self.schedule):
            x = self.block_forward(self.blocks[phys], x, None if cache is None else cache[step], positions)
        return nx.rmsnorm(x, self.final_norm)

    def forward(self, tokens, cache: KVCache | None = None) -> DiffTensor:
        """Logits ``[B, T, vocab]`` for integer ``tokens`` of shape ``[B, T]``."""
        x = self.hidden_states(tokens, cache)
        return nx.linear(x, self.output_head)

    __call__ = forward

    def lm_loss(self, tokens) -> DiffTensor:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] < 2:
            raise SequenceLengthError("lm_loss needs at least 2 tokens per row")
        logits = self.forward(tokens[:, :-1])
        b, t, v = logits.shape
        return nx.cross_entropy(nx.reshape(logits, (b * t, v)), tokens[:, 1:].reshape(-1))

    # -- decoding ------------------------------------------------------
    def generate(self, prompt, n_new: int, temperature: float = 0.0, seed: int = 0, use_cache: bool = True) -> list[int]:
        """Extend ``prompt`` by ``n_new`` tokens (greedy at temperature 0)."""
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise ValueError("prompt must be nonempty")
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        if len(prompt) + n_new > self.config.context_len:
            raise CapacityError(f"prompt ({len(prompt)}) + n_new ({n_new}) exceeds context_len {self.config.context_len}")
        out = list(prompt)
        if n_new == 0:
            return out
        rng = np.random.default_rng(seed)
        cache = KVCache(self.config, batch=1, capacity=len(prompt) + n_new, dtype=self.dtype) if use_cache else None
        feed = out
        for _ in range(n_new):
            logits = self.forward(np.asarray([feed]), cache=cache).data[0, -1].astype(np.float64)
            out.append(_pick(logits, temperature, rng))
            feed = out[-1:] if use_cache else out
        return out


def _pick(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature == 0:
        return int(np.argmax(logits))  # first maximum, i.e. lowest id on ties
    z = logits / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(p.size, p=p))
