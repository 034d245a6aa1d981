"""Perplexity and length-normalised multiple-choice scoring."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx


def _stream_nll(model, tokens: np.ndarray) -> tuple[float, int]:
    """Summed next-token NLL and prediction count over one stream.

    Long streams are cut into windows of ``context_len`` tokens that overlap
    by one token, so every prediction is made exactly once.
    """
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size < 2:
        raise ValueError("perplexity needs at least 2 tokens")
    window = model.config.context_len + 1  # inputs fill the context, last token is only a target
    total, count, start = 0.0, 0, 0
    while start < tokens.size - 1:
        chunk = tokens[start:start + window]
        n = chunk.size - 1
        total += float(model.lm_loss(chunk[None, :]).data) * n
        count += n
        start += n
    return total, count


def perplexity(model, tokens) -> float:
    """``exp`` of mean next-token cross-entropy.

    ``tokens`` is one stream, or a list of independent streams whose
    predictions are pooled.
    """
    streams = tokens if isinstance(tokens, (list, tuple)) and tokens and not np.isscalar(tokens[0]) else [tokens]
    total = count = 0
    for s in streams:
        t, c = _stream_nll(model, s)
        total += t
        count += c
    return math.exp(total / count)


@dataclass
class MCResult:
    index: int
    scores: list[float]


def choice_loglik(model, context, choice) -> float:
    """Mean log-probability of ``choice`` tokens following ``context``."""
    ctx = [int(t) for t in context]
    ch = [int(t) for t in choice]
    if not ch:
        raise ValueError("empty choice")
    if not ctx:
        raise ValueError("empty context")
    seq = np.asarray(ctx + ch)
    if seq.size - 1 > model.config.context_len:
        raise ValueError(f"context + choice ({seq.size}) does not fit context_len {model.config.context_len}")
    logits = model.forward(seq[None, :-1])
    logp = nx.log_softmax(logits, axis=-1).data[0].astype(np.float64)
    pos = np.arange(len(ctx) - 1, seq.size - 1)
    return float(logp[pos, seq[pos + 1]].mean())


def mc_score(model, context, choices) -> MCResult:
    if not choices:
        raise ValueError("no choices")
    scores = [choice_loglik(model, context, c) for c in choices]
    return MCResult(int(np.argmax(scores)), scores)


def load_mc_tasks(path, tokenizer=None) -> list[dict]:
    """Read JSON-lines records ``{context, choices, gold}``.

    Strings are encoded with ``tokenizer``; lists are taken as token ids.
    """
    def enc(x):
        if isinstance(x, str):
            if tokenizer is None:
                raise ValueError("string fields need a tokenizer")
            return tokenizer.encode(x)
        return [int(t) for t in x]

    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            out.append({
                "context": enc(rec["context"]),
                "choices": [enc(c) for c in rec["choices"]],
                "gold": int(rec["gold"]),
            })
        except KeyError as e:
            raise ValueError(f"{path}:{lineno}: missing field {e}") from None
    return out


def mc_accuracy(model, tasks: list[dict]) -> dict:
    correct = 0
    for t in tasks:
        correct += mc_score(model, t["context"], t["choices"]).index == t["gold"]
    return {"tasks": len(tasks), "correct": correct, "accuracy": correct / len(tasks) if tasks else float("nan")}
