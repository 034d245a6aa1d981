"""Human-editable config files.

One ``key = value`` per line, ``#`` comments, optional sections::

    # MobileLLM-125M
    [model]
    n_layers = 30
    n_heads = 9
    ...
    [hardware]
    bytes_per_param = 1

Keys before any section header belong to ``[model]``.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .architecture import ModelConfig

_MODEL_INT = ("n_layers", "n_heads", "n_kv_heads", "embed_dim", "hidden_dim", "vocab_size", "context_len", "repeat_factor")


def _parser(text: str) -> configparser.ConfigParser:
    body = [ln for ln in text.splitlines() if ln.strip() and not ln.strip().startswith(("#", ";"))]
    if not body or not body[0].strip().startswith("["):
        text = "[model]\n" + text
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    return cp


def read_sections(path) -> dict[str, dict[str, str]]:
    cp = _parser(Path(path).read_text())
    return {s: dict(cp[s]) for s in cp.sections()}


def model_config_from_section(sec: dict[str, str]) -> ModelConfig:
    kw: dict = {}
    for k, v in sec.items():
        if k in _MODEL_INT:
            kw[k] = int(v)
        elif k == "share_embeddings":
            low = v.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"share_embeddings: expected a boolean, got {v!r}")
            kw[k] = low in ("true", "1", "yes")
        elif k == "sharing":
            kw[k] = v.strip()
        else:
            raise ValueError(f"unknown [model] key {k!r}")
    return ModelConfig(**kw)


def load_model_config(path) -> ModelConfig:
    secs = read_sections(path)
    if "model" not in secs:
        raise ValueError(f"{path}: no [model] section")
    return model_config_from_section(secs["model"])


def dump_model_config(config: ModelConfig) -> str:
    lines = ["[model]"]
    for k, v in config.to_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
