"""Model genotype, exact parameter accounting, and depth-vs-width sweeps."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace

DEFAULT_HEAD_DIM = 64
DEFAULT_VOCAB = 32000
FFN_MULTIPLE_OF = 256


class ConfigError(ValueError):
    """A ModelConfig violates one or more structural invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid model config: " + "; ".join(self.violations))


class SharingStrategy(str, enum.Enum):
    NONE = "none"
    IMMEDIATE = "immediate"
    REPEAT_ALL_OVER = "repeat_all_over"
    REVERSE = "reverse"

    @classmethod
    def parse(cls, value: "str | SharingStrategy | None") -> "SharingStrategy":
        if value is None:
            return cls.NONE
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = " | ".join(m.value for m in cls)
            raise ValueError(f"unknown sharing strategy {value!r}; expected {names}") from None


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    embed_dim: int
    hidden_dim: int
    vocab_size: int = DEFAULT_VOCAB
    context_len: int = 256
    share_embeddings: bool = True
    sharing: SharingStrategy = SharingStrategy.NONE
    repeat_factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sharing", SharingStrategy.parse(self.sharing))

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def executed_layers(self) -> int:
        return self.n_layers * self.repeat_factor

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sharing"] = self.sharing.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def validate(config: ModelConfig) -> list[str]:
    """Return every violated invariant; an empty list means constructible."""
    out: list[str] = []
    for name in ("n_layers", "n_heads", "n_kv_heads", "embed_dim", "hidden_dim", "vocab_size", "context_len"):
        v = getattr(config, name)
        if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
            out.append(f"{name} must be a positive integer (got {v!r})")
    if not isinstance(config.repeat_factor, int) or config.repeat_factor < 1:
        out.append(f"repeat_factor must be an integer >= 1 (got {config.repeat_factor!r})")
    if out:
        return out
    if config.n_heads % config.n_kv_heads:
        out.append("n_heads not divisible by n_kv_heads")
    if config.embed_dim % config.n_heads:
        out.append("embed_dim not divisible by n_heads")
    elif config.head_dim % 2:
        out.append("head_dim must be even for rotary positions")
    if config.sharing is SharingStrategy.NONE and config.repeat_factor != 1:
        out.append("repeat_factor must be 1 when sharing is none")
    if config.sharing is SharingStrategy.REVERSE and config.repeat_factor != 2:
        out.append("reverse sharing supports only repeat_factor 2")
    return out


def check(config: ModelConfig) -> ModelConfig:
    problems = validate(config)
    if problems:
        raise ConfigError(problems)
    return config


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    """Parameter counts by group. Layer sharing never changes these numbers."""
    check(config)
    d, kv, h = config.embed_dim, config.kv_dim, config.hidden_dim
    attn = 2 * d * d + 2 * d * kv
    ffn = 3 * d * h
    block = attn + ffn + 2 * d
    emb = config.vocab_size * d
    return {
        "embedding": emb,
        "output_head": 0 if config.share_embeddings else emb,
        "attention": config.n_layers * attn,
        "ffn": config.n_layers * ffn,
        "block_norms": config.n_layers * 2 * d,
        "final_norm": d,
        "per_block": block,
        "blocks": config.n_layers * block,
    }


def count_params(config: ModelConfig) -> int:
    b = param_breakdown(config)
    return b["embedding"] + b["output_head"] + b["blocks"] + b["final_norm"]


def ffn_hidden_dim(embed_dim: int, multiple_of: int = FFN_MULTIPLE_OF) -> int:
    """SwiGLU inner width: 2/3 of 4*dim, rounded up to ``multiple_of``."""
    raw = int(2 * 4 * embed_dim / 3)
    return multiple_of * math.ceil(raw / multiple_of)


# Released model family (embedding shared, grouped-query attention).
PRESETS: dict[str, ModelConfig] = {
    "125M": ModelConfig(30, 9, 3, 576, 1536),
    "350M": ModelConfig(32, 15, 5, 960, 2560),
    "600M": ModelConfig(40, 18, 6, 1152, 3072),
    "1B": ModelConfig(54, 20, 5, 1280, 3584),
    "1.5B": ModelConfig(54, 25, 5, 1600, 4352),
}


@dataclass
class SweepResult:
    configs: list[ModelConfig] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def enumerate_depth_width(
    budget: float,
    depths: list[int],
    head_dim: int = DEFAULT_HEAD_DIM,
    vocab: int = DEFAULT_VOCAB,
    share_emb: bool = False,
    tolerance: float = 0.03,
    overshoot: float = 0.02,
    hidden_rule=ffn_hidden_dim,
    context_len: int = 256,
) -> SweepResult:
    """For each depth, the widest multi-head config whose size fits the budget.

    Width grows in steps of ``head_dim`` (one head at a time). The widest
    config with ``count <= (1 + overshoot) * budget`` is kept if it also lies
    within ``tolerance`` of the budget; otherwise the depth is dropped and a
    warning recorded.
    """
    if not depths:
        raise ValueError("depths must be nonempty")
    result = SweepResult()
    ceiling = (1 + overshoot) * budget
    for depth in sorted(set(depths)):
        best = None
        heads = 1
        while True:
            dim = heads * head_dim
            cfg = ModelConfig(
                n_layers=depth, n_heads=heads, n_kv_heads=heads, embed_dim=dim,
                hidden_dim=hidden_rule(dim), vocab_size=vocab, context_len=context_len,
                share_embeddings=share_emb,
            )
            if count_params(cfg) > ceiling:
                break
            best = cfg
            heads += 1
        if best is None:
            result.warnings.append(f"depth {depth}: even a single head of width {head_dim} exceeds the budget")
            continue
        n = count_params(best)
        if abs(n - budget) > tolerance * budget:
            result.warnings.append(
                f"depth {depth}: best width {best.embed_dim} gives {n} params, outside +/-{tolerance:.0%} of budget"
            )
            continue
        result.configs.append(best)
    return result
