import numpy as np
import pytest

from mobilellm.architecture import (
    PRESETS,
    ConfigError,
    ModelConfig,
    SharingStrategy,
    count_params,
    enumerate_depth_width,
    ffn_hidden_dim,
    param_breakdown,
    validate,
)
from mobilellm.model import Model


def _random_configs(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        kv = int(rng.integers(1, 4))
        heads = kv * int(rng.integers(1, 4))
        head_dim = 2 * int(rng.integers(1, 5))
        sharing = rng.choice([s.value for s in SharingStrategy])
        repeat = 1 if sharing == "none" else (2 if sharing == "reverse" else int(rng.integers(1, 4)))
        out.append(ModelConfig(
            n_layers=int(rng.integers(1, 4)), n_heads=heads, n_kv_heads=kv, embed_dim=heads * head_dim,
            hidden_dim=int(rng.integers(1, 20)), vocab_size=int(rng.integers(2, 40)), context_len=8,
            share_embeddings=bool(rng.integers(0, 2)), sharing=sharing, repeat_factor=repeat,
        ))
    return out


@pytest.mark.parametrize("cfg", _random_configs(50), ids=lambda c: f"L{c.n_layers}H{c.n_heads}KV{c.n_kv_heads}d{c.embed_dim}")
def test_count_matches_constructed_model(cfg):
    assert count_params(cfg) == Model(cfg).num_parameters()


@pytest.mark.parametrize("name, printed", [("125M", 124.6e6), ("350M", 345.3e6), ("600M", 603.1e6)])
def test_released_configs_reproduce_table(name, printed):
    assert abs(count_params(PRESETS[name]) - printed) <= 5e-4 * printed


def test_exact_125m_count():
    assert count_params(PRESETS["125M"]) == 124_635_456


def test_deep_thin_135m_exact_and_tying_saving():
    cfg = ModelConfig(30, 8, 8, 512, 1536, share_embeddings=False)
    assert count_params(cfg) == 135_035_392
    assert count_params(cfg) - count_params(cfg.with_(share_embeddings=True)) == 32000 * 512 == 16_384_000


@pytest.mark.parametrize("cfg", _random_configs(20, seed=1))
def test_tying_saves_exactly_vocab_times_dim(cfg):
    untied = cfg.with_(share_embeddings=False)
    tied = cfg.with_(share_embeddings=True)
    assert count_params(untied) - count_params(tied) == cfg.vocab_size * cfg.embed_dim


@pytest.mark.parametrize("strategy, r", [("immediate", 2), ("immediate", 4), ("repeat_all_over", 3), ("reverse", 2)])
def test_sharing_never_changes_count(strategy, r):
    base = PRESETS["125M"]
    assert count_params(base.with_(sharing=strategy, repeat_factor=r)) == count_params(base)


def test_breakdown_sums_to_total():
    b = param_breakdown(PRESETS["350M"])
    assert b["embedding"] + b["output_head"] + b["blocks"] + b["final_norm"] == count_params(PRESETS["350M"])


def test_validate_examples():
    assert validate(PRESETS["125M"]) == []
    assert "n_heads not divisible by n_kv_heads" in validate(PRESETS["125M"].with_(n_kv_heads=4))
    assert "embed_dim not divisible by n_heads" in validate(PRESETS["125M"].with_(embed_dim=570))


def test_validate_lists_every_violation():
    bad = PRESETS["125M"].with_(n_kv_heads=4, embed_dim=570, repeat_factor=2)
    assert len(validate(bad)) == 3


def test_count_rejects_invalid_config():
    with pytest.raises(ConfigError, match="n_kv_heads"):
        count_params(PRESETS["125M"].with_(n_kv_heads=4))


def test_unknown_strategy_name():
    with pytest.raises(ValueError, match="immediate"):
        ModelConfig(2, 2, 2, 8, 8, sharing="sideways")


def test_ffn_hidden_rule_matches_released_widths():
    for cfg in PRESETS.values():
        assert ffn_hidden_dim(cfg.embed_dim) == cfg.hidden_dim


PUBLISHED_125M_SWEEP = [(12, 12, 768, 134.1), (18, 10, 640, 132.4), (24, 9, 576, 132.4), (30, 8, 512, 135.0), (42, 7, 448, 134.6)]


def test_sweep_regenerates_125m_rows():
    res = enumerate_depth_width(134e6, [12, 18, 24, 30, 42], head_dim=64, vocab=32000, share_emb=False)
    got = [(c.n_layers, c.n_heads, c.embed_dim) for c in res.configs]
    assert got == [row[:3] for row in PUBLISHED_125M_SWEEP]
    for c, row in zip(res.configs, PUBLISHED_125M_SWEEP):
        assert abs(count_params(c) / 1e6 - row[3]) <= 0.03 * row[3]
    assert res.warnings == []


def test_sweep_within_budget_and_monotone():
    res = enumerate_depth_width(134e6, [4, 6, 8, 12, 18, 24, 30, 42, 62])
    assert [c.n_layers for c in res.configs] == sorted(c.n_layers for c in res.configs)
    dims = [c.embed_dim for c in res.configs]
    assert all(a >= b for a, b in zip(dims, dims[1:]))
    for c in res.configs:
        assert abs(count_params(c) - 134e6) <= 0.03 * 134e6
        assert c.n_kv_heads == c.n_heads and c.embed_dim == 64 * c.n_heads


def test_sweep_infeasible_budget_gives_empty_result_with_warnings():
    res = enumerate_depth_width(2 * 32000 * 64 - 1, [12, 30], share_emb=False)
    assert res.configs == []
    assert len(res.warnings) == 2


def test_sweep_needs_depths():
    with pytest.raises(ValueError):
        enumerate_depth_width(1e8, [])
