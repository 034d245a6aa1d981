"""Execution schedules over weight-owning blocks, and the unrolled-model oracle."""

from __future__ import annotations

import copy

from .architecture import ModelConfig, SharingStrategy


class UnsupportedSharing(ValueError):
    pass


def execution_schedule(strategy, n_layers: int, repeat_factor: int = 1) -> list[int]:
    """Physical block index executed at each logical step.

    >>> execution_schedule("immediate", 3, 2)
    [0, 0, 1, 1, 2, 2]
    >>> execution_schedule("reverse", 3, 2)
    [0, 1, 2, 2, 1, 0]
    """
    strategy = SharingStrategy.parse(strategy)
    if n_layers < 1:
        raise ValueError(f"n_layers must be >= 1, got {n_layers}")
    if repeat_factor < 1:
        raise ValueError(f"repeat_factor must be >= 1, got {repeat_factor}")
    base = list(range(n_layers))
    if strategy is SharingStrategy.NONE:
        if repeat_factor != 1:
            raise UnsupportedSharing("sharing 'none' requires repeat_factor 1")
        return base
    if strategy is SharingStrategy.IMMEDIATE:
        return [i for i in base for _ in range(repeat_factor)]
    if strategy is SharingStrategy.REPEAT_ALL_OVER:
        return base * repeat_factor
    if repeat_factor != 2:
        raise UnsupportedSharing(f"reverse sharing is defined only for repeat_factor 2, got {repeat_factor}")
    return base + base[::-1]


def config_schedule(config: ModelConfig) -> list[int]:
    return execution_schedule(config.sharing, config.n_layers, config.repeat_factor)


def unroll(model):
    """Copy of ``model`` with one physically distinct block per schedule step.

    Returns ``(unrolled_model, schedule)``. The unrolled model has no layer
    sharing; its block ``k`` starts as a deep copy of physical block
    ``schedule[k]`` of the source.
    """
    from .model import Model

    cfg = model.config
    schedule = config_schedule(cfg)
    flat_cfg = cfg.with_(n_layers=len(schedule), sharing=SharingStrategy.NONE, repeat_factor=1)
    blocks = [copy.deepcopy(model.blocks[i]) for i in schedule]
    clone = Model.from_parts(
        flat_cfg,
        embedding=model.embedding.data.copy(),
        blocks=blocks,
        final_norm=model.final_norm.data.copy(),
        output_head=None if cfg.share_embeddings else model.output_head.data.copy(),
        dtype=model.dtype,
    )
    clone.act_quantizer = model.act_quantizer
    return clone, schedule
