"""Back-of-envelope on-device costs: energy, battery life, weight traffic, fleet size."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .architecture import ModelConfig, check, param_breakdown
from .layer_sharing import config_schedule

SECONDS_PER_DAY = 24 * 3600


@dataclass(frozen=True)
class CostEnvelope:
    energy_per_token_per_B: float = 0.1  # J per token per 1e9 parameters
    sram_bytes: int = 20 * 2**20
    battery_joules: float = 50e3
    bytes_per_param: float = 1.0  # 8-bit weights
    dram_bandwidth: float | None = None  # bytes/s

    def __post_init__(self):
        for name in ("energy_per_token_per_B", "sram_bytes", "battery_joules", "bytes_per_param"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dram_bandwidth is not None and self.dram_bandwidth <= 0:
            raise ValueError("dram_bandwidth must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "CostEnvelope":
        casts = {"sram_bytes": int, "dram_bandwidth": float}
        kw = {k: casts.get(k, float)(v) for k, v in d.items()}
        return cls(**kw)


def energy_per_token(params: float, envelope: CostEnvelope = CostEnvelope()) -> float:
    if params < 0:
        raise ValueError("params must be >= 0")
    return params * envelope.energy_per_token_per_B / 1e9


def battery_runtime(envelope: CostEnvelope, params: float, tokens_per_s: float) -> float:
    """Seconds of continuous decoding on one charge; ``inf`` for a free model."""
    if tokens_per_s <= 0:
        raise ValueError("tokens_per_s must be positive")
    watts = energy_per_token(params, envelope) * tokens_per_s
    return math.inf if watts == 0 else envelope.battery_joules / watts


@dataclass(frozen=True)
class TrafficReport:
    dram_bytes: float
    executed_layers: int
    fetches: int
    forced_refetches: int
    block_bytes: float
    seconds: float | None = None  # dram_bytes / bandwidth, when known


def schedule_traffic(schedule: list[int], block_bytes: float, sram_bytes: float, dram_bandwidth: float | None = None) -> TrafficReport:
    """DRAM bytes moved for one pass over ``schedule`` with a one-block SRAM.

    A block is fetched whenever it is not the resident one. A block larger
    than SRAM can never be resident and is fetched at every step.
    """
    fits = block_bytes <= sram_bytes
    resident = None
    fetches = forced = 0
    for phys in schedule:
        if not fits:
            fetches += 1
            forced += 1
        elif phys != resident:
            fetches += 1
            resident = phys
    dram = fetches * block_bytes
    secs = dram / dram_bandwidth if dram_bandwidth else None
    return TrafficReport(dram, len(schedule), fetches, forced, block_bytes, secs)


def block_bytes(config: ModelConfig, bytes_per_param: float) -> float:
    return param_breakdown(config)["per_block"] * bytes_per_param


def weight_traffic_per_token(config: ModelConfig, envelope: CostEnvelope = CostEnvelope()) -> TrafficReport:
    """Per-token block-weight traffic; the embedding is charged per sequence, not here."""
    check(config)
    return schedule_traffic(
        config_schedule(config),
        block_bytes(config, envelope.bytes_per_param),
        envelope.sram_bytes,
        envelope.dram_bandwidth,
    )


def fleet_gpus(population: float, usage_fraction: float, flops_per_token: float, tokens_per_s: float, gpu_flops_per_s: float) -> float:
    """GPUs needed to serve a population continuously for its share of each day."""
    for name, v in (("population", population), ("flops_per_token", flops_per_token),
                    ("tokens_per_s", tokens_per_s), ("gpu_flops_per_s", gpu_flops_per_s)):
        if v <= 0:
            raise ValueError(f"{name} must be positive")
    if usage_fraction < 0:
        raise ValueError("usage_fraction must be >= 0")
    demand = population * usage_fraction * flops_per_token * tokens_per_s * SECONDS_PER_DAY
    return demand / (gpu_flops_per_s * SECONDS_PER_DAY)
