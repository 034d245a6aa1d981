"""Command-line entry point: ``mobilellm <command> ...``.

Exit status: 0 success, 2 invalid input (bad flags, files, configs), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from . import checkpoint
from .architecture import ConfigError, count_params, enumerate_depth_width, param_breakdown
from .configio import load_model_config, model_config_from_section, read_sections
from .cost_model import CostEnvelope, battery_runtime, energy_per_token, fleet_gpus, weight_traffic_per_token
from .data import ByteTokenizer, load_corpus
from .eval import load_mc_tasks, mc_accuracy, perplexity
from .model import Model
from .quantization import dequantize_array, ptq_model
from .training import TrainPlan, TrainingDiverged, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

TRAIN_LOG_FIELDS = ("step", "loss", "lr", "grad_norm")
SWEEP_FIELDS = ("n_layers", "n_heads", "embed_dim", "hidden_dim", "params", "params_m", "budget_delta")

log = logging.getLogger("mobilellm")


class InputError(Exception):
    """Raised for user-input problems that map to exit status 2."""


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MLLM_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"MLLM_SEED must be an integer, got {env!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _emit(obj, as_json: bool, lines: list[str]) -> None:
    if as_json:
        print(json.dumps(obj, indent=2, sort_keys=True))
    else:
        print("\n".join(lines))


# -- commands --------------------------------------------------------------

def cmd_count_params(args) -> int:
    cfg = load_model_config(args.config)
    b = param_breakdown(cfg)
    total = count_params(cfg)
    report = {
        "total": total,
        "embedding": b["embedding"],
        "output_head": b["output_head"],
        "blocks": b["blocks"],
        "per_block": b["per_block"],
        "norms": b["block_norms"] + b["final_norm"],
        "executed_layers": cfg.executed_layers,
    }
    _emit(report, args.json, [f"{k:16s} {v:,}" for k, v in report.items()])
    return EXIT_OK


def cmd_sweep(args) -> int:
    res = enumerate_depth_width(args.budget, args.depths, args.head_dim, args.vocab, args.share_emb)
    for w in res.warnings:
        log.warning(w)
    rows = []
    for c in res.configs:
        n = count_params(c)
        rows.append({
            "n_layers": c.n_layers, "n_heads": c.n_heads, "embed_dim": c.embed_dim, "hidden_dim": c.hidden_dim,
            "params": n, "params_m": round(n / 1e6, 1), "budget_delta": round(n / args.budget - 1, 5),
        })
    out = open(args.out, "w", newline="") if args.out != "-" else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _plan_from(sections: dict, steps: int, seed: int, teacher: str | None) -> TrainPlan:
    sec = dict(sections.get("train", {}))
    floats = ("peak_lr", "weight_decay", "grad_clip", "kd_weight")
    ints = ("batch_size", "seq_len", "warmup_steps")
    kw = {}
    for k, v in sec.items():
        if k in floats:
            kw[k] = float(v)
        elif k in ints:
            kw[k] = int(v)
        else:
            raise InputError(f"unknown [train] key {k!r}")
    if steps == 0:
        kw["warmup_steps"] = 0
    return TrainPlan(total_steps=steps, seed=seed, kd_teacher=teacher, **kw)


def cmd_train(args) -> int:
    sections = read_sections(args.config)
    if "model" not in sections:
        raise InputError(f"{args.config}: no [model] section")
    cfg = model_config_from_section(sections["model"])
    seed = _seed(args)
    plan = _plan_from(sections, args.steps, seed, args.kd_teacher)
    tokens, vocab = load_corpus(args.data)
    if vocab > cfg.vocab_size:
        raise InputError(f"corpus vocab {vocab} exceeds model vocab {cfg.vocab_size}")
    if plan.seq_len > cfg.context_len + 1:
        raise InputError(f"seq_len {plan.seq_len} exceeds context_len + 1")
    model = Model(cfg, seed=seed)
    teacher = checkpoint.load(args.kd_teacher) if args.kd_teacher else None
    if teacher is not None and teacher.config.vocab_size != cfg.vocab_size:
        raise InputError("teacher and student vocab sizes differ")

    report = None
    writer = None
    if args.report:
        report = open(args.report, "w", newline="")
        writer = csv.DictWriter(report, fieldnames=TRAIN_LOG_FIELDS)
        writer.writeheader()
    try:
        history = train(model, tokens, plan, teacher=teacher, callback=writer.writerow if writer else None)
    finally:
        if report:
            report.close()
    checkpoint.save(model, args.out)
    final = history[-1]["loss"] if history else None
    print(json.dumps({"steps": plan.total_steps, "final_loss": final, "checkpoint": args.out}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = checkpoint.load(args.ckpt)
    if args.data:
        tokens, _ = load_corpus(args.data)
        ppl = perplexity(model, tokens)
        result = {"perplexity": ppl, "tokens": int(tokens.size)}
        _emit(result, args.json, [f"perplexity {ppl:.4f} over {tokens.size} tokens"])
    else:
        tasks = load_mc_tasks(args.mc, ByteTokenizer())
        result = mc_accuracy(model, tasks)
        _emit(result, args.json, [f"accuracy {result['accuracy']:.4f} ({result['correct']}/{result['tasks']})"])
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = checkpoint.load(args.ckpt)
    if model.quantized:
        raise InputError(f"{args.ckpt} is already quantized")
    qmodel = ptq_model(model)
    checkpoint.save(qmodel, args.out)
    src = dict(model.named_parameters())
    stats = {}
    for name, qt in qmodel.quantized.items():
        err = np.abs(dequantize_array(qt).astype(np.float64) - src[name].data.astype(np.float64))
        stats[name] = {
            "max_abs_err": float(err.max()),
            "mean_abs_err": float(err.mean()),
            "max_scale": float(qt.scale.max()),
        }
    print(json.dumps({"checkpoint": args.out, "tensors": stats}, indent=2, sort_keys=True))
    return EXIT_OK


def _envelope(args, sections: dict | None) -> CostEnvelope:
    hw = {}
    if sections and "hardware" in sections:
        hw.update(sections["hardware"])
    if args.hardware:
        secs = read_sections(args.hardware)
        hw.update(secs.get("hardware", secs.get("model", {})))
    try:
        return CostEnvelope.from_dict(hw)
    except TypeError as e:
        raise InputError(f"bad [hardware] section: {e}") from None


def cmd_cost(args) -> int:
    if args.cost_cmd == "fleet":
        n = fleet_gpus(args.population, args.usage_fraction, args.flops_per_token, args.tokens_per_s, args.gpu_flops)
        _emit({"gpus": n}, args.json, [f"gpus {n:.3e}"])
        return EXIT_OK
    if (args.config is None) == (args.params is None):
        raise InputError("cost needs exactly one of --config or --params")
    sections = read_sections(args.config) if args.config else None
    env = _envelope(args, sections)
    result: dict = {}
    if args.config:
        cfg = model_config_from_section(sections["model"])
        params = count_params(cfg)
        t = weight_traffic_per_token(cfg, env)
        result["traffic"] = {
            "dram_bytes_per_token": t.dram_bytes,
            "executed_layers": t.executed_layers,
            "block_fetches": t.fetches,
            "forced_refetches": t.forced_refetches,
            "block_bytes": t.block_bytes,
            "dram_seconds_per_token": t.seconds,
        }
    else:
        params = args.params
    e = energy_per_token(params, env)
    runtime = battery_runtime(env, params, args.rate)
    result.update({
        "params": params,
        "energy_j_per_token": e,
        "tokens_per_s": args.rate,
        "battery_runtime_s": None if math.isinf(runtime) else runtime,
        "battery_runtime_h": None if math.isinf(runtime) else runtime / 3600,
    })
    lines = [
        f"params               {params:,.0f}",
        f"energy (J/token)     {e:.6g}",
        f"battery runtime (s)  {'unbounded' if math.isinf(runtime) else f'{runtime:.1f}'}",
    ]
    if "traffic" in result:
        tr = result["traffic"]
        lines.append(f"dram bytes/token     {tr['dram_bytes_per_token']:,.0f} over {tr['executed_layers']} executed layers")
    _emit(result, args.json, lines)
    return EXIT_OK


def cmd_generate(args) -> int:
    model = checkpoint.load(args.ckpt)
    out = model.generate(args.prompt_tokens, args.n, temperature=args.temperature, seed=_seed(args))
    print(",".join(str(t) for t in out))
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mobilellm", description="Sub-billion decoder toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("count-params", help="exact parameter count of a config")
    s.add_argument("--config", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("sweep", help="depth-vs-width grid at a parameter budget")
    s.add_argument("--budget", type=float, required=True)
    s.add_argument("--depths", type=_int_list, required=True)
    s.add_argument("--head-dim", type=int, default=64)
    s.add_argument("--vocab", type=int, default=32000)
    s.add_argument("--share-emb", action="store_true")
    s.add_argument("--out", required=True, help="CSV path, or - for stdout")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("train", help="train a model from scratch")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--kd-teacher")
    s.add_argument("--report")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="perplexity or multiple-choice accuracy")
    s.add_argument("--ckpt", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--data")
    g.add_argument("--mc")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("quantize", help="W8A8 post-training quantization")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("cost", help="energy, battery and weight-traffic estimates")
    s.add_argument("--config")
    s.add_argument("--params", type=float)
    s.add_argument("--hardware")
    s.add_argument("--rate", type=float, default=10.0, help="tokens per second")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_cost, cost_cmd=None)
    csub = s.add_subparsers(dest="cost_cmd")
    f = csub.add_parser("fleet", help="GPUs to serve a population")
    f.add_argument("--population", type=float, default=7.88e9)
    f.add_argument("--usage-fraction", type=float, default=0.05)
    f.add_argument("--flops-per-token", type=float, default=220e9)
    f.add_argument("--tokens-per-s", type=float, default=50.0)
    f.add_argument("--gpu-flops", type=float, default=60e12)
    f.add_argument("--json", action="store_true")

    s = sub.add_parser("generate", help="sample tokens from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt-tokens", type=_int_list, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--temperature", type=float, default=0.0)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_generate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, FileNotFoundError, IsADirectoryError, checkpoint.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
