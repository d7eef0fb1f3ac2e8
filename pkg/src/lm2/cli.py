"""Command line entry point: ``lm2 {train,sweep,eval,generate,inspect}``.

Every invocation writes into a fresh timestamped directory under ``--out``
(default ``$LM2_OUT_ROOT`` or ``./runs``). Failures print one JSON line to
stderr, ``{"error": <kind>, "message": <text>}``, and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np

from . import inspection
from .config import RunConfig, dump_config, load_config
from .model import generate
from .numerics import ConfigError, DimensionError
from .tasks import UnknownTokenError, Vocab, decode, encode
from .training import (CheckpointError, evaluate, load_checkpoint, make_samples, read_checkpoint,
                       run_experiment, seed_streams, train)

OUT_ROOT_ENV = "LM2_OUT_ROOT"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="key = value config file")
    p.add_argument("--out", help=f"output root (default ${OUT_ROOT_ENV} or ./runs)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--precision", type=int, choices=(32, 64), help="override float precision")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lm2", description="Memory-augmented decoder experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train one model")
    _common(p, config_required=True)
    p.add_argument("--resume", help="continue from this checkpoint")

    p = sub.add_parser("sweep", help="memory-block sweep plus the plain baseline")
    _common(p, config_required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fresh seeded set")
    _common(p)
    p.add_argument("--resume", "--checkpoint", dest="checkpoint", required=True)
    p.add_argument("--mode", choices=("exact_match", "ppl"), default="exact_match")

    p = sub.add_parser("generate", help="decode from a prompt")
    _common(p)
    p.add_argument("--resume", "--checkpoint", dest="checkpoint", required=True)
    p.add_argument("--prompt", required=True, help="space separated tokens")
    p.add_argument("--max-new", type=int, default=1)
    p.add_argument("--temperature", type=float, default=0.0)

    p = sub.add_parser("inspect", help="memory analysis")
    _common(p)
    p.add_argument("what", choices=("heatmap", "slots", "delta"))
    p.add_argument("--resume", "--checkpoint", dest="checkpoint", required=True)
    p.add_argument("--prompt", help="space separated tokens (heatmap, delta)")
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--decode-steps", type=int, default=8)
    p.add_argument("--probes", type=int, default=32, help="probe samples (slots)")
    p.add_argument("--top-m", type=int, default=3)
    return parser


def _run_dir(args, command: str) -> Path:
    root = Path(args.out or os.environ.get(OUT_ROOT_ENV) or "runs")
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = root / f"{stamp}-{command}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def _config(args, fallback: dict | None = None) -> RunConfig:
    if args.config:
        if not Path(args.config).is_file():
            raise CliError("missing_file", f"config file not found: {args.config}")
        cfg = load_config(args.config)
    elif fallback is not None:
        cfg = RunConfig(**fallback)
    else:
        cfg = RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.precision is not None:
        changes["precision"] = args.precision
    return cfg.replace(**changes) if changes else cfg


def _load(args):
    if not Path(args.checkpoint).is_file():
        raise CliError("missing_checkpoint", f"checkpoint not found: {args.checkpoint}")
    model, _, ckpt = load_checkpoint(args.checkpoint)
    return model, ckpt


def _stored_config(ckpt) -> dict:
    if ckpt.run_config is not None:
        return ckpt.run_config
    values = {k: v for k, v in ckpt.config.items() if k in RunConfig.__dataclass_fields__}
    values["sweep_k"] = sorted({1, values["L"]})
    return values


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prompt_ids(text: str, vocab: Vocab) -> np.ndarray:
    ids = np.asarray(encode(text, vocab), dtype=np.int64)
    if ids.size == 0:
        raise CliError("usage", "prompt is empty")
    return ids


def cmd_train(args) -> dict:
    cfg = _config(args)
    resume = None
    if args.resume:
        if not Path(args.resume).is_file():
            raise CliError("missing_checkpoint", f"checkpoint not found: {args.resume}")
        resume = read_checkpoint(args.resume)
    out = _run_dir(args, "train")
    (out / "config.txt").write_text(dump_config(cfg))
    run = train(cfg, out_dir=out, resume=resume)
    _, eval_rng = seed_streams(cfg.seed)
    held_out = make_samples(cfg, eval_rng, cfg.eval_size)
    acc = evaluate(run["model"], held_out, "exact_match")
    summary = {"steps": run["optim"].step, "final_loss": run["history"][-1]["loss"],
               "exact_match": acc.value, "eval_size": acc.n, "evals": run["evals"],
               "wall_clock_s": run["wall_clock"]}
    _write_json(out / "summary.json", summary)
    return {"out": str(out), "exact_match": acc.value, "steps": run["optim"].step}


def cmd_sweep(args) -> dict:
    cfg = _config(args)
    out = _run_dir(args, "sweep")
    (out / "config.txt").write_text(dump_config(cfg))
    t0 = time.perf_counter()
    results = run_experiment(cfg, out_dir=out)
    _write_json(out / "summary.json", {"wall_clock_s": time.perf_counter() - t0,
                                       "heldout_ppl": {k: r.final_ppl for k, r in results.items()}})
    return {"out": str(out), "heldout_ppl": {k: r.final_ppl for k, r in results.items()}}


def cmd_eval(args) -> dict:
    model, ckpt = _load(args)
    cfg = _config(args, _stored_config(ckpt))
    out = _run_dir(args, "eval")
    (out / "config.txt").write_text(dump_config(cfg))
    _, eval_rng = seed_streams(cfg.seed)
    samples = make_samples(cfg, eval_rng, cfg.eval_size)
    rep = evaluate(model, samples, args.mode, loss_mode=cfg.loss_mode)
    _write_json(out / "eval.json", rep.to_dict())
    return {"out": str(out), **rep.to_dict()}


def cmd_generate(args) -> dict:
    model, _ = _load(args)
    vocab = Vocab.default()
    ids = _prompt_ids(args.prompt, vocab)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    toks = generate(model, model.new_state(1), ids, args.max_new, args.temperature, rng)
    text = decode(toks, vocab)
    out = _run_dir(args, "generate")
    (out / "generation.txt").write_text(f"prompt\t{args.prompt}\noutput\t{text}\n")
    return {"out": str(out), "output": text}


def cmd_inspect(args) -> dict:
    model, ckpt = _load(args)
    vocab = Vocab.default()
    out = _run_dir(args, f"inspect-{args.what}")
    if args.what == "slots":
        cfg = _config(args, _stored_config(ckpt))
        _, eval_rng = seed_streams(cfg.seed)
        probes = make_samples(cfg, eval_rng, args.probes)
        ranking = inspection.rank_slots(model, probes, args.top_m, block=args.block)
        ranking.write(out / "slots.jsonl")
        return {"out": str(out), "top": [r.slot for r in ranking.top],
                "bottom": [r.slot for r in ranking.bottom]}
    if not args.prompt:
        raise CliError("usage", f"inspect {args.what} needs --prompt")
    ids = _prompt_ids(args.prompt, vocab)
    state = model.new_state(1)
    if args.what == "heatmap":
        before = inspection.export_heatmap(model, state, ids, args.block, out / "heatmap_before.tsv")
        generate(model, state, ids, args.decode_steps)
        after = inspection.export_heatmap(model, state, ids, args.block, out / "heatmap_after.tsv")
        l1 = inspection.heatmap_l1(before, after)
        _write_json(out / "heatmap_summary.json", {"block": args.block, "l1": l1,
                                                   "decode_steps": args.decode_steps})
        return {"out": str(out), "l1": l1}
    before = state.clone()
    generate(model, state, ids, args.decode_steps)
    delta = inspection.memory_delta(before, state)
    _write_json(out / "delta.json", delta.to_record())
    return {"out": str(out), "top_changed": delta.top_changed, "total": delta.total}


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "eval": cmd_eval,
            "generate": cmd_generate, "inspect": cmd_inspect}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except ConfigError as exc:
        return _fail("config", str(exc), 3)
    except CheckpointError as exc:
        return _fail(type(exc).__name__, str(exc), 4)
    except UnknownTokenError as exc:
        return _fail("unknown_token", str(exc.args[0]), 5)
    except (DimensionError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), 5)
    print(json.dumps(result, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
