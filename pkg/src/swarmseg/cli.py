"""Command-line entry points: gen-world, train, simulate, eval, bench.

Exit codes: 0 success, 2 configuration error (including bad usage), 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .baselines import fit_baselines
from .config import Config, load_config
from .dataset import load_dataset, save_dataset
from .errors import ConfigError, DataError, GenerationError, SwarmSegError
from .evaluate import compare_methods, evaluate_checkpoint, warp_recovery
from .model import FUSION_MODES, init_model, load_model
from .swarm import agent_compute_profile, check_ledger, ledger_predict, run_round, target_fraction
from .training import fit
from .world import make_dataset

log = logging.getLogger("swarmseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

# eval/simulate draw their default split from a base seed offset from training
HELDOUT_OFFSET = 1


def _common(p: argparse.ArgumentParser, fusion_choices=FUSION_MODES) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="base seed for worlds and training")
    p.add_argument("--fusion", choices=fusion_choices, help="fusion rule")
    p.add_argument("--query-dim", type=int, help="query channels Q")
    p.add_argument("--key-dim", type=int, help="key channels K")
    p.add_argument("--agents", type=int, help="agents per sample N")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swarmseg", description="Spatial handshaking for swarm segmentation.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-world", help="generate a dataset directory")
    _common(p)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--no-obstruct", action="store_true", help="skip obstruction insertion")

    p = sub.add_parser("train", help="train a model and the baselines")
    _common(p)
    p.add_argument("--data", help="dataset directory (generated from --seed when omitted)")
    p.add_argument("--samples", type=int, help="generated training samples")
    p.add_argument("--epochs", type=int, help="end-to-end epochs")
    p.add_argument("--baseline-epochs", type=int, default=10)

    for name, text in (("simulate", "run one swarm round"), ("eval", "score a checkpoint")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", required=True, help="model.bin written by train")
        p.add_argument("--data", help="dataset directory (held-out split generated when omitted)")
        p.add_argument("--samples", type=int, default=8 if name == "eval" else 1)
        p.add_argument("--dump-masks", action="store_true", help="write fused masks as PGM images")
        if name == "simulate":
            p.add_argument("--index", type=int, default=0, help="sample index within the split")
            p.add_argument("--schedule", choices=("sequential", "parallel"), default="sequential")

    p = sub.add_parser("bench", help="bandwidth table and per-round timing")
    _common(p)
    p.add_argument("--checkpoint", help="time rounds with this model")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--image", type=int, default=256, help="square image side for the bandwidth table")
    p.add_argument("--feature", type=int, default=32, help="square feature-grid side for the bandwidth table")
    return parser


# ---------------------------------------------------------------------------
# config plumbing


def resolve_config(args, base: Config | None = None) -> Config:
    cfg = base if base is not None and not args.config else load_config(args.config)
    world, model, train = {}, {}, {}
    if args.seed is not None:
        world["seed"] = args.seed
        train["seed"] = args.seed
    if args.query_dim is not None:
        model["query_dim"] = args.query_dim
    if args.key_dim is not None:
        model["key_dim"] = args.key_dim
    if args.agents is not None:
        world["n_agents"] = args.agents
        model["stack_agents"] = args.agents
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    if getattr(args, "samples", None) is not None and args.command == "train":
        train["n_samples"] = args.samples
    if args.command == "train" and args.fusion is not None:
        train["fusion"] = args.fusion
    return cfg.with_overrides(world=world, model=model, train=train).validate()


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_checkpoint(args):
    path = Path(args.checkpoint)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    saved = path.with_name("config.json")
    base = load_config(saved) if saved.exists() else None
    cfg = resolve_config(args, base)
    return load_model(path, cfg.model, cfg.world), cfg


def _split(args, cfg: Config):
    if args.data:
        samples, world = load_dataset(args.data)
        if world.view_rows != cfg.world.view_rows or world.feat_rows != cfg.world.feat_rows:
            raise DataError("dataset geometry does not match the checkpoint")
        return samples[: args.samples] if args.samples else samples
    return make_dataset(cfg.world, args.samples, seed=cfg.world.seed + HELDOUT_OFFSET)


def _emit(data) -> None:
    from .report import _jsonable

    print(json.dumps(data, indent=2, sort_keys=True, default=_jsonable))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_world(args) -> int:
    from .report import plot_round

    cfg = resolve_config(args)
    out = _out_dir(args, "dataset")
    samples = make_dataset(cfg.world, args.samples, seed=cfg.world.seed, obstruct=not args.no_obstruct)
    save_dataset(samples, out, cfg.world, cfg.world.seed)
    if samples:
        plot_round(samples[0], dict(enumerate(samples[0].gt_masks)), out / "preview.png", cfg.world.n_classes)
    _emit({"dataset": str(out), "samples": len(samples), "seed": cfg.world.seed})
    return EXIT_OK


def cmd_train(args) -> int:
    from .report import plot_loss_history, write_json

    cfg = resolve_config(args)
    out = _out_dir(args, "run")
    if args.data:
        dataset, world = load_dataset(args.data)
        cfg = replace(cfg, world=world)
    else:
        dataset = make_dataset(cfg.world, cfg.train.n_samples, seed=cfg.world.seed)
    model = init_model(cfg.model, cfg.world, seed=cfg.train.seed)
    t0 = time.time()
    hist = fit(model, dataset, cfg.train)
    base_hist = fit_baselines(model, dataset, cfg.train, epochs=args.baseline_epochs)
    elapsed = time.time() - t0
    model.save(out / "model.bin")
    write_json(out / "config.json", cfg.to_dict())
    hist.to_csv(out / "history.csv")
    plot_loss_history(hist.rows, out / "loss.png")
    write_json(out / "baselines.json", base_hist)
    total = hist.series("total")
    _emit({"checkpoint": str(out / "model.bin"), "epochs": cfg.train.epochs, "first_total": total[0],
           "last_total": total[-1], "seconds": round(elapsed, 1)})
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .report import plot_round, write_json, write_pgm

    model, cfg = _load_checkpoint(args)
    samples = _split(args, cfg)
    if not 0 <= args.index < len(samples):
        raise DataError(f"sample index {args.index} outside 0..{len(samples) - 1}")
    sample = samples[args.index]
    fusion = args.fusion or "hard"
    result = run_round(sample, model, fusion, wire_bytes=cfg.wire_bytes, schedule=args.schedule)
    out = _out_dir(args, "round")
    result.save(out)
    profile = agent_compute_profile(result.log)
    write_json(out / "profile.json", profile)
    plot_round(sample, result.masks, out / "round.png", cfg.world.n_classes)
    if args.dump_masks:
        for t, m in result.masks.items():
            write_pgm(out / f"mask_{t}.pgm", m, cfg.world.n_classes)
    _emit({"ledger": result.ledger.to_dict()["agents"], "ledger_check": check_ledger(result, sample, model),
           "mac_fraction": profile["mac_fraction"], "out": str(out)})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .report import plot_method_comparison, write_json, write_metrics_csv, write_pgm

    model, cfg = _load_checkpoint(args)
    samples = _split(args, cfg)
    fusion = args.fusion or "hard"
    out = _out_dir(args, "eval")
    main = evaluate_checkpoint(samples, model, fusion, cfg.wire_bytes)
    results = compare_methods(samples, model, wire_bytes=cfg.wire_bytes)
    warp = warp_recovery(samples, model)
    payload = {"fusion": fusion, "metrics": main.to_dict(), "warp_recovery": warp,
               "methods": {k: v.to_dict() for k, v in results.items()}}
    write_json(out / "metrics.json", payload)
    write_metrics_csv(out / "metrics.csv", results)
    plot_method_comparison(results, out / "comparison.png")
    if args.dump_masks:
        for i, sample in enumerate(samples):
            for t, m in run_round(sample, model, fusion, wire_bytes=cfg.wire_bytes).masks.items():
                write_pgm(out / f"mask_{i:04d}_{t}.pgm", m, cfg.world.n_classes)
    _emit(payload)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .report import plot_bandwidth, write_json, write_rows_csv

    cfg = resolve_config(args)
    out = _out_dir(args, "bench")
    side, feat = args.image, args.feature
    rows = []
    for q in (4, 8, 16, 32, 64):
        frac = target_fraction(side, side, feat, feat, q)
        rows.append({"query_dim": q, "target_tx": ledger_predict(side, side, cfg.world.n_classes, feat, feat, q, 2, 0)["target_tx"],
                     "target_fraction": float(frac), "rounded": round(float(frac), 2)})
    write_rows_csv(out / "bandwidth.csv", rows)
    plot_bandwidth(rows, out / "bandwidth.png")
    payload = {"bandwidth": rows}
    if args.checkpoint:
        model, cfg = _load_checkpoint(args)
        sample = make_dataset(cfg.world, 1, seed=cfg.world.seed + HELDOUT_OFFSET)[0]
        timings = {}
        for schedule in ("sequential", "parallel"):
            t0 = time.perf_counter()
            for _ in range(args.repeats):
                result = run_round(sample, model, args.fusion or "hard", wire_bytes=cfg.wire_bytes, schedule=schedule)
            timings[schedule] = (time.perf_counter() - t0) / args.repeats
        payload["round_seconds"] = timings
        payload["profile"] = agent_compute_profile(result.log)
    write_json(out / "bench.json", payload)
    _emit(payload)
    return EXIT_OK


COMMANDS = {"gen-world": cmd_gen_world, "train": cmd_train, "simulate": cmd_simulate, "eval": cmd_eval, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SwarmSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
