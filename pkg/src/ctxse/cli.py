"""Command-line interface: train, eval, ablate, gradcheck, and gen verbs.

Every verb reads a flat `key = value` config file (--config); --seed
overrides the config seed and --out chooses the output directory. Exits
nonzero on any error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .datagen import SceneSpec, export_example, generate_examples, speaker_roster
from .evaluation import (
    EvalCondition,
    config_get,
    config_list,
    evaluate_condition,
    read_config,
    run_ablation,
    write_metrics_csv,
)
from .model import ModelConfig, build_model
from .training import (
    TrainConfig,
    evaluate_loss,
    fit,
    gradient_check_report,
    load_checkpoint,
    save_checkpoint,
)

GRADCHECK_TOLERANCE = 1e-4


def _load_config(args):
    config = read_config(args.config) if args.config else {}
    if args.seed is not None:
        config["seed"] = str(args.seed)
    return config


def _model_config_from(config) -> ModelConfig:
    return ModelConfig(
        num_channels=config_get(config, "num_channels", 128, int),
        d_model=config_get(config, "d_model", 64, int),
        num_blocks=config_get(config, "num_blocks", 2, int),
        num_cross_blocks=config_get(config, "num_cross_blocks", 2, int),
        num_heads=config_get(config, "num_heads", 4, int),
        conv_kernel=config_get(config, "conv_kernel", 15, int),
        attn_window=config_get(config, "attn_window", 65, int),
        pe_mode=config_get(config, "pe_mode", "none"),
        primary_pe=config_get(config, "primary_pe", "absolute"),
        ca_variant=config_get(config, "ca_variant", "proposed"),
        dropout_prob=config_get(config, "dropout_prob", 0.2, float),
    )


def _train_pool(config, roster, num_channels):
    task = config_get(config, "task", "noise")
    tasks = ("noise", "speech", "aec") if task == "mixed" else (task,)
    seed = config_get(config, "seed", 0, int)
    count = config_get(config, "train_examples", 64, int)
    snr = (config_get(config, "snr_low", -10.0, float),
           config_get(config, "snr_high", 10.0, float))
    pool = []
    for offset, name in enumerate(tasks):
        pool.extend(generate_examples(
            name, count, seed + 17 * (offset + 1), roster, snr,
            context_seconds=config_get(config, "context_seconds", 6.0, float),
            utterance_seconds=config_get(config, "utterance_seconds", 1.0, float),
            num_channels=num_channels,
        ))
    return pool


def cmd_train(args) -> int:
    config = _load_config(args)
    out_dir = Path(args.out or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    model_config = _model_config_from(config)
    seed = config_get(config, "seed", 0, int)
    roster = speaker_roster(range(config_get(config, "roster_size", 8, int)))
    pool = _train_pool(config, roster, model_config.num_channels)
    model = build_model(model_config, seed=seed)
    train_config = TrainConfig(
        optimizer=config_get(config, "optimizer", "adam"),
        learning_rate=config_get(config, "learning_rate", 1e-3, float),
        steps=config_get(config, "steps", 200, int),
        batch_size=config_get(config, "batch_size", 4, int),
        seed=seed,
        l1_weight=config_get(config, "l1_weight", 1.0, float),
        l2_weight=config_get(config, "l2_weight", 1.0, float),
    )
    history = fit(model, pool, train_config, log_path=out_dir / "train_log.csv")
    ckpt = out_dir / "checkpoint.ckpt"
    save_checkpoint(ckpt, model)
    final = evaluate_loss(model, pool[:16], train_config.l1_weight,
                          train_config.l2_weight)
    print(f"trained {train_config.steps} steps on {len(pool)} examples"
          f" ({model.parameter_count()} parameters)")
    print(f"first-step loss {history[0]:.6f}, final eval loss {final:.6f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    checkpoint = config_get(config, "checkpoint", None)
    if checkpoint is None:
        raise ValueError("eval requires a 'checkpoint = <path>' config entry")
    model = load_checkpoint(checkpoint)
    out_dir = Path(args.out or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    roster = speaker_roster(range(config_get(config, "roster_size", 8, int)))
    rows = []
    for task in config_list(config, "tasks", ("noise",)):
        for snr in config_list(config, "snrs_db", (-5.0,), float):
            for missing in config_list(config, "missing", ("none",)):
                cond = EvalCondition(
                    task=task, snr_db=snr, missing=missing,
                    context_seconds=config_get(config, "context_seconds", 6.0, float),
                )
                rows.append(evaluate_condition(
                    model, cond,
                    n_examples=config_get(config, "n_examples", 16, int),
                    seed=config_get(config, "seed", 0, int),
                    roster=roster,
                    utterance_seconds=config_get(config, "utterance_seconds", 1.0, float),
                ))
    path = write_metrics_csv(out_dir / "metrics.csv", rows)
    for row in rows:
        cond = row.condition
        print(f"{cond.task} snr={cond.snr_db:g} missing={cond.missing}: "
              f"mask_mse={row.mask_mse:.6f} feat_dist={row.feat_dist:.6f}")
    print(f"metrics: {path}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    paths = run_ablation(config, Path(args.out or "out"))
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradient_check_report(seed=args.seed or 0)
    worst = max(report.values())
    for name, err in sorted(report.items()):
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:32s} max rel err {err:.3e}  {status}")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"gradient check failed: worst {worst:.3e} >= {GRADCHECK_TOLERANCE}")
        return 1
    return 0


def cmd_gen(args) -> int:
    config = _load_config(args)
    out_dir = Path(args.out or "out")
    roster = speaker_roster(range(config_get(config, "roster_size", 8, int)))
    task = config_get(config, "task", "noise")
    count = config_get(config, "count", 4, int)
    rng = np.random.default_rng(config_get(config, "seed", 0, int))
    written = []
    for _ in range(count):
        target = roster[int(rng.integers(len(roster)))]
        interferer = None
        if task != "noise":
            others = [s for s in roster if s.speaker_id != target.speaker_id]
            interferer = others[int(rng.integers(len(others)))]
        scene = SceneSpec(
            task=task,
            snr_db=config_get(config, "snr_db", -5.0, float),
            context_seconds=config_get(config, "context_seconds", 3.0, float),
            utterance_seconds=config_get(config, "utterance_seconds", 1.0, float),
            seed=int(rng.integers(2**63)),
        )
        written.extend(export_example(scene, target, interferer, out_dir))
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxse",
        description="Contextual speech-enhancement frontend: train, evaluate, "
                    "and ablate mask-estimation models on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = (
        ("train", cmd_train, "train a model and write a checkpoint"),
        ("eval", cmd_eval, "evaluate a checkpoint across conditions"),
        ("ablate", cmd_ablate, "run the ablation grids and write CSV tables"),
        ("gradcheck", cmd_gradcheck, "finite-difference gradient checks"),
        ("gen", cmd_gen, "export synthetic scenes as WAV files"),
    )
    for name, handler, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Exception as err:  # CLI boundary: report and exit nonzero
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
