"""Evaluation harness: per-condition metrics across missing-signal settings,
and ablation grids that train model variants and emit CSV tables.

Word error rate is not computable here, so the tables report mask MSE and
the enhanced-to-clean feature distance as surrogates; column names carry the
metric so no header can be mistaken for WER.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import generate_examples, speaker_roster
from .features import apply_mask
from .model import ModelConfig, build_model, strip_signal
from .training import TrainConfig, evaluate_loss, fit, load_checkpoint, save_checkpoint

MISSING_CHOICES = ("none", "dvector", "noise_context", "playback")


@dataclass(frozen=True)
class EvalCondition:
    """One evaluation setting: task, SNR, which signal is withheld."""

    task: str
    snr_db: float
    missing: str = "none"
    context_seconds: float = 6.0

    def __post_init__(self):
        if self.missing not in MISSING_CHOICES:
            raise ValueError(f"missing must be one of {MISSING_CHOICES}")


@dataclass(frozen=True)
class MetricRow:
    condition: EvalCondition
    mask_mse: float
    mask_l1: float
    feat_dist: float
    oracle_feat_dist: float
    n_examples: int


def evaluate_condition(model, cond: EvalCondition, n_examples=16, seed=0,
                       roster=None, utterance_seconds=1.0) -> MetricRow:
    """Metrics over deterministic scenes with the condition's signal withheld.

    Scene audio depends only on (task, snr, context, seed), never on
    `missing`, so paired conditions differ solely in the zeroed signal.
    The model is read-only; an oracle pass with the ideal mask is reported
    alongside for reference.
    """
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")
    if roster is None:
        roster = speaker_roster(range(8))
    examples = generate_examples(
        cond.task, n_examples, seed, roster, cond.snr_db,
        context_seconds=cond.context_seconds, utterance_seconds=utterance_seconds,
        num_channels=model.config.num_channels,
    )
    mask_mse = mask_l1 = feat_dist = oracle_dist = 0.0
    for example in examples:
        bundle = strip_signal(example.bundle, cond.missing)
        mask = model.estimate_mask(example.noisy, bundle)
        diff = mask - example.ideal_mask
        mask_mse += float(np.mean(diff**2))
        mask_l1 += float(np.mean(np.abs(diff)))
        enhanced = apply_mask(example.noisy, mask)
        feat_dist += float(np.mean((enhanced - example.clean) ** 2))
        oracle = apply_mask(example.noisy, example.ideal_mask)
        oracle_dist += float(np.mean((oracle - example.clean) ** 2))
    n = len(examples)
    return MetricRow(condition=cond, mask_mse=mask_mse / n, mask_l1=mask_l1 / n,
                     feat_dist=feat_dist / n, oracle_feat_dist=oracle_dist / n,
                     n_examples=n)


def write_metrics_csv(path, rows):
    """One MetricRow per line, floats fixed to 6 decimals."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "snr_db", "missing", "context_seconds",
                         "n_examples", "mask_mse", "mask_l1", "feat_dist",
                         "oracle_feat_dist"])
        for row in rows:
            cond = row.condition
            writer.writerow([
                cond.task, f"{cond.snr_db:.6f}", cond.missing,
                f"{cond.context_seconds:.6f}", row.n_examples,
                f"{row.mask_mse:.6f}", f"{row.mask_l1:.6f}",
                f"{row.feat_dist:.6f}", f"{row.oracle_feat_dist:.6f}",
            ])
    return path


def read_config(path) -> dict:
    """Parse a flat `key = value` config file; '#' starts a comment."""
    config = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        config[key.strip()] = value.strip()
    return config


def config_get(config, key, default, cast=str):
    if key not in config:
        return default
    value = config[key]
    if cast is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r} must be a boolean, got {value!r}")
    return cast(value)


def config_list(config, key, default, cast=str):
    if key not in config:
        return list(default)
    value = config[key].strip()
    if not value:
        return []
    return [cast(item.strip()) for item in value.split(",")]


@dataclass(frozen=True)
class _GridParams:
    seed: int
    eval_seed: int
    d_model: int
    num_blocks: int
    num_cross_blocks: int
    num_heads: int
    num_channels: int
    conv_kernel: int
    attn_window: int
    steps: int
    batch_size: int
    learning_rate: float
    train_examples: int
    eval_examples: int
    roster_size: int
    utterance_seconds: float
    context_seconds: float
    eval_context_seconds: float
    train_snr_low: float
    train_snr_high: float
    snr_speech: float
    snr_noise: float
    snr_aec: float


def _grid_params(config) -> _GridParams:
    seed = config_get(config, "seed", 0, int)
    return _GridParams(
        seed=seed,
        eval_seed=config_get(config, "eval_seed", seed + 1000, int),
        d_model=config_get(config, "d_model", 32, int),
        num_blocks=config_get(config, "num_blocks", 1, int),
        num_cross_blocks=config_get(config, "num_cross_blocks", 1, int),
        num_heads=config_get(config, "num_heads", 4, int),
        num_channels=config_get(config, "num_channels", 128, int),
        conv_kernel=config_get(config, "conv_kernel", 15, int),
        attn_window=config_get(config, "attn_window", 65, int),
        steps=config_get(config, "steps", 200, int),
        batch_size=config_get(config, "batch_size", 4, int),
        learning_rate=config_get(config, "learning_rate", 1e-3, float),
        train_examples=config_get(config, "train_examples", 64, int),
        eval_examples=config_get(config, "eval_examples", 16, int),
        roster_size=config_get(config, "roster_size", 8, int),
        utterance_seconds=config_get(config, "utterance_seconds", 1.0, float),
        context_seconds=config_get(config, "context_seconds", 3.0, float),
        eval_context_seconds=config_get(config, "eval_context_seconds", 6.0, float),
        train_snr_low=config_get(config, "train_snr_low", -10.0, float),
        train_snr_high=config_get(config, "train_snr_high", 10.0, float),
        snr_speech=config_get(config, "snr_speech", -5.0, float),
        snr_noise=config_get(config, "snr_noise", -5.0, float),
        snr_aec=config_get(config, "snr_aec", -10.0, float),
    )


def _model_config(params: _GridParams, **overrides) -> ModelConfig:
    kwargs = dict(
        num_channels=params.num_channels, d_model=params.d_model,
        num_blocks=params.num_blocks, num_cross_blocks=params.num_cross_blocks,
        num_heads=params.num_heads, conv_kernel=params.conv_kernel,
        attn_window=params.attn_window, pe_mode="none", dropout_prob=0.0,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


class _ModelPool:
    """Trains or loads the grid's model variants, one checkpoint per name."""

    def __init__(self, params: _GridParams, pools, out_dir):
        self.params = params
        self.pools = pools
        self.ckpt_dir = Path(out_dir) / "checkpoints"
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        self.train_stats = {}

    def get(self, name, model_config, tasks, always_drop=()):
        path = self.ckpt_dir / f"{name}.ckpt"
        if self.params.steps == 0:
            if not path.exists():
                raise ValueError(
                    f"no checkpoint for {name!r} at {path} and steps = 0; "
                    "raise the train budget or provide checkpoints"
                )
            return load_checkpoint(path)
        examples = [ex for task in tasks for ex in self.pools[task]]
        model = build_model(model_config, seed=self.params.seed)
        train_cfg = TrainConfig(steps=self.params.steps,
                                batch_size=self.params.batch_size,
                                learning_rate=self.params.learning_rate,
                                seed=self.params.seed, always_drop=always_drop)
        initial = evaluate_loss(model, examples[: self.params.eval_examples])
        fit(model, examples, train_cfg)
        final = evaluate_loss(model, examples[: self.params.eval_examples])
        self.train_stats[name] = (initial, final)
        save_checkpoint(path, model)
        return model


def run_ablation(grid, out_dir) -> dict:
    """Train the configured variants and write the three ablation tables.

    grid is a flat key=value mapping or a path to such a file; returns the
    written CSV paths keyed by table name. Empty variant lists produce
    header-only CSVs.
    """
    if not isinstance(grid, dict):
        grid = read_config(grid)
    params = _grid_params(grid)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    roster = speaker_roster(range(params.roster_size),)

    variants = config_list(grid, "table1_variants", ("proposed", "prior"))
    pe_modes = config_list(grid, "table2_pe_modes", ("reversed", "none"))
    table2_tasks = config_list(grid, "table2_tasks", ("speech", "noise"))
    table2_snrs = config_list(grid, "table2_snrs_db", (-5.0, 5.0), float)
    dropout_probs = config_list(grid, "table3_dropout_probs", (0.0, 0.2, 0.5), float)
    dedicated = config_get(grid, "table3_dedicated", True, bool)

    tasks_needed = set()
    if variants:
        tasks_needed.add("noise")
    if pe_modes:
        tasks_needed.update(table2_tasks)
    if dropout_probs or dedicated:
        tasks_needed.update(("noise", "speech", "aec"))
    pools = {}
    for offset, task in enumerate(sorted(tasks_needed)):
        pools[task] = generate_examples(
            task, params.train_examples, params.seed + 17 * (offset + 1), roster,
            (params.train_snr_low, params.train_snr_high),
            context_seconds=params.context_seconds,
            utterance_seconds=params.utterance_seconds,
            num_channels=params.num_channels,
        )
    models = _ModelPool(params, pools, out_dir)

    def metric(model, task, snr, missing="none"):
        row = evaluate_condition(
            model, EvalCondition(task=task, snr_db=snr, missing=missing,
                                 context_seconds=params.eval_context_seconds),
            n_examples=params.eval_examples, seed=params.eval_seed, roster=roster,
            utterance_seconds=params.utterance_seconds,
        )
        return row

    paths = {}

    # Variant ablation: both cross-attention wirings on the noise task.
    table1 = out_dir / "table1_variant_ablation.csv"
    with open(table1, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "initial_loss", "final_loss", "loss_reduction",
                         "noise_mask_mse", "noise_feat_dist"])
        for variant in variants:
            name = f"table1_{variant}"
            model = models.get(name, _model_config(params, ca_variant=variant),
                               tasks=("noise",))
            row = metric(model, "noise", params.snr_noise)
            initial, final = models.train_stats.get(name, (float("nan"), float("nan")))
            reduction = (initial - final) / initial if initial else float("nan")
            writer.writerow([variant, f"{initial:.6f}", f"{final:.6f}",
                             f"{reduction:.6f}", f"{row.mask_mse:.6f}",
                             f"{row.feat_dist:.6f}"])
    paths["table1"] = table1

    # Positional-mode comparison on speech and noise at two SNRs.
    table2 = out_dir / "table2_positional_modes.csv"
    with open(table2, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["pe_mode"] + [
            f"{task}_{snr:g}db_mask_mse" for task in table2_tasks for snr in table2_snrs
        ]
        writer.writerow(header)
        for mode in pe_modes:
            model = models.get(f"table2_{mode}", _model_config(params, pe_mode=mode),
                               tasks=tuple(table2_tasks))
            cells = [f"{metric(model, task, snr).mask_mse:.6f}"
                     for task in table2_tasks for snr in table2_snrs]
            writer.writerow([mode] + cells)
    paths["table2"] = table2

    # Missing-signal robustness across signal-dropout rates plus dedicated models.
    table3 = out_dir / "table3_missing_signals.csv"
    all_tasks = ("noise", "speech", "aec")
    task_snr = {"speech": params.snr_speech, "noise": params.snr_noise,
                "aec": params.snr_aec}
    with open(table3, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model",
                         "all_speech_mask_mse", "all_noise_mask_mse", "all_aec_mask_mse",
                         "no_dvector_speech_mask_mse", "no_noise_context_noise_mask_mse",
                         "no_playback_aec_mask_mse"])
        for prob in dropout_probs:
            model = models.get(f"table3_dropout_{prob:g}",
                               _model_config(params, dropout_prob=prob),
                               tasks=all_tasks)
            cells = [f"{metric(model, task, task_snr[task]).mask_mse:.6f}"
                     for task in ("speech", "noise", "aec")]
            cells += [
                f"{metric(model, 'speech', task_snr['speech'], 'dvector').mask_mse:.6f}",
                f"{metric(model, 'noise', task_snr['noise'], 'noise_context').mask_mse:.6f}",
                f"{metric(model, 'aec', task_snr['aec'], 'playback').mask_mse:.6f}",
            ]
            writer.writerow([f"dropout_{prob:g}"] + cells)
        if dedicated:
            cells = ["", "", ""]
            for signal, task in (("dvector", "speech"), ("noise_context", "noise"),
                                 ("playback", "aec")):
                model = models.get(f"table3_dedicated_no_{signal}",
                                   _model_config(params), tasks=all_tasks,
                                   always_drop=(signal,))
                cells.append(
                    f"{metric(model, task, task_snr[task], signal).mask_mse:.6f}"
                )
            writer.writerow(["dedicated"] + cells)
    paths["table3"] = table3
    return paths
