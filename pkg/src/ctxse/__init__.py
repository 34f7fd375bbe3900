"""Contextual speech-enhancement frontend.

A trainable mask-estimation frontend that fuses three optional context
signals — a device playback reference, a pre-utterance noise context of
variable length, and a speaker embedding — through FiLM-conditioned
conformer blocks and a cross-attention encoder, with signal dropout for
robustness to missing signals. Includes a deterministic synthetic-scene
generator and an evaluation/ablation harness.
"""

from .datagen import (
    SceneSpec,
    SynthSpeaker,
    TrainExample,
    generate_examples,
    make_echo,
    make_example,
    make_speaker,
    mix_at_snr,
    snr_gain,
    speaker_roster,
    synth_noise,
    synth_utterance,
)
from .estimator import ContextualEnhancer
from .evaluation import (
    EvalCondition,
    MetricRow,
    evaluate_condition,
    read_config,
    run_ablation,
    write_metrics_csv,
)
from .features import (
    Waveform,
    apply_mask,
    ideal_ratio_mask,
    lfbe_extract,
    mel_filterbank,
    mel_power,
    read_wav,
    stack_features,
    write_wav,
)
from .model import (
    ContextBundle,
    FrontendModel,
    ModelConfig,
    build_model,
    random_trim_noise_context,
    signal_dropout,
    strip_signal,
    zero_fill_bundle,
)
from .training import (
    TrainConfig,
    evaluate_loss,
    fit,
    grad_check,
    gradient_check_report,
    load_checkpoint,
    mask_loss,
    save_checkpoint,
    train_step,
)
from .validation import EmptyContextError, ShapeError

__all__ = [
    "ContextBundle",
    "ContextualEnhancer",
    "EmptyContextError",
    "EvalCondition",
    "FrontendModel",
    "MetricRow",
    "ModelConfig",
    "SceneSpec",
    "ShapeError",
    "SynthSpeaker",
    "TrainConfig",
    "TrainExample",
    "Waveform",
    "apply_mask",
    "build_model",
    "evaluate_condition",
    "evaluate_loss",
    "fit",
    "generate_examples",
    "grad_check",
    "gradient_check_report",
    "ideal_ratio_mask",
    "lfbe_extract",
    "load_checkpoint",
    "make_echo",
    "make_example",
    "make_speaker",
    "mask_loss",
    "mel_filterbank",
    "mel_power",
    "mix_at_snr",
    "random_trim_noise_context",
    "read_config",
    "read_wav",
    "run_ablation",
    "save_checkpoint",
    "signal_dropout",
    "snr_gain",
    "speaker_roster",
    "stack_features",
    "strip_signal",
    "synth_noise",
    "synth_utterance",
    "train_step",
    "write_metrics_csv",
    "write_wav",
    "zero_fill_bundle",
]
