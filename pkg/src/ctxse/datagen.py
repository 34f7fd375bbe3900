"""Deterministic synthetic scene generator for the three interference tasks.

Speech is approximated by formant-filtered noise with syllabic amplitude
modulation: each synthetic speaker owns a fixed set of resonances, so
distinct speakers have distinguishable spectra and a deterministic
embedding can stand in for an enrollment d-vector. Background noise gets a
per-scene spectral color (tilt plus a narrow emphasis band) so the noise
context genuinely informs the enhancer about the in-utterance interference,
which is drawn from the same generator stream. Device echo is the reference
signal through a few delay-and-decay taps and a soft clip.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .features import (
    DEFAULT_HOP_MS,
    DEFAULT_NUM_CHANNELS,
    DEFAULT_SAMPLE_RATE,
    DEFAULT_WIN_MS,
    Waveform,
    ideal_ratio_mask,
    lfbe_extract,
    mel_power,
    write_wav,
)
from .model import ContextBundle, DVECTOR_DIM
from .validation import ShapeError

SPEECH_RMS = 0.1
TASKS = ("noise", "speech", "aec")

_SPEAKER_SALT = 0x5EED


@dataclass(frozen=True)
class SynthSpeaker:
    """A synthetic voice: resonance profile plus its derived embedding."""

    speaker_id: int
    formants_hz: tuple
    bandwidths_hz: tuple
    embedding: np.ndarray


def make_speaker(speaker_id, embedding_dim=DVECTOR_DIM) -> SynthSpeaker:
    """Derive a speaker deterministically from its id.

    The formant profile comes from an id-seeded generator; the embedding is
    a unit-norm Gaussian vector seeded by a hash of the profile, so equal
    profiles always map to equal embeddings.
    """
    if speaker_id < 0:
        raise ValueError("speaker_id must be nonnegative")
    rng = np.random.default_rng(np.random.SeedSequence([_SPEAKER_SALT, speaker_id]))
    formants = (
        rng.uniform(250.0, 850.0),
        rng.uniform(900.0, 2300.0),
        rng.uniform(2400.0, 3500.0),
        rng.uniform(3600.0, 5200.0),
    )
    bandwidths = tuple(rng.uniform(60.0, 180.0, size=4))
    profile = np.array(formants + bandwidths)
    digest = hashlib.blake2b(profile.tobytes(), digest_size=8).digest()
    embed_rng = np.random.default_rng(int.from_bytes(digest, "little"))
    embedding = embed_rng.standard_normal(embedding_dim)
    embedding /= np.linalg.norm(embedding)
    return SynthSpeaker(speaker_id=int(speaker_id), formants_hz=formants,
                        bandwidths_hz=bandwidths, embedding=embedding)


def speaker_roster(ids, embedding_dim=DVECTOR_DIM, max_cosine=0.8) -> list:
    """Build speakers for the given ids, checking embeddings stay distinct."""
    speakers = [make_speaker(i, embedding_dim) for i in ids]
    for i, a in enumerate(speakers):
        for b in speakers[i + 1:]:
            cos = float(np.dot(a.embedding, b.embedding))
            if cos >= max_cosine:
                raise ValueError(
                    f"speakers {a.speaker_id} and {b.speaker_id} have embedding "
                    f"cosine {cos:.3f} >= {max_cosine}"
                )
    return speakers


def _resonator(x, freq_hz, bandwidth_hz, sample_rate):
    """Two-pole resonance at freq_hz with the given bandwidth."""
    r = np.exp(-np.pi * bandwidth_hz / sample_rate)
    theta = 2.0 * np.pi * freq_hz / sample_rate
    return lfilter([1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r], x)


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def _voiced_stream(speaker, n_samples, rng, sample_rate):
    """Formant-filtered noise with syllabic amplitude modulation, RMS SPEECH_RMS."""
    x = rng.standard_normal(n_samples)
    for freq, bandwidth in zip(speaker.formants_hz, speaker.bandwidths_hz):
        x = _resonator(x, freq, bandwidth, sample_rate)
    rate = rng.uniform(2.0, 5.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n_samples) / sample_rate
    envelope = 0.15 + 0.85 * 0.5 * (1.0 - np.cos(2.0 * np.pi * rate * t + phase))
    x = x * envelope
    return x * (SPEECH_RMS / _rms(x))


def _noise_stream(n_samples, rng, sample_rate):
    """Scene-colored noise: tilted broadband floor plus a narrow emphasis band."""
    tilt = rng.uniform(0.85, 0.99)
    broadband = lfilter([1.0 - tilt], [1.0, -tilt], rng.standard_normal(n_samples))
    center = rng.uniform(300.0, 6000.0)
    bandwidth = rng.uniform(80.0, 300.0)
    narrow = _resonator(rng.standard_normal(n_samples), center, bandwidth, sample_rate)
    weight = rng.uniform(0.5, 0.9)
    x = (1.0 - weight) * broadband / _rms(broadband) + weight * narrow / _rms(narrow)
    rate = rng.uniform(0.5, 3.0)
    depth = rng.uniform(0.0, 0.6)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n_samples) / sample_rate
    envelope = 1.0 - depth * 0.5 * (1.0 - np.cos(2.0 * np.pi * rate * t + phase))
    x = x * envelope
    return x * (SPEECH_RMS / _rms(x))


def synth_utterance(speaker, duration, rng, sample_rate=DEFAULT_SAMPLE_RATE) -> Waveform:
    """Deterministic synthetic utterance of the given speaker, RMS 0.1."""
    if not 0.5 <= duration <= 10.0:
        raise ValueError(f"duration must be in [0.5, 10] s, got {duration}")
    n = round(duration * sample_rate)
    return Waveform(_voiced_stream(speaker, n, rng, sample_rate), sample_rate)


def synth_noise(duration, rng, sample_rate=DEFAULT_SAMPLE_RATE) -> Waveform:
    """Deterministic scene-colored background noise, RMS 0.1."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = round(duration * sample_rate)
    return Waveform(_noise_stream(n, rng, sample_rate), sample_rate)


def snr_gain(target: Waveform, interferer: Waveform, snr_db) -> float:
    """Scale for the interferer so the mixture hits snr_db exactly."""
    target_rms = target.rms()
    interferer_rms = interferer.rms()
    if interferer_rms == 0.0:
        raise ValueError("interferer has zero energy")
    if target_rms == 0.0:
        raise ValueError("target has zero energy")
    return target_rms / (interferer_rms * 10.0 ** (snr_db / 20.0))


def mix_at_snr(target: Waveform, interferer: Waveform, snr_db) -> Waveform:
    """target + scaled interferer at the requested signal-to-noise ratio."""
    if len(target) != len(interferer):
        raise ShapeError(f"length mismatch: target {len(target)}, "
                         f"interferer {len(interferer)}")
    gain = snr_gain(target, interferer, snr_db)
    return Waveform(target.samples + gain * interferer.samples, target.sample_rate)


def make_echo(reference: Waveform, delay_ms, taps, softclip=0.0) -> Waveform:
    """Delay-and-decay echo of the reference with optional soft clipping.

    Tap i is the reference delayed by delay_ms * (i + 1) and scaled by
    taps[i]; softclip > 0 applies tanh(softclip * x) / softclip, bounding the
    peak at 1 / softclip. Output length equals the reference length.
    """
    if delay_ms < 0:
        raise ValueError("delay must be nonnegative")
    if any(abs(g) > 1.0 for g in taps):
        raise ValueError("tap gains must have magnitude <= 1")
    n = len(reference)
    out = np.zeros(n)
    for i, gain in enumerate(taps):
        delay = round(delay_ms * (i + 1) * reference.sample_rate / 1000.0)
        if delay >= n:
            continue
        if delay == 0:
            out += gain * reference.samples
        else:
            out[delay:] += gain * reference.samples[:n - delay]
    if softclip > 0.0:
        out = np.tanh(softclip * out) / softclip
    return Waveform(out, reference.sample_rate)


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one deterministic scene."""

    task: str
    snr_db: float
    context_seconds: float = 6.0
    utterance_seconds: float = 1.0
    echo_delay_ms: float = 20.0
    echo_taps: tuple = (0.8, 0.4, 0.2)
    echo_softclip: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if not np.isfinite(self.snr_db) or not -40.0 <= self.snr_db <= 60.0:
            raise ValueError(f"snr_db out of range: {self.snr_db}")
        if not 0.0 <= self.context_seconds <= 6.0:
            raise ValueError("context_seconds must be in [0, 6]")
        if not 0.5 <= self.utterance_seconds <= 4.0:
            raise ValueError("utterance_seconds must be in [0.5, 4]")
        if self.echo_delay_ms < 0:
            raise ValueError("echo_delay_ms must be nonnegative")


@dataclass
class TrainExample:
    """Features and targets for one scene.

    noisy/clean: (frames, channels) LFBE; ideal_mask: the ratio-mask target;
    bundle: the context signals present for this task.
    """

    noisy: np.ndarray
    clean: np.ndarray
    ideal_mask: np.ndarray
    bundle: ContextBundle
    task: str
    snr_db: float
    seed: int
    target_id: int
    interferer_id: int | None = None


def _render(scene: SceneSpec, target: SynthSpeaker, interferer, num_channels,
            sample_rate):
    rng = np.random.default_rng(scene.seed)
    if scene.task in ("speech", "aec"):
        if interferer is None:
            raise ValueError(f"task {scene.task!r} needs an interfering speaker")
        if scene.task == "speech" and interferer.speaker_id == target.speaker_id:
            raise ValueError("competing speech requires a distinct interfering speaker")
    win = round(sample_rate * DEFAULT_WIN_MS / 1000.0)
    hop = round(sample_rate * DEFAULT_HOP_MS / 1000.0)
    utt_n = round(scene.utterance_seconds * sample_rate)
    ctx_n = round(scene.context_seconds * sample_rate)
    # The context span carries one extra analysis window minus hop so that
    # context_seconds maps to exactly context_seconds / hop feature frames.
    lead = win - hop
    total_n = ctx_n + lead + utt_n

    utterance = _voiced_stream(target, utt_n, rng, sample_rate)
    reference = None
    if scene.task == "noise":
        stream = _noise_stream(total_n, rng, sample_rate)
    elif scene.task == "speech":
        stream = _voiced_stream(interferer, total_n, rng, sample_rate)
    else:
        reference = _voiced_stream(interferer, total_n, rng, sample_rate)
        stream = make_echo(Waveform(reference, sample_rate), scene.echo_delay_ms,
                           scene.echo_taps, scene.echo_softclip).samples

    interference = stream[ctx_n + lead:]
    gain = snr_gain(Waveform(utterance, sample_rate),
                    Waveform(interference, sample_rate), scene.snr_db)
    noisy = utterance + gain * interference

    kwargs = dict(n_channels=num_channels)
    clean_power = mel_power(Waveform(utterance, sample_rate), **kwargs)
    noise_power = mel_power(Waveform(gain * interference, sample_rate), **kwargs)
    ideal = ideal_ratio_mask(clean_power, noise_power)
    noisy_features = lfbe_extract(Waveform(noisy, sample_rate), **kwargs)
    clean_features = lfbe_extract(Waveform(utterance, sample_rate), **kwargs)

    context_wave = gain * stream[:ctx_n + lead]
    context_features = None
    if ctx_n >= hop:
        context_features = lfbe_extract(Waveform(context_wave, sample_rate), **kwargs)
    playback_features = None
    reference_segment = None
    if scene.task == "aec":
        reference_segment = reference[ctx_n + lead:]
        playback_features = lfbe_extract(Waveform(reference_segment, sample_rate),
                                         **kwargs)
    bundle = ContextBundle(playback=playback_features,
                           noise_context=context_features,
                           dvector=target.embedding.copy())
    example = TrainExample(
        noisy=noisy_features, clean=clean_features, ideal_mask=ideal, bundle=bundle,
        task=scene.task, snr_db=scene.snr_db, seed=scene.seed,
        target_id=target.speaker_id,
        interferer_id=None if interferer is None else interferer.speaker_id,
    )
    audio = {
        "clean": Waveform(utterance, sample_rate),
        "noisy": Waveform(noisy, sample_rate),
        "interference": Waveform(gain * interference, sample_rate),
        "context": Waveform(context_wave, sample_rate),
    }
    if reference_segment is not None:
        audio["reference"] = Waveform(reference_segment, sample_rate)
    return example, audio


def make_example(scene: SceneSpec, target: SynthSpeaker, interferer=None,
                 num_channels=DEFAULT_NUM_CHANNELS,
                 sample_rate=DEFAULT_SAMPLE_RATE) -> TrainExample:
    """Render a scene into features, targets, and its context bundle.

    The noise context is the interference-only span immediately preceding
    the utterance, scaled identically to the in-utterance interference; the
    playback reference (AEC only) is the unprocessed reference aligned with
    the utterance; the ideal mask comes from the clean and interference mel
    powers. Bitwise deterministic for a fixed SceneSpec.
    """
    return _render(scene, target, interferer, num_channels, sample_rate)[0]


def generate_examples(task, count, seed, roster, snr_db, context_seconds=6.0,
                      utterance_seconds=1.0, num_channels=DEFAULT_NUM_CHANNELS,
                      sample_rate=DEFAULT_SAMPLE_RATE) -> list:
    """A deterministic batch of scenes with speakers drawn from the roster.

    snr_db may be a single level or a (low, high) range sampled per scene.
    """
    if count < 0:
        raise ValueError("count must be nonnegative")
    if task != "noise" and len(roster) < 2:
        raise ValueError(f"task {task!r} needs at least two speakers")
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(count):
        scene_seed = int(rng.integers(2**63))
        target = roster[int(rng.integers(len(roster)))]
        interferer = None
        if task != "noise":
            others = [s for s in roster if s.speaker_id != target.speaker_id]
            interferer = others[int(rng.integers(len(others)))]
        if np.isscalar(snr_db):
            snr = float(snr_db)
        else:
            low, high = snr_db
            snr = float(rng.uniform(low, high))
        scene = SceneSpec(task=task, snr_db=snr, context_seconds=context_seconds,
                          utterance_seconds=utterance_seconds, seed=scene_seed)
        examples.append(make_example(scene, target, interferer, num_channels,
                                     sample_rate))
    return examples


def export_example(scene: SceneSpec, target: SynthSpeaker, interferer, out_dir,
                   prefix=None, num_channels=DEFAULT_NUM_CHANNELS,
                   sample_rate=DEFAULT_SAMPLE_RATE) -> list:
    """Write the scene's audio as WAV files plus a sidecar metadata file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = prefix or f"{scene.task}_{scene.seed}"
    _, audio = _render(scene, target, interferer, num_channels, sample_rate)
    paths = []
    for name, wave in audio.items():
        path = out_dir / f"{prefix}_{name}.wav"
        write_wav(path, wave)
        paths.append(path)
    meta = out_dir / f"{prefix}_meta.txt"
    lines = [
        f"task = {scene.task}",
        f"snr_db = {scene.snr_db}",
        f"seed = {scene.seed}",
        f"context_seconds = {scene.context_seconds}",
        f"utterance_seconds = {scene.utterance_seconds}",
        f"target_speaker = {target.speaker_id}",
        f"interferer_speaker = {'none' if interferer is None else interferer.speaker_id}",
    ]
    meta.write_text("\n".join(lines) + "\n")
    paths.append(meta)
    return paths
