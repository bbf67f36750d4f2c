"""Synthetic multi-speaker conversations for tests and smoke experiments.

Each "speaker" is a sum of three amplitude-modulated tones at fixed,
speaker-specific frequencies. Recordings alternate two speakers with
pauses and occasional overlaps, over a faint noise floor.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .signal_io import SAMPLE_RATE, Annotation, ManifestEntry, Turn, Waveform, save_audio, write_manifest, write_rttm

SPEAKER_TONES = {
    "spk_a": (250.0, 1250.0, 2900.0),
    "spk_b": (600.0, 1800.0, 3600.0),
    "spk_c": (900.0, 2300.0, 4400.0),
    "spk_d": (450.0, 3100.0, 5200.0),
}


def _voice(rng: np.random.Generator, tones, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    jitter = 1.0 + rng.uniform(-0.01, 0.01)
    sig = sum(amp * np.sin(2 * np.pi * f * jitter * t + rng.uniform(0, 2 * np.pi))
              for f, amp in zip(tones, (1.0, 0.7, 0.5)))
    rate = rng.uniform(3.0, 6.0)
    env = 0.65 + 0.35 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    ramp = min(n // 2, int(0.01 * sr))
    if ramp:
        env[:ramp] *= np.linspace(0, 1, ramp)
        env[-ramp:] *= np.linspace(1, 0, ramp)
    return 0.1 * sig * env


def conversation_turns(rng: np.random.Generator, speakers, duration: float,
                       overlap_prob: float = 0.2) -> list[Turn]:
    turns = []
    t = rng.uniform(0.3, 1.0)
    k = 0
    while True:
        length = rng.uniform(1.5, 5.0)
        end = min(t + length, duration - 0.2)
        if end - t < 0.5:
            break
        turns.append(Turn(speakers[k % len(speakers)], round(t, 2), round(end, 2)))
        k += 1
        if rng.random() < overlap_prob:
            t = end - rng.uniform(0.3, 1.0)
        else:
            t = end + rng.uniform(0.2, 1.0)
    return turns


def synth_recording(rng: np.random.Generator, recording_id: str, speakers=("spk_a", "spk_b"),
                    duration: float = 60.0, sr: int = SAMPLE_RATE,
                    overlap_prob: float = 0.2) -> tuple[Waveform, Annotation]:
    n = int(round(duration * sr))
    audio = 0.001 * rng.standard_normal(n)
    turns = conversation_turns(rng, list(speakers), duration, overlap_prob)
    for turn in turns:
        a, b = int(round(turn.start * sr)), int(round(turn.end * sr))
        audio[a:b] += _voice(rng, SPEAKER_TONES[turn.speaker], b - a, sr)
    return Waveform(audio.astype(np.float32), sr), Annotation(recording_id, turns)


def make_corpus(out_dir: str | Path, num_recordings: int, duration: float = 60.0, seed: int = 0,
                prefix: str = "rec", speaker_pool=tuple(SPEAKER_TONES)) -> Path:
    """Write WAV + RTTM files and a ``manifest.jsonl``; returns the manifest path.

    Each recording pairs two distinct speakers drawn from ``speaker_pool``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(num_recordings):
        rec = f"{prefix}{i:03d}"
        pair = tuple(rng.choice(list(speaker_pool), size=2, replace=False))
        wav, ann = synth_recording(rng, rec, pair, duration)
        save_audio(out_dir / f"{rec}.wav", wav)
        (out_dir / f"{rec}.rttm").write_text(write_rttm([ann]))
        entries.append(ManifestEntry(rec, f"{rec}.wav", f"{rec}.rttm", None, duration))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(entries, manifest)
    return manifest
