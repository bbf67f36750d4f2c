"""Audio loading, log-Mel filterbanks, and RTTM / UEM / manifest files."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from math import gcd
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FBANK_WIN = 400  # 25 ms at 16 kHz
FBANK_HOP = 160  # 10 ms at 16 kHz
FBANK_BINS = 80
FBANK_NFFT = 512
LOG_FLOOR = 1e-10


class RttmParseError(ValueError):
    pass


class Turn(NamedTuple):
    speaker: str
    start: float
    end: float


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float32)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def crop(self, start: float, end: float) -> np.ndarray:
        a = int(round(start * self.sample_rate))
        b = int(round(end * self.sample_rate))
        return self.samples[max(a, 0):max(b, 0)]


@dataclass
class Annotation:
    recording_id: str
    turns: list[Turn] = field(default_factory=list)

    def __post_init__(self):
        turns = []
        for t in self.turns:
            t = Turn(str(t[0]), float(t[1]), float(t[2]))
            if not t.end > t.start:
                raise ValueError(f"turn must have end > start: {t}")
            turns.append(t)
        self.turns = turns

    @property
    def speakers(self) -> list[str]:
        return sorted({t.speaker for t in self.turns})

    def normalized(self) -> "Annotation":
        """Merge overlapping or touching turns of the same speaker."""
        merged: list[Turn] = []
        for spk in self.speakers:
            spans = sorted((t.start, t.end) for t in self.turns if t.speaker == spk)
            cur_s, cur_e = spans[0]
            for s, e in spans[1:]:
                if s <= cur_e:
                    cur_e = max(cur_e, e)
                else:
                    merged.append(Turn(spk, cur_s, cur_e))
                    cur_s, cur_e = s, e
            merged.append(Turn(spk, cur_s, cur_e))
        merged.sort(key=lambda t: (t.start, t.end, t.speaker))
        return Annotation(self.recording_id, merged)

    def speech_duration(self) -> float:
        return sum(t.end - t.start for t in self.normalized().turns)


def read_rttm(path: str | Path) -> dict[str, Annotation]:
    """Parse the SPEAKER lines of an RTTM file, one turn per line."""
    out: dict[str, Annotation] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields or fields[0].startswith(";;"):
                continue
            if fields[0] != "SPEAKER":
                continue
            if len(fields) < 8:
                raise RttmParseError(f"{path}:{lineno}: expected at least 8 fields, got {len(fields)}")
            rec, onset, dur, spk = fields[1], fields[3], fields[4], fields[7]
            try:
                onset, dur = float(onset), float(dur)
            except ValueError:
                raise RttmParseError(f"{path}:{lineno}: non-numeric onset/duration") from None
            if dur < 0:
                raise RttmParseError(f"{path}:{lineno}: negative duration {dur}")
            ann = out.setdefault(rec, Annotation(rec))
            if dur == 0:
                logger.debug("skipping zero-length turn at %s:%d", path, lineno)
                continue
            ann.turns.append(Turn(spk, onset, onset + dur))
    return out


def write_rttm(annotations: Iterable[Annotation] | Mapping[str, Annotation]) -> str:
    if isinstance(annotations, Mapping):
        annotations = annotations.values()
    lines = []
    for ann in annotations:
        for t in sorted(ann.turns, key=lambda t: (t.start, t.end, t.speaker)):
            start = round(t.start, 3)
            dur = round(t.end - t.start, 3)
            lines.append(
                f"SPEAKER {ann.recording_id} 1 {start:.3f} {dur:.3f} <NA> <NA> {t.speaker} <NA> <NA>\n"
            )
    return "".join(lines)


def read_uem(path: str | Path) -> dict[str, list[tuple[float, float]]]:
    """UEM lines are ``<recording> <channel> <start> <end>``."""
    out: dict[str, list[tuple[float, float]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields or fields[0].startswith(";;"):
                continue
            if len(fields) < 4:
                raise RttmParseError(f"{path}:{lineno}: expected 4 fields in UEM line")
            start, end = float(fields[2]), float(fields[3])
            if end < start:
                raise RttmParseError(f"{path}:{lineno}: UEM end before start")
            out.setdefault(fields[0], []).append((start, end))
    return out


def write_uem(regions: Mapping[str, Iterable[tuple[float, float]]]) -> str:
    return "".join(
        f"{rec} 1 {s:.3f} {e:.3f}\n" for rec, spans in regions.items() for s, e in spans
    )


@dataclass
class ManifestEntry:
    recording_id: str
    audio_path: str
    rttm_path: str | None
    uem_path: str | None = None
    duration: float = 0.0


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            for key in ("audio_path", "rttm_path", "uem_path"):
                if obj.get(key) and not Path(obj[key]).is_absolute():
                    obj[key] = str(path.parent / obj[key])
            entry = ManifestEntry(
                recording_id=obj["recording_id"],
                audio_path=obj["audio_path"],
                rttm_path=obj.get("rttm_path"),
                uem_path=obj.get("uem_path"),
                duration=float(obj["duration"]),
            )
            if entry.duration <= 0:
                raise ValueError(f"{path}:{lineno}: non-positive duration")
            entries.append(entry)
    ids = [e.recording_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate recording ids")
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(asdict(e)) + "\n")


def load_audio(path: str | Path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Read WAV/FLAC, keep channel 0 and resample to ``sample_rate``."""
    import soundfile as sf

    data, sr = sf.read(str(path), dtype="float32", always_2d=True)
    if data.shape[1] > 1:
        warnings.warn(f"{path}: {data.shape[1]} channels, using channel 0")
    samples = data[:, 0]
    if sr != sample_rate:
        from scipy.signal import resample_poly

        g = gcd(sr, sample_rate)
        samples = resample_poly(samples, sample_rate // g, sr // g).astype(np.float32)
    return Waveform(samples, sample_rate)


def save_audio(path: str | Path, waveform: Waveform) -> None:
    import soundfile as sf

    sf.write(str(path), waveform.samples, waveform.sample_rate, subtype="PCM_16")


def _mel(f):
    return 1127.0 * np.log1p(np.asarray(f) / 700.0)


def mel_filterbank(n_bins=FBANK_BINS, n_fft=FBANK_NFFT, sample_rate=SAMPLE_RATE,
                   low=20.0, high=None) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_bins, n_fft // 2 + 1)."""
    high = sample_rate / 2 if high is None else high
    edges = np.linspace(_mel(low), _mel(high), n_bins + 2)
    fft_mel = _mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_mel - left) / (center - left)
    down = (right - fft_mel) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


_MEL_BANK = mel_filterbank()
_POVEY = np.power(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(FBANK_WIN) / (FBANK_WIN - 1)), 0.85)


def frame_signal(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = len(samples)
    if n < win:
        raise ValueError(f"segment too short: {n} samples < {win}")
    num = (n - win) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:num]


def extract_fbank(waveform: Waveform) -> np.ndarray:
    """80-dim log-Mel energies, 25 ms window / 10 ms hop, no padding, no dither."""
    if waveform.sample_rate != SAMPLE_RATE:
        raise ValueError(f"fbank expects {SAMPLE_RATE} Hz input, got {waveform.sample_rate}")
    frames = frame_signal(waveform.samples.astype(np.float64), FBANK_WIN, FBANK_HOP).copy()
    frames -= frames.mean(axis=1, keepdims=True)
    frames[:, 1:] -= 0.97 * frames[:, :-1].copy()
    frames[:, 0] *= 1 - 0.97
    frames *= _POVEY
    power = np.abs(np.fft.rfft(frames, n=FBANK_NFFT)) ** 2
    energies = power @ _MEL_BANK.T
    return np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)
