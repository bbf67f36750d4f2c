"""Sliding-window inference with constrained clustering and overlap-averaged stitching.

Steps for one recording:

1. split into windows (8 s, hop 0.8 s) and run the local EEND model on each,
   converting powerset posteriors to per-speaker marginals;
2. embed every local speaker on its overlap-free frames;
3. cluster the embeddings with average-linkage AHC, never merging two
   speakers of the same window;
4. average each global speaker's marginals over all windows covering a
   frame, binarize and emit turns.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import EENDModel
from .powerset import PowersetCatalog, class_posteriors_to_marginals, enumerate_powerset
from .signal_io import Annotation, Turn, Waveform, extract_fbank

logger = logging.getLogger(__name__)


@dataclass
class ClusteringConfig:
    min_clusters: int = 2
    max_clusters: int = 8
    min_cluster_size: int = 30
    threshold: float = 0.7

    def __post_init__(self):
        if not 1 <= self.min_clusters <= self.max_clusters:
            raise ValueError("need 1 <= min_clusters <= max_clusters")
        if not -1 < self.threshold < 1:
            raise ValueError("threshold must lie in (-1, 1)")
        if self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be >= 1")


@dataclass
class EmbedderConfig:
    kind: str = "mock"  # mock | onnx
    path: str | None = None
    seed: int = 7

    def __post_init__(self):
        if self.kind not in ("mock", "onnx"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.kind == "onnx" and not self.path:
            raise ValueError("onnx embedder requires path")


@dataclass
class PipelineConfig:
    window: float = 8.0
    hop: float = 0.8
    batch_size: int = 32
    binarize_threshold: float = 0.5
    min_pure_frames: int = 10
    postprocess: bool = True
    min_duration_on: float = 0.1
    min_duration_off: float = 0.1
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)

    def __post_init__(self):
        if isinstance(self.clustering, dict):
            self.clustering = ClusteringConfig(**self.clustering)
        if isinstance(self.embedder, dict):
            self.embedder = EmbedderConfig(**self.embedder)
        if self.window <= 0 or self.hop <= 0:
            raise ValueError("window and hop must be positive")


@dataclass
class ChunkHypothesis:
    chunk_id: int
    window_start: float
    marginals: np.ndarray  # (T, K)
    frame_rate: float
    # backbone frame geometry in samples, used to map frames back to audio
    frame_hop: int = 320
    frame_win: int = 400


@dataclass
class EmbeddingRecord:
    chunk_id: int
    local_speaker: int
    vector: np.ndarray


@dataclass
class ClusterAssignment:
    labels: dict[tuple[int, int], int]
    num_clusters: int
    issues: list[str] = field(default_factory=list)


@dataclass
class DiarizationResult:
    annotation: Annotation
    activity: np.ndarray | None = None  # (frames, clusters)
    frame_rate: float | None = None


def slide_windows(duration: float, win: float = 8.0, hop: float = 0.8) -> list[tuple[float, float]]:
    """Window starts 0, hop, 2*hop, ...; a final window ending at ``duration`` closes any gap."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    if duration <= win + 1e-9:
        return [(0.0, round(duration, 6))]
    n = int(math.floor((duration - win) / hop + 1e-9)) + 1
    windows = [(round(k * hop, 6), round(k * hop + win, 6)) for k in range(n)]
    if windows[-1][1] < duration - 1e-6:
        last = (round(max(duration - win, 0.0), 6), round(duration, 6))
        if last != windows[-1]:
            windows.append(last)
    return windows


def _window_samples(waveform: Waveform, start: float, end: float) -> np.ndarray:
    n = int(round((end - start) * waveform.sample_rate))
    out = waveform.crop(start, end)[:n]
    return np.pad(out, (0, n - len(out)))


def _order_by_activity(marginals: np.ndarray) -> np.ndarray:
    order = sorted(range(marginals.shape[1]), key=lambda s: (-marginals[:, s].sum(), s))
    return marginals[:, order]


@torch.no_grad()
def decode_windows(model: EENDModel, waveform: Waveform, windows: Sequence[tuple[float, float]],
                   batch_size: int = 32, catalog: PowersetCatalog | None = None) -> list[ChunkHypothesis]:
    """Batched local decoding; hypotheses come back in window order."""
    catalog = catalog or enumerate_powerset(model.config.max_speakers, model.config.max_overlap)
    backbone = model.backbone
    model.eval()
    audio = [_window_samples(waveform, s, e) for s, e in windows]
    out: list[ChunkHypothesis | None] = [None] * len(windows)
    by_len: dict[int, list[int]] = {}
    for i, a in enumerate(audio):
        by_len.setdefault(len(a), []).append(i)
    for length, idx in sorted(by_len.items()):
        if backbone.num_frames(length) < 1:
            raise ValueError(f"window of {length} samples is shorter than one frame")
        for b in range(0, len(idx), batch_size):
            part = idx[b:b + batch_size]
            wave = torch.from_numpy(np.stack([audio[i] for i in part]))
            post = model.forward_waveform(wave).double().exp().numpy()
            for i, p in zip(part, post):
                p = p / p.sum(axis=-1, keepdims=True)
                marg = _order_by_activity(class_posteriors_to_marginals(p, catalog))
                out[i] = ChunkHypothesis(i, windows[i][0], marg, backbone.frame_rate,
                                         backbone.hop, backbone.win)
    return out


def local_decode(model: EENDModel, window_audio: np.ndarray, window_start: float = 0.0,
                 chunk_id: int = 0) -> ChunkHypothesis:
    wav = Waveform(window_audio)
    hyp = decode_windows(model, wav, [(0.0, wav.duration)], batch_size=1)[0]
    hyp.chunk_id, hyp.window_start = chunk_id, window_start
    return hyp


def select_pure_frames(hypothesis: ChunkHypothesis, speaker: int, binarize_at: float = 0.5) -> np.ndarray:
    """Frames where ``speaker`` is active and every other local speaker is not."""
    active = hypothesis.marginals >= binarize_at
    others = np.delete(active, speaker, axis=1)
    return active[:, speaker] & ~others.any(axis=1)


def frames_to_samples(mask: np.ndarray, num_samples: int, hop: int, win: int) -> np.ndarray:
    out = np.zeros(num_samples, dtype=bool)
    for i in np.flatnonzero(mask):
        out[i * hop:i * hop + win] = True
    return out


class MockEmbedder:
    """Centred, compressed average spectrum rotated by a fixed seeded orthogonal map.

    Deterministic and speaker-discriminative for the synthetic tone corpus;
    a test stand-in for a real speaker-embedding network.
    """

    dim = 256

    def __init__(self, seed: int = 7):
        rng = np.random.default_rng(seed)
        self.rotation, _ = np.linalg.qr(rng.standard_normal((self.dim, self.dim)))

    def __call__(self, audio: np.ndarray, sample_mask: np.ndarray) -> np.ndarray:
        seg = np.asarray(audio, dtype=np.float64)[sample_mask]
        if len(seg) < 512:
            seg = np.pad(seg, (0, 512 - len(seg)))
        frames = np.lib.stride_tricks.sliding_window_view(seg, 512)[::256] * np.hanning(512)
        mag = np.sqrt(np.mean(np.abs(np.fft.rfft(frames, axis=-1)) ** 2, axis=0))[1:]
        p = mag / max(mag.sum(), 1e-12)
        return self.rotation @ (p - p.mean())


class OnnxEmbedder:
    """Speaker embedder exported to ONNX taking (1, T, 80) filterbanks, e.g. ResNet34-LM."""

    def __init__(self, path: str | Path):
        import onnxruntime as ort

        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"embedder model not found: {path}")
        self.session = ort.InferenceSession(str(path), providers=["CPUExecutionProvider"])
        self.input_name = self.session.get_inputs()[0].name

    def __call__(self, audio: np.ndarray, sample_mask: np.ndarray) -> np.ndarray:
        seg = np.asarray(audio, dtype=np.float32)[sample_mask] * 32768.0
        feats = extract_fbank(Waveform(seg))
        feats = feats - feats.mean(axis=0, keepdims=True)
        out = self.session.run(None, {self.input_name: feats[None].astype(np.float32)})[0]
        return np.asarray(out, dtype=np.float64).reshape(-1)


def build_embedder(config: EmbedderConfig) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    if config.kind == "mock":
        return MockEmbedder(config.seed)
    return OnnxEmbedder(config.path)


class EmbeddingError(RuntimeError):
    pass


def extract_embedding(window_audio: np.ndarray, frame_mask: np.ndarray, embedder,
                      chunk_id: int = 0, local_speaker: int = 0, hop: int = 320, win: int = 400,
                      min_frames: int = 10) -> EmbeddingRecord | None:
    """Length-normalised embedding over the masked frames, or None below ``min_frames``."""
    if int(np.sum(frame_mask)) < min_frames:
        return None
    sample_mask = frames_to_samples(frame_mask, len(window_audio), hop, win)
    try:
        vec = np.asarray(embedder(window_audio, sample_mask), dtype=np.float64)
    except Exception as exc:
        raise EmbeddingError(f"embedding failed for chunk {chunk_id}, speaker {local_speaker}: {exc}") from exc
    norm = np.linalg.norm(vec)
    if not np.isfinite(norm) or norm == 0:
        return None
    return EmbeddingRecord(chunk_id, local_speaker, vec / norm)


class _Linkage:
    """Average-linkage state with cannot-link masking and cached row maxima."""

    def __init__(self, vectors: np.ndarray, chunk_ids: Sequence[int]):
        n = len(vectors)
        self.link = vectors @ vectors.T
        _, chunk_idx = np.unique(np.asarray(chunk_ids), return_inverse=True)
        self.members = np.zeros((n, chunk_idx.max() + 1), dtype=bool)
        self.members[np.arange(n), chunk_idx] = True
        self.size = np.ones(n)
        self.alive = np.ones(n, dtype=bool)
        self.groups = [[i] for i in range(n)]
        self.row_best = np.full(n, -np.inf)
        self.row_arg = np.full(n, -1)
        for i in range(n):
            self._refresh(i)

    def _available(self, i: int) -> np.ndarray:
        ok = self.alive & ~(self.members @ self.members[i])
        ok[i] = False
        return np.where(ok, self.link[i], -np.inf)

    def _refresh(self, i: int):
        row = self._available(i)
        j = int(np.argmax(row))
        self.row_best[i], self.row_arg[i] = row[j], j

    @property
    def count(self) -> int:
        return int(self.alive.sum())

    def best(self) -> tuple[float, int, int]:
        i = int(np.argmax(self.row_best))
        return float(self.row_best[i]), i, int(self.row_arg[i])

    def merge(self, i: int, j: int):
        i, j = min(i, j), max(i, j)
        si, sj = self.size[i], self.size[j]
        merged = (si * self.link[i] + sj * self.link[j]) / (si + sj)
        self.link[i], self.link[:, i] = merged, merged
        self.size[i] += sj
        self.members[i] |= self.members[j]
        self.alive[j] = False
        self.groups[i] += self.groups[j]
        self.groups[j] = []
        self.row_best[j], self.row_arg[j] = -np.inf, -1
        self._refresh(i)
        col = self._available(i)
        others = self.alive.copy()
        others[i] = False
        stale = others & np.isin(self.row_arg, (i, j))
        better = others & ~stale & ((col > self.row_best) | ((col == self.row_best) & (i < self.row_arg)))
        self.row_best[better], self.row_arg[better] = col[better], i
        for k in np.flatnonzero(stale):
            self._refresh(k)


def constrained_ahc(records: Sequence[EmbeddingRecord], config: ClusteringConfig | None = None) -> ClusterAssignment:
    """Average-linkage AHC on cosine similarity with same-chunk cannot-link constraints.

    Merges run while the best allowed similarity is >= ``threshold`` and more
    than ``min_clusters`` remain, then continue regardless of threshold down
    to ``max_clusters``. Records in clusters smaller than ``min_cluster_size``
    are finally moved one by one to the most similar large cluster (by
    centroid) that holds no record of the same chunk.
    """
    config = config or ClusteringConfig()
    if not records:
        raise ValueError("constrained_ahc needs at least one embedding")
    X = np.stack([r.vector for r in records]).astype(np.float64)
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    chunk_ids = [r.chunk_id for r in records]
    state = _Linkage(X, chunk_ids)
    issues: list[str] = []

    while state.count > config.min_clusters:
        sim, i, j = state.best()
        if sim < config.threshold:
            break
        state.merge(i, j)
    while state.count > config.max_clusters:
        sim, i, j = state.best()
        if sim == -np.inf:
            issues.append(f"cannot-link constraints leave {state.count} clusters > max_clusters={config.max_clusters}")
            break
        state.merge(i, j)

    groups = [g for g in state.groups if g]
    groups = _absorb_small_clusters(groups, X, chunk_ids, config)
    groups.sort(key=min)
    labels = {}
    for c, members in enumerate(groups):
        for r in members:
            labels[(records[r].chunk_id, records[r].local_speaker)] = c
    lower = min(config.min_clusters, len(records))
    if len(groups) < lower:
        issues.append(f"{len(groups)} clusters < min_clusters={lower}")
    for msg in issues:
        logger.warning(msg)
    return ClusterAssignment(labels, len(groups), issues)


def _absorb_small_clusters(groups, X, chunk_ids, config: ClusteringConfig):
    sizes = [len(g) for g in groups]
    large = [c for c, n in enumerate(sizes) if n >= config.min_cluster_size]
    if not large:
        return groups
    # keep at least min_clusters destinations when enough clusters exist
    if len(large) < config.min_clusters:
        by_size = sorted(range(len(groups)), key=lambda c: (-sizes[c], min(groups[c])))
        large = sorted(set(large) | set(by_size[:config.min_clusters]))
    small = [c for c in range(len(groups)) if c not in large]
    if not small:
        return groups
    centroids = np.stack([X[groups[c]].mean(axis=0) for c in large])
    centroids /= np.maximum(np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12)
    dest = {c: list(groups[c]) for c in large}
    dest_chunks = {c: {chunk_ids[r] for r in groups[c]} for c in large}
    leftovers = []
    for c in sorted(small, key=lambda c: min(groups[c])):
        stay = []
        for r in sorted(groups[c]):
            sims = centroids @ X[r]
            for k in np.argsort(-sims, kind="stable"):
                target = large[k]
                if chunk_ids[r] not in dest_chunks[target]:
                    dest[target].append(r)
                    dest_chunks[target].add(chunk_ids[r])
                    break
            else:
                stay.append(r)
        if stay:
            leftovers.append(stay)
    return [dest[c] for c in large] + leftovers


def stitch(hypotheses: Sequence[ChunkHypothesis], assignment: ClusterAssignment | dict,
           duration: float, threshold: float = 0.5, postprocess: bool = True,
           min_duration_on: float = 0.1, min_duration_off: float = 0.1,
           recording_id: str = "rec") -> DiarizationResult:
    """Average mapped marginals over every window covering each frame, then binarize.

    A window that covers a frame but has no local speaker mapped to a given
    cluster contributes 0 for that cluster. Local speakers without a cluster
    become singleton clusters.
    """
    hypotheses = sorted(hypotheses, key=lambda h: (h.window_start, h.chunk_id))
    labels = dict(assignment.labels if isinstance(assignment, ClusterAssignment) else assignment)
    num_clusters = max(labels.values(), default=-1) + 1
    if not hypotheses:
        return DiarizationResult(Annotation(recording_id), np.zeros((0, 0)), None)
    fr = hypotheses[0].frame_rate
    for h in hypotheses:
        for s in range(h.marginals.shape[1]):
            # a singleton's average never exceeds its own marginal
            if (h.chunk_id, s) not in labels and h.marginals[:, s].max() >= threshold:
                labels[(h.chunk_id, s)] = num_clusters
                num_clusters += 1
    n_frames = max(int(math.ceil(duration * fr - 1e-9)),
                   max(int(round(h.window_start * fr)) + len(h.marginals) for h in hypotheses))
    total = np.zeros((n_frames, num_clusters))
    count = np.zeros(n_frames)
    for h in hypotheses:
        off = int(round(h.window_start * fr))
        T = len(h.marginals)
        local = np.zeros((T, num_clusters))
        for s in range(h.marginals.shape[1]):
            c = labels.get((h.chunk_id, s))
            if c is not None:
                local[:, c] = np.maximum(local[:, c], h.marginals[:, s])
        total[off:off + T] += local
        count[off:off + T] += 1
    activity = total / np.maximum(count, 1)[:, None]
    n_keep = min(n_frames, int(math.ceil(duration * fr - 1e-9)))
    activity = activity[:n_keep]
    turns = binarize(activity, fr, threshold, duration)
    if postprocess:
        turns = postprocess_turns(turns, min_duration_on, min_duration_off)
    return DiarizationResult(Annotation(recording_id, turns), activity, fr)


def binarize(activity: np.ndarray, frame_rate: float, threshold: float = 0.5,
             duration: float | None = None) -> list[Turn]:
    """Frame runs with activity >= threshold become turns [start/fr, end/fr)."""
    turns = []
    for c in range(activity.shape[1]):
        on = np.concatenate([[False], activity[:, c] >= threshold, [False]])
        edges = np.flatnonzero(on[1:] != on[:-1])
        for a, b in zip(edges[::2], edges[1::2]):
            start, end = a / frame_rate, b / frame_rate
            if duration is not None:
                end = min(end, duration)
            if end > start:
                turns.append(Turn(f"spk{c:02d}", round(start, 6), round(end, 6)))
    turns.sort(key=lambda t: (t.start, t.speaker))
    return turns


def postprocess_turns(turns: Sequence[Turn], min_duration_on: float = 0.1,
                      min_duration_off: float = 0.1) -> list[Turn]:
    """Fill same-speaker gaps shorter than ``min_duration_off``, then drop turns shorter than ``min_duration_on``."""
    out = []
    for spk in sorted({t.speaker for t in turns}):
        spans = sorted((t.start, t.end) for t in turns if t.speaker == spk)
        merged = [list(spans[0])]
        for s, e in spans[1:]:
            if s - merged[-1][1] < min_duration_off - 1e-9:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        out += [Turn(spk, s, e) for s, e in merged if e - s >= min_duration_on - 1e-9]
    out.sort(key=lambda t: (t.start, t.speaker))
    return out


def _peak_rss_mb() -> float:
    import resource

    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def diarize(waveform: Waveform, model: EENDModel, embedder, config: PipelineConfig | None = None,
            recording_id: str = "rec", profile: dict | None = None) -> DiarizationResult:
    """Full pipeline for one recording.

    ``profile`` collects ``{stage: {"seconds", "peak_memory_mb"}}`` for the
    eend, embedding, clustering and aggregation stages.
    """
    import time

    config = config or PipelineConfig()
    profile = {} if profile is None else profile
    clock = [time.perf_counter()]

    def mark(stage):
        now = time.perf_counter()
        profile[stage] = {"seconds": now - clock[0], "peak_memory_mb": _peak_rss_mb()}
        clock[0] = now

    windows = slide_windows(waveform.duration, config.window, config.hop)
    hyps = decode_windows(model, waveform, windows, config.batch_size)
    mark("eend")
    records = []
    for h, (s, e) in zip(hyps, windows):
        audio = _window_samples(waveform, s, e)
        for spk in range(h.marginals.shape[1]):
            mask = select_pure_frames(h, spk, config.binarize_threshold)
            rec = extract_embedding(audio, mask, embedder, h.chunk_id, spk, h.frame_hop, h.frame_win,
                                    config.min_pure_frames)
            if rec is not None:
                records.append(rec)
    mark("embedding")
    assignment = constrained_ahc(records, config.clustering) if records else ClusterAssignment({}, 0)
    mark("clustering")
    result = stitch(hyps, assignment, waveform.duration, config.binarize_threshold, config.postprocess,
                    config.min_duration_on, config.min_duration_off, recording_id)
    mark("aggregation")
    return result


ACTIVITY_MAGIC = b"EVCA"


def write_activity(path, result: DiarizationResult) -> None:
    """Binary dump: magic, uint32 version, float64 frame_rate, uint32 frames, uint32 clusters, float32 data."""
    act = np.ascontiguousarray(result.activity, dtype="<f4")
    with open(path, "wb") as f:
        f.write(ACTIVITY_MAGIC)
        f.write(struct.pack("<IdII", 1, float(result.frame_rate or 0.0), act.shape[0], act.shape[1]))
        f.write(act.tobytes())


def read_activity(path) -> tuple[np.ndarray, float]:
    with open(path, "rb") as f:
        if f.read(4) != ACTIVITY_MAGIC:
            raise ValueError(f"{path}: not an activity dump")
        version, fr, n, c = struct.unpack("<IdII", f.read(struct.calcsize("<IdII")))
        data = np.frombuffer(f.read(), dtype="<f4").reshape(n, c)
    return data, fr
