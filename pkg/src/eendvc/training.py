"""Chunked training data, AdamW with AutoClip, early stopping and checkpoint averaging."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch

from .features import BackboneConfig
from .model import EENDModel, read_checkpoint, save_checkpoint
from .powerset import PowersetCatalog, align_reference, enumerate_powerset, powerset_loss
from .signal_io import Annotation, ManifestEntry, Waveform, load_audio, read_rttm

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    chunk_len: float = 8.0
    chunk_hop: float = 6.0
    effective_batch: int = 64
    micro_batch: int = 8
    lr_main: float = 1e-3
    lr_backbone: float = 1e-5
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    autoclip_percentile: float = 90.0
    average_last: int = 5
    seed: int = 0
    cache_audio: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 < self.chunk_hop <= self.chunk_len:
            raise ValueError("need 0 < chunk_hop <= chunk_len")
        if self.lr_main <= 0 or self.lr_backbone <= 0:
            raise ValueError("learning rates must be positive")
        if self.micro_batch <= 0 or self.effective_batch % self.micro_batch:
            raise ValueError("effective_batch must be a positive multiple of micro_batch")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError("need 0 <= patience < max_epochs")
        if not 0 < self.autoclip_percentile <= 100:
            raise ValueError("autoclip_percentile must be in (0, 100]")
        if self.average_last < 1:
            raise ValueError("average_last must be >= 1")

    @property
    def grad_accum(self) -> int:
        return self.effective_batch // self.micro_batch


class Chunk(NamedTuple):
    recording_id: str
    start: float
    end: float


def make_chunks(manifest: Iterable[ManifestEntry], chunk_len: float = 8.0,
                chunk_hop: float = 6.0) -> list[Chunk]:
    """Full-length chunks at 0, hop, 2*hop, ...; the partial remainder is dropped."""
    chunks = []
    for entry in manifest:
        if entry.duration + 1e-9 < chunk_len:
            warnings.warn(f"{entry.recording_id}: {entry.duration:.2f}s is shorter than one chunk")
            continue
        n = int(math.floor((entry.duration - chunk_len) / chunk_hop + 1e-9)) + 1
        for k in range(n):
            start = round(k * chunk_hop, 6)
            chunks.append(Chunk(entry.recording_id, start, round(start + chunk_len, 6)))
    return chunks


def rasterize(annotation: Annotation, start: float, num_frames: int, frame_rate: float,
              speakers: Sequence[str] | None = None) -> tuple[list[str], np.ndarray]:
    """Fraction of each frame interval [start + i/fr, start + (i+1)/fr) covered per speaker."""
    edges = start + np.arange(num_frames + 1) / frame_rate
    ann = annotation.normalized()
    if speakers is None:
        speakers = ann.speakers
    index = {s: i for i, s in enumerate(speakers)}
    cov = np.zeros((num_frames, len(speakers)))
    for t in ann.turns:
        if t.speaker not in index or t.end <= edges[0] or t.start >= edges[-1]:
            continue
        overlap = np.minimum(t.end, edges[1:]) - np.maximum(t.start, edges[:-1])
        cov[:, index[t.speaker]] += np.clip(overlap, 0, None) * frame_rate
    return list(speakers), np.clip(cov, 0.0, 1.0)


def chunk_targets(annotation: Annotation, start: float, num_frames: int, frame_rate: float,
                  max_speakers: int) -> tuple[np.ndarray, np.ndarray]:
    """(T, K) binary labels and coverage for the K most active speakers of a chunk.

    A frame is active for a speaker covering at least half of it.
    """
    speakers, cov = rasterize(annotation, start, num_frames, frame_rate)
    labels = cov >= 0.5
    active = labels.sum(axis=0)
    order = [i for i in sorted(range(len(speakers)), key=lambda i: (-active[i], speakers[i])) if active[i] > 0]
    order = sorted(order[:max_speakers], key=lambda i: speakers[i])
    out_labels = np.zeros((num_frames, max_speakers), dtype=np.float32)
    out_cov = np.zeros((num_frames, max_speakers))
    out_labels[:, :len(order)] = labels[:, order]
    out_cov[:, :len(order)] = cov[:, order]
    return out_labels, out_cov


class ChunkDataset:
    def __init__(self, manifest: Sequence[ManifestEntry], chunks: Sequence[Chunk],
                 num_frames, frame_rate: float, max_speakers: int, cache_audio: bool = True):
        self.entries = {e.recording_id: e for e in manifest}
        self.chunks = list(chunks)
        self.num_frames = num_frames
        self.frame_rate = frame_rate
        self.max_speakers = max_speakers
        self.cache_audio = cache_audio
        self._audio: dict[str, Waveform] = {}
        self._ann: dict[str, Annotation] = {}

    def __len__(self):
        return len(self.chunks)

    def _annotation(self, rec):
        if rec not in self._ann:
            entry = self.entries[rec]
            self._ann[rec] = read_rttm(entry.rttm_path).get(rec, Annotation(rec))
        return self._ann[rec]

    def _samples(self, chunk: Chunk) -> np.ndarray:
        entry = self.entries[chunk.recording_id]
        if self.cache_audio:
            if chunk.recording_id not in self._audio:
                self._audio[chunk.recording_id] = load_audio(entry.audio_path)
            wav = self._audio[chunk.recording_id]
        else:
            wav = load_audio(entry.audio_path)
        n = int(round((chunk.end - chunk.start) * wav.sample_rate))
        out = wav.crop(chunk.start, chunk.end)[:n]
        return np.pad(out, (0, n - len(out)))

    def __getitem__(self, i):
        chunk = self.chunks[i]
        samples = self._samples(chunk)
        num_frames = self.num_frames(len(samples))
        labels, cov = chunk_targets(self._annotation(chunk.recording_id), chunk.start, num_frames,
                                    self.frame_rate, self.max_speakers)
        return samples, labels, cov

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for b in range(0, len(order), batch_size):
            items = [self[i] for i in order[b:b + batch_size]]
            yield (torch.from_numpy(np.stack([x[0] for x in items])),
                   np.stack([x[1] for x in items]),
                   np.stack([x[2] for x in items]))


def autoclip_threshold(history: Sequence[float], percentile: float = 90.0) -> float:
    """Linear-interpolation percentile of every gradient norm seen so far."""
    if len(history) == 0:
        raise ValueError("gradient norm history is empty")
    return float(np.percentile(np.asarray(history, dtype=np.float64), percentile))


class AutoClip:
    def __init__(self, percentile: float = 90.0, history: Sequence[float] = ()):
        self.percentile = percentile
        self.history = list(history)

    def __call__(self, parameters) -> tuple[float, float]:
        """Record the current global gradient norm, then clip to the running percentile."""
        params = [p for p in parameters if p.grad is not None]
        norm = float(torch.nn.utils.clip_grad_norm_(params, float("inf")))
        if not math.isfinite(norm):
            raise TrainingError(f"non-finite gradient norm {norm}")
        self.history.append(norm)
        threshold = autoclip_threshold(self.history, self.percentile)
        torch.nn.utils.clip_grad_norm_(params, threshold)
        return norm, threshold


def global_grad_norm(parameters) -> float:
    grads = [p.grad.detach().flatten() for p in parameters if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.cat(grads))) if grads else 0.0


def make_optimizer(model: EENDModel, config: TrainConfig) -> torch.optim.AdamW:
    backbone_params, main_params = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (backbone_params if name.startswith("backbone.") else main_params).append(p)
    groups = [{"params": main_params, "lr": config.lr_main, "name": "main"}]
    if backbone_params:
        groups.append({"params": backbone_params, "lr": config.lr_backbone, "name": "backbone"})
    return torch.optim.AdamW(groups, betas=config.betas, eps=config.eps,
                             weight_decay=config.weight_decay)


def batch_loss(model: EENDModel, wave: torch.Tensor, labels: np.ndarray, coverage: np.ndarray,
               catalog: PowersetCatalog) -> torch.Tensor:
    """Powerset loss after per-chunk permutation alignment."""
    logp = model.forward_waveform(wave)
    if logp.shape[1] != labels.shape[1]:
        raise TrainingError(f"model emits {logp.shape[1]} frames, labels have {labels.shape[1]}")
    targets = np.stack([align_reference(logp[b], labels[b], catalog, coverage[b])
                        for b in range(len(labels))])
    return powerset_loss(logp, targets)


def train_epoch(model: EENDModel, data: ChunkDataset, optimizer: torch.optim.Optimizer,
                config: TrainConfig, clipper: AutoClip, rng: np.random.Generator | None = None,
                catalog: PowersetCatalog | None = None) -> tuple[float, float]:
    """One pass over ``data``; returns (mean train loss, last clip threshold)."""
    if len(data) == 0:
        raise TrainingError("no training chunks")
    catalog = catalog or enumerate_powerset(model.config.max_speakers, model.config.max_overlap)
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer.zero_grad()
    total, count, pending, threshold = 0.0, 0, 0, float("nan")
    for wave, labels, cov in data.batches(config.micro_batch, rng):
        loss = batch_loss(model, wave, labels, cov, catalog)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {float(loss)} after {count} chunks")
        (loss * len(labels) / config.effective_batch).backward()
        total += loss.item() * len(labels)
        count += len(labels)
        pending += 1
        if pending == config.grad_accum:
            _, threshold = clipper(params)
            optimizer.step()
            optimizer.zero_grad()
            pending = 0
    if pending:
        # rescale the partial accumulation to a mean over the chunks it saw
        seen = count % config.effective_batch
        for p in params:
            if p.grad is not None:
                p.grad.mul_(config.effective_batch / seen)
        _, threshold = clipper(params)
        optimizer.step()
        optimizer.zero_grad()
    return total / count, threshold


@torch.no_grad()
def evaluate(model: EENDModel, data: ChunkDataset, config: TrainConfig,
             catalog: PowersetCatalog | None = None) -> float:
    """Aligned powerset loss averaged over chunks (same objective as training)."""
    catalog = catalog or enumerate_powerset(model.config.max_speakers, model.config.max_overlap)
    model.eval()
    total, count = 0.0, 0
    for wave, labels, cov in data.batches(config.micro_batch):
        total += float(batch_loss(model, wave, labels, cov, catalog)) * len(labels)
        count += len(labels)
    return total / max(count, 1)


def early_stop(val_losses: Sequence[float], patience: int) -> bool:
    """True once ``patience`` epochs have passed without a new best validation loss."""
    if not val_losses:
        return False
    best = int(np.argmin(val_losses))
    return len(val_losses) - 1 - best >= patience


def average_checkpoints(paths: Sequence[str | Path], last_n: int = 5) -> tuple[dict, dict]:
    """Mean of every floating tensor over the ``last_n`` most recent checkpoints by epoch.

    Returns (state_dict, metadata of the newest checkpoint).
    """
    if not paths:
        raise ValueError("no checkpoints to average")
    payloads = sorted((read_checkpoint(p) for p in paths), key=lambda c: c["metadata"]["epoch"])
    hashes = {c["metadata"]["config_hash"] for c in payloads}
    if len(hashes) > 1:
        raise ValueError(f"checkpoints come from different configs: {sorted(hashes)}")
    chosen = payloads[-last_n:]
    newest = chosen[-1]
    averaged = {}
    for key, value in newest["state_dict"].items():
        if value.is_floating_point():
            averaged[key] = sum(c["state_dict"][key].double() for c in chosen).div(len(chosen)).to(value.dtype)
        else:
            averaged[key] = value.clone()
    meta = dict(newest["metadata"])
    meta["averaged_epochs"] = [c["metadata"]["epoch"] for c in chosen]
    return averaged, meta


def checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"epoch_{epoch:04d}.pt"


def fit(model: EENDModel, train_data: ChunkDataset, dev_data: ChunkDataset, config: TrainConfig,
        backbone_config: BackboneConfig, out_dir: str | Path, resume: bool = False) -> dict:
    """Train until ``max_epochs`` or early stop, then write ``averaged.pt``.

    One checkpoint per epoch goes to ``out_dir/checkpoints``; per-epoch
    metrics are appended to ``out_dir/train_log.jsonl``. With ``resume``
    the newest checkpoint (including optimizer and AutoClip state) is
    restored and epoch numbering continues from it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    catalog = enumerate_powerset(model.config.max_speakers, model.config.max_overlap)
    optimizer = make_optimizer(model, config)
    clipper = AutoClip(config.autoclip_percentile)
    val_losses: list[float] = []
    start_epoch = 1

    existing = sorted((out_dir / "checkpoints").glob("epoch_*.pt"))
    if resume and existing:
        payload = read_checkpoint(existing[-1])
        model.load_state_dict(payload["state_dict"], strict=False)
        extra = payload["extra"]
        optimizer.load_state_dict(extra["optimizer"])
        clipper.history = list(extra["grad_norms"])
        val_losses = list(extra["val_losses"])
        start_epoch = payload["metadata"]["epoch"] + 1
        logger.info("resumed from %s at epoch %d", existing[-1], start_epoch)
    elif log_path.exists():
        log_path.unlink()

    stopped_early = early_stop(val_losses, config.patience)
    for epoch in range(start_epoch, config.max_epochs + 1):
        if stopped_early:
            break
        torch.manual_seed(config.seed + epoch)
        rng = np.random.default_rng(config.seed + epoch)
        train_loss, threshold = train_epoch(model, train_data, optimizer, config, clipper, rng, catalog)
        val_loss = evaluate(model, dev_data, config, catalog)
        val_losses.append(val_loss)
        save_checkpoint(checkpoint_path(out_dir, epoch), model, backbone_config, epoch, val_loss,
                        extra={"optimizer": optimizer.state_dict(), "grad_norms": clipper.history,
                               "val_losses": val_losses})
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                  "clip_threshold": threshold,
                  "lr": {g.get("name", str(i)): g["lr"] for i, g in enumerate(optimizer.param_groups)}}
        with open(log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record) + "\n")
        logger.info("epoch %d train %.4f val %.4f clip %.3g", epoch, train_loss, val_loss, threshold)
        stopped_early = early_stop(val_losses, config.patience)

    paths = sorted((out_dir / "checkpoints").glob("epoch_*.pt"))
    state, meta = average_checkpoints(paths, config.average_last)
    model.load_state_dict(state, strict=False)
    averaged = out_dir / "averaged.pt"
    save_checkpoint(averaged, model, backbone_config, meta["epoch"], meta.get("val_loss"),
                    extra={"averaged_epochs": meta["averaged_epochs"]})
    return {"epochs": len(val_losses), "stopped_early": stopped_early, "val_losses": val_losses,
            "averaged_checkpoint": str(averaged), "averaged_epochs": meta["averaged_epochs"],
            "config": asdict(config)}
