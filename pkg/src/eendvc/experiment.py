"""Small end-to-end experiment on the synthetic tone corpus.

Used by the smoke script and the test suite: generate a corpus, train a
tiny model on the mock backbone, diarize held-out recordings with the
mock embedder and score them.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .features import BackboneConfig, build_backbone
from .metrics import DerBreakdown, compute_der, pool
from .model import EncoderConfig, build_model, load_model
from .pipeline import MockEmbedder, PipelineConfig, diarize
from .signal_io import load_audio, read_manifest, read_rttm
from .synthetic import make_corpus
from .training import ChunkDataset, TrainConfig, fit, make_chunks

logger = logging.getLogger(__name__)

TINY_ENCODER = EncoderConfig(input_dim=16, model_dim=64, ff_dim=128, heads=4, conv_kernel=15,
                             blocks=2, dropout=0.1)


@dataclass
class SyntheticExperiment:
    train_recordings: int = 10
    dev_recordings: int = 2
    test_recordings: int = 3
    duration: float = 60.0
    encoder: EncoderConfig = field(default_factory=lambda: TINY_ENCODER)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        effective_batch=8, micro_batch=8, max_epochs=20, patience=10, lr_main=3e-3))
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model_seed: int = 0


@dataclass
class ExperimentResult:
    checkpoint: Path
    test_manifest: Path
    per_recording: dict[str, DerBreakdown]
    pooled: DerBreakdown
    num_speakers: dict[str, int]
    train_seconds: float
    infer_seconds: float
    epochs: int


def chunk_dataset(manifest, backbone, config: TrainConfig, max_speakers: int) -> ChunkDataset:
    chunks = make_chunks(manifest, config.chunk_len, config.chunk_hop)
    return ChunkDataset(manifest, chunks, backbone.num_frames, backbone.frame_rate, max_speakers,
                        config.cache_audio)


def run_synthetic(out_dir: str | Path, exp: SyntheticExperiment | None = None) -> ExperimentResult:
    exp = exp or SyntheticExperiment()
    out_dir = Path(out_dir)
    train = read_manifest(make_corpus(out_dir / "data/train", exp.train_recordings, exp.duration, seed=1))
    dev = read_manifest(make_corpus(out_dir / "data/dev", exp.dev_recordings, exp.duration, seed=2,
                                    prefix="dev"))
    test_manifest = make_corpus(out_dir / "data/test", exp.test_recordings, exp.duration, seed=3,
                                prefix="test")

    backbone_config = BackboneConfig("mock")
    backbone = build_backbone(backbone_config)
    model = build_model(exp.encoder, backbone=backbone, seed=exp.model_seed)
    t0 = time.perf_counter()
    info = fit(model, chunk_dataset(train, backbone, exp.train, exp.encoder.max_speakers),
               chunk_dataset(dev, backbone, exp.train, exp.encoder.max_speakers),
               exp.train, backbone_config, out_dir / "train")
    train_seconds = time.perf_counter() - t0

    model, _ = load_model(info["averaged_checkpoint"])
    embedder = MockEmbedder()
    scores, speakers = {}, {}
    t0 = time.perf_counter()
    for entry in read_manifest(test_manifest):
        result = diarize(load_audio(entry.audio_path), model, embedder, exp.pipeline, entry.recording_id)
        ref = read_rttm(entry.rttm_path)[entry.recording_id]
        scores[entry.recording_id] = compute_der(ref, result.annotation)
        speakers[entry.recording_id] = len(result.annotation.speakers)
        logger.info("%s DER %.4f (%d speakers)", entry.recording_id, scores[entry.recording_id].der,
                    speakers[entry.recording_id])
    infer_seconds = time.perf_counter() - t0
    return ExperimentResult(Path(info["averaged_checkpoint"]), test_manifest, scores,
                            pool(list(scores.values())), speakers, train_seconds, infer_seconds,
                            info["epochs"])
