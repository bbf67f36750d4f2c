"""Frame-level acoustic backbones and learnable layer fusion.

Three backbones share one interface: ``forward(wave)`` maps a (B, N) batch
of 16 kHz audio to a stacked (L, B, T, D) tensor of layer outputs.

* ``fbank``: 80-dim log-Mel filterbanks at 100 Hz, L=1, no parameters.
* ``ssl``: a pretrained WavLM checkpoint (Hugging Face directory layout),
  13 layers of 768 dims at 50 Hz.
* ``mock``: a small deterministic stand-in at 50 Hz (L=2, D=16) so the full
  pipeline runs in tests without large checkpoints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .signal_io import SAMPLE_RATE, Waveform, extract_fbank

logger = logging.getLogger(__name__)

MOCK_SEED = 7


class BackboneLoadError(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    kind: str = "mock"  # fbank | ssl | mock
    trainable: str = "frozen"  # frozen | updated
    checkpoint_path: str | None = None
    mock_seed: int = MOCK_SEED

    def __post_init__(self):
        if self.kind not in ("fbank", "ssl", "mock"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.trainable not in ("frozen", "updated"):
            raise ValueError(f"trainable must be 'frozen' or 'updated', got {self.trainable!r}")
        if self.kind == "ssl" and not self.checkpoint_path:
            raise ValueError("ssl backbone requires checkpoint_path")


@dataclass
class BackboneOutput:
    layers: torch.Tensor  # (L, B, T, D)
    frame_rate: float

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]


class Backbone(nn.Module):
    num_layers: int
    dim: int
    frame_rate: float
    # frame i covers samples [i * hop, i * hop + win)
    win: int
    hop: int

    def __init__(self, trainable: bool = False):
        super().__init__()
        self.trainable = trainable

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.win:
            return 0
        return (num_samples - self.win) // self.hop + 1

    def freeze(self):
        self.trainable = False
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        # frozen backbones always run in eval mode (no dropout / masking)
        return super().train(mode and self.trainable)

    def extract(self, wave: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, wave: torch.Tensor) -> BackboneOutput:
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        if not self.trainable:
            with torch.no_grad():
                layers = self.extract(wave)
        else:
            layers = self.extract(wave)
        return BackboneOutput(layers, self.frame_rate)


class FbankBackbone(Backbone):
    num_layers, dim, frame_rate, win, hop = 1, 80, 100.0, 400, 160

    def __init__(self):
        super().__init__(trainable=False)

    def extract(self, wave):
        feats = [extract_fbank(Waveform(w.detach().cpu().numpy())) for w in wave]
        return torch.from_numpy(np.stack(feats)).to(wave.device, wave.dtype).unsqueeze(0)


class MockBackbone(Backbone):
    """Log band energies pushed through fixed seeded random projections."""

    num_layers, dim, frame_rate, win, hop = 2, 16, 50.0, 400, 320
    num_bands = 40

    def __init__(self, seed: int = MOCK_SEED, trainable: bool = False):
        super().__init__(trainable=trainable)
        g = torch.Generator().manual_seed(seed)
        self.proj0 = nn.Parameter(torch.randn(self.num_bands, self.dim, generator=g) / self.num_bands ** 0.5)
        self.proj1 = nn.Parameter(torch.randn(self.dim, self.dim, generator=g) / self.dim ** 0.5)
        self.register_buffer("window", torch.hann_window(self.win, periodic=False), persistent=False)
        if not trainable:
            self.freeze()

    def extract(self, wave):
        frames = wave.unfold(-1, self.win, self.hop) * self.window.to(wave.dtype)
        power = torch.fft.rfft(frames, n=512).abs().pow(2)[..., :240]
        bands = power.reshape(*power.shape[:-1], self.num_bands, -1).sum(-1)
        logbands = torch.log(bands + 1e-4)
        layer0 = logbands @ self.proj0.to(wave.dtype)
        layer1 = torch.tanh(layer0 @ self.proj1.to(wave.dtype) / 4.0)
        return torch.stack([layer0, layer1])


class SSLBackbone(Backbone):
    """WavLM Base+ loaded from a Hugging Face format checkpoint directory."""

    frame_rate, win, hop = 50.0, 400, 320

    def __init__(self, checkpoint_path: str | Path, trainable: bool = False):
        super().__init__(trainable=trainable)
        path = Path(checkpoint_path)
        if not path.exists():
            raise BackboneLoadError(f"SSL checkpoint not found: {path}")
        try:
            from transformers import WavLMModel

            self.model = WavLMModel.from_pretrained(str(path))
        except Exception as exc:
            raise BackboneLoadError(f"cannot load SSL checkpoint {path}: {exc}") from exc
        cfg = self.model.config
        self.num_layers = cfg.num_hidden_layers + 1
        self.dim = cfg.hidden_size
        # receptive field / stride of the convolutional feature encoder
        win, hop = 1, 1
        for k, s in zip(cfg.conv_kernel, cfg.conv_stride):
            win += (k - 1) * hop
            hop *= s
        self.win, self.hop = win, hop
        self.frame_rate = SAMPLE_RATE / hop
        if not trainable:
            self.freeze()

    def extract(self, wave):
        out = self.model(wave, output_hidden_states=True)
        return torch.stack(out.hidden_states)


def build_backbone(config: BackboneConfig) -> Backbone:
    trainable = config.trainable == "updated"
    if config.kind == "fbank":
        if trainable:
            logger.warning("fbank backbone has no parameters; 'updated' ignored")
        return FbankBackbone()
    if config.kind == "mock":
        return MockBackbone(config.mock_seed, trainable=trainable)
    return SSLBackbone(config.checkpoint_path, trainable=trainable)


def backbone_forward(backbone: Backbone, waveform: Waveform | np.ndarray) -> BackboneOutput:
    samples = waveform.samples if isinstance(waveform, Waveform) else np.asarray(waveform, np.float32)
    return backbone(torch.from_numpy(np.ascontiguousarray(samples, dtype=np.float32)))


class LayerFusion(nn.Module):
    """Softmax-weighted sum of backbone layers."""

    def __init__(self, num_layers: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(num_layers))

    def forward(self, layers: torch.Tensor) -> torch.Tensor:
        return fuse_layers(layers, self.logits)


def fuse_layers(layers, logits):
    """Per-frame sum of layers weighted by ``softmax(logits)``.

    ``layers`` is (L, ..., D) as a tensor/array or a list of L matrices.
    """
    as_numpy = not isinstance(logits, torch.Tensor)
    if isinstance(layers, BackboneOutput):
        layers = layers.layers
    if isinstance(layers, (list, tuple)):
        layers = torch.stack([torch.as_tensor(np.asarray(x)) if not isinstance(x, torch.Tensor) else x
                              for x in layers])
    layers = torch.as_tensor(layers)
    logits = torch.as_tensor(logits, dtype=layers.dtype)
    if logits.dim() != 1 or logits.shape[0] != layers.shape[0]:
        raise ValueError(f"{logits.shape[0] if logits.dim() else 0} fusion weights for {layers.shape[0]} layers")
    weights = torch.softmax(logits, dim=0)
    fused = torch.tensordot(weights, layers, dims=1)
    return fused.numpy() if as_numpy else fused
