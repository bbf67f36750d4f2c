"""Local EEND network: layer fusion -> linear + LN -> Conformer -> powerset head."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .features import Backbone, BackboneConfig, LayerFusion, build_backbone

CHECKPOINT_FORMAT = "eendvc-checkpoint/1"


@dataclass
class EncoderConfig:
    input_dim: int = 768
    model_dim: int = 256
    ff_dim: int = 1024
    heads: int = 4
    conv_kernel: int = 31
    blocks: int = 4
    dropout: float = 0.1
    num_classes: int = 11
    max_speakers: int = 4
    max_overlap: int = 2

    def __post_init__(self):
        for name in ("input_dim", "model_dim", "ff_dim", "heads", "conv_kernel", "num_classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


class FeedForward(nn.Module):
    def __init__(self, dim, hidden, dropout):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, hidden),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    def __init__(self, dim, kernel, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise1 = nn.Conv1d(dim, 2 * dim, 1)
        self.glu = nn.GLU(dim=1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.batch_norm = nn.BatchNorm1d(dim)
        self.act = nn.SiLU()
        self.pointwise2 = nn.Conv1d(dim, dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        x = self.norm(x).transpose(1, 2)
        x = self.glu(self.pointwise1(x))
        x = self.act(self.batch_norm(self.depthwise(x)))
        x = self.pointwise2(x)
        return self.dropout(x.transpose(1, 2))


class ConformerBlock(nn.Module):
    """Macaron block without positional encoding: FF/2, MHSA, conv, FF/2, LN."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.model_dim
        self.ff1 = FeedForward(d, cfg.ff_dim, cfg.dropout)
        self.attn_norm = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.attn_dropout = nn.Dropout(cfg.dropout)
        self.conv = ConvModule(d, cfg.conv_kernel, cfg.dropout)
        self.ff2 = FeedForward(d, cfg.ff_dim, cfg.dropout)
        self.final_norm = nn.LayerNorm(d)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        h, _ = self.attn(h, h, h, need_weights=False)
        x = x + self.attn_dropout(h)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


class EENDModel(nn.Module):
    def __init__(self, config: EncoderConfig, num_layers: int = 1, backbone: Backbone | None = None):
        super().__init__()
        self.config = config
        if backbone is not None:
            if backbone.dim != config.input_dim:
                raise ValueError(f"backbone dim {backbone.dim} != input_dim {config.input_dim}")
            num_layers = backbone.num_layers
        self.backbone = backbone
        self.fusion = LayerFusion(num_layers)
        self.projection = nn.Sequential(nn.Linear(config.input_dim, config.model_dim),
                                        nn.LayerNorm(config.model_dim))
        self.encoder = nn.ModuleList(ConformerBlock(config) for _ in range(config.blocks))
        self.head = nn.Linear(config.model_dim, config.num_classes)

    @property
    def frame_rate(self) -> float:
        return self.backbone.frame_rate

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(L, B, T, D) layer stack or (B, T, D) / (T, D) fused features -> log-posteriors."""
        squeeze = False
        if features.dim() == 4:
            x = self.fusion(features)
        else:
            if features.dim() == 2:
                features, squeeze = features.unsqueeze(0), True
            x = self.fusion(features.unsqueeze(0)) if self.fusion.logits.numel() == 1 else features
        x = self.projection(x)
        for block in self.encoder:
            x = block(x)
        out = torch.log_softmax(self.head(x), dim=-1)
        return out.squeeze(0) if squeeze else out

    def forward_waveform(self, wave: torch.Tensor) -> torch.Tensor:
        if self.backbone is None:
            raise RuntimeError("model was built without a backbone")
        return self(self.backbone(wave).layers)


def _init_weights(model: nn.Module, generator: torch.Generator):
    for name, module in model.named_modules():
        if name.startswith("backbone"):
            continue
        if isinstance(module, (nn.Linear, nn.Conv1d)):
            fan_in = module.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=generator)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(module, nn.MultiheadAttention):
            bound = 1.0 / math.sqrt(module.embed_dim)
            with torch.no_grad():
                module.in_proj_weight.uniform_(-bound, bound, generator=generator)
                module.in_proj_bias.zero_()
        elif isinstance(module, (nn.LayerNorm, nn.BatchNorm1d)):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_model(config: EncoderConfig, backbone: Backbone | None = None,
                num_layers: int = 1, seed: int = 0) -> EENDModel:
    """Deterministic under ``seed``: uniform fan-in init, unit/zero norms."""
    model = EENDModel(config, num_layers=num_layers, backbone=backbone)
    _init_weights(model, torch.Generator().manual_seed(seed))
    return model


def model_forward(model: EENDModel, features) -> np.ndarray:
    """Log-posteriors (T, num_classes) for one (T, input_dim) feature matrix."""
    x = torch.as_tensor(np.asarray(features), dtype=next(model.parameters()).dtype)
    if not torch.isfinite(x).all():
        raise ValueError("non-finite values in model input")
    with torch.no_grad():
        return model(x).numpy()


COMPONENTS = ("backbone", "fusion", "projection", "encoder", "head")


def count_parameters(model: nn.Module, component: str | None = None) -> int:
    """Scalar parameter count, optionally restricted to one named component."""
    if component in (None, "all"):
        return sum(p.numel() for p in model.parameters())
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}; expected one of {COMPONENTS}")
    sub = getattr(model, component, None)
    return 0 if sub is None else sum(p.numel() for p in sub.parameters())


def config_hash(encoder: EncoderConfig, backbone: BackboneConfig) -> str:
    blob = json.dumps({"encoder": asdict(encoder), "backbone": asdict(backbone)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _is_frozen_backbone_key(model: EENDModel, key: str) -> bool:
    return key.startswith("backbone.") and model.backbone is not None and not model.backbone.trainable


def save_checkpoint(path, model: EENDModel, backbone_config: BackboneConfig, epoch: int,
                    val_loss: float | None = None, extra: dict | None = None) -> None:
    """Archive of named tensors plus metadata.

    Frozen backbone weights are not stored; they are rebuilt from the
    backbone config on load.
    """
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()
             if not _is_frozen_backbone_key(model, k)}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "state_dict": state,
        "metadata": {
            "config_hash": config_hash(model.config, backbone_config),
            "epoch": int(epoch),
            "val_loss": None if val_loss is None else float(val_loss),
            "encoder_config": asdict(model.config),
            "backbone_config": asdict(backbone_config),
        },
    }
    if extra:
        payload["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    return payload


def load_model(path, backbone: Backbone | None = None) -> tuple[EENDModel, dict]:
    payload = read_checkpoint(path)
    meta = payload["metadata"]
    encoder = EncoderConfig(**meta["encoder_config"])
    bconf = BackboneConfig(**meta["backbone_config"])
    if backbone is None:
        backbone = build_backbone(bconf)
    model = EENDModel(encoder, backbone=backbone)
    missing, unexpected = model.load_state_dict(payload["state_dict"], strict=False)
    missing = [k for k in missing if not _is_frozen_backbone_key(model, k)]
    if missing or unexpected:
        raise ValueError(f"{path}: state mismatch (missing={missing}, unexpected={unexpected})")
    model.eval()
    return model, meta
