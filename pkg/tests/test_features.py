import numpy as np
import pytest
import torch

from eendvc.features import (
    BackboneConfig,
    BackboneLoadError,
    FbankBackbone,
    LayerFusion,
    MockBackbone,
    SSLBackbone,
    backbone_forward,
    build_backbone,
    fuse_layers,
)
from eendvc.model import EncoderConfig, build_model, count_parameters
from eendvc.powerset import powerset_loss

EIGHT_SECONDS = 8 * 16000


def test_config_validation():
    with pytest.raises(ValueError, match="checkpoint_path"):
        BackboneConfig(kind="ssl")
    with pytest.raises(ValueError):
        BackboneConfig(kind="mfcc")
    with pytest.raises(ValueError):
        BackboneConfig(trainable="sometimes")


def test_fbank_path_shape():
    out = backbone_forward(FbankBackbone(), np.random.default_rng(0).standard_normal(EIGHT_SECONDS))
    assert out.layers.shape == (1, 1, 798, 80)
    assert out.frame_rate == 100


def test_mock_path_shape_and_determinism():
    x = np.random.default_rng(0).standard_normal(EIGHT_SECONDS).astype(np.float32)
    a = backbone_forward(MockBackbone(), x)
    b = backbone_forward(build_backbone(BackboneConfig("mock")), x)
    assert a.layers.shape == (2, 1, 399, 16) and a.frame_rate == 50
    assert torch.equal(a.layers, b.layers)
    assert not torch.equal(a.layers, backbone_forward(MockBackbone(seed=8), x).layers)


def test_mock_depends_on_input():
    rng = np.random.default_rng(1)
    a = backbone_forward(MockBackbone(), rng.standard_normal(16000)).layers
    b = backbone_forward(MockBackbone(), rng.standard_normal(16000)).layers
    assert not torch.allclose(a, b)


def test_fusion_onehot_logits_select_a_layer():
    layers = np.random.default_rng(0).standard_normal((3, 5, 4))
    logits = np.zeros(3)
    logits[1] = 1e6
    assert np.allclose(fuse_layers(layers, logits), layers[1], atol=1e-4)


def test_fusion_identical_layers():
    layer = np.random.default_rng(0).standard_normal((6, 4))
    for logits in ([0.0, 0.0, 0.0], [3.0, -1.0, 0.5]):
        assert np.allclose(fuse_layers([layer] * 3, np.array(logits)), layer)


def test_fusion_matches_direct_sum():
    rng = np.random.default_rng(0)
    layers = rng.standard_normal((3, 7, 5))
    logits = rng.standard_normal(3)
    w = np.exp(logits) / np.exp(logits).sum()
    want = w[0] * layers[0] + w[1] * layers[1] + w[2] * layers[2]
    assert np.allclose(fuse_layers(layers, logits), want, atol=1e-6)


def test_fusion_shift_invariance():
    rng = np.random.default_rng(4)
    layers = rng.standard_normal((4, 9, 3))
    logits = rng.standard_normal(4)
    assert np.allclose(fuse_layers(layers, logits), fuse_layers(layers, logits + 17.5), atol=1e-9)


def test_fusion_dimension_mismatch():
    with pytest.raises(ValueError):
        fuse_layers(np.zeros((3, 4, 2)), np.zeros(2))


def test_fusion_module_has_one_weight_per_layer():
    assert count_parameters(LayerFusion(13)) == 13


def _train_step(trainable: bool):
    backbone = MockBackbone(trainable=trainable)
    cfg = EncoderConfig(input_dim=16, model_dim=16, ff_dim=32, heads=2, conv_kernel=3, blocks=1, dropout=0.0)
    model = build_model(cfg, backbone=backbone, seed=0)
    before = {k: v.detach().clone() for k, v in model.named_parameters()}
    opt = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=1e-2)
    wave = torch.from_numpy(np.random.default_rng(0).standard_normal((2, 16000)).astype(np.float32))
    logp = model.forward_waveform(wave)
    target = torch.randint(0, 11, logp.shape[:2], generator=torch.Generator().manual_seed(0))
    powerset_loss(logp, target).backward()
    opt.step()
    changed = {k for k, v in model.named_parameters() if not torch.equal(v, before[k])}
    return changed


def test_frozen_backbone_stays_fixed_while_fusion_learns():
    changed = _train_step(trainable=False)
    assert not any(k.startswith("backbone.") for k in changed)
    assert "fusion.logits" in changed


def test_updated_backbone_changes():
    changed = _train_step(trainable=True)
    assert any(k.startswith("backbone.") for k in changed)
    assert "fusion.logits" in changed


def _tiny_wavlm(path):
    from transformers import WavLMConfig, WavLMModel

    cfg = WavLMConfig(hidden_size=32, num_hidden_layers=2, num_attention_heads=2, intermediate_size=64,
                      conv_dim=(16,) * 7, num_conv_pos_embeddings=16, num_conv_pos_embedding_groups=2,
                      num_buckets=32, max_bucket_distance=100)
    torch.manual_seed(0)
    WavLMModel(cfg).save_pretrained(path)
    return path


def test_ssl_loader_frame_count_and_layers(tmp_path):
    backbone = SSLBackbone(_tiny_wavlm(tmp_path / "wavlm"))
    x = np.random.default_rng(0).standard_normal(EIGHT_SECONDS).astype(np.float32) * 0.1
    out = backbone_forward(backbone, x)
    T = out.layers.shape[2]
    assert T in (399, 400)
    assert T == backbone.num_frames(EIGHT_SECONDS)
    assert out.layers.shape == (3, 1, T, 32)
    assert out.frame_rate == 50
    assert torch.equal(out.layers, backbone_forward(backbone, x).layers)
    assert all(not p.requires_grad for p in backbone.parameters())


def test_ssl_missing_checkpoint_names_path(tmp_path):
    with pytest.raises(BackboneLoadError, match="nowhere"):
        SSLBackbone(tmp_path / "nowhere")


def test_ssl_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "config.json").write_text("{not json")
    with pytest.raises(BackboneLoadError, match="bad"):
        SSLBackbone(bad)


def test_wavlm_base_plus_parameter_count():
    from transformers import WavLMConfig, WavLMModel

    # Base+ uses the default architecture: 12 layers, dim 768, ff 3072
    n = count_parameters(WavLMModel(WavLMConfig()))
    assert abs(n - 94.7e6) <= 0.01 * 94.7e6
