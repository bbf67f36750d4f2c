import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from eendvc.features import BackboneConfig, MockBackbone
from eendvc.model import EncoderConfig, build_model, save_checkpoint
from eendvc.powerset import enumerate_powerset
from eendvc.signal_io import Annotation, ManifestEntry, Turn, read_manifest
from eendvc.synthetic import make_corpus
from eendvc.training import (
    AutoClip,
    ChunkDataset,
    TrainConfig,
    TrainingError,
    autoclip_threshold,
    average_checkpoints,
    batch_loss,
    chunk_targets,
    early_stop,
    global_grad_norm,
    make_chunks,
    make_optimizer,
    rasterize,
    train_epoch,
)
from oracles import percentile_linear

SMALL = EncoderConfig(input_dim=16, model_dim=16, ff_dim=32, heads=2, conv_kernel=3, blocks=1, dropout=0.0)


def entry(duration, rec="r"):
    return ManifestEntry(rec, f"{rec}.wav", None, None, duration)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return read_manifest(make_corpus(tmp_path_factory.mktemp("corpus"), 2, duration=20.0, seed=5))


def dataset(manifest, backbone, cfg=TrainConfig()):
    return ChunkDataset(manifest, make_chunks(manifest, cfg.chunk_len, cfg.chunk_hop), backbone.num_frames,
                        backbone.frame_rate, 4)


def test_chunk_examples():
    assert make_chunks([entry(20.0)]) == [("r", 0, 8), ("r", 6, 14), ("r", 12, 20)]
    assert len(make_chunks([entry(8.0)])) == 1
    with pytest.warns(UserWarning, match="shorter"):
        assert make_chunks([entry(7.9)]) == []


@settings(max_examples=100, deadline=None)
@given(st.floats(8, 500), st.sampled_from([(8.0, 6.0), (8.0, 8.0), (5.0, 0.5), (4.0, 3.0)]))
def test_chunk_grid(duration, geometry):
    length, hop = geometry
    chunks = make_chunks([entry(duration)], length, hop)
    assert [c.start for c in chunks] == pytest.approx([k * hop for k in range(len(chunks))])
    assert all(abs(c.end - c.start - length) < 1e-9 for c in chunks)
    assert chunks[-1].end <= duration + 1e-6
    # the next chunk would not fit
    assert chunks[-1].start + hop + length > duration - 1e-6


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(chunk_hop=9.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=100, max_epochs=100)
    with pytest.raises(ValueError):
        TrainConfig(lr_main=-1e-3)
    with pytest.raises(ValueError):
        TrainConfig(effective_batch=60, micro_batch=8)
    assert TrainConfig().grad_accum == 8


def test_autoclip_examples():
    assert autoclip_threshold(list(range(1, 11)), 90) == 9.1
    assert autoclip_threshold([5.0], 37) == 5.0
    assert autoclip_threshold([2.5] * 9, 90) == 2.5
    with pytest.raises(ValueError):
        autoclip_threshold([], 90)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=60), st.floats(0.5, 100))
def test_autoclip_matches_percentile_oracle(history, q):
    assert abs(autoclip_threshold(history, q) - percentile_linear(history, q)) <= 1e-9 * max(1.0, max(history))


def test_exploding_gradient_is_clipped():
    model = build_model(SMALL, num_layers=2, seed=0)
    params = list(model.parameters())
    clipper = AutoClip(90)
    rng = torch.Generator().manual_seed(0)
    for _ in range(20):
        for p in params:
            p.grad = torch.randn(p.shape, generator=rng) * 0.01
        clipper(params)
    for p in params:
        p.grad = torch.randn(p.shape, generator=rng) * 1e6
    norm, threshold = clipper(params)
    assert norm > 1e6
    assert global_grad_norm(params) <= threshold + 1e-6
    assert threshold == pytest.approx(np.percentile(clipper.history, 90))


def test_early_stop_examples():
    assert not early_stop([3, 2, 1], 10)
    assert early_stop([1] + [1, 2, 1.5, 1, 3, 4, 1, 1, 1.2, 9], 10)
    vals = list(np.linspace(10, 1, 100))
    assert not any(early_stop(vals[:n], 10) for n in range(1, 101))
    assert not early_stop([], 3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=30), st.integers(1, 5))
def test_early_stop_fires_at_first_qualifying_epoch(vals, patience):
    def no_improvement(n):
        # the last `patience` epochs never beat the best of the earlier ones
        return n > patience and min(vals[n - patience:n]) >= min(vals[:n - patience])

    for n in range(1, len(vals) + 1):
        assert early_stop(vals[:n], patience) == no_improvement(n)


def _ckpts(tmp_path, values, cfg=SMALL, bconf=BackboneConfig("mock")):
    paths = []
    for epoch, v in enumerate(values, start=1):
        model = build_model(cfg, backbone=MockBackbone(), seed=0)
        with torch.no_grad():
            for p in model.parameters():
                if p.requires_grad:
                    p.fill_(v)
        path = tmp_path / f"epoch_{epoch:04d}.pt"
        save_checkpoint(path, model, bconf, epoch)
        paths.append(path)
    return paths


def test_average_two_checkpoints(tmp_path):
    state, meta = average_checkpoints(_ckpts(tmp_path, [1.0, 3.0]), last_n=5)
    assert torch.all(state["head.weight"] == 2.0)
    assert meta["averaged_epochs"] == [1, 2]


def test_average_last_one_is_identity(tmp_path):
    paths = _ckpts(tmp_path, [1.0, 3.0, 7.0])
    state, _ = average_checkpoints(paths, last_n=1)
    assert torch.all(state["projection.0.weight"] == 7.0)


def test_average_last_five_of_seven(tmp_path):
    values = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]
    paths = _ckpts(tmp_path, values)
    state, meta = average_checkpoints(list(reversed(paths)), last_n=5)
    assert meta["averaged_epochs"] == [3, 4, 5, 6, 7]
    assert torch.allclose(state["head.bias"], torch.full_like(state["head.bias"], np.mean(values[2:])))


def test_average_rejects_mixed_configs(tmp_path):
    a = _ckpts(tmp_path, [1.0])
    other = tmp_path / "other"
    other.mkdir()
    b = _ckpts(other, [1.0], cfg=EncoderConfig(input_dim=16, model_dim=16, ff_dim=64, heads=2,
                                               conv_kernel=3, blocks=1))
    with pytest.raises(ValueError, match="different configs"):
        average_checkpoints(a + b)


def test_averaged_weights_not_averaged_outputs(tmp_path):
    cfg = EncoderConfig(input_dim=4, model_dim=4, heads=2, blocks=0, dropout=0.0)
    bconf = BackboneConfig("fbank")
    base = build_model(cfg, seed=0).eval()
    heads = []
    for epoch, seed in ((1, 1), (2, 2)):
        m = build_model(cfg, seed=0)
        m.head.load_state_dict(build_model(cfg, seed=seed).head.state_dict())
        save_checkpoint(tmp_path / f"e{epoch}.pt", m, bconf, epoch)
        heads.append(m.head)
    state, _ = average_checkpoints([tmp_path / "e1.pt", tmp_path / "e2.pt"], last_n=2)
    avg = build_model(cfg).eval()
    avg.load_state_dict(state)
    x = torch.randn(6, 4, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        h = base.projection(x)
        W = (heads[0].weight + heads[1].weight) / 2
        b = (heads[0].bias + heads[1].bias) / 2
        expected = torch.log_softmax(h @ W.T + b, dim=-1)
        assert torch.allclose(avg(x), expected, atol=1e-6)
        mean_of_outputs = (torch.log_softmax(heads[0](h), -1) + torch.log_softmax(heads[1](h), -1)) / 2
        assert not torch.allclose(avg(x), mean_of_outputs, atol=1e-4)


def test_rasterize_majority_coverage():
    ann = Annotation("r", [Turn("a", 0.0, 0.05), Turn("b", 0.03, 0.1)])
    speakers, cov = rasterize(ann, 0.0, 5, 50.0)
    assert speakers == ["a", "b"]
    assert np.allclose(cov[:, 0], [1, 1, 0.5, 0, 0])
    assert np.allclose(cov[:, 1], [0, 0.5, 1, 1, 1])
    labels, _ = chunk_targets(ann, 0.0, 5, 50.0, 4)
    assert labels[:, 0].tolist() == [1, 1, 1, 0, 0]
    assert labels[:, 2:].sum() == 0


def test_chunk_targets_keep_most_active_speakers():
    ann = Annotation("r", [Turn(s, 0, d) for s, d in zip("abcde", (0.1, 0.5, 0.3, 0.4, 0.2))])
    labels, _ = chunk_targets(ann, 0.0, 25, 50.0, 3)
    # b, d and c are kept, in name order
    assert labels.sum(axis=0).tolist() == [25.0, 15.0, 20.0]


def test_dataset_shapes(corpus):
    bb = MockBackbone()
    data = dataset(corpus, bb)
    assert len(data) == 6
    wave, labels, cov = next(data.batches(4))
    assert wave.shape == (4, 128000)
    assert labels.shape == (4, bb.num_frames(128000), 4)
    assert cov.shape == labels.shape


def test_one_step_decreases_loss(corpus):
    bb = MockBackbone()
    model = build_model(SMALL, backbone=bb, seed=0).eval()
    wave, labels, cov = next(dataset(corpus, bb).batches(4))
    catalog = enumerate_powerset(4, 2)
    opt = make_optimizer(model, TrainConfig(lr_main=1e-3))
    before = batch_loss(model, wave, labels, cov, catalog)
    before.backward()
    opt.step()
    with torch.no_grad():
        after = batch_loss(model, wave, labels, cov, catalog)
    assert after.item() < before.item()


def test_frozen_backbone_bit_identical_after_epoch(corpus):
    bb = MockBackbone()
    model = build_model(SMALL, backbone=bb, seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    cfg = TrainConfig(effective_batch=4, micro_batch=2)
    opt = make_optimizer(model, cfg)
    assert [g["name"] for g in opt.param_groups] == ["main"]
    loss, threshold = train_epoch(model, dataset(corpus, bb), opt, cfg, AutoClip(90), np.random.default_rng(0))
    assert np.isfinite(loss) and threshold > 0
    after = model.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before if k.startswith("backbone."))
    assert not torch.equal(before["head.weight"], after["head.weight"])


def test_updated_backbone_gets_its_own_learning_rate(corpus):
    bb = MockBackbone(trainable=True)
    model = build_model(SMALL, backbone=bb, seed=0)
    opt = make_optimizer(model, TrainConfig(lr_main=1e-3, lr_backbone=1e-5))
    lrs = {g["name"]: g["lr"] for g in opt.param_groups}
    assert lrs == {"main": 1e-3, "backbone": 1e-5}
    before = bb.proj0.detach().clone()
    cfg = TrainConfig(effective_batch=4, micro_batch=2, lr_backbone=1e-3)
    train_epoch(model, dataset(corpus, bb), make_optimizer(model, cfg), cfg, AutoClip(90))
    assert not torch.equal(before, bb.proj0)


def test_non_finite_loss_aborts(corpus):
    bb = MockBackbone()
    model = build_model(SMALL, backbone=bb, seed=0)
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    cfg = TrainConfig(effective_batch=2, micro_batch=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(TrainingError, match="non-finite"):
            train_epoch(model, dataset(corpus, bb), make_optimizer(model, cfg), cfg, AutoClip(90))
