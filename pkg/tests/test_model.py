import numpy as np
import pytest
import torch
import torch.nn.functional as F
from PIL import Image

from noisyssl.model import (CheckpointError, EncoderConfig, Head, build_model, encoder_digest,
                            export_filter_grid, load_checkpoint, load_into, param_count,
                            predict_logits, render_filter_grid, save_checkpoint)

TINY = EncoderConfig.preset("tiny")


def test_tiny_classifier_output_shape():
    net = build_model(TINY, Head.classifier(3), seed=0)
    assert net(torch.randn(4, 3, 32, 32)).shape == (4, 3)
    assert 100_000 < param_count(net) < 400_000


def test_permutation_head_width_and_shape():
    net = build_model(TINY, Head.permutation(1000, 9), seed=0)
    assert net.head.in_features == 9 * 128 == 1152
    out = net(torch.randn(2, 9, 3, 16, 16))
    assert out.shape == (2, 1000)
    with pytest.raises(ValueError, match="patches"):
        net(torch.randn(2, 4, 3, 16, 16))


@pytest.mark.parametrize("name", ["tiny", "resnet18"])
def test_encoder_output_matches_feature_dim(name):
    cfg = EncoderConfig.preset(name)
    net = build_model(cfg, Head.classifier(2), seed=0).eval()
    assert net.encoder(torch.randn(2, 3, 32, 32)).shape == (2, cfg.feature_dim)


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(stages=())
    with pytest.raises(ValueError):
        EncoderConfig(feature_dim=64)
    with pytest.raises(ValueError):
        Head("rotation", 3)


def test_build_is_deterministic_and_leaves_global_rng_alone():
    torch.manual_seed(99)
    before = torch.rand(1)
    torch.manual_seed(99)
    a = build_model(TINY, Head.classifier(3), seed=5)
    after = torch.rand(1)
    assert torch.equal(before, after)
    b = build_model(TINY, Head.classifier(3), seed=5)
    c = build_model(TINY, Head.classifier(3), seed=6)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    assert encoder_digest(a) != encoder_digest(c)


def test_eval_forward_is_deterministic():
    net = build_model(TINY, Head.classifier(3), seed=0).eval()
    x = torch.randn(3, 3, 32, 32)
    assert torch.equal(net(x), net(x))


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    net = build_model(TINY, Head.rotation(), seed=1)
    net.train()
    net(torch.randn(8, 3, 32, 32))  # move batch-norm running stats off their defaults
    path = save_checkpoint(net, {"pretext": "rotation", "dataset": "synthetic", "epochs": 1, "seed": 1},
                           tmp_path / "rot.npz")
    ckpt = load_checkpoint(path)
    assert ckpt.provenance["pretext"] == "rotation"
    other = build_model(TINY, Head.rotation(), seed=2)
    assert load_into(other, ckpt) is True
    for (k, v), v2 in zip(net.state_dict().items(), other.state_dict().values()):
        assert torch.equal(v, v2), k


def test_pretext_checkpoint_into_classifier_keeps_fresh_head(tmp_path):
    rot = build_model(TINY, Head.rotation(), seed=1)
    path = save_checkpoint(rot, {"pretext": "rotation"}, tmp_path / "rot.npz")
    clf = build_model(TINY, Head.classifier(3), seed=7)
    fresh_head = {k: v.clone() for k, v in clf.head.state_dict().items()}
    assert load_into(clf, load_checkpoint(path)) is False
    assert encoder_digest(clf) == encoder_digest(rot)
    for k, v in clf.head.state_dict().items():
        assert torch.equal(v, fresh_head[k])


def test_checkpoint_init_string(tmp_path):
    rot = build_model(TINY, Head.rotation(), seed=1)
    path = save_checkpoint(rot, {"pretext": "rotation"}, tmp_path / "rot.npz")
    cfg = EncoderConfig(init=f"checkpoint:{path}")
    assert encoder_digest(build_model(cfg, Head.classifier(2), seed=3)) == encoder_digest(rot)


def test_mismatched_checkpoint_names_offending_array(tmp_path):
    wide = EncoderConfig(stages=((32, 1, 1), (64, 1, 2), (96, 1, 2)), feature_dim=96)
    path = save_checkpoint(build_model(wide, Head.classifier(3)), {}, tmp_path / "wide.npz")
    with pytest.raises(CheckpointError, match=r"encoder/layers\.2\.conv1\.weight"):
        load_into(build_model(TINY, Head.classifier(3)), load_checkpoint(path))


def test_checkpoint_version_mismatch(tmp_path):
    import json

    path = save_checkpoint(build_model(TINY, Head.classifier(3)), {}, tmp_path / "a.npz")
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays["__meta__"].tobytes())
    meta["format_version"] = 99
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "b.npz", **arrays)
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(tmp_path / "b.npz")


def test_filter_grid_dimensions_and_determinism(tmp_path):
    cfg = EncoderConfig(stem_channels=64)
    net = build_model(cfg, Head.classifier(3), seed=0)
    a = export_filter_grid(net, tmp_path / "a.png", count=16, seed=4, scale=8)
    b = export_filter_grid(net, tmp_path / "b.png", count=16, seed=4, scale=8)
    # 4 cells of 3*8 pixels plus 5 one-pixel separators
    assert Image.open(a).size == (4 * 24 + 5, 4 * 24 + 5)
    assert a.read_bytes() == b.read_bytes()
    with pytest.raises(ValueError):
        render_filter_grid(net, count=65)


def test_constant_filter_renders_mid_gray():
    net = build_model(TINY, Head.classifier(3), seed=0)
    with torch.no_grad():
        net.encoder.first_conv.weight.fill_(0.3)
    grid = render_filter_grid(net, count=1, scale=1, pad=0)
    assert np.all(grid == 0.5)


def test_filters_are_normalized_individually():
    net = build_model(TINY, Head.classifier(3), seed=0)
    grid = render_filter_grid(net, count=1, scale=1, pad=0)
    assert grid.min() == 0.0 and grid.max() == 1.0


def test_predict_logits_restores_mode():
    net = build_model(TINY, Head.classifier(3), seed=0)
    net.train()
    out = predict_logits(net, np.zeros((3, 32, 32, 3), dtype=np.float32), batch_size=2)
    assert out.shape == (3, 3)
    assert net.training


def test_cross_entropy_gradient_matches_finite_differences():
    torch.manual_seed(0)
    cfg = EncoderConfig(input_size=(8, 8, 3))
    net = build_model(cfg, Head.classifier(3), seed=0).double().eval()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    y = torch.tensor([0, 2])

    def loss():
        return F.cross_entropy(net(x), y)

    params = [net.encoder.first_conv.weight, net.encoder.layers[1].conv2.weight, net.head.weight]
    net.zero_grad()
    loss().backward()
    gen = np.random.default_rng(0)
    eps = 1e-6
    for p in params:
        flat = p.data.view(-1)
        for j in gen.choice(flat.numel(), size=5, replace=False):
            orig = flat[j].item()
            flat[j] = orig + eps
            up = loss().item()
            flat[j] = orig - eps
            down = loss().item()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            analytic = p.grad.view(-1)[j].item()
            denom = max(abs(numeric), abs(analytic), 1e-8)
            assert abs(numeric - analytic) / denom < 1e-3
