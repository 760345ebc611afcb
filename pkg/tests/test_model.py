import numpy as np
import pytest
import torch

from cephalo.model import (VARIANTS, ConvNeXtV2, LandmarkNet, ModelSpec,
                           adapt_input_to_single_channel, build_model,
                           load_encoder_weights, parameter_count)


def eval_spec(variant="nano", **kw):
    return ModelSpec(variant=variant, encoder_drop_path=0.0, decoder_drop_path=0.0,
                     residual_dropout2d=0.0, **kw)


@pytest.fixture(scope="module")
def nano():
    torch.manual_seed(0)
    return build_model(eval_spec("nano")).eval()


def test_unknown_variant_rejected():
    with pytest.raises(ValueError, match="variant"):
        ModelSpec(variant="giant")


def test_spec_rate_bounds():
    with pytest.raises(ValueError):
        ModelSpec(encoder_drop_path=1.0)
    with pytest.raises(ValueError):
        ModelSpec(n_landmarks=0)


def test_shape_contract_256(nano):
    x = torch.randn(1, 1, 256, 256)
    with torch.no_grad():
        y = nano(x)
    assert y.shape == (1, 53, 256, 256)
    assert torch.isfinite(y).all()


def test_shape_contract_non_multiple_of_32(nano):
    # 613 is padded to 640 internally and cropped back
    x = torch.randn(1, 1, 96, 613 % 256 + 64)  # 96 x 165
    with torch.no_grad():
        y = nano(x)
    assert y.shape == (1, 53, 96, 165)


def test_all_zero_input_finite(nano):
    with torch.no_grad():
        y = nano(torch.zeros(1, 1, 64, 64))
    assert torch.isfinite(y).all()


def test_eval_determinism(nano):
    x = torch.randn(1, 1, 64, 64)
    with torch.no_grad():
        a = nano(x)
        b = nano(x)
    assert torch.equal(a, b)


def test_dropout_layers_active_in_train_mode():
    torch.manual_seed(0)
    model = build_model(ModelSpec(variant="nano")).train()
    x = torch.randn(1, 1, 64, 64)
    torch.manual_seed(1)
    a = model(x)
    torch.manual_seed(2)
    b = model(x)
    assert not torch.equal(a, b)


def test_parameter_budget():
    nano_params = parameter_count(LandmarkNet(eval_spec("nano")))
    tiny_params = parameter_count(LandmarkNet(eval_spec("tiny")))
    assert nano_params < tiny_params
    for params in (nano_params, tiny_params):
        assert 22e6 / 2 < params < 22e6 * 2


def test_gradient_reaches_every_parameter():
    import numpy as np

    from cephalo.heatmap import encode_target, heatmap_loss

    torch.manual_seed(0)
    model = build_model(eval_spec("nano", n_landmarks=4))
    x = torch.randn(1, 1, 64, 64)
    target = encode_target(np.random.default_rng(0).uniform(5, 59, (4, 2)), 64, 64)
    loss = heatmap_loss(model(x), target.maps.unsqueeze(0), target.valid.unsqueeze(0))
    loss.backward()
    dead = [name for name, p in model.named_parameters()
            if p.grad is None or float(p.grad.abs().sum()) == 0.0]
    # the head's final bias shifts every logit of a plane equally, which the
    # plane softmax cancels; it is the only parameter allowed a zero gradient
    assert dead in ([], ["head.2.bias"])


def test_adapt_input_to_single_channel_values():
    w = torch.ones(8, 3, 4, 4)
    summed = adapt_input_to_single_channel(w)
    assert summed.shape == (8, 1, 4, 4)
    assert torch.equal(summed, torch.full((8, 1, 4, 4), 3.0))

    zeros = adapt_input_to_single_channel(torch.zeros(2, 3, 4, 4))
    assert torch.equal(zeros, torch.zeros(2, 1, 4, 4))

    with pytest.raises(ValueError, match="3-input-channel"):
        adapt_input_to_single_channel(torch.ones(8, 1, 4, 4))


def test_stem_adaptation_equivalence():
    """Summed single-channel stem == 3-channel stem on replicated grayscale input."""
    torch.manual_seed(3)
    rgb_stem = torch.nn.Conv2d(3, 16, kernel_size=4, stride=4)
    gray_stem = torch.nn.Conv2d(1, 16, kernel_size=4, stride=4)
    with torch.no_grad():
        gray_stem.weight.copy_(adapt_input_to_single_channel(rgb_stem.weight))
        gray_stem.bias.copy_(rgb_stem.bias)
    gray = torch.randn(2, 1, 64, 64)
    with torch.no_grad():
        out_rgb = rgb_stem(gray.repeat(1, 3, 1, 1))
        out_gray = gray_stem(gray)
    assert float((out_rgb - out_gray).abs().max()) < 1e-5


def test_full_model_equivalence_after_stem_adaptation():
    torch.manual_seed(4)
    spec = eval_spec("nano", n_landmarks=4)
    rgb_encoder = ConvNeXtV2(in_chans=3, depths=VARIANTS["nano"]["depths"],
                             dims=VARIANTS["nano"]["dims"]).eval()
    model = LandmarkNet(spec).eval()
    # transplant the rgb encoder with a summed stem into the grayscale model
    state = rgb_encoder.state_dict()
    state["downsample_layers.0.0.weight"] = adapt_input_to_single_channel(
        state["downsample_layers.0.0.weight"])
    model.encoder.load_state_dict(state)

    gray = torch.randn(1, 1, 64, 64)
    with torch.no_grad():
        out_gray = model.head(model.up_blocks(model.pyramid(model.encoder(gray))))
        feats_rgb = rgb_encoder(gray.repeat(1, 3, 1, 1))
        out_rgb = model.head(model.up_blocks(model.pyramid(feats_rgb)))
    assert float((out_gray - out_rgb).abs().max()) < 1e-5


def test_load_encoder_weights_round_trip(tmp_path):
    torch.manual_seed(5)
    source = ConvNeXtV2(in_chans=3, depths=(2, 2, 8, 2), dims=(80, 160, 320, 640))
    path = tmp_path / "encoder.pt"
    torch.save({"model": source.state_dict()}, path)

    spec = eval_spec("nano", pretrained_weights_ref=str(path))
    model = build_model(spec)
    expected = adapt_input_to_single_channel(source.state_dict()["downsample_layers.0.0.weight"])
    assert torch.equal(model.encoder.state_dict()["downsample_layers.0.0.weight"], expected)


def test_load_encoder_weights_registry_and_errors(tmp_path):
    torch.manual_seed(6)
    source = ConvNeXtV2(in_chans=1, depths=(2, 2, 8, 2), dims=(80, 160, 320, 640))
    (tmp_path / "reg").mkdir()
    torch.save(source.state_dict(), tmp_path / "reg" / "nano_base.pt")
    model = build_model(eval_spec("nano", pretrained_weights_ref="nano_base"),
                        weights_registry=tmp_path / "reg")
    assert torch.equal(model.encoder.state_dict()["stages.0.0.dwconv.weight"],
                       source.state_dict()["stages.0.0.dwconv.weight"])

    with pytest.raises(FileNotFoundError):
        build_model(eval_spec("nano", pretrained_weights_ref="missing_ref"))

    # tiny weights into a nano model: shape mismatch names the layer
    wrong = ConvNeXtV2(in_chans=1, depths=(3, 3, 9, 3), dims=(96, 192, 384, 768))
    torch.save(wrong.state_dict(), tmp_path / "wrong.pt")
    with pytest.raises(ValueError, match="downsample_layers.0.0.weight|missing"):
        load_encoder_weights(ConvNeXtV2(), str(tmp_path / "wrong.pt"))


def test_rejects_bad_input_shape(nano):
    with pytest.raises(ValueError, match="B x 1 x H x W"):
        nano(torch.randn(1, 3, 64, 64))
