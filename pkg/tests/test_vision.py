import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from eegvlm.errors import EmptyDataset, NonFiniteLoss, ShapeMismatch, ValidationError
from eegvlm.vision import (
    SemanticFeature,
    VisionConfig,
    VisionModule,
    extract_features,
    load_vision,
    predict,
    save_vision,
    train_vision,
    write_log_csv,
)

SMALL = VisionConfig(input_size=(3, 32, 32), width_scale=1 / 8)


def finite_difference_check(seed: int = 0, coords: int = 20, step: float = 1e-3):
    """Relative errors between autograd and central differences of a scalar loss."""
    torch.manual_seed(seed)
    model = VisionModule(SMALL).double().eval()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)
    target = torch.tensor([2])

    def loss_fn(inp):
        return torch.nn.functional.cross_entropy(model(inp), target)

    loss_fn(x).backward()
    grad = x.grad.detach().flatten()
    rng = np.random.default_rng(seed)
    errors = []
    for idx in rng.choice(grad.numel(), coords, replace=False):
        with torch.no_grad():
            xp = x.detach().clone().flatten()
            xm = xp.clone()
            xp[idx] += step
            xm[idx] -= step
            numeric = (loss_fn(xp.view_as(x)) - loss_fn(xm.view_as(x))).item() / (2 * step)
        analytic = grad[idx].item()
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return np.array(errors)


def test_full_size_feature_map_shape():
    model = VisionModule().eval()
    feat = model.forward_features(torch.rand(1, 3, 224, 224))
    assert tuple(feat.spatial_map.shape[1:]) == (1024, 7, 7)
    assert tuple(feat.pooled.shape) == (1, 1024)
    assert VisionConfig().feature_grid == (7, 7)
    # widened last block: 1x1 projection on the shortcut
    proj = model.layer4[1].downsample[0]
    assert (proj.in_channels, proj.out_channels, proj.kernel_size) == (512, 1024, (1, 1))
    assert model.layer4[1].bn2.num_features == 1024


def test_inference_determinism():
    model = VisionModule(SMALL).eval()
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        a, b = model.forward_features(x), model.forward_features(x.clone())
    assert torch.equal(a.pooled, b.pooled)


def test_pooled_is_mean_of_map():
    model = VisionModule(SMALL).eval()
    with torch.no_grad():
        f = model.forward_features(torch.rand(3, 3, 32, 32))
    torch.testing.assert_close(f.pooled, f.spatial_map.mean(dim=(2, 3)), atol=1e-6, rtol=0)


def test_gradient_matches_finite_differences():
    errors = finite_difference_check()
    assert errors.size >= 20
    assert errors.max() < 1e-4, errors


@settings(max_examples=8)
@given(st.floats(0.01, 1.0))
def test_channel_contract(scale):
    cfg = VisionConfig(input_size=(3, 32, 32), width_scale=scale)
    assert cfg.feature_channels == max(1, round(1024 * scale))


@pytest.mark.parametrize("scale", [1 / 8, 0.3])
def test_channel_contract_in_forward(scale):
    cfg = VisionConfig(input_size=(3, 32, 32), width_scale=scale)
    with torch.no_grad():
        f = VisionModule(cfg).eval().forward_features(torch.rand(1, 3, 32, 32))
    assert f.pooled.shape[1] == round(1024 * scale)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        VisionModule(SMALL)(torch.rand(1, 3, 64, 64))


def test_config_validation():
    with pytest.raises(ValidationError):
        VisionConfig(width_scale=0)
    with pytest.raises(ValidationError):
        VisionConfig(final_conv_out_channels=512)


def tiny_head(weight=None):
    cfg = VisionConfig(input_size=(3, 32, 32), width_scale=2 / 1024, head="pooled")
    model = VisionModule(cfg)
    assert model.fc.in_features == 2
    with torch.no_grad():
        model.fc.bias.zero_()
        if weight is not None:
            model.fc.weight.copy_(torch.as_tensor(weight))
    return model


def test_classify_zero_and_linear():
    model = VisionModule(SMALL)
    with torch.no_grad():
        model.fc.bias.zero_()
        zero = SemanticFeature(torch.zeros(1, 128), torch.zeros(1, 128, 1, 1))
        assert not model.classify(zero).any()
        f = model.eval().forward_features(torch.rand(1, 3, 32, 32))
        doubled = SemanticFeature(2 * f.pooled, 2 * f.spatial_map)
        torch.testing.assert_close(model.classify(doubled), 2 * model.classify(f))


def test_classify_hand_set_weights():
    w = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0], [-0.5, 3.0]]
    model = tiny_head(w)
    logits = model.classify(SemanticFeature(torch.tensor([[2.0, 3.0]])))
    torch.testing.assert_close(logits, torch.tensor([[2.0, 3.0, 5.0, 1.0, 8.0]]))


@pytest.fixture(scope="module")
def ten_images():
    g = torch.Generator().manual_seed(0)
    return torch.rand(10, 3, 32, 32, generator=g), np.arange(10) % 5


def test_overfit_small_set(ten_images):
    x, y = ten_images
    res = train_vision(x, y, config=SMALL, epochs=200, max_steps=200, seed=0)
    assert len(res.step_losses) == 200
    assert (predict(res.model, x) == y).mean() == 1.0
    k = len(res.step_losses) // 10
    assert np.median(res.step_losses[-k:]) < np.median(res.step_losses[:k])


def test_training_determinism(ten_images):
    x, y = ten_images
    a = train_vision(x, y, config=SMALL, epochs=2, seed=5)
    b = train_vision(x, y, config=SMALL, epochs=2, seed=5)
    assert a.final_loss == b.final_loss


def test_zero_learning_rate_keeps_parameters(ten_images):
    x, y = ten_images
    torch.manual_seed(0)
    model = VisionModule(SMALL)
    before = {k: v.clone() for k, v in model.named_parameters()}
    train_vision(x, y, config=SMALL, epochs=3, learning_rate=0.0, model=model)
    for k, v in model.named_parameters():
        assert torch.equal(v, before[k]), k


def test_training_errors(ten_images):
    x, y = ten_images
    with pytest.raises(EmptyDataset):
        train_vision(x[:0], y[:0], config=SMALL)
    with pytest.raises(NonFiniteLoss):
        train_vision(torch.full_like(x, float("nan")), y, config=SMALL, epochs=1)


def test_checkpoint_round_trip(tmp_path, ten_images):
    x, y = ten_images
    res = train_vision(x, y, config=SMALL, epochs=1)
    path = save_vision(res.model, tmp_path / "v.npz", seed=0, epochs=1)
    again = load_vision(path)
    np.testing.assert_allclose(extract_features(again, x), extract_features(res.model, x), rtol=0, atol=1e-6)
    write_log_csv(res.log, tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,loss,accuracy"
