import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eegvlm.errors import DegenerateEpoch, ValidationError
from eegvlm.preprocess import LabeledEpoch
from eegvlm.render import RenderConfig, content_digest, load_png, png_digest, render_epoch, save_png, trace_coordinates
from eegvlm.stages import Stage

CFG = RenderConfig()


def epoch(samples, stage=Stage.N2):
    return LabeledEpoch(np.asarray(samples, dtype=float), 100.0, stage, "rec", 7)


def dark(img, threshold=250):
    return img.pixels[..., 0] < threshold


def vertical_extent(img):
    rows = np.nonzero(dark(img).any(axis=1))[0]
    return rows.max() - rows.min()


def test_zero_signal_is_midline():
    img = render_epoch(epoch(np.zeros(3000)))
    assert img.pixels.shape == (224, 224, 3)
    rows = np.nonzero(dark(img))[0]
    assert np.all(np.abs(rows - (CFG.height_px - 1) / 2) <= CFG.line_width_px)


def test_background_purity():
    img = render_epoch(epoch(np.zeros(3000)))
    rows = np.arange(CFG.height_px)
    far = np.abs(rows - (CFG.height_px - 1) / 2) > CFG.line_width_px + 1
    assert np.all(img.pixels[far] == 255)


def test_clipping_pins_trace_to_top():
    img = render_epoch(epoch(np.full(3000, 1000.0)))
    rows = np.nonzero(dark(img))[0]
    assert rows.max() <= CFG.line_width_px


def test_sine_rows_match_analytic_mapping():
    t = np.arange(3000) / 100.0
    x = 100.0 * np.sin(2 * np.pi * 10 * t)
    img = render_epoch(epoch(x))
    mask = dark(img, threshold=128)
    assert mask.any(axis=0).all()
    _, y = trace_coordinates(x, CFG)
    rows = np.nonzero(mask.any(axis=1))[0]
    assert abs(rows.min() - y.min()) <= 1
    assert abs(rows.max() - y.max()) <= 1


def test_unit_sine_covers_every_column():
    t = np.arange(3000) / 100.0
    img = render_epoch(epoch(np.sin(2 * np.pi * 10 * t)))
    assert dark(img).any(axis=0).all()


def test_determinism():
    x = np.random.default_rng(3).standard_normal(3000) * 50
    a, b = render_epoch(epoch(x)), render_epoch(epoch(x))
    assert np.array_equal(a.pixels, b.pixels)
    assert a.digest() == b.digest()


@given(st.floats(0.1, 0.9), st.integers(0, 10_000))
def test_amplitude_monotonicity(scale, seed):
    t = np.arange(3000) / 100.0
    rng = np.random.default_rng(seed)
    x = 140 * np.sin(2 * np.pi * rng.uniform(0.5, 3) * t + rng.uniform(0, 6))
    assert vertical_extent(render_epoch(epoch(scale * x))) < vertical_extent(render_epoch(epoch(x)))


def test_degenerate_epoch():
    with pytest.raises(DegenerateEpoch):
        render_epoch(epoch([1.0]))


def test_config_validation():
    with pytest.raises(ValidationError):
        RenderConfig(width_px=16)
    with pytest.raises(ValidationError):
        RenderConfig(amplitude_range_uv=0)


def test_png_round_trip(tmp_path):
    ep = epoch(np.random.default_rng(0).standard_normal(3000) * 30)
    img = render_epoch(ep)
    assert img.filename == "rec_7_N2.png"
    path = save_png(img, tmp_path / img.filename, content_digest(ep, CFG))
    assert np.array_equal(load_png(path), img.pixels)
    assert png_digest(path) == content_digest(ep, CFG)
    assert png_digest(tmp_path / "missing.png") is None


def test_content_digest_tracks_inputs():
    ep = epoch(np.zeros(3000))
    assert content_digest(ep, CFG) != content_digest(ep, RenderConfig(amplitude_range_uv=100))
    assert content_digest(ep, CFG) != content_digest(epoch(np.ones(3000)), CFG)
