"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""

import json
import time

import numpy as np
import pytest
import torch
import yaml
from scipy import signal as sps

from eegvlm import edf
from eegvlm.align import align, expand
from eegvlm.cli import main
from eegvlm.cot import MockVLMClient, build_cot_dataset, export_jsonl
from eegvlm.evaluate import confusion, metrics, split_dataset
from eegvlm.preprocess import FilterSpec, apply_filter, design_bandpass
from eegvlm.stages import CLASS_ORDER, Stage
from eegvlm.synthetic import balanced_stages, fixture_recording, write_fixture
from eegvlm.vision import VisionModule
from oracles import tally_metrics
from test_vision import finite_difference_check


# 1 ---------------------------------------------------------------- EDF round trip


def random_recording(seed):
    rng = np.random.default_rng(seed)
    fs = float(rng.choice([50, 100, 128, 200, 256]))
    stages = [CLASS_ORDER[i] for i in rng.integers(0, 5, rng.integers(1, 8))]
    rec = fixture_recording(stages, fs=fs, seed=seed, with_second_channel=bool(rng.integers(0, 2)))
    return rec


def test_criterion_1_edf_round_trip(acceptance):
    start = time.monotonic()
    failures = 0
    for seed in range(20):
        rec = random_recording(seed)
        raw = edf.write_edf(rec)
        parsed = edf.parse_edf(raw)
        same = parsed.header == rec.header and all(
            a.spec == b.spec and np.array_equal(a.digital, b.digital) for a, b in zip(parsed.signals, rec.signals)
        )
        failures += not (same and edf.write_edf(parsed) == raw)
    elapsed = time.monotonic() - start
    ok = failures == 0 and elapsed < 10
    acceptance(1, "EDF round-trip", ok, f"20 fixtures, {failures} mismatches, {elapsed:.1f}s < 10s")
    assert ok


# 2 ---------------------------------------------------------------- filter suite


def test_criterion_2_filter_suite(acceptance):
    start = time.monotonic()
    fs = 100.0
    c = design_bandpass(FilterSpec(fs))
    impulse = np.zeros(8192)
    impulse[0] = 1.0
    spectrum = np.abs(np.fft.rfft(sps.lfilter(c.b, c.a, impulse)))
    freqs = np.fft.rfftfreq(8192, 1 / fs)
    dc, nyq = spectrum[0], spectrum[-1]
    peak = freqs[np.argmax(spectrum)]

    rng = np.random.default_rng(0)
    lin_err = 0.0
    for _ in range(20):
        x, y = rng.standard_normal((2, 3000))
        alpha, beta = rng.uniform(-5, 5, 2)
        lhs = apply_filter(alpha * x + beta * y, c)
        rhs = alpha * apply_filter(x, c) + beta * apply_filter(y, c)
        lin_err = max(lin_err, np.abs(lhs - rhs).max() / max(1.0, np.abs(lhs).max()))
    t = np.arange(2001) - 1000
    pulse = apply_filter(np.exp(-0.5 * (t / 15.0) ** 2), c)
    asym = np.abs(pulse - pulse[::-1]).max() / np.abs(pulse).max()
    elapsed = time.monotonic() - start

    ok = dc < 1e-6 and nyq < 1e-6 and abs(peak - 4.18) <= 0.5 and lin_err < 1e-9 and asym < 1e-9 and elapsed < 30
    acceptance(
        2,
        "filter suite",
        ok,
        f"DC {dc:.1e}, Nyquist {nyq:.1e}, peak {peak:.2f} Hz, linearity {lin_err:.1e}, asymmetry {asym:.1e}, {elapsed:.1f}s",
    )
    assert ok


# 3 ---------------------------------------------------------------- alignment algebra


def test_criterion_3_alignment_algebra(acceptance):
    start = time.monotonic()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        p, d = rng.integers(1, 65), rng.integers(1, 129)
        h_v = rng.standard_normal((p, d)) * rng.uniform(0.1, 10)
        h_f = rng.standard_normal((1, d)) * rng.uniform(0.1, 10)
        diff = align(h_v, h_f) - h_v
        worst = max(
            worst,
            np.abs(align(h_v, np.zeros((1, d))) - h_v).max(),
            np.abs(align(np.zeros((p, d)), h_f) - expand(h_f, p)).max(),
            np.abs(diff - h_f).max(),
            np.abs(diff - diff[0]).max(),
        )
    elapsed = time.monotonic() - start
    ok = worst <= 1e-12 and elapsed < 10
    acceptance(3, "alignment algebra", ok, f"1000 cases, max deviation {worst:.1e}, {elapsed:.1f}s")
    assert ok


# 4 ---------------------------------------------------------------- vision shapes and gradients


def test_criterion_4_vision_shapes_and_gradients(acceptance):
    start = time.monotonic()
    with torch.no_grad():
        shape = tuple(VisionModule().eval().forward_features(torch.rand(1, 3, 224, 224)).spatial_map.shape[1:])
    errors = finite_difference_check(coords=20)
    elapsed = time.monotonic() - start
    ok = shape == (1024, 7, 7) and len(errors) >= 20 and errors.max() < 1e-4 and elapsed < 120
    acceptance(4, "vision shapes + gradients", ok, f"map {shape}, max rel. error {errors.max():.1e} on {len(errors)} coords, {elapsed:.1f}s")
    assert ok


# 5 ---------------------------------------------------------------- metric oracle


def test_criterion_5_metric_oracle(acceptance):
    start = time.monotonic()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(5, 400))
        truth = [CLASS_ORDER[i] for i in rng.integers(0, 5, n)]
        pred = [t if rng.random() < 0.6 else CLASS_ORDER[rng.integers(0, 5)] for t in truth]
        got = metrics(confusion(truth, pred))
        acc, f1, mf1, kappa = tally_metrics(truth, pred, list(CLASS_ORDER))
        worst = max(
            worst,
            abs(got.accuracy - acc),
            np.abs(np.subtract(got.per_class_f1, f1)).max(),
            abs(got.macro_f1 - mf1),
            abs(got.kappa - kappa),
        )
    worked = [
        metrics(np.diag([30, 20])).kappa == 1.0,
        metrics(np.array([[25, 25], [25, 25]])).kappa == 0.0,
        metrics(np.array([[40, 10], [20, 30]])).kappa == 0.4,
    ]
    elapsed = time.monotonic() - start
    ok = worst <= 1e-9 and all(worked) and elapsed < 10
    acceptance(5, "metric oracle equivalence", ok, f"200 vectors, max deviation {worst:.1e}, worked examples {worked}, {elapsed:.1f}s")
    assert ok


# 6 ---------------------------------------------------------------- CoT pipeline


def test_criterion_6_cot_pipeline(acceptance, cot_inputs, cot_truth, tmp_path):
    blobs = []
    for k in range(2):
        client = MockVLMClient.noisy(cot_truth, 0.2, seed=7)
        ds = build_cot_dataset(cot_inputs, client, per_class_quota=10, seed=3, max_workers=1 + 3 * k)
        blobs.append(export_jsonl(ds.records, tmp_path / f"run{k}.jsonl").read_bytes())
    oracle = build_cot_dataset(cot_inputs, MockVLMClient.oracle(cot_truth), per_class_quota=10)
    silent = build_cot_dataset(cot_inputs, MockVLMClient.silent(), per_class_quota=10)
    n_oracle, n_silent = len(oracle.valid_records), len(silent.valid_records)
    ok = len(cot_inputs) == 50 and blobs[0] == blobs[1] and n_oracle == 50 and n_silent == 0
    acceptance(6, "CoT pipeline", ok, f"byte-identical {blobs[0] == blobs[1]}, oracle valid {n_oracle}/50, silent valid {n_silent}/50")
    assert ok


# 7 ---------------------------------------------------------------- toy end-to-end

TOY_CONFIG = {
    "render": {"width_px": 224, "height_px": 224},
    "vision": {"width_scale": 0.125, "epochs": 8, "learning_rate": 1e-3},
    "encoder": {"patch_size": 28},
    "joint": {"epochs": 3, "learning_rate": 2e-3},
    "cot": {"per_class_quota": 80},
    "split": {"test_per_class": 20},
    "seed": 0,
}


@pytest.mark.slow
def test_criterion_7_toy_end_to_end(acceptance, tmp_path):
    start = time.monotonic()
    edf_path = write_fixture(tmp_path / "toy.edf", balanced_stages(100, seed=0))
    cfg = tmp_path / "toy.yaml"
    cfg.write_text(yaml.safe_dump({**TOY_CONFIG, "recordings": [{"psg": str(edf_path)}], "out": str(tmp_path / "out")}))
    code = main(["run-all", "--config", str(cfg), "--presets", "patch-aligned", "wo-feature-embedding"])
    elapsed = time.monotonic() - start
    assert code == 0
    runs = {r: json.loads((tmp_path / "out" / "eval" / r / "metrics.json").read_text()) for r in ("patch-aligned", "wo-feature-embedding")}
    pa, wo = runs["patch-aligned"], runs["wo-feature-embedding"]
    ok = (
        pa["accuracy"] >= 0.90
        and pa["kappa"] >= 0.85
        and wo["accuracy"] < pa["accuracy"]
        and pa["run"]["n_test"] == 100
        and elapsed < 20 * 60
    )
    acceptance(
        7,
        "toy end-to-end",
        ok,
        f"patch-aligned acc {pa['accuracy']:.3f} kappa {pa['kappa']:.3f}; "
        f"wo-feature-embedding acc {wo['accuracy']:.3f} kappa {wo['kappa']:.3f}; {elapsed / 60:.1f} min",
    )
    assert ok


# 8 ---------------------------------------------------------------- split protocol

INVENTORY = {Stage.WAKE: 1175, Stage.N1: 1186, Stage.N2: 757, Stage.N3: 836, Stage.REM: 1165}


def test_criterion_8_split_protocol(acceptance):
    records = [(stage, i) for stage, n in INVENTORY.items() for i in range(n)]
    train, test = split_dataset(records, lambda r: r[0], 75, seed=0)
    again = split_dataset(records, lambda r: r[0], 75, seed=0)
    per_class = {s: sum(1 for r in test if r[0] == s) for s in CLASS_ORDER}
    ok = (
        len(records) == 5119
        and (len(test), len(train)) == (375, 4744)
        and set(per_class.values()) == {75}
        and again == (train, test)
    )
    acceptance(8, "split protocol", ok, f"{len(test)} test / {len(train)} train of {len(records)}, deterministic {again == (train, test)}")
    assert ok
