"""Pipeline commands chaining the modules over an output directory.

Layout under ``config.out``::

    epochs/<source>/          float32 epochs, manifest.tsv, meta.json
    images/<source>/          rendered PNGs (digest in a text chunk)
    split.json                image-level train/test membership
    vision/                   vision.npz, train_log.csv
    features/                 cached Z_v / Z_f per vision checkpoint and encoder
    cot/                      records.jsonl, llava.json, counts.json, cache/
    joint/<run>/              joint.npz, train_log.csv, config.yaml
    eval/<run>/               predictions.tsv, raw/*.txt, metrics and figures
    report/                   comparison across evaluated runs
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import edf
from .align import TOKEN_DIM, get_encoder
from .checkpoint import digest_of
from .config import RunConfig, dump_config
from .cot import (
    DIRECT_QUESTION,
    OVERALL_QUESTION,
    HttpVLMClient,
    MockVLMClient,
    ResponseCache,
    build_cot_dataset,
    read_jsonl,
    to_llava_conversations,
)
from .cot.client import API_KEY_ENV, image_digest
from .cot.dataset import CotInput
from .errors import ConfigInvalid, EEGVLMError, EmptyDataset, MissingUpstream, ShapeMismatch
from .evaluate import confusion, metrics, split_dataset
from .lm import JointConfig, JointExample, ToyLMConfig, load_joint, new_joint_model, predict_joint, save_joint, train_joint
from .preprocess import (
    META,
    FilterSpec,
    ManifestRow,
    apply_filter,
    design_bandpass,
    list_recordings,
    read_epoch_store,
    read_manifest,
    segment_epochs,
    write_epoch_store,
    write_manifest,
)
from .render import RenderConfig, content_digest, load_png, png_digest, render_epoch, save_png
from .report import comparison_report, read_metrics_file, report
from .stages import CLASS_ORDER, Stage
from .vision import VisionConfig, extract_features, load_vision, save_vision, train_vision, write_log_csv

log = logging.getLogger(__name__)


def write_if_changed(path: Path, data: bytes | str) -> bool:
    """Write ``data`` unless the file already holds exactly these bytes."""
    payload = data.encode() if isinstance(data, str) else data
    if path.is_file() and path.read_bytes() == payload:
        return False
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return True


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def epochs(self) -> Path:
        return self.root / "epochs"

    @property
    def images(self) -> Path:
        return self.root / "images"

    @property
    def split(self) -> Path:
        return self.root / "split.json"

    @property
    def vision(self) -> Path:
        return self.root / "vision" / "vision.npz"

    @property
    def features(self) -> Path:
        return self.root / "features"

    @property
    def cot(self) -> Path:
        return self.root / "cot"

    def joint(self, run: str) -> Path:
        return self.root / "joint" / run

    def eval(self, run: str) -> Path:
        return self.root / "eval" / run

    @property
    def report(self) -> Path:
        return self.root / "report"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingUpstream(f"missing {what}: {path} (run the upstream command first)")
    return path


def filter_spec(cfg: RunConfig, fs: float) -> FilterSpec:
    f = cfg.filter
    return FilterSpec(fs, f.low_cut_hz, f.high_cut_hz, warping=f.warping)


def render_config(cfg: RunConfig) -> RenderConfig:
    r = cfg.render
    return RenderConfig(r.width_px, r.height_px, r.amplitude_range_uv, r.line_width_px, r.margins_px)


def vision_config(cfg: RunConfig) -> VisionConfig:
    v = cfg.vision
    return VisionConfig((3, cfg.render.height_px, cfg.render.width_px), width_scale=v.width_scale, head=v.head)


# ---------------------------------------------------------------- preprocess


def cmd_preprocess(cfg: RunConfig) -> dict[str, int]:
    """Ingest, filter and segment every recording; returns epochs kept per source."""
    if not cfg.recordings:
        raise ConfigInvalid("no recordings configured")
    lay = Layout(Path(cfg.out))
    kept: dict[str, int] = {}
    for src in cfg.recordings:
        try:
            n = _preprocess_one(cfg, src, lay)
        except EEGVLMError as exc:
            if not cfg.skip_bad:
                raise
            log.warning("skipping %s: %s", src.psg, exc)
            continue
        kept[src.source_id] = n
        if n == 0:
            log.warning("%s: no scorable epochs; manifest is empty", src.source_id)
    return kept


def _file_digest(path: str | None) -> str | None:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest() if path else None


def _preprocess_one(cfg: RunConfig, src, lay: Layout) -> int:
    target = lay.epochs / src.source_id
    key = digest_of(
        {"psg": _file_digest(src.psg), "hyp": _file_digest(src.hypnogram), "channel": cfg.channel, "filter": vars(cfg.filter)}
    )
    meta_path = target / META
    if meta_path.is_file() and json.loads(meta_path.read_text()).get("input_digest") == key:
        return len(read_manifest(target))
    rec = edf.read_edf(src.psg)
    if src.hypnogram:
        rec = edf.attach_hypnogram(rec, edf.read_edf(src.hypnogram))
    x, fs = edf.select_channel(rec, cfg.channel)
    labels = edf.map_stage_labels(rec.annotations)
    spec = filter_spec(cfg, fs)
    y = apply_filter(x, design_bandpass(spec), zero_phase=cfg.filter.zero_phase) if x.size else x
    epochs = segment_epochs(y, fs, labels, src.source_id)
    if target.exists():
        shutil.rmtree(target)
    write_epoch_store(lay.epochs, src.source_id, epochs, fs)
    meta = json.loads(meta_path.read_text())
    meta_path.write_text(json.dumps({**meta, "input_digest": key}))
    return len(epochs)


# ---------------------------------------------------------------- render


def cmd_render(cfg: RunConfig) -> dict[str, int]:
    """Render every stored epoch; unchanged images are left untouched."""
    lay = Layout(Path(cfg.out))
    stores = list_recordings(_require(lay.epochs, "epoch store"))
    rcfg = render_config(cfg)
    written = skipped = 0
    for store in stores:
        rows = []
        out_dir = lay.images / store.name
        out_dir.mkdir(parents=True, exist_ok=True)
        for ep in read_epoch_store(store):
            digest = content_digest(ep, rcfg)
            name = f"{ep.source_id}_{ep.epoch_index}_{ep.stage.value}.png"
            path = out_dir / name
            if png_digest(path) == digest:
                skipped += 1
            else:
                save_png(render_epoch(ep, rcfg), path, digest)
                written += 1
            rows.append(ManifestRow(ep.source_id, ep.epoch_index, ep.stage, str(path.relative_to(lay.root))))
        if [r.to_line() for r in rows] != [r.to_line() for r in read_manifest(store)]:
            write_manifest(store, rows)
    log.info("render: %d written, %d unchanged", written, skipped)
    return {"written": written, "unchanged": skipped}


@dataclass(frozen=True)
class ImageItem:
    path: str  # relative to the output root
    stage: Stage


def image_items(lay: Layout) -> list[ImageItem]:
    items = []
    for store in list_recordings(_require(lay.epochs, "epoch store")):
        for row in read_manifest(store):
            if not row.image_path:
                raise MissingUpstream(f"missing rendered images for {store.name} (run render)")
            items.append(ImageItem(row.image_path, row.stage))
    if not items:
        raise EmptyDataset("no rendered epochs")
    return items


def load_images(lay: Layout, items: list[ImageItem]) -> np.ndarray:
    """``[N, 3, H, W]`` float32 in [0, 1]."""
    out = []
    for it in items:
        path = _require(lay.root / it.path, "rendered image")
        out.append(load_png(path).transpose(2, 0, 1))
    return np.stack(out).astype(np.float32) / 255.0


# ---------------------------------------------------------------- split + vision


def ensure_split(cfg: RunConfig, lay: Layout) -> dict[str, list[str]]:
    """Image-level split, computed once per image set and seed and then reused."""
    items = image_items(lay)
    key = digest_of({"images": [i.path for i in items], "seed": cfg.seed, "test": cfg.split.test_per_class})
    if lay.split.is_file():
        cached = json.loads(lay.split.read_text())
        if cached.get("key") == key:
            return cached
    train, test = split_dataset(items, lambda i: i.stage, cfg.split.test_per_class, cfg.seed)
    split = {"key": key, "train": [i.path for i in train], "test": [i.path for i in test]}
    write_if_changed(lay.split, json.dumps(split, indent=1) + "\n")
    return split


def _subset(lay: Layout, paths: list[str]) -> list[ImageItem]:
    by_path = {i.path: i for i in image_items(lay)}
    missing = [p for p in paths if p not in by_path]
    if missing:
        raise MissingUpstream(f"split references unknown images, e.g. {missing[0]} (rerun train-vision)")
    return [by_path[p] for p in paths]


def cmd_train_vision(cfg: RunConfig) -> dict:
    lay = Layout(Path(cfg.out))
    split = ensure_split(cfg, lay)
    train = _subset(lay, split["train"])
    images = load_images(lay, train)
    v = cfg.vision
    result = train_vision(
        images,
        [i.stage.index for i in train],
        config=vision_config(cfg),
        epochs=v.epochs,
        learning_rate=v.learning_rate,
        batch_size=v.batch_size,
        seed=cfg.seed,
    )
    lay.vision.parent.mkdir(parents=True, exist_ok=True)
    save_vision(result.model, lay.vision, seed=cfg.seed, epochs=v.epochs)
    write_log_csv(result.log, lay.vision.parent / "train_log.csv")
    return {"train_images": len(train), "final_loss": result.final_loss}


# ---------------------------------------------------------------- features


def encoder_for(cfg: RunConfig, feature_dim: int):
    if cfg.encoder.id == "toy-patch":
        # the toy encoder emits tokens in the vision feature width so one W serves both
        return get_encoder("toy-patch", patch_size=cfg.encoder.patch_size, token_dim=feature_dim, seed=cfg.encoder.seed)
    enc = get_encoder(cfg.encoder.id)
    if feature_dim != TOKEN_DIM:
        raise ShapeMismatch(f"{cfg.encoder.id} emits {TOKEN_DIM}-dim tokens; vision features are {feature_dim}-dim")
    return enc


def features_for(cfg: RunConfig, lay: Layout, items: list[ImageItem]) -> tuple[np.ndarray, np.ndarray]:
    """``(Z_v [N, P, C], Z_f [N, C])``, cached per vision checkpoint, encoder and image set."""
    vpath = _require(lay.vision, "vision checkpoint")
    key = digest_of(
        {
            "vision": hashlib.sha256(vpath.read_bytes()).hexdigest(),
            "encoder": [cfg.encoder.id, cfg.encoder.patch_size, cfg.encoder.seed],
            "images": [i.path for i in items],
        }
    )[:16]
    cache = lay.features / f"{key}.npz"
    if cache.is_file():
        with np.load(cache) as z:
            return z["z_v"], z["z_f"]
    model = load_vision(vpath)
    images = load_images(lay, items)
    z_f = extract_features(model, images).astype(np.float32)
    z_v = encoder_for(cfg, z_f.shape[1]).encode_batch(images).astype(np.float32)
    lay.features.mkdir(parents=True, exist_ok=True)
    np.savez(cache, z_v=z_v, z_f=z_f)
    return z_v, z_f


# ---------------------------------------------------------------- CoT


def make_client(cfg: RunConfig, truth: dict[str, Stage]):
    c = cfg.cot
    if c.client == "mock-oracle":
        return MockVLMClient.oracle(truth)
    if c.client == "mock-noisy":
        return MockVLMClient.noisy(truth, c.error_rate, cfg.seed)
    if c.client == "mock-silent":
        return MockVLMClient.silent()
    return HttpVLMClient(c.url, c.model_id, c.timeout_s, c.min_interval_s, os.environ.get(API_KEY_ENV))


def cmd_gen_cot(cfg: RunConfig) -> dict:
    """Stage-wise CoT answers for the training images."""
    lay = Layout(Path(cfg.out))
    split = ensure_split(cfg, lay)
    train = _subset(lay, split["train"])
    inputs = [CotInput(i.path, (lay.root / i.path).read_bytes(), i.stage) for i in train]
    truth = {image_digest(x.image_png): x.ground_truth for x in inputs}
    c = cfg.cot
    ds = build_cot_dataset(
        inputs,
        make_client(cfg, truth),
        per_class_quota=c.per_class_quota,
        seed=cfg.seed,
        allow_short=c.allow_short,
        cache=ResponseCache(lay.cot / "cache"),
        max_workers=c.max_workers,
        retries=c.retries,
        backoff_s=c.backoff_s,
    )
    lay.cot.mkdir(parents=True, exist_ok=True)
    write_if_changed(lay.cot / "records.jsonl", "".join(r.to_json() + "\n" for r in ds.records))
    write_if_changed(lay.cot / "llava.json", json.dumps(to_llava_conversations(ds.records), indent=1) + "\n")
    counts = {"attempted": ds.attempted, "valid": ds.valid}
    write_if_changed(lay.cot / "counts.json", json.dumps(counts, indent=1, sort_keys=True) + "\n")
    return counts


# ---------------------------------------------------------------- joint


def direct_answer(stage: Stage) -> str:
    return f"The sleep stage is {stage.value}."


def joint_config(cfg: RunConfig) -> JointConfig:
    j, m = cfg.joint, cfg.lm
    return JointConfig(
        fusion=j.fusion,
        use_cot=j.use_cot,
        lm_id=m.id,
        lm=ToyLMConfig(m.dim, m.layers, m.heads, max_len=m.max_len),
        epochs=j.epochs,
        learning_rate=j.learning_rate,
        batch_size=j.batch_size,
        seed=cfg.seed,
        max_answer_tokens=m.max_answer_tokens,
    )


def cmd_train_joint(cfg: RunConfig) -> dict:
    lay = Layout(Path(cfg.out))
    records = read_jsonl(_require(lay.cot / "records.jsonl", "CoT records"))
    valid = [r for r in records if r.valid]
    if not valid:
        raise EmptyDataset("no valid CoT records to train on")
    items = [ImageItem(r.image_path, r.ground_truth) for r in valid]
    z_v, z_f = features_for(cfg, lay, items)
    jcfg = joint_config(cfg)
    examples = [
        JointExample(
            z_v[k],
            z_f[k],
            OVERALL_QUESTION if jcfg.use_cot else DIRECT_QUESTION,
            r.reasoning if jcfg.use_cot else direct_answer(r.ground_truth),
            r.ground_truth,
            r.image_path,
        )
        for k, r in enumerate(valid)
    ]
    model = new_joint_model(examples, jcfg)
    tlog = train_joint(model, examples)
    out = lay.joint(cfg.run_name)
    out.mkdir(parents=True, exist_ok=True)
    save_joint(model, out / "joint.npz")
    write_if_changed(out / "train_log.csv", "epoch,loss\n" + "".join(f"{i},{l:.8f}\n" for i, l in enumerate(tlog.epoch_losses, 1)))
    write_if_changed(out / "config.yaml", dump_config(cfg))
    return {"examples": len(examples), "final_loss": tlog.epoch_losses[-1]}


# ---------------------------------------------------------------- evaluate + report


def unparsed_fallback(truth: Stage) -> Stage:
    """A label guaranteed to be wrong, so unparseable outputs count as errors."""
    return CLASS_ORDER[(truth.index + 1) % len(CLASS_ORDER)]


def cmd_evaluate(cfg: RunConfig) -> dict:
    lay = Layout(Path(cfg.out))
    run = cfg.run_name
    ckpt = _require(lay.joint(run) / "joint.npz", f"joint checkpoint for {run}")
    split = json.loads(_require(lay.split, "split").read_text())
    test = _subset(lay, split["test"])
    model = load_joint(ckpt)
    z_v, z_f = features_for(cfg, lay, test)
    question = OVERALL_QUESTION if model.config.use_cot else DIRECT_QUESTION
    examples = [JointExample(z_v[k], z_f[k], question, "", it.stage, it.path) for k, it in enumerate(test)]
    preds = predict_joint(model, examples)

    out = lay.eval(run)
    raw = out / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    lines, true_labels, pred_labels = [], [], []
    unparsed = 0
    for it, p in zip(test, preds):
        raw_path = raw / (Path(it.path).stem + ".txt")
        write_if_changed(raw_path, p.text + "\n")
        label = p.label
        if label is None:
            unparsed += 1
            label = unparsed_fallback(it.stage)
        true_labels.append(it.stage)
        pred_labels.append(label)
        shown = p.label.value if p.label else "-"
        lines.append(f"{it.path}\t{it.stage.value}\t{shown}\t{raw_path.relative_to(lay.root)}\n")
    write_if_changed(out / "predictions.tsv", "image_path\tground_truth\tpredicted\traw_output\n" + "".join(lines))

    cm = confusion(true_labels, pred_labels)
    bundle = metrics(cm)
    meta = {"run": run, "config_digest": cfg.digest(), "n_test": len(test), "unparsed": unparsed}
    report(bundle, cm, meta, out, name=run)
    log.info("%s: accuracy %.3f kappa %.3f (%d unparsed)", run, bundle.accuracy, bundle.kappa, unparsed)
    return {**bundle.as_dict(), "unparsed": unparsed}


def cmd_report(cfg: RunConfig) -> dict:
    lay = Layout(Path(cfg.out))
    root = _require(lay.root / "eval", "evaluation results")
    runs = {p.parent.name: read_metrics_file(p) for p in sorted(root.glob("*/metrics.json"))}
    if not runs:
        raise MissingUpstream(f"missing evaluation results under {root}")
    paths = comparison_report(runs, lay.report)
    return {"runs": sorted(runs), "table": str(paths["table_md"])}
