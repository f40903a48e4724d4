"""Stage orchestration over an output directory.

Each stage writes its files under ``config.output_dir`` and a completion
marker ``stages/<stage>.json`` holding the produced files and a hash of
the config sections the stage depends on.  Re-running a completed stage
with an unchanged config is a no-op unless ``force`` is set.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from . import classifier as clf
from .config import dump_config
from .exceptions import ConfigurationError, CorruptInputError, MissingArtifactError, UnsegmentableVolumeError
from .features import (
    EmbeddingRecord,
    FeatureCacheWriter,
    extract_features,
    load_mlp,
    predict_mlp,
    read_feature_cache,
    save_mlp,
    train_mlp,
)
from .ingest import LABELS, load_volume, natural_key, read_manifest, read_slice, scan_dataset, write_manifest
from .metrics import evaluate
from .morph import save_overlay, segment_morphological, volume_bbox
from .selection import SelectionResult, resample_test, select_slices, write_selection_report
from .unet import SegModel, segment_slices, train_unet

logger = logging.getLogger(__name__)

STAGES = (
    "preprocess",
    "train-unet",
    "segment",
    "train-classifier",
    "extract-features",
    "train-mlp",
    "evaluate",
    "predict",
)

_STAGE_SECTIONS = {
    "preprocess": ("data", "preprocess"),
    "train-unet": ("unet", "seed"),
    "segment": ("data", "preprocess", "unet", "seed"),
    "train-classifier": ("data", "preprocess", "unet", "compose", "classifier", "seed"),
    "extract-features": ("data", "preprocess", "unet", "compose", "classifier", "features", "seed"),
    "train-mlp": ("data", "preprocess", "unet", "compose", "classifier", "features", "mlp", "seed"),
    "evaluate": ("data", "preprocess", "unet", "compose", "classifier", "features", "mlp", "seed"),
    "predict": ("data", "preprocess", "unet", "compose", "classifier", "features", "mlp", "seed"),
}

PREDICTION_HEADER = ["volume_id", "prob_covid", "prob_noncovid", "pred", "level"]


class Layout:
    """Paths of every artifact inside the output directory."""

    def __init__(self, root):
        self.root = Path(root)

    def manifest(self, split):
        return self.root / "manifests" / f"{split}.csv"

    def prep(self, split, volume_id):
        return self.root / "prep" / split / f"{volume_id}.npz"

    def selection_report(self, split):
        return self.root / "reports" / f"selection_{split}.csv"

    def mask_dir(self, split, volume_id):
        return self.root / "masks" / split / volume_id

    def features(self, split):
        return self.root / "features" / f"{split}.fcv"

    def skipped(self, split):
        return self.root / "features" / f"skipped_{split}.csv"

    def predictions(self, split):
        return self.root / "predictions" / f"{split}.csv"

    def metrics(self, split):
        return self.root / "metrics" / f"{split}.json"

    def marker(self, stage):
        return self.root / "stages" / f"{stage}.json"

    unet = property(lambda self: self.root / "models" / "unet.pt")
    classifier = property(lambda self: self.root / "models" / "classifier.pt")
    mlp = property(lambda self: self.root / "models" / "mlp.pt")
    classifier_log = property(lambda self: self.root / "logs" / "train_classifier.csv")
    mlp_log = property(lambda self: self.root / "logs" / "train_mlp.csv")
    debug = property(lambda self: self.root / "debug")


def stage_fingerprint(config, stage):
    dumped = config.model_dump(mode="json")
    payload = {k: dumped[k] for k in _STAGE_SECTIONS[stage]}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _require(path, stage, what):
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} not found at {path}: run {stage} first", required_stage=stage)


def _splits(config, layout=None, require_manifest=False):
    names = [config.data.train_split, config.data.val_split, config.data.test_split]
    if layout is not None and require_manifest:
        names = [s for s in names if layout.manifest(s).exists()]
    return names


# --- per-volume artifacts -------------------------------------------------


def save_prep(path, volume, coarse, selection):
    path.parent.mkdir(parents=True, exist_ok=True)
    boxes = np.array([m.bbox if m.bbox is not None else (-1, -1, -1, -1) for m in coarse], dtype=np.int32)
    np.savez(
        path,
        ratios=np.array([m.lung_ratio for m in coarse], dtype=np.float64),
        bboxes=boxes,
        kept=np.array(selection.kept_indices, dtype=np.int32),
        final_threshold=np.float64(selection.final_threshold),
        filenames=np.array(volume.filenames),
    )


def load_prep(path):
    with np.load(path) as z:
        selection = SelectionResult(tuple(int(i) for i in z["kept"]), float(z["final_threshold"]),
                                    len(z["ratios"]))
        boxes = [tuple(int(v) for v in b) if b[0] >= 0 else None for b in z["bboxes"]]
        return selection, boxes, [str(f) for f in z["filenames"]]


def _mask_path(mask_dir, filename):
    return mask_dir / (Path(filename).stem + ".png")


def write_mask_png(mask, path):
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path)


class VolumeStore:
    """Lazy sequence of :class:`PreparedVolume` objects for one split."""

    def __init__(self, layout, split, drop_unsegmentable=False):
        self.layout = layout
        self.split = split
        self.entries = read_manifest(layout.manifest(split))
        if drop_unsegmentable:
            kept = []
            for e in self.entries:
                _, boxes, _ = load_prep(layout.prep(split, e.volume_id))
                if any(b is not None for b in boxes):
                    kept.append(e)
                else:
                    logger.warning("dropping unsegmentable volume %s from %s", e.volume_id, split)
            self.entries = kept

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        entry = self.entries[i]
        selection, boxes, filenames = load_prep(self.layout.prep(self.split, entry.volume_id))
        volume = load_volume(entry)
        if volume.filenames != filenames:
            raise CorruptInputError(f"volume {entry.volume_id} changed on disk since preprocess")
        kept = selection.kept_indices
        slices = np.stack([volume.slices[k] for k in kept])
        mask_dir = self.layout.mask_dir(self.split, entry.volume_id)
        masks = []
        for k in kept:
            path = _mask_path(mask_dir, filenames[k])
            if not path.exists():
                raise MissingArtifactError(f"mask {path} not found: run segment first", "segment")
            masks.append(np.asarray(Image.open(path).convert("L")) > 0)
        bbox = volume_bbox(boxes)
        return clf.PreparedVolume(entry.volume_id, slices, np.stack(masks), entry.label_index, bbox)


# --- stages ----------------------------------------------------------------


def stage_preprocess(config, layout, debug=False):
    if config.data.root is None:
        raise ConfigurationError("data.root is not set")
    produced = []
    found = False
    for split in _splits(config):
        if not (Path(config.data.root) / split).is_dir():
            logger.warning("split %s not found under %s; skipping", split, config.data.root)
            continue
        found = True
        entries = scan_dataset(config.data.root, split)
        write_manifest(entries, layout.manifest(split))
        produced.append(layout.manifest(split))
        rows = []
        for entry in entries:
            volume = load_volume(entry)
            coarse = [segment_morphological(s) for s in volume.slices]
            selection = select_slices([m.lung_ratio for m in coarse], config.preprocess.min_keep)
            save_prep(layout.prep(split, entry.volume_id), volume, coarse, selection)
            produced.append(layout.prep(split, entry.volume_id))
            rows.append((entry.volume_id, selection,
                         resample_test(len(selection), config.preprocess.set_length)))
            if debug:
                for name, s, m in zip(volume.filenames, volume.slices, coarse):
                    save_overlay(s, m, layout.debug / "overlays" / split / entry.volume_id / f"{Path(name).stem}.png")
        write_selection_report(rows, layout.selection_report(split))
        produced.append(layout.selection_report(split))
    if not found:
        raise ConfigurationError(f"no split directories found under {config.data.root}")
    return produced


def load_mask_corpus(corpus_dir):
    """``images/`` and ``masks/`` subdirectories paired by file stem."""
    corpus_dir = Path(corpus_dir)
    images = {p.stem: p for p in (corpus_dir / "images").glob("*") if p.is_file()}
    masks = {p.stem: p for p in (corpus_dir / "masks").glob("*") if p.is_file()}
    stems = sorted(set(images) & set(masks), key=natural_key)
    if not stems:
        raise ConfigurationError(f"no paired images/masks found under {corpus_dir}")
    return [read_slice(images[s]) for s in stems], [read_slice(masks[s]) for s in stems]


def merge_annotation_classes(mask):
    """Collapse multi-label annotations (lung field, GGO, consolidation) into one lung class."""
    return (np.asarray(mask) > 0).astype(np.uint8)


def stage_train_unet(config, layout, debug=False):
    if config.unet.corpus_dir is None:
        raise ConfigurationError("unet.corpus_dir is not set")
    slices, masks = load_mask_corpus(config.unet.corpus_dir)
    model = train_unet(slices, masks, config.unet)
    layout.unet.parent.mkdir(parents=True, exist_ok=True)
    model.save(layout.unet)
    return [layout.unet]


def stage_segment(config, layout, debug=False):
    _require(layout.unet, "train-unet", "UNet checkpoint")
    splits = _splits(config, layout, require_manifest=True)
    if not splits:
        raise MissingArtifactError("no manifests found: run preprocess first", "preprocess")
    model = SegModel.load(layout.unet)
    produced = []
    for split in splits:
        for entry in read_manifest(layout.manifest(split)):
            prep = layout.prep(split, entry.volume_id)
            _require(prep, "preprocess", f"preprocessing of {entry.volume_id}")
            selection, _, filenames = load_prep(prep)
            volume = load_volume(entry)
            kept = selection.kept_indices
            masks = segment_slices([volume.slices[k] for k in kept], model)
            mask_dir = layout.mask_dir(split, entry.volume_id)
            mask_dir.mkdir(parents=True, exist_ok=True)
            for k, m in zip(kept, masks):
                path = _mask_path(mask_dir, filenames[k])
                write_mask_png(m, path)
                produced.append(path)
    return produced


def _stores(config, layout, splits):
    for split in splits:
        _require(layout.manifest(split), "preprocess", f"manifest for split {split!r}")
    return [VolumeStore(layout, s, drop_unsegmentable=True) for s in splits]


def _check_segmented(layout, split):
    if not (layout.root / "masks" / split).is_dir():
        raise MissingArtifactError(f"no masks for split {split!r}: run segment first", "segment")


def stage_train_classifier(config, layout, debug=False):
    train_split, val_split = config.data.train_split, config.data.val_split
    train, val = _stores(config, layout, [train_split, val_split])
    _check_segmented(layout, train_split)
    _check_segmented(layout, val_split)
    model, _ = clf.train_classifier(
        train, val, config.classifier, config.compose, config.preprocess.set_length,
        seed=config.seed, workers=config.workers, log_path=layout.classifier_log,
        debug_dir=layout.debug if debug else None,
    )
    layout.classifier.parent.mkdir(parents=True, exist_ok=True)
    clf.save_classifier(layout.classifier, model, config.classifier, config.preprocess.set_length,
                        stage_fingerprint(config, "train-classifier"))
    return [layout.classifier, layout.classifier_log]


def _load_classifier(layout):
    _require(layout.classifier, "train-classifier", "classifier checkpoint")
    model, _, set_length, _ = clf.load_classifier(layout.classifier)
    return model, set_length


def _write_features(store, model, config, set_length, layout, split):
    rng = np.random.default_rng([config.seed, 7]) if config.features.augment else None
    augment = config.compose.augment if config.features.augment else None
    skipped = []
    with FeatureCacheWriter(layout.features(split)) as writer:
        for i in range(len(store)):
            entry = store.entries[i]
            try:
                volume = store[i]
                records = extract_features(volume, model, config.compose, set_length, augment, rng)
            except UnsegmentableVolumeError as exc:
                skipped.append((entry.volume_id, str(exc)))
                continue
            for r in records:
                writer.append(r)
    with open(layout.skipped(split), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["volume_id", "reason"])
        w.writerows(skipped)
    return [layout.features(split), layout.skipped(split)]


def stage_extract_features(config, layout, debug=False):
    model, set_length = _load_classifier(layout)
    produced = []
    for split in _splits(config, layout, require_manifest=True):
        _check_segmented(layout, split)
        store = VolumeStore(layout, split)
        produced += _write_features(store, model, config, set_length, layout, split)
    return produced


def stage_train_mlp(config, layout, debug=False):
    for split in (config.data.train_split, config.data.val_split):
        _require(layout.features(split), "extract-features", f"features for split {split!r}")
    train = read_feature_cache(layout.features(config.data.train_split))
    val = read_feature_cache(layout.features(config.data.val_split))
    head, history = train_mlp(train, val, config.mlp, seed=config.seed)
    layout.mlp.parent.mkdir(parents=True, exist_ok=True)
    save_mlp(layout.mlp, head, config.mlp, stage_fingerprint(config, "train-mlp"))
    layout.mlp_log.parent.mkdir(parents=True, exist_ok=True)
    with open(layout.mlp_log, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "val_loss", "val_acc"])
        w.writeheader()
        w.writerows(history)
    return [layout.mlp, layout.mlp_log]


def write_predictions(predictions, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_HEADER)
        for p in predictions:
            w.writerow([p.volume_id, f"{p.aggregate_prob[0]:.6f}", f"{p.aggregate_prob[1]:.6f}",
                        LABELS[p.predicted_class], p.level])


def read_predictions(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _predict_split(config, layout, split):
    """BERT-level predictions and, when an MLP checkpoint exists, MLP-level ones."""
    model, set_length = _load_classifier(layout)
    _require(layout.manifest(split), "preprocess", f"manifest for split {split!r}")
    _check_segmented(layout, split)
    store = VolumeStore(layout, split)
    bert_preds, records = [], []
    for i in range(len(store)):
        try:
            volume = store[i]
            logits, embeddings, _ = clf.volume_outputs(volume, model, config.compose, set_length)
        except UnsegmentableVolumeError as exc:
            logger.warning("skipping %s: %s", store.entries[i].volume_id, exc)
            continue
        bert_preds.append(clf.VolumePrediction(volume.volume_id, logits, clf.aggregate_softmax(logits)))
        records += [EmbeddingRecord(volume.volume_id, j, e, volume.label) for j, e in enumerate(embeddings)]
    mlp_preds = []
    if layout.mlp.exists() and records:
        head, mlp_cfg = load_mlp(layout.mlp)
        mlp_preds = predict_mlp(head, records, mlp_cfg.pooling)
    labels = {e.volume_id: e.label_index for e in store.entries}
    return bert_preds, mlp_preds, labels


def stage_evaluate(config, layout, debug=False):
    split = config.data.val_split
    bert_preds, mlp_preds, labels = _predict_split(config, layout, split)
    write_predictions(bert_preds + mlp_preds, layout.predictions(split))
    reports = {}
    for level, preds in (("bert", bert_preds), ("mlp", mlp_preds)):
        if preds:
            reports[level] = evaluate(preds, {p.volume_id: labels[p.volume_id] for p in preds}).to_dict()
    layout.metrics(split).parent.mkdir(parents=True, exist_ok=True)
    layout.metrics(split).write_text(json.dumps(reports, indent=2) + "\n")
    return [layout.predictions(split), layout.metrics(split)]


def stage_predict(config, layout, debug=False):
    split = config.data.test_split
    bert_preds, mlp_preds, _ = _predict_split(config, layout, split)
    write_predictions(bert_preds + mlp_preds, layout.predictions(split))
    return [layout.predictions(split)]


_RUNNERS = {
    "preprocess": stage_preprocess,
    "train-unet": stage_train_unet,
    "segment": stage_segment,
    "train-classifier": stage_train_classifier,
    "extract-features": stage_extract_features,
    "train-mlp": stage_train_mlp,
    "evaluate": stage_evaluate,
    "predict": stage_predict,
}


def run_pipeline(config, stage, force=False, debug=False):
    """Run one stage; return its completion record (files, fingerprint, skipped flag)."""
    if stage not in _RUNNERS:
        raise ConfigurationError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    layout = Layout(config.output_dir)
    fingerprint = stage_fingerprint(config, stage)
    marker = layout.marker(stage)
    if marker.exists() and not force:
        done = json.loads(marker.read_text())
        if done.get("fingerprint") == fingerprint and all(Path(f).exists() for f in done["files"]):
            logger.info("stage %s already complete; use --force to re-run", stage)
            return {**done, "skipped": True}
    layout.root.mkdir(parents=True, exist_ok=True)
    dump_config(config, layout.root / "config.yaml")
    files = _RUNNERS[stage](config, layout, debug=debug)
    record = {"stage": stage, "fingerprint": fingerprint, "config_fingerprint": config.fingerprint(),
              "files": [str(f) for f in files]}
    marker.parent.mkdir(parents=True, exist_ok=True)
    marker.write_text(json.dumps(record, indent=2) + "\n")
    return {**record, "skipped": False}
