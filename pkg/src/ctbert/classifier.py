"""First-level classifier: clip sampling, training loop, volume prediction."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from torch.utils.data import DataLoader, Dataset

from .compose import build_clip, save_clip_grid
from .config import AugmentConfig, ClassifierConfig, ComposeConfig
from .exceptions import CorruptInputError, UnsegmentableVolumeError
from .ingest import index_to_label
from .models import CNNBert, load_pretrained_backbone
from .selection import SET_LENGTH, resample_eval, resample_test, resample_train
from .validation import check_binary_labels, check_is_fitted

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ctbert-classifier"
CHECKPOINT_VERSION = 1
LOG_HEADER = ["epoch", "lr", "train_loss", "val_loss", "val_acc", "train_acc"]


@dataclass
class PreparedVolume:
    """Kept slices of one volume with their refined lung masks.

    ``slices`` and ``masks`` are (K, H, W) stacks restricted to the kept
    slices, so slice-set positions index them directly.
    """

    volume_id: str
    slices: np.ndarray = field(repr=False)
    masks: np.ndarray = field(repr=False)
    label: int | None = None
    bbox: tuple | None = None

    def __post_init__(self):
        if len(self.slices) == 0:
            raise UnsegmentableVolumeError(f"volume {self.volume_id} has no kept slices")
        if np.shape(self.slices) != np.shape(self.masks):
            raise CorruptInputError(
                f"volume {self.volume_id}: slices {np.shape(self.slices)} vs masks {np.shape(self.masks)}"
            )


@dataclass
class VolumePrediction:
    volume_id: str
    per_set_logits: np.ndarray
    aggregate_prob: np.ndarray
    level: str = "bert"

    @property
    def predicted_class(self):
        return int(np.argmax(self.aggregate_prob))

    @property
    def predicted_label(self):
        return index_to_label(self.predicted_class)


def _clip(volume, slice_set, compose, augment=None, rng=None):
    idx = np.asarray(slice_set.indices)
    bbox = None
    if compose.crop_bbox:
        if volume.bbox is None:
            raise UnsegmentableVolumeError(f"volume {volume.volume_id} has no bounding box to crop")
        bbox = volume.bbox
    return build_clip(volume.slices[idx], volume.masks[idx], spec=compose.channels, bbox=bbox,
                      crop_size=compose.crop_size, augment=augment, rng=rng)


def train_clip(volume, compose, rng, set_length=SET_LENGTH, augment=True):
    s = resample_train(len(volume.slices), set_length, rng)
    return _clip(volume, s, compose, compose.augment if augment else None, rng)


def eval_clip(volume, compose, set_length=SET_LENGTH):
    return _clip(volume, resample_eval(len(volume.slices), set_length), compose)


def inference_clips(volume, compose, set_length=SET_LENGTH, augment=None, rng=None):
    """One clip per test-time slice set (strata plus the center set)."""
    sets = resample_test(len(volume.slices), set_length)
    return [_clip(volume, s, compose, augment, rng) for s in sets], sets


class TrainClipDataset(Dataset):
    """One random slice set per volume per epoch, seeded by (seed, epoch, index)."""

    def __init__(self, volumes, compose, set_length=SET_LENGTH, seed=0):
        self.volumes = volumes
        self.compose = compose
        self.set_length = set_length
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.volumes)

    def __getitem__(self, i):
        volume = self.volumes[i]
        rng = np.random.default_rng([self.seed, self.epoch, i])
        return train_clip(volume, self.compose, rng, self.set_length), int(volume.label)


class EvalClipDataset(Dataset):
    def __init__(self, volumes, compose, set_length=SET_LENGTH):
        self.volumes = volumes
        self.compose = compose
        self.set_length = set_length

    def __len__(self):
        return len(self.volumes)

    def __getitem__(self, i):
        volume = self.volumes[i]
        return eval_clip(volume, self.compose, self.set_length), int(volume.label)


def build_model(config, set_length=SET_LENGTH):
    model = CNNBert(
        n_frames=set_length,
        layers=tuple(config.layers),
        widths=tuple(config.widths),
        use_bert=config.use_bert,
        heads=config.bert_heads,
        bert_layers=config.bert_layers,
        dropout=config.dropout,
    )
    if config.pretrained_path is not None:
        missing, _ = load_pretrained_backbone(model, config.pretrained_path)
        if missing:
            logger.warning("pretrained backbone is missing %d tensors", len(missing))
    return model


def _labels_of(volumes):
    labels = [v.label for v in volumes]
    if any(lbl is None for lbl in labels):
        raise ValueError("every training/validation volume needs a label")
    return check_binary_labels(labels)


def evaluate_loader(model, loader):
    """``(accuracy, mean cross-entropy)`` of the model over a labeled loader."""
    model.eval()
    correct = total = 0
    loss = 0.0
    with torch.no_grad():
        for clips, labels in loader:
            logits, _ = model(clips)
            correct += int((logits.argmax(1) == labels).sum())
            loss += float(F.cross_entropy(logits, labels, reduction="sum"))
            total += len(labels)
    total = max(total, 1)
    return correct / total, loss / total


def train_classifier(train_volumes, val_volumes, config=None, compose=None, set_length=SET_LENGTH,
                     seed=0, workers=0, log_path=None, debug_dir=None):
    """Train the clip classifier; return ``(model, history)``.

    Adam with plateau LR reduction on validation accuracy, early stopping,
    and the best weights (validation accuracy, ties broken by validation
    loss) restored at the end.
    """
    config = config or ClassifierConfig()
    compose = compose or ComposeConfig()
    if len(train_volumes) == 0:
        raise ValueError("training split is empty")
    if len(val_volumes) == 0:
        raise ValueError("validation split is empty")
    _labels_of(train_volumes)
    _labels_of(val_volumes)

    torch.manual_seed(seed)
    model = build_model(config, set_length)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="max", factor=config.plateau_factor, patience=config.plateau_patience
    )
    train_ds = TrainClipDataset(train_volumes, compose, set_length, seed)
    val_loader = DataLoader(EvalClipDataset(val_volumes, compose, set_length),
                            batch_size=config.batch_size, num_workers=workers)

    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", newline="")
        log_writer = csv.writer(log_fh)
        log_writer.writerow(LOG_HEADER)

    history = []
    best_key, best_state, stale = (-1.0, float("-inf")), copy.deepcopy(model.state_dict()), 0
    try:
        for epoch in range(config.max_epochs):
            train_ds.set_epoch(epoch)
            loader = DataLoader(train_ds, batch_size=config.batch_size, shuffle=True,
                                num_workers=workers,
                                generator=torch.Generator().manual_seed(seed * 100003 + epoch))
            model.train()
            lr = opt.param_groups[0]["lr"]
            loss_sum = correct = seen = 0
            for step, (clips, labels) in enumerate(loader):
                if debug_dir is not None and epoch == 0 and step == 0:
                    Path(debug_dir).mkdir(parents=True, exist_ok=True)
                    save_clip_grid(clips[0], Path(debug_dir) / "train_clip_epoch0.png")
                opt.zero_grad()
                logits, _ = model(clips)
                loss = F.cross_entropy(logits, labels)
                if not torch.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss {loss.item()} at epoch {epoch} step {step} (lr {lr})"
                    )
                loss.backward()
                opt.step()
                loss_sum += loss.item() * len(labels)
                correct += int((logits.argmax(1) == labels).sum())
                seen += len(labels)
            val_acc, val_loss = evaluate_loader(model, val_loader)
            sched.step(val_acc)
            row = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / seen, "val_loss": val_loss,
                   "val_acc": val_acc, "train_acc": correct / seen}
            history.append(row)
            logger.info("epoch %d lr %.2e loss %.4f train_acc %.3f val_acc %.3f",
                        epoch, lr, row["train_loss"], row["train_acc"], val_acc)
            if log_fh is not None:
                log_writer.writerow([row[k] for k in LOG_HEADER])
                log_fh.flush()
            # accuracy first; validation loss breaks ties
            if (val_acc, -val_loss) > best_key:
                best_key, best_state, stale = (val_acc, -val_loss), copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
                if stale >= config.early_stopping:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return model, history


def predict_clips(model, clips, batch_size=4):
    """Logits and embeddings for a list of (T, 3, H, W) clips."""
    model.eval()
    logits, embeddings = [], []
    with torch.no_grad():
        for start in range(0, len(clips), batch_size):
            lo, emb = model(torch.stack(clips[start:start + batch_size]))
            logits.append(lo)
            embeddings.append(emb)
    return torch.cat(logits).numpy(), torch.cat(embeddings).numpy()


def aggregate_softmax(logits):
    """Mean of per-set softmax probabilities."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError("need at least one set of logits to aggregate")
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p.mean(axis=0)


def predict_volume(clips, model, volume_id="", batch_size=4):
    if len(clips) == 0:
        raise ValueError(f"volume {volume_id!r}: no slice sets to predict")
    logits, _ = predict_clips(model, clips, batch_size)
    return VolumePrediction(volume_id, logits, aggregate_softmax(logits), level="bert")


def volume_outputs(volume, model, compose, set_length=SET_LENGTH, augment=None, rng=None):
    """Test-time logits, embeddings and slice sets for one prepared volume."""
    clips, sets = inference_clips(volume, compose, set_length, augment, rng)
    logits, embeddings = predict_clips(model, clips)
    return logits, embeddings, sets


def save_classifier(path, model, config, set_length, fingerprint=None):
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "fingerprint": fingerprint,
            "set_length": set_length,
            "config": config.model_dump(mode="json"),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_classifier(path):
    """Return ``(model, ClassifierConfig, set_length, fingerprint)``."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CorruptInputError(f"{path} is not a classifier checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CorruptInputError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    config = ClassifierConfig(**{**ckpt["config"], "pretrained_path": None})
    model = build_model(config, ckpt["set_length"])
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, config, ckpt["set_length"], ckpt.get("fingerprint")


class CNNBertClassifier(ClassifierMixin, BaseEstimator):
    """Estimator over :class:`PreparedVolume` lists.

    ``fit(X, y, eval_set=(X_val, y_val))`` trains the clip network;
    ``predict_proba`` averages softmax over the test-time slice sets;
    ``transform`` returns the per-set embedding matrix of each volume.
    """

    def __init__(self, channels="RML", crop_bbox=False, crop_size=224, set_length=SET_LENGTH,
                 use_bert=True, layers=(3, 4, 6, 3), widths=(64, 128, 256, 512), heads=8,
                 bert_layers=1, dropout=0.1, lr=1e-5, max_epochs=200, early_stopping=15,
                 batch_size=4, use_affine=False, use_msc=True, seed=0, workers=0):
        self.channels = channels
        self.crop_bbox = crop_bbox
        self.crop_size = crop_size
        self.set_length = set_length
        self.use_bert = use_bert
        self.layers = layers
        self.widths = widths
        self.heads = heads
        self.bert_layers = bert_layers
        self.dropout = dropout
        self.lr = lr
        self.max_epochs = max_epochs
        self.early_stopping = early_stopping
        self.batch_size = batch_size
        self.use_affine = use_affine
        self.use_msc = use_msc
        self.seed = seed
        self.workers = workers

    def _configs(self):
        compose = ComposeConfig(
            channels=self.channels, crop_bbox=self.crop_bbox, crop_size=self.crop_size,
            augment=AugmentConfig(use_affine=self.use_affine, use_msc=self.use_msc),
        )
        model_cfg = ClassifierConfig(
            use_bert=self.use_bert, layers=tuple(self.layers), widths=tuple(self.widths),
            bert_heads=self.heads, bert_layers=self.bert_layers, dropout=self.dropout, lr=self.lr,
            max_epochs=self.max_epochs, early_stopping=self.early_stopping, batch_size=self.batch_size,
        )
        return compose, model_cfg

    @staticmethod
    def _with_labels(X, y):
        if y is None:
            return list(X)
        y = check_binary_labels(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} volumes but {len(y)} labels")
        return [PreparedVolume(v.volume_id, v.slices, v.masks, int(lbl), v.bbox) for v, lbl in zip(X, y)]

    def fit(self, X, y=None, eval_set=None):
        train = self._with_labels(X, y)
        val = train if eval_set is None else self._with_labels(*eval_set)
        self.compose_, self.model_config_ = self._configs()
        self.model_, self.history_ = train_classifier(
            train, val, self.model_config_, self.compose_, self.set_length, self.seed, self.workers
        )
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        out = []
        for v in X:
            logits, _, _ = volume_outputs(v, self.model_, self.compose_, self.set_length)
            out.append(aggregate_softmax(logits))
        return np.array(out)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def transform(self, X):
        check_is_fitted(self, "model_")
        return [volume_outputs(v, self.model_, self.compose_, self.set_length)[1] for v in X]
