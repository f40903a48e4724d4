"""Second-level classifier over pooled per-set embeddings.

Feature cache layout (``FCV1``, all integers little-endian)::

    magic        4 bytes  b"FCV1"
    count        uint32   number of records
    per record:
      id_len     uint32   byte length of the UTF-8 volume id
      volume_id  id_len bytes
      set_index  int32
      label      int8     0 covid, 1 non-covid, -1 unknown
      embedding  512 x float32
"""

from __future__ import annotations

import copy
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin

from .classifier import VolumePrediction, volume_outputs
from .config import MLPConfig
from .exceptions import CorruptInputError
from .selection import SET_LENGTH
from .validation import check_binary_labels, check_embeddings, check_is_fitted

logger = logging.getLogger(__name__)

MAGIC = b"FCV1"
EMBEDDING_DIM = 512
_HEADER = struct.Struct("<4sI")
_ID_LEN = struct.Struct("<I")
_SET_LABEL = struct.Struct("<ib")
_VECTOR_DTYPE = np.dtype("<f4")

ACTIVATIONS = {"relu": torch.relu, "sigmoid": torch.sigmoid, "tanh": torch.tanh}
POOLINGS = ("max", "avg", "both")
# head configurations swept when comparing pooling and activation choices
MLP_GRID = tuple((p, a) for p in POOLINGS for a in ACTIVATIONS)


@dataclass
class EmbeddingRecord:
    volume_id: str
    set_index: int
    embedding: np.ndarray = field(repr=False)
    label: int | None = None

    def __post_init__(self):
        self.embedding = check_embeddings(self.embedding, EMBEDDING_DIM)[0]


class FeatureCacheWriter:
    """Append-only ``FCV1`` writer; the record count is patched on close."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(MAGIC, 0))
        self.count = 0

    def append(self, record):
        vid = record.volume_id.encode("utf-8")
        label = -1 if record.label is None else int(record.label)
        self._fh.write(_ID_LEN.pack(len(vid)))
        self._fh.write(vid)
        self._fh.write(_SET_LABEL.pack(int(record.set_index), label))
        self._fh.write(np.asarray(record.embedding, dtype=_VECTOR_DTYPE).tobytes())
        self.count += 1

    def close(self):
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(MAGIC, self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_feature_cache(records, path):
    with FeatureCacheWriter(path) as writer:
        for r in records:
            writer.append(r)


def read_feature_cache(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptInputError(f"{path}: truncated feature cache")
    magic, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptInputError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    offset = _HEADER.size
    vec_bytes = EMBEDDING_DIM * _VECTOR_DTYPE.itemsize
    records = []
    try:
        for _ in range(count):
            (n,) = _ID_LEN.unpack_from(data, offset)
            offset += _ID_LEN.size
            vid = data[offset:offset + n].decode("utf-8")
            offset += n
            set_index, label = _SET_LABEL.unpack_from(data, offset)
            offset += _SET_LABEL.size
            if offset + vec_bytes > len(data):
                raise CorruptInputError(f"{path}: truncated record for {vid!r}")
            vec = np.frombuffer(data, dtype=_VECTOR_DTYPE, count=EMBEDDING_DIM, offset=offset)
            offset += vec_bytes
            records.append(EmbeddingRecord(vid, set_index, vec.astype(np.float32), None if label < 0 else label))
    except struct.error as exc:
        raise CorruptInputError(f"{path}: truncated feature cache") from exc
    if offset != len(data):
        raise CorruptInputError(f"{path}: {len(data) - offset} trailing bytes after {count} records")
    return records


def group_records(records):
    """Per-volume ``(embeddings (n_sets, D), label)`` in first-seen order."""
    groups = OrderedDict()
    for r in records:
        vectors, label = groups.get(r.volume_id, ([], r.label))
        vectors.append(r.embedding)
        groups[r.volume_id] = (vectors, label)
    return OrderedDict((k, (np.stack(v), lbl)) for k, (v, lbl) in groups.items())


def pool_features(records, mode="both"):
    """Max, mean, or concatenated max-then-mean of a volume's embeddings."""
    if mode not in POOLINGS:
        raise ValueError(f"pooling must be one of {POOLINGS}, got {mode!r}")
    if len(records) == 0:
        raise ValueError("cannot pool zero records")
    if isinstance(records[0], EmbeddingRecord):
        records = [r.embedding for r in records]
    x = check_embeddings(records)
    if mode == "max":
        return x.max(axis=0)
    if mode == "avg":
        return x.mean(axis=0)
    return np.concatenate([x.max(axis=0), x.mean(axis=0)])


def pooled_dim(mode, dim=EMBEDDING_DIM):
    return 2 * dim if mode == "both" else dim


def mlp_forward(v, weights, activation="sigmoid", dropout=0.0, training=False, in_dim=None):
    """FC -> act -> dropout -> FC -> act -> dropout -> FC on (n, d) or (d,) input.

    ``weights`` is a sequence of three ``(W, b)`` pairs in ``nn.Linear``
    layout (``W`` is out x in).
    """
    x = torch.as_tensor(v)
    if in_dim is not None and x.shape[-1] != in_dim:
        raise ValueError(f"MLP expects {in_dim} input features, got {x.shape[-1]}")
    act = ACTIVATIONS[activation]
    (w1, b1), (w2, b2), (w3, b3) = weights
    x = F.dropout(act(F.linear(x, w1, b1)), dropout, training)
    x = F.dropout(act(F.linear(x, w2, b2)), dropout, training)
    return F.linear(x, w3, b3)


class MLPHead(nn.Module):
    def __init__(self, in_dim, hidden=(128, 32), activation="sigmoid", dropout=0.5, n_classes=2):
        super().__init__()
        self.in_dim = in_dim
        self.activation = activation
        self.dropout = dropout
        self.fc1 = nn.Linear(in_dim, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.fc3 = nn.Linear(hidden[1], n_classes)

    def weights(self):
        return [(fc.weight, fc.bias) for fc in (self.fc1, self.fc2, self.fc3)]

    def forward(self, x):
        return mlp_forward(x, self.weights(), self.activation, self.dropout, self.training, self.in_dim)


def _pooled_dataset(records, mode):
    groups = group_records(records)
    ids = list(groups)
    x = np.stack([pool_features(groups[k][0], mode) for k in ids]).astype(np.float32)
    labels = [groups[k][1] for k in ids]
    return ids, x, labels


def train_mlp(train_records, val_records, cfg=None, seed=0):
    """Train the pooled-feature MLP; return ``(head, history)``.

    Adam, plateau LR reduction on validation accuracy, early stopping and
    best weights by validation accuracy (ties broken by validation loss).
    """
    cfg = cfg or MLPConfig()
    _, x_tr, y_tr = _pooled_dataset(train_records, cfg.pooling)
    if any(lbl is None for lbl in y_tr):
        raise ValueError("training features must all be labeled")
    y_tr = check_binary_labels(y_tr)
    if len(set(y_tr.tolist())) < 2:
        raise ValueError("feature cache contains a single class; need both covid and non-covid")
    _, x_va, y_va = _pooled_dataset(val_records, cfg.pooling)
    if any(lbl is None for lbl in y_va):
        raise ValueError("validation features must all be labeled")
    y_va = check_binary_labels(y_va)

    torch.manual_seed(seed)
    head = MLPHead(x_tr.shape[1], (cfg.fc1, cfg.fc2), cfg.activation, cfg.dropout)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="max", factor=cfg.plateau_factor, patience=cfg.plateau_patience
    )
    xt, yt = torch.from_numpy(x_tr), torch.from_numpy(y_tr)
    xv, yv = torch.from_numpy(x_va), torch.from_numpy(y_va)
    gen = torch.Generator().manual_seed(seed)

    history = []
    best_key, best_state, stale = (-1.0, float("-inf")), copy.deepcopy(head.state_dict()), 0
    for epoch in range(cfg.max_epochs):
        head.train()
        lr = opt.param_groups[0]["lr"]
        perm = torch.randperm(len(xt), generator=gen)
        loss_sum = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(head(xt[idx]), yt[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite MLP loss at epoch {epoch}")
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
        head.eval()
        with torch.no_grad():
            val_logits = head(xv)
            val_acc = float((val_logits.argmax(1) == yv).float().mean())
            val_loss = float(F.cross_entropy(val_logits, yv))
        sched.step(val_acc)
        history.append({"epoch": epoch, "lr": lr, "train_loss": loss_sum / len(xt),
                        "val_loss": val_loss, "val_acc": val_acc})
        # accuracy first; validation loss breaks ties so flat-accuracy starts keep training
        if (val_acc, -val_loss) > best_key:
            best_key, best_state, stale = (val_acc, -val_loss), copy.deepcopy(head.state_dict()), 0
        else:
            stale += 1
            if stale >= cfg.early_stopping:
                break
    head.load_state_dict(best_state)
    head.eval()
    return head, history


def predict_mlp(head, records, pooling):
    ids, x, _ = _pooled_dataset(records, pooling)
    head.eval()
    with torch.no_grad():
        logits = head(torch.from_numpy(x)).numpy()
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return [VolumePrediction(i, lo[None, :], p, level="mlp") for i, lo, p in zip(ids, logits, probs)]


def extract_features(volume, model, compose, set_length=SET_LENGTH, augment=None, rng=None):
    """One embedding record per test-time slice set of a prepared volume."""
    _, embeddings, _ = volume_outputs(volume, model, compose, set_length, augment, rng)
    return [EmbeddingRecord(volume.volume_id, i, e, volume.label) for i, e in enumerate(embeddings)]


def save_mlp(path, head, cfg, fingerprint=None):
    torch.save({"format": "ctbert-mlp", "version": 1, "fingerprint": fingerprint,
                "in_dim": head.in_dim, "config": cfg.model_dump(mode="json"),
                "state_dict": head.state_dict()}, path)


def load_mlp(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != "ctbert-mlp":
        raise CorruptInputError(f"{path} is not an MLP checkpoint")
    cfg = MLPConfig(**ckpt["config"])
    head = MLPHead(ckpt["in_dim"], (cfg.fc1, cfg.fc2), cfg.activation, cfg.dropout)
    head.load_state_dict(ckpt["state_dict"])
    head.eval()
    return head, cfg


class FeatureMLPClassifier(ClassifierMixin, BaseEstimator):
    """Estimator over per-volume embedding matrices (one (n_sets, 512) array each)."""

    def __init__(self, pooling="both", activation="sigmoid", dropout=0.5, lr=None,
                 max_epochs=100, early_stopping=15, batch_size=16, seed=0):
        self.pooling = pooling
        self.activation = activation
        self.dropout = dropout
        self.lr = lr
        self.max_epochs = max_epochs
        self.early_stopping = early_stopping
        self.batch_size = batch_size
        self.seed = seed

    @staticmethod
    def _records(X, y):
        labels = [None] * len(X) if y is None else check_binary_labels(y).tolist()
        return [
            EmbeddingRecord(f"v{i}", j, e, lbl)
            for i, (mat, lbl) in enumerate(zip(X, labels))
            for j, e in enumerate(check_embeddings(mat, EMBEDDING_DIM))
        ]

    def fit(self, X, y, eval_set=None):
        self.config_ = MLPConfig(pooling=self.pooling, activation=self.activation, dropout=self.dropout,
                                 lr=self.lr, max_epochs=self.max_epochs,
                                 early_stopping=self.early_stopping, batch_size=self.batch_size)
        train = self._records(X, y)
        val = train if eval_set is None else self._records(*eval_set)
        self.head_, self.history_ = train_mlp(train, val, self.config_, self.seed)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "head_")
        preds = predict_mlp(self.head_, self._records(X, None), self.pooling)
        return np.stack([p.aggregate_prob for p in preds])

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
