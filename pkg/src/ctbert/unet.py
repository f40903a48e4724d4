"""UNet lung-field segmentation, mask refinement and masked-lung images."""

from __future__ import annotations

import copy
import logging

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage as ndi
from sklearn.base import BaseEstimator

from .config import UNetConfig
from .exceptions import CorruptInputError
from .validation import check_binary, check_is_fitted, check_raster, check_same_shape

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ctbert-unet"
CHECKPOINT_VERSION = 1
THRESHOLD = 0.5

_ELLIPSE_5 = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (5, 5))


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections and a sigmoid output head."""

    def __init__(self, depth=4, base_width=32):
        super().__init__()
        widths = [base_width * 2**i for i in range(depth + 1)]
        self.encoders = nn.ModuleList(
            _double_conv(1 if i == 0 else widths[i - 1], widths[i]) for i in range(depth)
        )
        self.bottleneck = _double_conv(widths[depth - 1], widths[depth])
        self.upsamplers = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(depth))
        )
        self.decoders = nn.ModuleList(
            _double_conv(2 * widths[i], widths[i]) for i in reversed(range(depth))
        )
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec in zip(self.upsamplers, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return torch.sigmoid(self.head(x))


class SegModel:
    """A trained UNet plus the raster geometry it expects.

    ``input_size`` is the slice size accepted by :func:`infer_mask`;
    ``work_size`` is the resolution the network runs at (slices are
    resized on the way in and probabilities on the way out).
    """

    def __init__(self, net, input_size=512, work_size=512, config=None):
        self.net = net
        self.input_size = input_size
        self.work_size = work_size
        self.config = config or UNetConfig(input_size=input_size, work_size=work_size)

    def save(self, path):
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "config": self.config.model_dump(mode="json"),
                "state_dict": self.net.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path):
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
        if ckpt.get("format") != CHECKPOINT_FORMAT:
            raise CorruptInputError(f"{path} is not a UNet checkpoint")
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise CorruptInputError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
        config = UNetConfig(**ckpt["config"])
        net = UNet(config.depth, config.base_width)
        net.load_state_dict(ckpt["state_dict"])
        net.eval()
        return cls(net, config.input_size, config.work_size, config)


def _to_work(images, size, interpolation):
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return np.stack([cv2.resize(im, (size, size), interpolation=interpolation) for im in images])


def soft_dice(prob, target, eps=1.0):
    dims = tuple(range(1, prob.ndim))
    inter = (prob * target).sum(dims)
    return ((2 * inter + eps) / (prob.sum(dims) + target.sum(dims) + eps)).mean()


def dice(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = a.sum() + b.sum()
    return 1.0 if total == 0 else 2.0 * np.logical_and(a, b).sum() / total


def _seg_loss(prob, target):
    return F.binary_cross_entropy(prob, target) + 1.0 - soft_dice(prob, target)


def train_unet(slices, masks, config=None):
    """Train a UNet on (slice, binary lung mask) pairs.

    Ground-glass and consolidation annotations must already be merged into
    the lung class.  Returns the checkpoint with the lowest validation loss.
    """
    config = config or UNetConfig()
    if len(slices) == 0:
        raise ValueError("segmentation corpus is empty")
    if len(slices) != len(masks):
        raise ValueError(f"{len(slices)} slices but {len(masks)} masks")
    xs, ys = [], []
    for s, m in zip(slices, masks):
        s = check_raster(s, name="slice", dtype=np.uint8)
        m = check_binary(m)
        check_same_shape(s, m, names=("slice", "mask"))
        xs.append(cv2.resize(s, (config.input_size,) * 2, interpolation=cv2.INTER_LINEAR))
        ys.append(cv2.resize(m.astype(np.uint8), (config.input_size,) * 2, interpolation=cv2.INTER_NEAREST))
    x = _to_work(np.stack(xs), config.work_size, cv2.INTER_LINEAR).astype(np.float32) / 255.0
    y = _to_work(np.stack(ys), config.work_size, cv2.INTER_NEAREST).astype(np.float32)
    x = torch.from_numpy(x[:, None])
    y = torch.from_numpy(y[:, None])

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(x))
    n_val = int(round(config.val_fraction * len(x))) if len(x) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if n_val == 0:
        val_idx = train_idx

    net = UNet(config.depth, config.base_width)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=config.plateau_factor, patience=config.plateau_patience
    )
    best_loss, best_state, stale = float("inf"), copy.deepcopy(net.state_dict()), 0
    for epoch in range(config.epochs):
        net.train()
        perm = train_idx[rng.permutation(len(train_idx))]
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start:start + config.batch_size]
            opt.zero_grad()
            loss = _seg_loss(net(x[batch]), y[batch])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite segmentation loss at epoch {epoch}")
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            val_loss = float(
                sum(_seg_loss(net(x[[i]]), y[[i]]) for i in val_idx) / len(val_idx)
            )
        sched.step(val_loss)
        logger.info("unet epoch %d val_loss %.4f", epoch, val_loss)
        if val_loss < best_loss:
            best_loss, best_state, stale = val_loss, copy.deepcopy(net.state_dict()), 0
        else:
            stale += 1
            if stale >= config.early_stopping:
                break
    net.load_state_dict(best_state)
    net.eval()
    return SegModel(net, config.input_size, config.work_size, config)


def infer_mask(slice_, model):
    """Per-pixel lung probability in [0, 1], same dims as the slice."""
    probs = infer_masks([slice_], model)
    return probs[0]


def infer_masks(slices, model, batch_size=4):
    arr = np.stack([check_raster(s, name="slice", dtype=np.uint8) for s in slices])
    if arr.shape[1:] != (model.input_size, model.input_size):
        raise CorruptInputError(
            f"model expects {model.input_size}x{model.input_size} slices, got {arr.shape[1:]}"
        )
    x = _to_work(arr, model.work_size, cv2.INTER_LINEAR).astype(np.float32) / 255.0
    model.net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            batch = torch.from_numpy(x[start:start + batch_size, None])
            out.append(model.net(batch)[:, 0].numpy())
    probs = np.concatenate(out)
    if model.work_size != model.input_size:
        probs = np.stack(
            [cv2.resize(p, (model.input_size,) * 2, interpolation=cv2.INTER_LINEAR) for p in probs]
        )
    return np.clip(probs, 0.0, 1.0)


def refine_mask(raw):
    """Smooth the edges (5x5 elliptical open then close) and fill interior holes."""
    mask = check_binary(raw).astype(np.uint8)
    mask = cv2.morphologyEx(mask, cv2.MORPH_OPEN, _ELLIPSE_5)
    mask = cv2.morphologyEx(mask, cv2.MORPH_CLOSE, _ELLIPSE_5)
    return ndi.binary_fill_holes(mask.astype(bool))


def apply_mask(slice_, mask):
    """Lung image: slice values inside the mask, 0 elsewhere."""
    slice_ = np.asarray(slice_)
    mask = np.asarray(mask, dtype=bool)
    check_same_shape(slice_, mask, names=("slice", "mask"))
    return np.where(mask, slice_, 0).astype(slice_.dtype)


def segment_slices(slices, model, batch_size=4):
    """Refined binary lung masks for a sequence of slices."""
    probs = infer_masks(slices, model, batch_size=batch_size)
    return np.stack([refine_mask(p >= THRESHOLD) for p in probs])


class UNetSegmenter(BaseEstimator):
    """Estimator wrapper: ``fit`` on (slices, masks), ``predict`` refined masks."""

    def __init__(self, depth=4, base_width=32, input_size=512, work_size=512, lr=1e-5,
                 epochs=100, batch_size=2, val_fraction=0.2, early_stopping=10, seed=0):
        self.depth = depth
        self.base_width = base_width
        self.input_size = input_size
        self.work_size = work_size
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.early_stopping = early_stopping
        self.seed = seed

    def fit(self, X, y):
        config = UNetConfig(**self.get_params())
        self.model_ = train_unet(X, y, config)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return infer_masks(X, self.model_)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return segment_slices(X, self.model_)

    def transform(self, X):
        return self.predict(X)
