"""Dataset discovery, slice loading and normalization to 512x512 grayscale."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .exceptions import ConfigurationError, CorruptInputError
from .validation import check_raster

logger = logging.getLogger(__name__)

SLICE_SIZE = 512
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_HEADER = ["volume_id", "path", "label", "slice_count"]

# Class index convention: 0 = covid, 1 = non-covid.
LABELS = ("covid", "non-covid")
UNKNOWN = "unknown"


def label_to_index(label):
    if label is None or label == UNKNOWN:
        return None
    return LABELS.index(label)


def index_to_label(index):
    return UNKNOWN if index is None else LABELS[int(index)]


def natural_key(name):
    """Sort key that orders embedded integers numerically ("2" < "10")."""
    parts = re.split(r"(\d+)", str(name))
    return [(0, int(p), "") if p.isdigit() else (1, 0, p.lower()) for p in parts]


@dataclass(frozen=True)
class ManifestEntry:
    volume_id: str
    path: Path
    label: str
    slice_count: int

    @property
    def label_index(self):
        return label_to_index(self.label)


@dataclass
class CTVolume:
    volume_id: str
    slices: list = field(repr=False)
    label: int | None = None
    filenames: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.slices)

    def stack(self):
        return np.stack(self.slices)


def _slice_files(directory):
    files = [p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=lambda p: natural_key(p.name))


def _class_of(dirname):
    name = dirname.lower().replace("_", "-")
    if name in ("noncovid", "non-covid"):
        return "non-covid"
    if name == "covid":
        return "covid"
    return None


def scan_dataset(root, split):
    """List the volumes of one split as manifest entries.

    Accepts ``<root>/<split>/<class>/<volume_id>/`` with class ``covid`` or
    ``non-covid``, or unlabeled ``<root>/<split>/<volume_id>/`` (label
    ``unknown``).  Empty volume directories are skipped with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root does not exist: {root}")
    split_dir = root / split
    if not split_dir.is_dir():
        raise ConfigurationError(f"split directory does not exist: {split_dir}")

    candidates = []
    for child in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        label = _class_of(child.name)
        if label is None:
            candidates.append((child, UNKNOWN))
        else:
            candidates.extend((v, label) for v in child.iterdir() if v.is_dir())

    entries = []
    seen = {}
    for vdir, label in candidates:
        count = len(_slice_files(vdir))
        if count == 0:
            logger.warning("skipping empty volume directory %s", vdir)
            continue
        if vdir.name in seen:
            raise ConfigurationError(
                f"duplicate volume id {vdir.name!r}: {seen[vdir.name]} and {vdir}"
            )
        seen[vdir.name] = vdir
        entries.append(ManifestEntry(vdir.name, vdir, label, count))
    entries.sort(key=lambda e: natural_key(e.volume_id))
    return entries


def write_manifest(entries, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in entries:
            writer.writerow([e.volume_id, str(e.path), e.label, e.slice_count])


def read_manifest(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise CorruptInputError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
        return [
            ManifestEntry(r["volume_id"], Path(r["path"]), r["label"], int(r["slice_count"]))
            for r in reader
        ]


def normalize_slice(img):
    """Resize a grayscale slice to 512x512 (bilinear); 512x512 input is returned as-is."""
    img = check_raster(img, name="slice")
    if img.shape == (SLICE_SIZE, SLICE_SIZE):
        return img
    return cv2.resize(img, (SLICE_SIZE, SLICE_SIZE), interpolation=cv2.INTER_LINEAR)


def read_slice(path):
    """Read one slice image as 8-bit grayscale (color converted by luminance)."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "1"):
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise CorruptInputError(f"cannot read slice image {path}: {exc}") from exc
    if arr.size == 0:
        raise CorruptInputError(f"slice image {path} has zero size")
    return arr


def load_volume(entry):
    files = _slice_files(entry.path)
    if not files:
        raise CorruptInputError(f"volume directory {entry.path} contains no slice images")
    slices = []
    for f in files:
        try:
            slices.append(normalize_slice(read_slice(f)))
        except CorruptInputError as exc:
            raise CorruptInputError(f"{f}: {exc}") from exc
    return CTVolume(
        volume_id=entry.volume_id,
        slices=slices,
        label=entry.label_index,
        filenames=[f.name for f in files],
    )
