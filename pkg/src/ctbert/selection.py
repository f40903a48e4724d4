"""Closed-lung slice filtering and fixed-length slice-set resampling.

Slice sets hold *positions into the kept-slice list*, not raw slice
indices; ``SelectionResult.kept_indices[p]`` maps a position back to a
slice of the volume.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SET_LENGTH = 32
START_TENTHS = 7
MIN_KEEP = 8

TRAIN_RANDOM = "train_random"
EVAL_UNIFORM = "eval_uniform"
TEST_CENTER = "test_center"


@dataclass(frozen=True)
class SelectionResult:
    kept_indices: tuple
    final_threshold: float
    n_slices: int

    def __len__(self):
        return len(self.kept_indices)


@dataclass(frozen=True)
class SliceSet:
    indices: tuple
    origin: str

    def __len__(self):
        return len(self.indices)

    def slice_indices(self, selection):
        """Map kept-list positions to slice indices of the volume."""
        kept = selection.kept_indices
        return tuple(kept[p] for p in self.indices)


def select_slices(ratios, min_keep=MIN_KEEP):
    """Keep slices whose lung ratio is at least ``t * max(ratios)``.

    ``t`` starts at 0.7 and drops by 0.1 while fewer than ``min_keep``
    slices survive; at ``t = 0`` every slice is kept.
    """
    r = np.asarray(ratios, dtype=float)
    if r.size == 0:
        raise ValueError("cannot select slices from an empty ratio list")
    if np.any(r < 0) or np.any(r > 1) or not np.all(np.isfinite(r)):
        raise ValueError("lung ratios must lie in [0, 1]")
    peak = r.max()
    # thresholds in integer tenths so 0.7 - 7 * 0.1 lands exactly on 0
    tenths = START_TENTHS
    kept = np.flatnonzero(r >= (tenths / 10) * peak)
    while kept.size < min_keep and tenths > 0:
        tenths -= 1
        kept = np.flatnonzero(r >= (tenths / 10) * peak)
    return SelectionResult(tuple(int(i) for i in kept), tenths / 10, int(r.size))


def _n_kept(kept):
    n = len(kept) if not isinstance(kept, (int, np.integer)) else int(kept)
    if n <= 0:
        raise ValueError("no kept slices to resample")
    return n


def uniform_positions(n, k=SET_LENGTH):
    """Center-of-bin positions ``floor((2i+1) n / 2k)`` for ``i < k``.

    A bin center that falls exactly on a slice boundary (only possible when
    ``2k`` divides ``n``) is rounded down in the first half of the set and
    up in the second, so the result is mirror-symmetric under reversal.
    """
    out = []
    for i in range(k):
        q, rem = divmod((2 * i + 1) * n, 2 * k)
        if rem == 0 and 2 * i + 1 < k:
            q -= 1
        out.append(q)
    return out


def resample_train(kept, k=SET_LENGTH, rng=None):
    """Random set of ``k`` sorted positions; without replacement when possible."""
    n = _n_kept(kept)
    rng = np.random.default_rng() if rng is None else rng
    picks = rng.choice(n, size=k, replace=n < k)
    return SliceSet(tuple(int(p) for p in np.sort(picks)), TRAIN_RANDOM)


def resample_eval(kept, k=SET_LENGTH):
    n = _n_kept(kept)
    return SliceSet(tuple(uniform_positions(n, k)), EVAL_UNIFORM)


def n_test_sets(n, k=SET_LENGTH):
    return max(1, n // k)


def resample_test(kept, k=SET_LENGTH):
    """Uniform sets over contiguous strata, plus the middle ``k`` positions.

    With ``m = max(1, n // k)`` strata, set ``j`` resamples the positions
    ``[j n / m, (j + 1) n / m)``.  The center set is added when ``n > k``;
    duplicate sets are dropped.
    """
    n = _n_kept(kept)
    m = n_test_sets(n, k)
    sets = []
    for j in range(m):
        lo, hi = (j * n) // m, ((j + 1) * n) // m
        positions = tuple(lo + p for p in uniform_positions(hi - lo, k))
        sets.append(SliceSet(positions, f"test_uniform_{j}"))
    if n > k:
        start = (n - k) // 2
        center = tuple(range(start, start + k))
        if all(s.indices != center for s in sets):
            sets.append(SliceSet(center, TEST_CENTER))
    return sets


REPORT_HEADER = ["volume_id", "n_slices", "n_kept", "final_threshold", "kept", "sets"]


def write_selection_report(rows, path):
    """CSV audit trail: one row per volume.

    ``rows`` holds ``(volume_id, SelectionResult, list[SliceSet])``.  The
    ``sets`` column lists slice indices, sets separated by ``|``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for volume_id, sel, sets in rows:
            writer.writerow([
                volume_id,
                sel.n_slices,
                len(sel),
                f"{sel.final_threshold:.1f}",
                " ".join(map(str, sel.kept_indices)),
                "|".join(" ".join(map(str, s.slice_indices(sel))) for s in sets),
            ])
