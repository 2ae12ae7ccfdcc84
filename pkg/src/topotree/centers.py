"""Center-voxel extraction: vessel-mask gating, thresholding and 3D NMS on the
negated centerness score (i.e. local-minimum detection)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError
from .phantom import corrupt_centers
from .volume import BinaryMask, LabelVolume, ScalarVolume, linear_index, voxel_of


@dataclass
class CenterVoxelSet:
    """Detected center voxels; ids are dense and follow linear voxel order."""

    voxels: np.ndarray  # (n, 3) int
    scores: np.ndarray  # (n,) float

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.voxels) != len(self.scores):
            raise ValueError("voxels and scores differ in length")

    def __len__(self):
        return len(self.voxels)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    @property
    def positions(self) -> np.ndarray:
        return self.voxels.astype(np.float64)

    @classmethod
    def from_linear(cls, index, scores, dims) -> "CenterVoxelSet":
        index = np.asarray(index, dtype=np.int64)
        order = np.argsort(index, kind="stable")
        return cls(voxel_of(index[order], dims).reshape(-1, 3), np.asarray(scores)[order])

    def subset(self, keep: np.ndarray) -> "CenterVoxelSet":
        """Entries where ``keep`` is true, re-numbered densely."""
        return CenterVoxelSet(self.voxels[keep], self.scores[keep])


def _check_window(window: int) -> int:
    if int(window) != window or window < 3 or window % 2 == 0:
        raise ValueError(f"NMS window must be an odd integer >= 3, got {window}")
    return int(window)


def extract_centers(
    score: ScalarVolume,
    vessel_mask: LabelVolume,
    threshold: float = 1.5,
    window: int = 5,
) -> CenterVoxelSet:
    """Threshold + NMS center detection.

    Candidates are voxels inside the vessel mask, below ``threshold`` and not
    larger than any score in their (border-clipped) window. Candidates are then
    visited in ascending (score, linear index) order; each one is kept unless a
    previously kept voxel lies inside its window. A strict local minimum is
    therefore always kept, and a flat run of equal scores yields one detection
    every ``window // 2 + 1`` voxels.
    """
    window = _check_window(window)
    if score.dims != vessel_mask.dims:
        raise ValueError(f"dims mismatch: {score.dims.shape} vs {vessel_mask.dims.shape}")
    s = score.data
    # 'nearest' padding only repeats in-volume values, so the min equals the clipped-window min
    local_min = ndimage.minimum_filter(s, size=window, mode="nearest")
    cand = (vessel_mask.data > 0) & (s < threshold) & (s <= local_min)
    cand_idx = np.flatnonzero(cand.ravel(order="F"))
    if not len(cand_idx):
        return CenterVoxelSet(np.zeros((0, 3), dtype=np.int64), np.zeros(0))
    cand_scores = s.ravel(order="F")[cand_idx]
    order = np.lexsort((cand_idx, cand_scores))
    half = window // 2
    taken = np.zeros(s.shape, dtype=bool)
    vox = voxel_of(cand_idx, score.dims)
    hi = np.asarray(s.shape)
    kept = []
    for k in order:
        x, y, z = vox[k]
        lo = np.maximum((x - half, y - half, z - half), 0)
        up = np.minimum((x + half + 1, y + half + 1, z + half + 1), hi)
        if taken[lo[0] : up[0], lo[1] : up[1], lo[2] : up[2]].any():
            continue
        taken[x, y, z] = True
        kept.append(k)
    kept = np.asarray(kept, dtype=np.int64)
    return CenterVoxelSet.from_linear(cand_idx[kept], cand_scores[kept].astype(np.float64), score.dims)


def centers_from_ground_truth(phantom, noise_sigma: float = 0.0, drop_fraction: float = 0.0, seed: int = 0,
                              threshold: float = 1.5, window: int = 5) -> CenterVoxelSet:
    """Noisy ground-truth centerness -> extract_centers -> random dropping."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if not 0.0 <= drop_fraction < 1.0:
        raise ValueError("drop_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    score = phantom.gt_centerness
    if noise_sigma > 0:
        noisy = score.data.astype(np.float64) + rng.normal(0.0, noise_sigma, size=score.data.shape)
        score = ScalarVolume(noisy, spacing=score.spacing)
    centers = extract_centers(score, phantom.vessel_labels, threshold, window)
    if drop_fraction > 0 and len(centers):
        # dropping goes through corrupt_centers so removed sets are nested across fractions
        mask = np.zeros(score.dims.shape, dtype=bool)
        mask[tuple(centers.voxels.T)] = True
        kept = corrupt_centers(BinaryMask(mask), drop_fraction, int(rng.integers(2**31))).data
        centers = centers.subset(kept[tuple(centers.voxels.T)])
    return centers


def write_centers(centers: CenterVoxelSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "z", "score"])
        for i, (v, s) in enumerate(zip(centers.voxels, centers.scores)):
            w.writerow([i, int(v[0]), int(v[1]), int(v[2]), repr(float(s))])
    return path


def read_centers(path) -> CenterVoxelSet:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "x", "y", "z", "score"]:
            raise FormatError(f"{path}: expected header id,x,y,z,score, got {header}")
        rows = [r for r in reader if r]
    ids = [int(r[0]) for r in rows]
    if ids != list(range(len(ids))):
        raise FormatError(f"{path}: center ids must be dense 0..n-1 in file order")
    voxels = np.array([[int(r[1]), int(r[2]), int(r[3])] for r in rows], dtype=np.int64).reshape(-1, 3)
    return CenterVoxelSet(voxels, [float(r[4]) for r in rows])


__all__ = [
    "CenterVoxelSet",
    "extract_centers",
    "centers_from_ground_truth",
    "write_centers",
    "read_centers",
    "linear_index",
]
