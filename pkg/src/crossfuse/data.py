"""Scene cubes, patch extraction, train/test splits and a synthetic scene generator.

Cube file layout (little-endian), one file per raster stack::

    8s  magic "HLCUBE01"
    u32 H, u32 W, u32 C
    u8  dtype code: 0 = float64, 1 = int32 (labels, C = 1)
    payload, row-major (H, W, C)

Labels use 0 for unlabeled pixels and 1..n_classes for classes on disk;
in memory patch labels are 0-indexed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CUBE_MAGIC = b"HLCUBE01"
_HEADER = struct.Struct("<8sIIIB")
DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i4")}


class CubeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raster files


def write_cube(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise CubeError(f"cube arrays must be (H, W) or (H, W, C), got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        if arr.shape[2] != 1:
            raise CubeError("integer (label) cubes must have a single channel")
        code = 1
    else:
        code = 0
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CUBE_MAGIC, h, w, c, code))
        fh.write(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())


def read_cube(path, mmap: bool = False) -> np.ndarray:
    """Read a cube file as an (H, W, C) array; ``mmap`` maps it read-only instead."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise CubeError(f"{path}: truncated header")
    magic, h, w, c, code = _HEADER.unpack(head)
    if magic != CUBE_MAGIC:
        raise CubeError(f"{path}: bad magic {magic!r}, expected {CUBE_MAGIC!r}")
    if code not in DTYPE_CODES:
        raise CubeError(f"{path}: unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    expected = _HEADER.size + h * w * c * dtype.itemsize
    size = Path(path).stat().st_size
    if size != expected:
        raise CubeError(f"{path}: file is {size} bytes, header implies {expected}")
    if mmap:
        return np.memmap(path, dtype=dtype, mode="r", offset=_HEADER.size, shape=(h, w, c))
    raw = np.fromfile(path, dtype=dtype, offset=_HEADER.size)
    return raw.reshape(h, w, c)


def text_bands_to_cube(band_paths: Sequence, out_path, labels: bool = False) -> np.ndarray:
    """Stack whitespace-separated text matrices (one band per file) into a cube file."""
    bands = [np.loadtxt(p, ndmin=2) for p in band_paths]
    if not bands:
        raise CubeError("no band files given")
    shapes = {b.shape for b in bands}
    if len(shapes) != 1:
        raise CubeError(f"band files disagree in shape: {sorted(shapes)}")
    cube = np.stack(bands, axis=-1)
    if labels:
        if cube.shape[2] != 1:
            raise CubeError("a label cube takes exactly one band file")
        if not np.all(cube == np.round(cube)):
            raise CubeError("label matrix contains non-integer values")
        cube = cube.astype(np.int32)
    write_cube(out_path, cube)
    return cube


@dataclass
class SceneCube:
    hsi: np.ndarray
    lidar: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels.ndim == 3:
            self.labels = self.labels[:, :, 0]
        shapes = (self.hsi.shape[:2], self.lidar.shape[:2], self.labels.shape)
        if not (shapes[0] == shapes[1] == shapes[2]):
            raise CubeError(
                f"rasters are not co-registered: hsi {self.hsi.shape}, lidar {self.lidar.shape}, "
                f"labels {self.labels.shape}"
            )

    @property
    def n_classes(self) -> int:
        return int(self.labels.max())

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def save(self, hsi_path, lidar_path, labels_path) -> None:
        write_cube(hsi_path, self.hsi)
        write_cube(lidar_path, self.lidar)
        write_cube(labels_path, self.labels.astype(np.int32))


def load_cube(hsi_path, lidar_path, labels_path, mmap: bool = False) -> SceneCube:
    hsi = read_cube(hsi_path, mmap)
    lidar = read_cube(lidar_path, mmap)
    labels = read_cube(labels_path, mmap)
    if hsi.dtype.kind != "f" or lidar.dtype.kind != "f":
        raise CubeError("HSI and LiDAR cubes must be float64")
    if labels.dtype.kind != "i" or labels.shape[2] != 1:
        raise CubeError(f"labels must be a single-channel int32 cube, got {labels.dtype} {labels.shape}")
    if not (hsi.shape[:2] == lidar.shape[:2] == labels.shape[:2]):
        raise CubeError(
            f"rasters are not co-registered: hsi {hsi.shape} ({hsi_path}), lidar {lidar.shape} ({lidar_path}), "
            f"labels {labels.shape} ({labels_path})"
        )
    if labels.min() < 0:
        raise CubeError("labels must be non-negative (0 = unlabeled)")
    return SceneCube(hsi, lidar, labels[:, :, 0])


def _minmax(band_stack: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    ref = band_stack if mask is None else band_stack[mask][None]
    lo = ref.min(axis=(0, 1))
    hi = ref.max(axis=(0, 1))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = (band_stack - lo) / safe
    out[..., span == 0] = 0.0
    return np.clip(out, 0.0, 1.0)


def normalize(cube: SceneCube, mask: np.ndarray | None = None) -> SceneCube:
    """Per-band min-max scaling to [0, 1]; constant bands become 0.

    Statistics come from the whole scene, or only from pixels where ``mask``
    is true (e.g. training pixels), with values clipped to [0, 1].
    """
    return replace(
        cube,
        hsi=_minmax(np.asarray(cube.hsi, dtype=np.float64), mask),
        lidar=_minmax(np.asarray(cube.lidar, dtype=np.float64), mask),
    )


# ---------------------------------------------------------------------------
# patches


class PatchView:
    """Lazy (N, p, p, C) patch array backed by a mirror-padded raster.

    Indexing with an int, slice or index array materializes only the
    requested patches.
    """

    def __init__(self, padded: np.ndarray, rows: np.ndarray, cols: np.ndarray, patch_size: int):
        self.padded = padded
        self.rows = rows
        self.cols = cols
        self.patch_size = patch_size
        # (H, W, C, p, p) view, no copy
        self._windows = sliding_window_view(padded, (patch_size, patch_size), axis=(0, 1))

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def shape(self) -> tuple[int, ...]:
        p = self.patch_size
        return (len(self.rows), p, p, self.padded.shape[2])

    def __getitem__(self, idx) -> np.ndarray:
        r, c = self.rows[idx], self.cols[idx]
        win = self._windows[r, c]
        return np.ascontiguousarray(np.moveaxis(win, -3, -1), dtype=np.float64)

    def __array__(self, dtype=None, copy=None):
        out = self[np.arange(len(self))]
        return out if dtype is None else out.astype(dtype)

    def subset(self, idx) -> PatchView:
        return PatchView(self.padded, self.rows[idx], self.cols[idx], self.patch_size)


@dataclass
class PatchDataset:
    hsi: PatchView
    lidar: PatchView
    labels: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    patch_size: int
    is_train: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx) -> PatchDataset:
        idx = np.asarray(idx)
        return PatchDataset(
            self.hsi.subset(idx), self.lidar.subset(idx), self.labels[idx], self.rows[idx], self.cols[idx],
            self.patch_size, None if self.is_train is None else self.is_train[idx],
        )

    def _require_split(self) -> np.ndarray:
        if self.is_train is None:
            raise ValueError("dataset has not been split")
        return self.is_train

    @property
    def train(self) -> PatchDataset:
        return self.subset(np.flatnonzero(self._require_split()))

    @property
    def test(self) -> PatchDataset:
        return self.subset(np.flatnonzero(~self._require_split()))

    def coords(self) -> set[tuple[int, int]]:
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def with_hsi_as_lidar(self) -> PatchDataset:
        """Single-modality stand-in: the HSI patches feed both streams."""
        return replace(self, lidar=self.hsi)


def extract_patches(cube: SceneCube, patch_size: int) -> PatchDataset:
    """One mirror-padded patch centred on every labeled pixel, in row-major order."""
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {patch_size}")
    h, w = cube.shape
    if patch_size >= 2 * min(h, w):
        raise ValueError(f"patch size {patch_size} too large for a {h}x{w} scene")
    half = patch_size // 2
    pad = ((half, half), (half, half), (0, 0))
    hsi = np.pad(np.asarray(cube.hsi, dtype=np.float64), pad, mode="reflect")
    lidar = np.pad(np.asarray(cube.lidar, dtype=np.float64), pad, mode="reflect")
    rows, cols = np.nonzero(cube.labels)
    labels = cube.labels[rows, cols].astype(np.int64) - 1
    return PatchDataset(
        PatchView(hsi, rows, cols, patch_size), PatchView(lidar, rows, cols, patch_size),
        labels, rows, cols, patch_size,
    )


# ---------------------------------------------------------------------------
# splits


def read_train_index(path) -> list[tuple[int, int]]:
    """``row col`` pairs, one per line; '#' starts a comment."""
    coords = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'row col', got {line!r}")
        coords.append((int(parts[0]), int(parts[1])))
    return coords


def split_fixed(ds: PatchDataset, train_index_file) -> PatchDataset:
    coords = read_train_index(train_index_file)
    if not coords:
        raise ValueError(f"{train_index_file}: no training coordinates")
    lookup = {rc: i for i, rc in enumerate(zip(ds.rows.tolist(), ds.cols.tolist()))}
    missing = [rc for rc in coords if rc not in lookup]
    if missing:
        raise ValueError(f"{len(missing)} training coordinates are not labeled pixels, e.g. {missing[0]}")
    is_train = np.zeros(len(ds), dtype=bool)
    is_train[[lookup[rc] for rc in coords]] = True
    return replace(ds, is_train=is_train)


def split_per_class(ds: PatchDataset, k: int, rng: np.random.Generator) -> PatchDataset:
    """Draw ``k`` training pixels per class uniformly without replacement."""
    if k < 1:
        raise ValueError(f"per-class training count must be positive, got {k}")
    is_train = np.zeros(len(ds), dtype=bool)
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < k:
            raise ValueError(f"class {c + 1} has {len(members)} labeled pixels, fewer than {k}")
        is_train[rng.choice(members, size=k, replace=False)] = True
    return replace(ds, is_train=is_train)


def write_train_index(ds: PatchDataset, path) -> None:
    tr = ds._require_split()
    with open(path, "w") as fh:
        for r, c in zip(ds.rows[tr], ds.cols[tr]):
            fh.write(f"{r} {c}\n")


# ---------------------------------------------------------------------------
# synthetic scenes


def nearest_mean_accuracy(cube: SceneCube, modality: str) -> float:
    """Pixelwise nearest-class-mean accuracy on labeled pixels.

    ``modality`` is "hsi", "lidar" or "both". Ties go to the lower class index,
    so classes that share a signature cannot both be recovered.
    """
    rows, cols = np.nonzero(cube.labels)
    y = cube.labels[rows, cols] - 1
    parts = {"hsi": [cube.hsi], "lidar": [cube.lidar], "both": [cube.hsi, cube.lidar]}[modality]
    x = np.concatenate([np.asarray(p)[rows, cols] for p in parts], axis=1)
    classes = np.unique(y)
    means = np.stack([x[y == c].mean(axis=0) for c in classes])
    dist = ((x[:, None, :] - means[None]) ** 2).sum(axis=-1)
    pred = classes[dist.argmin(axis=1)]
    return float((pred == y).mean())


def _distinct_rows(rng, n, width, lo, hi, min_dist):
    for _ in range(1000):
        rows = rng.uniform(lo, hi, size=(n, width))
        diff = rows[:, None] - rows[None]
        dist = np.sqrt((diff**2).sum(-1)) + np.eye(n) * 1e9
        if dist.min() > min_dist:
            return rows
    raise RuntimeError("could not draw well-separated signatures")


def synth_scene(n_classes: int, H: int, W: int, C_h: int, C_l: int, noise_sigma: float,
                rng: np.random.Generator, block: int = 16, label_margin: int = 2) -> SceneCube:
    """Blocky labeled scene where some class pairs are separable only by fusion.

    Class 1 copies class 0's HSI signature (different elevation); class 3 (or
    class 2 when there are only three classes) copies the LiDAR signature of
    the class before it. Pixels within ``label_margin`` of a block edge are
    left unlabeled.
    """
    if n_classes < 3:
        raise ValueError("need at least 3 classes to build one HSI- and one LiDAR-ambiguous pair")
    if min(H, W, C_h, C_l, block) < 1 or noise_sigma < 0:
        raise ValueError("scene dimensions must be positive and noise_sigma non-negative")
    gy, gx = -(-H // block), -(-W // block)
    if gy * gx < n_classes:
        raise ValueError(f"{gy * gx} blocks cannot host {n_classes} classes")

    hsi_sig = _distinct_rows(rng, n_classes, C_h, 0.1, 0.9, 0.25)
    hsi_pair = (0, 1)
    lidar_pair = (2, 3) if n_classes >= 4 else (1, 2)
    hsi_sig[hsi_pair[1]] = hsi_sig[hsi_pair[0]]

    # LiDAR groups: the ambiguous pair shares one group, everyone else is unique
    group = np.arange(n_classes)
    group[lidar_pair[1]] = group[lidar_pair[0]]
    _, group = np.unique(group, return_inverse=True)
    n_groups = group.max() + 1
    levels = np.linspace(0.1, 0.9, n_groups)[rng.permutation(n_groups)]
    lidar_group = np.empty((n_groups, C_l))
    lidar_group[:, 0] = levels
    if C_l > 1:
        lidar_group[:, 1:] = _distinct_rows(rng, n_groups, C_l - 1, 0.1, 0.9, 0.0)
    lidar_sig = lidar_group[group]

    reps = -(-gy * gx // n_classes)
    block_class = rng.permutation(np.tile(np.arange(n_classes), reps))[: gy * gx].reshape(gy, gx)
    class_map = np.kron(block_class, np.ones((block, block), dtype=np.int64))[:H, :W]

    yy, xx = np.mgrid[:H, :W]
    ry, rx = yy % block, xx % block
    edge = np.zeros((H, W), dtype=bool)
    if label_margin > 0:
        edge |= (ry < label_margin) & (yy >= block)
        edge |= (ry >= block - label_margin) & (yy < (gy - 1) * block)
        edge |= (rx < label_margin) & (xx >= block)
        edge |= (rx >= block - label_margin) & (xx < (gx - 1) * block)
    labels = np.where(edge, 0, class_map + 1).astype(np.int32)

    clean = SceneCube(hsi_sig[class_map], lidar_sig[class_map], labels)
    oracle = {m: nearest_mean_accuracy(clean, m) for m in ("hsi", "lidar", "both")}
    if oracle["both"] != 1.0 or oracle["hsi"] >= 1.0 or oracle["lidar"] >= 1.0:
        raise RuntimeError(f"synthetic scene failed its separability check: {oracle}")

    hsi = clean.hsi + noise_sigma * rng.standard_normal(clean.hsi.shape)
    lidar = clean.lidar + noise_sigma * rng.standard_normal(clean.lidar.shape)
    meta = {
        "hsi_ambiguous_pair": hsi_pair,
        "lidar_ambiguous_pair": lidar_pair,
        "oracle_accuracy": oracle,
        "hsi_signatures": hsi_sig,
        "lidar_signatures": lidar_sig,
    }
    return SceneCube(hsi, lidar, labels, meta)
