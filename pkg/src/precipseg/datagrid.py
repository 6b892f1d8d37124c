"""Gridded geodata model: raster IO, channel stacking, normalization,
rainfall-category quantization, patch tiling, and stratified splitting.

File formats (all little-endian):

MGRID raster   magic "MGRD", version u16=1, H u32, W u32, C u32,
               dtype u8=0 (float32), then C*H*W float32 values laid out
               [channel][row][col]. NaN encodes nodata; a cell is invalid
               as a whole if any channel holds NaN.

MLBL labels    magic "MLBL", version u16=1, H u32, W u32, K u8, then
               H*W uint8 class ids; 255 marks invalid cells.

Manifest       JSON: region name, LPA quantization scheme, the ordered
               (modality, month) -> raster path table, rain raster path,
               target label path, optional per-channel normalization stats.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import rng

MGRID_MAGIC = b"MGRD"
MLBL_MAGIC = b"MLBL"
FORMAT_VERSION = 1
INVALID_LABEL = 255

CLASS_NAMES = ("Scarcity", "Deficit", "Normal", "Excess", "Large Excess")


class FormatError(ValueError):
    """Malformed binary raster or label file."""


# ---------------------------------------------------------------------------
# grids


class RasterGrid:
    """Dense multi-channel float32 grid with a shared per-cell validity mask.

    Values at masked cells are normalized to 0 so that write/read
    round-trips are bit-exact.
    """

    def __init__(self, values: np.ndarray, mask: Optional[np.ndarray] = None):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3:
            raise ValueError(f"raster values must be [C,H,W], got shape {values.shape}")
        c, h, w = values.shape
        if h < 1 or w < 1 or c < 1:
            raise ValueError(f"empty raster extents {values.shape}")
        if mask is None:
            mask = np.ones((h, w), dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise ValueError(f"mask shape {mask.shape} != grid {h}x{w}")
        if not np.isfinite(values[:, mask]).all():
            raise ValueError("non-finite values at unmasked cells")
        self.values = np.where(mask[None], values, np.float32(0.0))
        self.mask = mask

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def write_grid(grid: RasterGrid, path) -> None:
    payload = np.where(grid.mask[None], grid.values, np.float32(np.nan))
    with open(path, "wb") as fh:
        fh.write(MGRID_MAGIC)
        fh.write(struct.pack("<HIIIB", FORMAT_VERSION, grid.height, grid.width,
                             grid.channels, 0))
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def read_grid(path) -> RasterGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 19:
        raise FormatError(f"{path}: header truncated at byte {len(blob)} (need 19)")
    if blob[:4] != MGRID_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    version, h, w, c, dtype = struct.unpack_from("<HIIIB", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    if dtype != 0:
        raise FormatError(f"{path}: unsupported dtype code {dtype} at byte 18")
    if h < 1 or w < 1 or c < 1:
        raise FormatError(f"{path}: zero extent in header ({c}x{h}x{w})")
    expected = 19 + 4 * c * h * w
    if len(blob) != expected:
        raise FormatError(f"{path}: payload truncated, expected {expected} bytes, "
                          f"got {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=19).reshape(c, h, w).copy()
    mask = ~np.isnan(values).any(axis=0)
    return RasterGrid(np.nan_to_num(values, nan=0.0), mask)


@dataclass
class LabelGrid:
    """Per-cell class ids (uint8); 255 marks invalid cells."""

    labels: np.ndarray
    num_classes: int = 5

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise ValueError(f"labels must be 2-D, got shape {self.labels.shape}")
        bad = (self.labels != INVALID_LABEL) & (self.labels >= self.num_classes)
        if bad.any():
            raise ValueError(f"label {int(self.labels[bad].max())} exceeds "
                             f"{self.num_classes} classes")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def valid(self) -> np.ndarray:
        return self.labels != INVALID_LABEL


def write_labels(grid: LabelGrid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MLBL_MAGIC)
        fh.write(struct.pack("<HIIB", FORMAT_VERSION, grid.height, grid.width,
                             grid.num_classes))
        fh.write(grid.labels.tobytes())


def read_labels(path) -> LabelGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 15:
        raise FormatError(f"{path}: header truncated at byte {len(blob)} (need 15)")
    if blob[:4] != MLBL_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    version, h, w, k = struct.unpack_from("<HIIB", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    if h < 1 or w < 1:
        raise FormatError(f"{path}: zero extent in header ({h}x{w})")
    expected = 15 + h * w
    if len(blob) != expected:
        raise FormatError(f"{path}: payload truncated, expected {expected} bytes, "
                          f"got {len(blob)}")
    labels = np.frombuffer(blob, dtype=np.uint8, offset=15).reshape(h, w).copy()
    return LabelGrid(labels, num_classes=k)


# ---------------------------------------------------------------------------
# channel stacking


@dataclass
class GridStack:
    """Composite [C,H,W] tensor of stacked (modality, month) channels."""

    values: np.ndarray                       # [C,H,W] float32
    mask: np.ndarray                         # [H,W] bool
    index: list                              # channel -> (modality, month)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def stack_modalities(grids: Sequence) -> GridStack:
    """Stack single-channel (modality, month, grid) entries channel-wise.

    The entry order must be modality-major, month-minor; the combined mask
    is the intersection of the input masks.
    """
    if not grids:
        raise ValueError("no grids to stack")
    months_by_mod: dict = {}
    order = []
    for modality, month, _ in grids:
        months_by_mod.setdefault(modality, []).append(month)
        if modality not in order:
            order.append(modality)
    month_seqs = list(months_by_mod.values())
    if any(seq != month_seqs[0] for seq in month_seqs[1:]):
        raise ValueError("every modality must cover the same month sequence")
    flat = [(m, t) for m in order for t in months_by_mod[m]]
    if flat != [(m, t) for m, t, _ in grids]:
        raise ValueError("grids must be ordered modality-major, month-minor")

    h, w = grids[0][2].height, grids[0][2].width
    channels = []
    mask = np.ones((h, w), dtype=bool)
    for modality, month, grid in grids:
        if grid.channels != 1:
            raise ValueError(f"modality {modality!r} month {month}: expected a "
                             f"single-channel grid, got {grid.channels}")
        if (grid.height, grid.width) != (h, w):
            raise ValueError(f"modality {modality!r} month {month}: extent "
                             f"{grid.height}x{grid.width} != {h}x{w}")
        channels.append(grid.values[0])
        mask &= grid.mask
    values = np.where(mask[None], np.stack(channels), np.float32(0.0))
    return GridStack(values, mask, [(m, t) for m, t, _ in grids])


# ---------------------------------------------------------------------------
# normalization


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean],
                "std": [float(v) for v in self.std]}

    @classmethod
    def from_json(cls, obj: dict) -> "ChannelStats":
        return cls(np.asarray(obj["mean"], dtype=np.float64),
                   np.asarray(obj["std"], dtype=np.float64))


_ZERO_VAR = 1e-12


def normalize_channels(stack: GridStack, stats: Optional[ChannelStats] = None,
                       stat_mask: Optional[np.ndarray] = None):
    """Per-channel z-score over valid cells.

    When ``stats`` is given (the val/test path) they are applied as-is;
    otherwise statistics are computed over valid cells, optionally further
    restricted by ``stat_mask`` (e.g. the training-split footprint).
    Zero-variance channels pass through centered.
    """
    if stats is None:
        sel = stack.mask if stat_mask is None else (stack.mask & stat_mask)
        if not sel.any():
            raise ValueError("no valid cells to compute channel statistics")
        vals = stack.values[:, sel].astype(np.float64)
        mean = vals.mean(axis=1)
        std = vals.std(axis=1)
        stats = ChannelStats(mean, std)
    divisor = np.where(stats.std > _ZERO_VAR, stats.std, 1.0)
    normed = ((stack.values - stats.mean[:, None, None].astype(np.float32))
              / divisor[:, None, None].astype(np.float32))
    normed = np.where(stack.mask[None], normed, np.float32(0.0))
    return GridStack(normed, stack.mask.copy(), list(stack.index)), stats


# ---------------------------------------------------------------------------
# LPA quantization


@dataclass(frozen=True)
class LpaScheme:
    """Regional rainfall categorization: contiguous half-open mm intervals.

    ``lower_bounds`` holds the inclusive lower bound of each of the K
    classes in order; the last class is unbounded above.
    """

    region: str
    lpa_mm: float
    lower_bounds: tuple

    def __post_init__(self):
        lb = tuple(float(v) for v in self.lower_bounds)
        if lb[0] != 0.0:
            raise ValueError("first interval must start at 0 mm")
        if any(b <= a for a, b in zip(lb, lb[1:])):
            raise ValueError(f"interval bounds must increase: {lb}")
        object.__setattr__(self, "lower_bounds", lb)

    @property
    def num_classes(self) -> int:
        return len(self.lower_bounds)

    def intervals(self) -> list:
        """(lower, upper-or-None, class id, class name) per class."""
        out = []
        for i, lo in enumerate(self.lower_bounds):
            hi = self.lower_bounds[i + 1] if i + 1 < len(self.lower_bounds) else None
            out.append((lo, hi, i, CLASS_NAMES[i]))
        return out

    def classify(self, mm: np.ndarray) -> np.ndarray:
        return np.searchsorted(np.asarray(self.lower_bounds[1:]),
                               np.asarray(mm, dtype=np.float64), side="right")

    def to_json(self) -> dict:
        return {
            "region": self.region,
            "lpa_mm": self.lpa_mm,
            "classes": [{"id": i, "name": name, "lower_mm": lo,
                         "upper_mm": hi}
                        for lo, hi, i, name in self.intervals()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LpaScheme":
        classes = sorted(obj["classes"], key=lambda c: c["id"])
        return cls(obj["region"], float(obj["lpa_mm"]),
                   tuple(float(c["lower_mm"]) for c in classes))


# Built-in regional schemes. Printed interval tables round to whole mm and
# can leave one-unit gaps; bounds here are the contiguous lower bounds so
# every non-negative rainfall classifies.
REGION_SCHEMES = {
    "Assam": LpaScheme("Assam", 328.6, (0.0, 131.0, 263.0, 395.0, 527.0)),
    "Bihar": LpaScheme("Bihar", 216.5, (0.0, 87.0, 173.0, 260.0, 346.0)),
    "Himachal Pradesh": LpaScheme("Himachal Pradesh", 120.5,
                                  (0.0, 48.0, 96.0, 145.0, 192.8)),
    "Karnataka": LpaScheme("Karnataka", 271.8, (0.0, 109.0, 217.0, 326.0, 435.0)),
    "Kerala": LpaScheme("Kerala", 144.1, (0.0, 58.0, 115.0, 173.0, 231.0)),
}


def quantize_precip(rain: RasterGrid, scheme: LpaScheme) -> LabelGrid:
    """Map a single-channel rainfall grid (mm) to class labels."""
    if rain.channels != 1:
        raise ValueError(f"rain grid must be single-channel, got {rain.channels}")
    mm = rain.values[0]
    if (mm[rain.mask] < 0).any():
        raise ValueError("negative rainfall values")
    labels = scheme.classify(mm).astype(np.uint8)
    labels[~rain.mask] = INVALID_LABEL
    return LabelGrid(labels, num_classes=scheme.num_classes)


# ---------------------------------------------------------------------------
# patch tiling


@dataclass
class PatchSet:
    """Non-overlapping z*z tiles covering the bottom/right-padded grid."""

    patch_size: int
    origins: list                     # patch -> (row, col) in padded grid
    x: np.ndarray                     # [P,C,z,z] float32
    labels: np.ndarray                # [P,z,z] uint8
    mask: np.ndarray                  # [P,z,z] bool
    grid_height: int
    grid_width: int
    num_classes: int

    def __len__(self) -> int:
        return self.x.shape[0]


def tile_patches(stack: GridStack, labels: LabelGrid, patch_size: int = 32) -> PatchSet:
    """Partition a stack and its labels into aligned z*z patches.

    The grid is padded on the bottom/right with invalid cells (value 0,
    label 255) up to multiples of z.
    """
    z = int(patch_size)
    if z < 8 or z % 8:
        raise ValueError(f"patch size must be a positive multiple of 8, got {z}")
    if (labels.height, labels.width) != (stack.height, stack.width):
        raise ValueError(f"labels {labels.height}x{labels.width} do not match "
                         f"stack {stack.height}x{stack.width}")
    h, w = stack.height, stack.width
    hp = -(-h // z) * z
    wp = -(-w // z) * z
    if hp < z or wp < z:
        raise ValueError(f"patch size {z} exceeds padded grid {hp}x{wp}")

    vals = np.zeros((stack.channels, hp, wp), dtype=np.float32)
    vals[:, :h, :w] = stack.values
    mask = np.zeros((hp, wp), dtype=bool)
    mask[:h, :w] = stack.mask
    labs = np.full((hp, wp), INVALID_LABEL, dtype=np.uint8)
    labs[:h, :w] = labels.labels
    labs[~mask] = INVALID_LABEL

    origins = [(r, c) for r in range(0, hp, z) for c in range(0, wp, z)]
    xs = np.stack([vals[:, r:r + z, c:c + z] for r, c in origins])
    ys = np.stack([labs[r:r + z, c:c + z] for r, c in origins])
    ms = np.stack([mask[r:r + z, c:c + z] for r, c in origins])
    return PatchSet(z, origins, xs, ys, ms, h, w, labels.num_classes)


def untile(patchset: PatchSet, predictions: np.ndarray) -> LabelGrid:
    """Reassemble per-patch label maps into the original H*W grid.

    Predictions at invalid cells are replaced with the 255 sentinel.
    """
    z = patchset.patch_size
    predictions = np.asarray(predictions, dtype=np.uint8)
    if predictions.shape != patchset.labels.shape:
        raise ValueError(f"predictions shape {predictions.shape} != patch layout "
                         f"{patchset.labels.shape}")
    hp = max(r for r, _ in patchset.origins) + z
    wp = max(c for _, c in patchset.origins) + z
    full = np.full((hp, wp), INVALID_LABEL, dtype=np.uint8)
    for p, (r, c) in enumerate(patchset.origins):
        tile = np.where(patchset.mask[p], predictions[p], INVALID_LABEL)
        full[r:r + z, c:c + z] = tile
    return LabelGrid(full[:patchset.grid_height, :patchset.grid_width],
                     num_classes=patchset.num_classes)


# ---------------------------------------------------------------------------
# stratified splitting


SPLIT_NAMES = ("train", "val", "test")


@dataclass
class SplitAssignment:
    """Patch-level split membership plus per-split class histograms."""

    split: dict                        # patch index -> "train"|"val"|"test"
    histograms: dict                   # split -> np.ndarray[K] valid-cell counts

    def indices(self, name: str) -> list:
        return sorted(i for i, s in self.split.items() if s == name)


def _largest_remainder(n: int, fractions: Sequence[float]) -> list:
    quotas = [f * n for f in fractions]
    counts = [int(q) for q in quotas]
    leftovers = n - sum(counts)
    # ties broken toward the earlier split (train, then val, then test)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftovers]:
        counts[i] += 1
    return counts


def stratified_split(patchset: PatchSet, fractions=(0.70, 0.15, 0.15),
                     seed: int = 0) -> SplitAssignment:
    """Assign patches to train/val/test, stratified by majority valid class.

    Patches are bucketed by their majority class (ties to the lower id),
    shuffled deterministically within each bucket, and allotted by
    largest-remainder rounding of the requested fractions.
    """
    if len(fractions) != 3:
        raise ValueError("fractions must have three entries")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    k = patchset.num_classes
    buckets: dict = {}
    assignable = 0
    for p in range(len(patchset)):
        lab = patchset.labels[p]
        valid = (lab != INVALID_LABEL) & patchset.mask[p]
        if not valid.any():
            continue
        assignable += 1
        major = int(np.bincount(lab[valid], minlength=k).argmax())
        buckets.setdefault(major, []).append(p)
    if assignable < 3:
        raise ValueError(f"need at least 3 assignable patches, got {assignable}")

    split: dict = {}
    for major in sorted(buckets):
        members = buckets[major]
        perm = rng.permutation(rng.derive(seed, 0xB0C4E7, major), 0, len(members))
        shuffled = [members[i] for i in perm]
        counts = _largest_remainder(len(members), fractions)
        pos = 0
        for name, cnt in zip(SPLIT_NAMES, counts):
            for p in shuffled[pos:pos + cnt]:
                split[p] = name
            pos += cnt

    histograms = {name: np.zeros(k, dtype=np.int64) for name in SPLIT_NAMES}
    for p, name in split.items():
        lab = patchset.labels[p]
        valid = (lab != INVALID_LABEL) & patchset.mask[p]
        histograms[name] += np.bincount(lab[valid], minlength=k)
    return SplitAssignment(split, histograms)


def split_csv(patchset: PatchSet, assignment: SplitAssignment) -> str:
    """Split table as CSV rows (patch_row, patch_col, split)."""
    z = patchset.patch_size
    lines = ["patch_row,patch_col,split"]
    for p in sorted(assignment.split):
        r, c = patchset.origins[p]
        lines.append(f"{r // z},{c // z},{assignment.split[p]}")
    return "\n".join(lines) + "\n"


def parse_split_csv(text: str, patchset: PatchSet) -> SplitAssignment:
    lines = [ln for ln in text.strip().split("\n") if ln]
    if not lines or lines[0] != "patch_row,patch_col,split":
        raise ValueError("split CSV must start with 'patch_row,patch_col,split'")
    z = patchset.patch_size
    by_origin = {(r // z, c // z): p for p, (r, c) in enumerate(patchset.origins)}
    split = {}
    for ln in lines[1:]:
        row_s, col_s, name = ln.split(",")
        key = (int(row_s), int(col_s))
        if key not in by_origin:
            raise ValueError(f"split row references unknown patch {key}")
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split name {name!r}")
        split[by_origin[key]] = name
    k = patchset.num_classes
    histograms = {name: np.zeros(k, dtype=np.int64) for name in SPLIT_NAMES}
    for p, name in split.items():
        lab = patchset.labels[p]
        valid = (lab != INVALID_LABEL) & patchset.mask[p]
        histograms[name] += np.bincount(lab[valid], minlength=k)
    return SplitAssignment(split, histograms)


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class Manifest:
    region: str
    scheme: LpaScheme
    modalities: list                   # ordered (modality, month, relative path)
    rain_path: str
    label_path: str
    normalization: Optional[ChannelStats] = None
    base_dir: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        return self.base_dir / rel


def write_manifest(manifest: Manifest, path) -> None:
    obj = {
        "region": manifest.region,
        "scheme": manifest.scheme.to_json(),
        "modalities": [{"modality": m, "month": t, "path": p}
                       for m, t, p in manifest.modalities],
        "rain_path": manifest.rain_path,
        "label_path": manifest.label_path,
        "normalization": (manifest.normalization.to_json()
                          if manifest.normalization else None),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    norm = obj.get("normalization")
    return Manifest(
        region=obj["region"],
        scheme=LpaScheme.from_json(obj["scheme"]),
        modalities=[(e["modality"], int(e["month"]), e["path"])
                    for e in obj["modalities"]],
        rain_path=obj["rain_path"],
        label_path=obj["label_path"],
        normalization=ChannelStats.from_json(norm) if norm else None,
        base_dir=path.parent,
    )


def load_stack(manifest: Manifest) -> GridStack:
    grids = [(m, t, read_grid(manifest.resolve(p)))
             for m, t, p in manifest.modalities]
    return stack_modalities(grids)
