"""Volume and label I/O, intensity normalization, grid padding and dataset manifests."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import nibabel as nib
import numpy as np

logger = logging.getLogger(__name__)

BACKGROUND, LA, SCAR = 0, 1, 2
LABEL_VALUES = (BACKGROUND, LA, SCAR)


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    case_id: str = ""
    # shape before pad_to_grid, used by crop_to_original
    original_shape: Optional[tuple[int, int, int]] = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError(f"volume {self.case_id!r} contains non-finite intensities")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))


@dataclass
class LabelMap:
    labels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.labels.ndim != 3:
            raise ValueError(f"label map must be 3D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            self.labels = self.labels.astype(np.uint8)
        bad = np.setdiff1d(np.unique(self.labels), LABEL_VALUES)
        if bad.size:
            raise ValueError(f"unknown label value {int(bad[0])} (allowed: {LABEL_VALUES})")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def scar_mask(self) -> np.ndarray:
        return self.labels == SCAR

    def la_mask(self, include_scar: bool = True) -> np.ndarray:
        """LA target mask. By default the scar label counts as part of the atrium."""
        if include_scar:
            return self.labels >= LA
        return self.labels == LA


# ---------------------------------------------------------------- NIfTI files

def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image file: {path}")
    img = nib.load(str(path))
    data = np.asanyarray(img.dataobj)
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise ValueError(f"{path}: expected a 3D image, got shape {data.shape}")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return data, spacing, img.affine


def _affine_for(spacing) -> np.ndarray:
    return np.diag([*spacing, 1.0])


def save_volume(v: Volume, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(np.asarray(v.voxels), _affine_for(v.spacing))
    img.header.set_zooms(v.spacing)
    nib.save(img, str(path))


def save_labels(lm: LabelMap, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(lm.labels.astype(np.uint8), _affine_for(lm.spacing))
    img.header.set_zooms(lm.spacing)
    nib.save(img, str(path))


def load_case(
    image_path,
    label_path=None,
    label_mapping: Optional[Mapping[int, int]] = None,
    case_id: Optional[str] = None,
) -> tuple[Volume, Optional[LabelMap]]:
    """Read an image and, optionally, its label file.

    ``label_mapping`` maps raw label values in the file onto {0, 1, 2}. Values
    that are neither in the mapping nor already in {0, 1, 2} are rejected.
    """
    image_path = Path(image_path)
    data, spacing, _ = _read_nifti(image_path)
    if case_id is None:
        case_id = image_path.name.split(".")[0]
    vol = Volume(data.astype(np.float32), spacing, case_id)
    if label_path is None:
        return vol, None

    raw, lspacing, _ = _read_nifti(Path(label_path))
    if raw.shape != data.shape:
        raise ValueError(f"{case_id}: label shape {raw.shape} != image shape {data.shape}")
    if not np.allclose(lspacing, spacing, atol=1e-4):
        raise ValueError(f"{case_id}: label spacing {lspacing} != image spacing {spacing}")
    raw = np.rint(raw).astype(np.int64)
    labels = remap_labels(raw, label_mapping, case_id)
    return vol, LabelMap(labels, spacing)


def remap_labels(raw: np.ndarray, mapping: Optional[Mapping[int, int]] = None, case_id: str = "") -> np.ndarray:
    mapping = {int(k): int(v) for k, v in (mapping or {}).items()}
    out = np.zeros(raw.shape, dtype=np.uint8)
    for value in np.unique(raw):
        value = int(value)
        if value in mapping:
            target = mapping[value]
        elif value in LABEL_VALUES:
            target = value
        else:
            raise ValueError(f"{case_id}: unknown label value {value}")
        if target not in LABEL_VALUES:
            raise ValueError(f"{case_id}: label {value} mapped to invalid value {target}")
        if target != value:
            logger.info("%s: mapping source label %d -> %d", case_id, value, target)
        out[raw == value] = target
    return out


def merge_label_files(la_path, scar_path, out_path) -> LabelMap:
    """Combine separate binary LA and scar files into a single {0,1,2} label file.

    Challenge releases often ship the atrium and the scar as two masks with
    arbitrary foreground values; anything nonzero counts as foreground.
    """
    la, spacing, _ = _read_nifti(Path(la_path))
    scar, sspacing, _ = _read_nifti(Path(scar_path))
    if la.shape != scar.shape:
        raise ValueError(f"LA shape {la.shape} != scar shape {scar.shape}")
    labels = np.zeros(la.shape, dtype=np.uint8)
    labels[la != 0] = LA
    labels[scar != 0] = SCAR
    lm = LabelMap(labels, spacing)
    save_labels(lm, out_path)
    return lm


# ---------------------------------------------------------------- preprocessing

def normalize_intensity(v: Volume) -> Volume:
    """Z-score over nonzero voxels; zero voxels stay zero. Constant input gives all zeros."""
    x = np.asarray(v.voxels, dtype=np.float64)
    out = np.zeros_like(x)
    mask = x != 0
    if mask.any():
        vals = x[mask]
        std = vals.std()
        if std > 0:
            out[mask] = (vals - vals.mean()) / std
    return Volume(out.astype(np.float32), v.spacing, v.case_id, v.original_shape)


def grid_shape(shape: Sequence[int], divisor: int) -> tuple[int, ...]:
    if divisor < 1:
        raise ValueError(f"divisor must be >= 1, got {divisor}")
    return tuple(-(-int(s) // divisor) * divisor for s in shape)


def pad_array(a: np.ndarray, target_shape: Sequence[int], value) -> np.ndarray:
    pad = [(0, t - s) for s, t in zip(a.shape, target_shape)]
    if any(p[1] < 0 for p in pad):
        raise ValueError(f"cannot pad {a.shape} to smaller shape {tuple(target_shape)}")
    return np.pad(a, pad, mode="constant", constant_values=value)


def crop_array(a: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    return a[tuple(slice(0, s) for s in shape)]


def pad_to_grid(v: Volume, divisor: int) -> Volume:
    """Pad at the far end of each axis up to the next multiple of ``divisor``.

    The pad value is the volume minimum. The unpadded shape is kept in
    ``original_shape`` so :func:`crop_to_original` can undo the padding.
    """
    target = grid_shape(v.shape, divisor)
    fill = v.voxels.min() if v.voxels.size else 0
    padded = pad_array(v.voxels, target, fill)
    original = v.original_shape if v.original_shape is not None else v.shape
    return Volume(padded, v.spacing, v.case_id, tuple(original))


def crop_to_original(v: Volume) -> Volume:
    if v.original_shape is None:
        return v
    return Volume(crop_array(v.voxels, v.original_shape).copy(), v.spacing, v.case_id)


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    case_id: str
    image: Path
    label: Optional[Path] = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.case_id for e in self.entries]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ValueError(f"duplicate case ids in manifest: {sorted(dupes)}")
        by_id = {e.case_id: e for e in self.entries}
        for cid, part in self.split.items():
            if cid not in by_id:
                raise ValueError(f"split refers to unknown case {cid!r}")
            if part not in ("train", "eval"):
                raise ValueError(f"case {cid!r}: split must be 'train' or 'eval', got {part!r}")
            if part == "eval" and by_id[cid].label is None:
                raise ValueError(f"eval case {cid!r} has no label")

    def labeled(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label is not None]

    def subset(self, part: str) -> list[ManifestEntry]:
        return [e for e in self.entries if self.split.get(e.case_id) == part]

    def to_records(self, relative_to: Optional[Path] = None) -> list[dict]:
        def rel(p):
            if relative_to is None:
                return str(p)
            try:
                return str(Path(p).resolve().relative_to(Path(relative_to).resolve()))
            except ValueError:
                return str(p)

        records = []
        for e in self.entries:
            rec = {"case_id": e.case_id, "image": rel(e.image)}
            if e.label is not None:
                rec["label"] = rel(e.label)
            if e.case_id in self.split:
                rec["split"] = self.split[e.case_id]
            records.append(rec)
        return records


def read_manifest(path) -> DatasetManifest:
    """Read a JSON list of ``{case_id, image, label?, split?}`` records.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    with open(path) as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise ValueError(f"{path}: manifest must be a JSON list of records")
    base = path.parent
    entries, split = [], {}
    for i, rec in enumerate(records):
        if "case_id" not in rec or "image" not in rec:
            raise ValueError(f"{path}: record {i} needs 'case_id' and 'image'")
        label = rec.get("label")
        entries.append(
            ManifestEntry(
                str(rec["case_id"]),
                base / rec["image"],
                base / label if label is not None else None,
            )
        )
        if rec.get("split") is not None:
            split[str(rec["case_id"])] = rec["split"]
    return DatasetManifest(entries, split)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest.to_records(relative_to=path.parent), fh, indent=2)
        fh.write("\n")


def split_dataset(manifest: DatasetManifest, n_train: int, seed: int) -> DatasetManifest:
    """Random train/eval split of the labeled cases. Unlabeled cases get no split."""
    labeled = sorted(e.case_id for e in manifest.labeled())
    if not 0 < n_train < len(labeled):
        raise ValueError(f"n_train must be in [1, {len(labeled) - 1}], got {n_train}")
    order = np.random.default_rng(seed).permutation(len(labeled))
    train = {labeled[i] for i in order[:n_train]}
    split = {cid: ("train" if cid in train else "eval") for cid in labeled}
    return DatasetManifest(list(manifest.entries), split)


def load_entry(entry: ManifestEntry, label_mapping=None) -> tuple[Volume, Optional[LabelMap]]:
    return load_case(entry.image, entry.label, label_mapping, case_id=entry.case_id)
