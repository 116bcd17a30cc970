"""Slice overlays of reference vs predicted contours, and the scar-size bar chart."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .metrics import ScarSizeHistogram
from .volume_io import LA, SCAR

REF_SCAR = (0, 255, 0)
PRED_SCAR = (255, 0, 0)
BOTH_SCAR = (255, 255, 0)
REF_LA = (0, 128, 255)
PRED_LA = (255, 0, 255)

AXIAL = 2


def contour(mask2d: np.ndarray) -> np.ndarray:
    """Inner boundary pixels of a 2D mask (4-neighbourhood)."""
    mask2d = np.asarray(mask2d, dtype=bool)
    inner = ndimage.binary_erosion(mask2d, ndimage.generate_binary_structure(2, 1), border_value=0)
    return mask2d & ~inner


def _zoom(a: np.ndarray, k: int) -> np.ndarray:
    return np.kron(a, np.ones((k, k), dtype=a.dtype))


def grayscale(slice2d: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(slice2d, [1, 99]) if slice2d.size else (0, 1)
    if hi <= lo:
        return np.zeros(slice2d.shape, dtype=np.uint8)
    return (np.clip((slice2d - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)


def render_overlay(
    image2d: np.ndarray,
    ref2d: Optional[np.ndarray],
    pred2d: Optional[np.ndarray],
    zoom: int = 4,
    show_la: bool = True,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """RGB overlay of one slice; returns the image and the zoomed contour masks.

    Scar contours: reference green, prediction red, coincident pixels yellow.
    LA contours (drawn underneath): reference blue, prediction magenta.
    """
    if zoom < 1:
        raise ValueError("zoom must be >= 1")
    for other in (ref2d, pred2d):
        if other is not None and other.shape != image2d.shape:
            raise ValueError(f"slice shapes differ: {image2d.shape} vs {other.shape}")
    gray = _zoom(grayscale(np.asarray(image2d, dtype=float)), zoom)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    empty = np.zeros(gray.shape, dtype=bool)

    def outline(labels, which):
        if labels is None:
            return empty
        return contour(_zoom(np.isin(labels, which).astype(np.uint8), zoom).astype(bool))

    masks = {
        "ref_la": outline(ref2d, [LA, SCAR]) if show_la else empty,
        "pred_la": outline(pred2d, [LA, SCAR]) if show_la else empty,
        "ref_scar": outline(ref2d, [SCAR]),
        "pred_scar": outline(pred2d, [SCAR]),
    }
    rgb[masks["ref_la"]] = REF_LA
    rgb[masks["pred_la"]] = PRED_LA
    rgb[masks["ref_scar"]] = REF_SCAR
    rgb[masks["pred_scar"]] = PRED_SCAR
    rgb[masks["ref_scar"] & masks["pred_scar"]] = BOTH_SCAR
    return rgb, masks


def save_png(rgb: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # transpose so the first array axis runs left to right
    Image.fromarray(np.ascontiguousarray(rgb.transpose(1, 0, 2))).save(path, format="PNG")


def select_slices(ref: np.ndarray, spec: str = "auto:3") -> list[int]:
    """Axial slice indices from a spec: ``auto:K`` (K slices with most scar), ``mid``, or ``3,10,12``."""
    n = ref.shape[AXIAL]
    if spec == "mid":
        return [n // 2]
    if spec.startswith("auto"):
        k = int(spec.split(":")[1]) if ":" in spec else 3
        area = (ref == SCAR).sum(axis=(0, 1))
        if not area.any():
            area = (ref >= LA).sum(axis=(0, 1))
        order = sorted(range(n), key=lambda z: (-area[z], z))
        return sorted(order[:k])
    idx = [int(s) for s in spec.split(",") if s.strip()]
    bad = [i for i in idx if not 0 <= i < n]
    if bad:
        raise ValueError(f"slice indices {bad} out of range [0, {n})")
    return idx


def write_case_overlays(case_id, image, ref, pred, out_dir, slices: Sequence[int], zoom: int = 4) -> list[Path]:
    if ref is not None and ref.shape != image.shape or pred is not None and pred.shape != image.shape:
        raise ValueError(f"{case_id}: image, reference and prediction shapes must match")
    paths = []
    for z in slices:
        rgb, _ = render_overlay(
            image[:, :, z],
            None if ref is None else ref[:, :, z],
            None if pred is None else pred[:, :, z],
            zoom,
        )
        path = Path(out_dir) / f"{case_id}_z{z:03d}.png"
        save_png(rgb, path)
        paths.append(path)
    return paths


def plot_histogram(hist: ScarSizeHistogram, path, title: str = "Scar size distribution") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 3.8))
    labels = hist.bin_labels()
    x = np.arange(len(labels))
    ax1.bar(x, hist.counts, color="tab:red")
    ax1.set_ylabel("number of scars")
    ax2.bar(x, hist.volumes, color="tab:blue")
    ax2.set_ylabel("summed volume (mm$^3$)")
    for ax in (ax1, ax2):
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
        ax.set_xlabel("component volume (mm$^3$)")
    fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
