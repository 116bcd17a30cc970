"""Synthetic LGE-like phantoms and brute-force oracles used by the tests.

A phantom is a randomly oriented ellipsoidal "atrium" with small scar patches
sitting inside a thin shell under its surface. Intensities are ordered
scar > LA > background with gaps of several noise standard deviations.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .volume_io import LA, SCAR, LabelMap, Volume

BACKGROUND_LEVEL = 100.0


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    shape: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_scars: int = 5
    scar_radius_range: tuple[float, float] = (1.5, 3.0)
    shell_thickness: float = 2.0
    noise_sigma: float = 10.0

    def __post_init__(self):
        if self.n_scars < 0:
            raise ValueError("n_scars must be >= 0")
        lo, hi = self.scar_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scar_radius_range {self.scar_radius_range}")
        if self.shell_thickness <= 0:
            raise ValueError("shell_thickness must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if len(self.shape) != 3 or len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError("shape and spacing must be 3-vectors with positive spacing")

    @property
    def contrast(self) -> float:
        # keeps each tissue step at least 4 noise sigmas
        return max(100.0, 4.0 * self.noise_sigma)


def _voxel_coords(shape, spacing) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n) * s for n, s in zip(shape, spacing)], indexing="ij")
    return np.stack(grids, axis=-1)


def boundary_distance(mask: np.ndarray, spacing) -> np.ndarray:
    """Distance in mm from every voxel to the nearest boundary voxel of ``mask``.

    Boundary voxels are mask voxels with at least one face neighbour outside.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    inner = ndimage.binary_erosion(padded, ndimage.generate_binary_structure(3, 1))[1:-1, 1:-1, 1:-1]
    boundary = mask & ~inner
    if not boundary.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~boundary, sampling=spacing)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(n) for n in spec.shape)
    spacing = np.asarray(spec.spacing, dtype=float)
    extent = np.asarray(shape) * spacing

    semi_axes = rng.uniform(0.22, 0.32, size=3) * extent
    r_max = spec.scar_radius_range[1]
    if min(shape) < 8 or semi_axes.min() < max(2 * spec.shell_thickness, r_max, 2 * spacing.max()):
        raise ValueError(
            f"shape {shape} at spacing {tuple(spacing.tolist())} is too small for shell "
            f"{spec.shell_thickness} mm and scar radius {r_max} mm"
        )
    center = extent / 2 + rng.uniform(-0.05, 0.05, size=3) * extent
    rot = Rotation.random(random_state=rng).as_matrix()

    coords = _voxel_coords(shape, spacing)
    local = (coords - center) @ rot
    la = np.sum((local / semi_axes) ** 2, axis=-1) <= 1.0

    dist = boundary_distance(la, spacing)
    shell = la & (dist <= spec.shell_thickness)
    surface = np.argwhere(la & (dist == 0))

    labels = la.astype(np.uint8) * LA
    margin = np.sqrt(3) * spacing.max()
    placed: list[tuple[np.ndarray, float]] = []
    face = ndimage.generate_binary_structure(3, 1)
    for _ in range(spec.n_scars):
        for _attempt in range(500):
            idx = surface[rng.integers(len(surface))]
            radius = rng.uniform(*spec.scar_radius_range)
            pos = idx * spacing
            if all(np.linalg.norm(pos - p) > radius + r + margin for p, r in placed):
                break
        else:
            raise ValueError(f"could not place {spec.n_scars} separated scars in {shape}")
        ball = np.sum((coords - pos) ** 2, axis=-1) <= radius**2
        patch, _ = ndimage.label(ball & shell, structure=face)
        labels[patch == patch[tuple(idx)]] = SCAR
        placed.append((pos, radius))

    c = spec.contrast
    image = np.full(shape, BACKGROUND_LEVEL)
    image[labels == LA] += c
    image[labels == SCAR] += 3 * c
    image += rng.normal(0.0, spec.noise_sigma, size=shape)
    case_id = f"phantom_{spec.seed:04d}"
    sp = tuple(float(s) for s in spacing)
    return Volume(image.astype(np.float32), sp, case_id), LabelMap(labels, sp)


# ---------------------------------------------------------------- oracles

def neighbour_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    max_l1 = {6: 1, 18: 2, 26: 3}[connectivity]
    return [
        (i, j, k)
        for i in (-1, 0, 1)
        for j in (-1, 0, 1)
        for k in (-1, 0, 1)
        if 0 < abs(i) + abs(j) + abs(k) <= max_l1
    ]


def oracle_connected_components(labels, target_label: int, connectivity: int = 26) -> list[int]:
    """Breadth-first flood fill; returns component sizes in descending order."""
    if target_label not in (LA, SCAR):
        raise ValueError(f"target_label must be 1 or 2, got {target_label}")
    arr = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    target = arr == target_label
    seen = np.zeros(arr.shape, dtype=bool)
    offsets = neighbour_offsets(connectivity)
    nx, ny, nz = arr.shape
    sizes = []
    for start in zip(*np.nonzero(target)):
        if seen[start]:
            continue
        seen[start] = True
        queue = deque([start])
        size = 0
        while queue:
            x, y, z = queue.popleft()
            size += 1
            for dx, dy, dz in offsets:
                n = (x + dx, y + dy, z + dz)
                if 0 <= n[0] < nx and 0 <= n[1] < ny and 0 <= n[2] < nz and target[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        sizes.append(size)
    return sorted(sizes, reverse=True)


def oracle_convolve3d(field: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Direct cross-correlation (no kernel flip), zero padding, same-shape output."""
    field = np.asarray(field, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if any(k % 2 == 0 for k in kernel.shape):
        raise ValueError(f"kernel must be odd-sized, got {kernel.shape}")
    r = [k // 2 for k in kernel.shape]
    padded = np.pad(field, [(ri, ri) for ri in r])
    kx, ky, kz = kernel.shape
    out = np.zeros_like(field)
    for x in range(field.shape[0]):
        for y in range(field.shape[1]):
            for z in range(field.shape[2]):
                out[x, y, z] = np.sum(padded[x : x + kx, y : y + ky, z : z + kz] * kernel)
    return out
