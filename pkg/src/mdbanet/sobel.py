"""Fixed 3D Sobel kernels and the boundary response used to gate scar features."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DERIVATIVE = np.array([-1.0, 0.0, 1.0])
SMOOTHING = np.array([1.0, 2.0, 1.0])

ATTENTION_MODES = ("raw", "sigmoid")
COMBINE_MODES = ("magnitude", "l1")
PADDING_MODES = ("zeros", "replicate")


class SobelKernelSet(NamedTuple):
    kx: np.ndarray
    ky: np.ndarray
    kz: np.ndarray


def make_sobel_kernels() -> SobelKernelSet:
    """Separable 3x3x3 Sobel kernels, one per array axis.

    The kernel for axis ``a`` is the outer product of the central difference
    (-1, 0, 1) along ``a`` with the (1, 2, 1) smoother along the other two.
    """
    d, s = DERIVATIVE, SMOOTHING
    kx = np.einsum("i,j,k->ijk", d, s, s)
    ky = np.einsum("i,j,k->ijk", s, d, s)
    kz = np.einsum("i,j,k->ijk", s, s, d)
    return SobelKernelSet(kx, ky, kz)


def _safe_norm(sq: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite derivative at 0; flat regions must give 0 with 0 gradient
    positive = sq > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))


class SobelResponse(nn.Module):
    """Per-channel 3D Sobel edge strength.

    The kernels live in a non-persistent buffer: never in ``parameters()``,
    never in a checkpoint. ``padding="replicate"`` extends the border values
    instead of zero-padding, so a constant map responds with exactly zero
    everywhere rather than lighting up the volume edges.
    """

    def __init__(self, combine: str = "magnitude", padding: str = "zeros"):
        super().__init__()
        if combine not in COMBINE_MODES:
            raise ValueError(f"unknown combine mode {combine!r}; expected one of {COMBINE_MODES}")
        if padding not in PADDING_MODES:
            raise ValueError(f"unknown padding {padding!r}; expected one of {PADDING_MODES}")
        self.combine = combine
        self.padding = padding
        k = np.stack(make_sobel_kernels())[:, None]  # (3, 1, 3, 3, 3)
        self.register_buffer("kernels", torch.as_tensor(k, dtype=torch.float32), persistent=False)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        squeeze = f.dim() == 4
        if squeeze:
            f = f[None]
        n, c = f.shape[:2]
        weight = self.kernels.to(f.dtype).repeat(c, 1, 1, 1, 1)
        if self.padding == "zeros":
            g = F.conv3d(f, weight, padding=1, groups=c)
        else:
            g = F.conv3d(F.pad(f, (1,) * 6, mode="replicate"), weight, groups=c)
        g = g.view(n, c, 3, *g.shape[2:])
        if self.combine == "magnitude":
            out = _safe_norm((g * g).sum(dim=2))
        else:
            out = g.abs().sum(dim=2)
        return out[0] if squeeze else out


_default_response = None


def sobel_response(f: torch.Tensor, combine: str = "magnitude", padding: str = "zeros") -> torch.Tensor:
    """Functional form of :class:`SobelResponse` for (C, D, H, W) or (N, C, D, H, W) input."""
    global _default_response
    if combine != "magnitude" or padding != "zeros":
        return SobelResponse(combine, padding).to(f.device)(f)
    if _default_response is None:
        _default_response = SobelResponse()
    return _default_response.to(f.device)(f)


def attention_map(response: torch.Tensor, mode: str = "sigmoid") -> torch.Tensor:
    if mode == "raw":
        return response
    if mode == "sigmoid":
        return torch.sigmoid(response)
    raise ValueError(f"unknown attention mode {mode!r}; expected one of {ATTENTION_MODES}")
