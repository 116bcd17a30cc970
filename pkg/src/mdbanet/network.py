"""Two-branch multi-depth 3D U-Net with Sobel fusion between the LA and scar branches.

Each branch has an encoder and ``N`` sub-decoders that start at increasingly
deep encoder levels and all decode back to full resolution. Their sigmoid
outputs are averaged into the branch prediction. Along the deepest scar
sub-decoder, every skip connection goes through a fusion module that gates the
upsampled scar features with an attention map computed from the deepest LA
sub-decoder at the same level.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .sobel import ATTENTION_MODES, COMBINE_MODES, PADDING_MODES, SobelResponse, attention_map
from .volume_io import LA, SCAR, BACKGROUND, LabelMap, Volume, crop_array, normalize_intensity, pad_to_grid

FUSION_MODES = ("sobel", "multiply", "none")

# ablation names -> (fusion_mode, la_branch)
METHODS = {
    "MDBAnet": ("sobel", True),
    "MDBAnet_mul": ("multiply", True),
    "MDnet": ("none", False),
}


@dataclass
class NetworkConfig:
    encoder_depth: int = 3
    sub_decoders: int = 2
    base_channels: int = 8
    fusion_mode: str = "sobel"
    attention_mode: str = "sigmoid"
    la_branch: bool = True
    share_encoder: bool = False
    sobel_combine: str = "magnitude"
    sobel_padding: str = "replicate"
    in_channels: int = 1

    def validate(self) -> "NetworkConfig":
        errors = []
        if self.encoder_depth < 2:
            errors.append(f"encoder_depth: must be >= 2, got {self.encoder_depth}")
        if not 1 <= self.sub_decoders <= self.encoder_depth - 1:
            errors.append(f"sub_decoders: must be in [1, encoder_depth-1], got {self.sub_decoders}")
        if self.base_channels < 1:
            errors.append(f"base_channels: must be >= 1, got {self.base_channels}")
        if self.fusion_mode not in FUSION_MODES:
            errors.append(f"fusion_mode: must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.attention_mode not in ATTENTION_MODES:
            errors.append(f"attention_mode: must be one of {ATTENTION_MODES}, got {self.attention_mode!r}")
        if self.sobel_combine not in COMBINE_MODES:
            errors.append(f"sobel_combine: must be one of {COMBINE_MODES}, got {self.sobel_combine!r}")
        if self.sobel_padding not in PADDING_MODES:
            errors.append(f"sobel_padding: must be one of {PADDING_MODES}, got {self.sobel_padding!r}")
        if self.fusion_mode != "none" and not self.la_branch:
            errors.append(f"la_branch: fusion_mode {self.fusion_mode!r} needs the LA branch")
        if self.share_encoder and not self.la_branch:
            errors.append("share_encoder: needs the LA branch")
        if errors:
            raise ValueError("invalid network config: " + "; ".join(errors))
        return self

    @property
    def divisor(self) -> int:
        return 2 ** (self.encoder_depth - 1)

    @property
    def method_name(self) -> str:
        if self.fusion_mode == "sobel":
            return "MDBAnet"
        if self.fusion_mode == "multiply":
            return "MDBAnet_mul"
        return "MDnet" if not self.la_branch else "MDBAnet_skip"

    def for_method(self, method: str) -> "NetworkConfig":
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {sorted(METHODS)}")
        fusion, la = METHODS[method]
        return dataclasses.replace(self, fusion_mode=fusion, la_branch=la, share_encoder=self.share_encoder and la).validate()

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown network config field(s): {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class BranchOutput:
    per_depth: list[torch.Tensor]
    fused: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.fused = fuse_outputs(self.per_depth)


def fuse_outputs(per_depth) -> torch.Tensor:
    """Voxelwise mean of the sub-decoder probability maps."""
    if len(per_depth) == 0:
        raise ValueError("fuse_outputs needs at least one map")
    shape = per_depth[0].shape
    for p in per_depth[1:]:
        if p.shape != shape:
            raise ValueError(f"shape mismatch in fuse_outputs: {tuple(p.shape)} vs {tuple(shape)}")
    stack = torch.stack(list(per_depth))
    # summing in sorted order makes the result exactly order-independent;
    # the clamp removes last-bit rounding outside the pointwise envelope
    ordered = torch.sort(stack, dim=0).values
    mean = ordered.sum(dim=0) / len(per_depth)
    return torch.minimum(torch.maximum(mean, ordered[0]), ordered[-1])


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        # no conv bias: instance norm would cancel it and leave it without gradient
        self.body = nn.Sequential(
            nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
            nn.InstanceNorm3d(c_out, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv3d(c_out, c_out, 3, padding=1, bias=False),
            nn.InstanceNorm3d(c_out, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.depth = cfg.encoder_depth
        blocks = [ConvBlock(cfg.in_channels, cfg.channels(0))]
        for level in range(1, cfg.encoder_depth):
            blocks.append(ConvBlock(cfg.channels(level - 1), cfg.channels(level), stride=2))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        div = 2 ** (self.depth - 1)
        if x.dim() != 5:
            raise ValueError(f"expected (N, C, D, H, W) input, got shape {tuple(x.shape)}")
        if any(s % div for s in x.shape[2:]):
            raise ValueError(f"spatial shape {tuple(x.shape[2:])} is not divisible by {div}")
        levels = []
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        return levels


class FusionModule(nn.Module):
    """Gate decoder features by LA features, then concatenate the encoder skip."""

    def __init__(self, mode: str, attention_mode: str = "sigmoid", combine: str = "magnitude", padding: str = "replicate"):
        super().__init__()
        self.mode = mode
        self.attention_mode = attention_mode
        self.sobel = SobelResponse(combine, padding) if mode == "sobel" else None

    def forward(self, f_dec_scar, f_dec_la, f_enc_scar):
        if f_dec_scar.shape[2:] != f_enc_scar.shape[2:]:
            raise ValueError(
                f"decoder/encoder spatial mismatch: {tuple(f_dec_scar.shape)} vs {tuple(f_enc_scar.shape)}"
            )
        if self.mode == "none":
            return torch.cat([f_dec_scar, f_enc_scar], dim=1)
        if f_dec_la is None or f_dec_la.shape != f_dec_scar.shape:
            got = None if f_dec_la is None else tuple(f_dec_la.shape)
            raise ValueError(f"LA decoder features {got} must match scar decoder features {tuple(f_dec_scar.shape)}")
        if self.mode == "sobel":
            gate = attention_map(self.sobel(f_dec_la), self.attention_mode)
        else:
            gate = f_dec_la
        return torch.cat([f_dec_scar * gate, f_enc_scar], dim=1)


def sfm(f_dec_scar, f_dec_la, f_enc_scar, cfg: NetworkConfig) -> torch.Tensor:
    """Functional fusion step; accepts (C, D, H, W) or batched maps."""
    squeeze = f_dec_scar.dim() == 4
    args = [t[None] if (t is not None and squeeze) else t for t in (f_dec_scar, f_dec_la, f_enc_scar)]
    module = FusionModule(cfg.fusion_mode, cfg.attention_mode, cfg.sobel_combine, cfg.sobel_padding).to(f_dec_scar.device)
    out = module(*args)
    return out[0] if squeeze else out


class SubDecoder(nn.Module):
    """Decoder path from encoder level ``start`` back to full resolution."""

    def __init__(self, cfg: NetworkConfig, start: int, fusion: Optional[str] = None):
        super().__init__()
        self.start = start
        self.ups = nn.ModuleDict()
        self.blocks = nn.ModuleDict()
        for level in range(start - 1, -1, -1):
            c = cfg.channels(level)
            self.ups[str(level)] = nn.ConvTranspose3d(cfg.channels(level + 1), c, 2, stride=2)
            self.blocks[str(level)] = ConvBlock(2 * c, c)
        self.fusion = FusionModule(fusion or "none", cfg.attention_mode, cfg.sobel_combine, cfg.sobel_padding)
        self.head = nn.Conv3d(cfg.channels(0), 1, 1)

    @property
    def n_upsampling(self) -> int:
        return len(self.ups)

    def forward(self, skips, la_features=None):
        x = skips[self.start]
        features = {}
        for level in range(self.start - 1, -1, -1):
            up = self.ups[str(level)](x)
            la = None if la_features is None else la_features[level]
            x = self.blocks[str(level)](self.fusion(up, la, skips[level]))
            features[level] = x
        return torch.sigmoid(self.head(x)), features


class Branch(nn.Module):
    def __init__(self, cfg: NetworkConfig, with_encoder: bool = True, deepest_fusion: Optional[str] = None):
        super().__init__()
        self.encoder = Encoder(cfg) if with_encoder else None
        # deepest sub-decoder always starts at the bottom of the encoder
        offset = cfg.encoder_depth - 1 - cfg.sub_decoders
        self.decoders = nn.ModuleList(
            SubDecoder(cfg, n + offset, deepest_fusion if n == cfg.sub_decoders else None)
            for n in range(1, cfg.sub_decoders + 1)
        )

    def decode(self, skips, la_features=None):
        maps, deepest = [], None
        for i, dec in enumerate(self.decoders):
            last = i == len(self.decoders) - 1
            prob, feats = dec(skips, la_features if last else None)
            maps.append(prob)
            if last:
                deepest = feats
        return BranchOutput(maps), deepest


class MDBANet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.scar = Branch(cfg, deepest_fusion=cfg.fusion_mode)
        self.la = Branch(cfg, with_encoder=not cfg.share_encoder) if cfg.la_branch else None
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                nn.init.kaiming_normal_(m.weight, a=0.01)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def encode(self, x: torch.Tensor, branch: str = "scar") -> list[torch.Tensor]:
        if branch == "scar" or (branch == "la" and self.cfg.share_encoder):
            return self.scar.encoder(x)
        if branch == "la" and self.la is not None:
            return self.la.encoder(x)
        raise ValueError(f"no encoder for branch {branch!r}")

    def forward(self, x: torch.Tensor) -> tuple[BranchOutput, Optional[BranchOutput]]:
        scar_skips = self.encode(x, "scar")
        la_out, la_feats = None, None
        if self.la is not None:
            la_skips = scar_skips if self.cfg.share_encoder else self.encode(x, "la")
            la_out, la_feats = self.la.decode(la_skips)
        scar_out, _ = self.scar.decode(scar_skips, la_feats if self.cfg.fusion_mode != "none" else None)
        return scar_out, la_out


def build_network(cfg: NetworkConfig, seed: Optional[int] = None) -> MDBANet:
    """Build the network; ``seed`` makes the weight initialisation reproducible."""
    if seed is None:
        return MDBANet(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MDBANet(cfg)


def count_parameters(net: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad or not trainable_only)


# ---------------------------------------------------------------- inference

def probabilities_to_labels(scar_prob: np.ndarray, la_prob: Optional[np.ndarray], threshold: float = 0.5) -> np.ndarray:
    """Threshold fused maps (``>=``); scar wins where both are positive."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    labels = np.full(np.shape(scar_prob), BACKGROUND, dtype=np.uint8)
    if la_prob is not None:
        labels[np.asarray(la_prob) >= threshold] = LA
    labels[np.asarray(scar_prob) >= threshold] = SCAR
    return labels


@torch.no_grad()
def predict_probabilities(v: Volume, net: MDBANet, normalize: bool = True):
    """Fused (scar, LA) probability maps for a whole volume, in the volume's shape."""
    net.eval()
    if normalize:
        v = normalize_intensity(v)
    padded = pad_to_grid(v, net.cfg.divisor)
    param = next(net.parameters())
    x = torch.as_tensor(padded.voxels, dtype=param.dtype, device=param.device)[None, None]
    scar, la = net(x)
    scar_p = crop_array(scar.fused[0, 0].cpu().numpy(), v.shape)
    la_p = None if la is None else crop_array(la.fused[0, 0].cpu().numpy(), v.shape)
    return scar_p, la_p


def predict_case(v: Volume, net: MDBANet, threshold: float = 0.5, normalize: bool = True) -> LabelMap:
    scar_p, la_p = predict_probabilities(v, net, normalize)
    return LabelMap(probabilities_to_labels(scar_p, la_p, threshold), v.spacing)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, net: MDBANet, step: int = 0, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"config": net.cfg.to_dict(), "state_dict": net.state_dict(), "step": int(step), **extra}, path)


def load_checkpoint(path, cfg: Optional[NetworkConfig] = None) -> tuple[MDBANet, int]:
    """Load a network; if ``cfg`` is given it must equal the stored config."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    stored = NetworkConfig.from_dict(blob["config"])
    if cfg is not None and cfg.to_dict() != stored.to_dict():
        diff = {k: (v, stored.to_dict()[k]) for k, v in cfg.to_dict().items() if stored.to_dict()[k] != v}
        raise ValueError(f"checkpoint config mismatch (expected, stored): {diff}")
    net = build_network(stored)
    net.load_state_dict(blob["state_dict"])
    return net, blob["step"]
