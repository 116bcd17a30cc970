"""SGD training loop with exponential LR decay, on-the-fly augmentation and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .losses import total_loss
from .metrics import EvalResult, aggregate_eval, evaluate_case
from .network import MDBANet, predict_case, save_checkpoint
from .volume_io import SCAR, DatasetManifest, LabelMap, Volume, load_entry, normalize_intensity, pad_array

logger = logging.getLogger(__name__)

Case = tuple[Volume, LabelMap]


@dataclass
class TrainConfig:
    batch_size: int = 2
    momentum: float = 0.99
    weight_decay: float = 3e-5
    lr0: float = 0.01
    lr_gamma: float = 0.95
    max_epochs: int = 4
    steps_per_epoch: int = 50
    patch_size: tuple[int, int, int] = (32, 32, 32)
    scar_patch_fraction: float = 0.5
    rotation: bool = True
    scaling: bool = True
    elastic: bool = True
    gamma: bool = True
    mirroring: bool = True
    # per-sample probability of each spatial / intensity transform
    aug_probability: float = 0.2
    rotation_degrees: float = 15.0
    scale_range: tuple[float, float] = (0.85, 1.15)
    gamma_range: tuple[float, float] = (0.7, 1.5)
    elastic_alpha_mm: float = 2.0
    elastic_sigma_mm: float = 4.0
    la_includes_scar: bool = True
    deep_supervision: bool = False
    seed: int = 0
    checkpoint_every: int = 1
    eval_every: int = 1
    threshold: float = 0.5
    deterministic: bool = True

    def validate(self) -> "TrainConfig":
        errors = []
        if self.lr0 <= 0:
            errors.append(f"lr0: must be > 0, got {self.lr0}")
        if not 0 < self.lr_gamma <= 1:
            errors.append(f"lr_gamma: must be in (0, 1], got {self.lr_gamma}")
        if self.batch_size < 1:
            errors.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1 or self.steps_per_epoch < 1:
            errors.append("max_epochs/steps_per_epoch: must be >= 1")
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            errors.append(f"patch_size: must be three positive ints, got {self.patch_size}")
        if not 0 <= self.scar_patch_fraction <= 1:
            errors.append(f"scar_patch_fraction: must be in [0, 1], got {self.scar_patch_fraction}")
        if not 0 <= self.aug_probability <= 1:
            errors.append(f"aug_probability: must be in [0, 1], got {self.aug_probability}")
        if self.momentum < 0 or self.weight_decay < 0:
            errors.append("momentum/weight_decay: must be >= 0")
        if not 0 < self.threshold < 1:
            errors.append(f"threshold: must be in (0, 1), got {self.threshold}")
        if errors:
            raise ValueError("invalid train config: " + "; ".join(errors))
        return self

    @property
    def total_steps(self) -> int:
        return self.max_epochs * self.steps_per_epoch

    def augmentation_off(self) -> "TrainConfig":
        return dataclasses.replace(self, rotation=False, scaling=False, elastic=False, gamma=False, mirroring=False)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
        d = dict(d)
        for key in ("patch_size", "scale_range", "gamma_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_gamma**epoch


# ---------------------------------------------------------------- augmentation

def mirror(image: np.ndarray, labels: np.ndarray, axes: Sequence[int]):
    axes = tuple(axes)
    if not axes:
        return image, labels
    return np.flip(image, axes).copy(), np.flip(labels, axes).copy()


def gamma_correct(image: np.ndarray, gamma: float) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return image.copy()
    unit = (image - lo) / (hi - lo)
    return (unit**gamma * (hi - lo) + lo).astype(image.dtype)


def spatial_transform(image, labels, spacing, matrix=None, displacement=None):
    """Resample image (linear) and labels (nearest) through a shared coordinate map.

    ``matrix`` acts on physical offsets from the volume centre and maps output
    positions to input positions; ``displacement`` is an extra per-voxel
    offset field in voxels with shape (3, *shape).
    """
    shape = image.shape
    sp = np.asarray(spacing, dtype=float)
    grid = np.indices(shape, dtype=float)
    centre = (np.asarray(shape, dtype=float) - 1) / 2
    coords = grid
    if matrix is not None:
        phys = (grid - centre[:, None, None, None]) * sp[:, None, None, None]
        src = np.tensordot(matrix, phys, axes=1)
        coords = src / sp[:, None, None, None] + centre[:, None, None, None]
    if displacement is not None:
        coords = coords + displacement
    img = ndimage.map_coordinates(image, coords, order=1, mode="nearest").astype(image.dtype)
    # nearest-neighbour with edge replication never invents label values
    lab = ndimage.map_coordinates(labels, coords, order=0, mode="nearest").astype(labels.dtype)
    return img, lab


def augment_arrays(image: np.ndarray, labels: np.ndarray, spacing, cfg: TrainConfig, rng: np.random.Generator):
    p = cfg.aug_probability
    matrix = None
    if cfg.rotation and rng.random() < p:
        angles = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees, size=3)
        matrix = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
    if cfg.scaling and rng.random() < p:
        # zooming in by s means sampling the input at offsets divided by s
        s = rng.uniform(*cfg.scale_range)
        matrix = (np.eye(3) if matrix is None else matrix) / s
    displacement = None
    if cfg.elastic and rng.random() < p:
        sp = np.asarray(spacing, dtype=float)
        fields = []
        for axis in range(3):
            noise = rng.uniform(-1, 1, size=image.shape)
            smooth = ndimage.gaussian_filter(noise, sigma=cfg.elastic_sigma_mm / sp)
            peak = np.abs(smooth).max()
            if peak > 0:
                smooth = smooth / peak
            fields.append(smooth * cfg.elastic_alpha_mm / sp[axis])
        displacement = np.stack(fields)
    if matrix is not None or displacement is not None:
        image, labels = spatial_transform(image, labels, spacing, matrix, displacement)
    if cfg.gamma and rng.random() < p:
        image = gamma_correct(image, rng.uniform(*cfg.gamma_range))
    if cfg.mirroring:
        axes = [a for a in range(3) if rng.random() < 0.5]
        image, labels = mirror(image, labels, axes)
    return image, labels


def augment(v: Volume, lm: LabelMap, cfg: TrainConfig, rng: np.random.Generator) -> tuple[Volume, LabelMap]:
    image, labels = augment_arrays(v.voxels, lm.labels, v.spacing, cfg, rng)
    return Volume(image, v.spacing, v.case_id), LabelMap(labels, lm.spacing)


# ---------------------------------------------------------------- patches

def sample_patch(image, labels, patch_size, rng: np.random.Generator, force_scar: bool):
    """Random patch; with ``force_scar`` the patch contains at least one scar voxel if the case has any."""
    target = np.maximum(image.shape, patch_size)
    if tuple(target) != image.shape:
        image = pad_array(image, target, image.min())
        labels = pad_array(labels, target, 0)
    ps = np.asarray(patch_size)
    hi = np.asarray(image.shape) - ps
    scar = np.argwhere(labels == SCAR) if force_scar else np.zeros((0, 3), dtype=int)
    if len(scar):
        anchor = scar[rng.integers(len(scar))]
        lo_o = np.maximum(anchor - ps + 1, 0)
        hi_o = np.minimum(anchor, hi)
        origin = np.array([rng.integers(a, b + 1) for a, b in zip(lo_o, hi_o)])
    else:
        origin = np.array([rng.integers(0, h + 1) for h in hi])
    sl = tuple(slice(o, o + s) for o, s in zip(origin, ps))
    return image[sl], labels[sl]


def make_batch(cases: Sequence[Case], cfg: TrainConfig, rng: np.random.Generator):
    n_forced = math.ceil(cfg.batch_size * cfg.scar_patch_fraction)
    images, labels = [], []
    for b in range(cfg.batch_size):
        v, lm = cases[rng.integers(len(cases))]
        img, lab = sample_patch(v.voxels, lm.labels, cfg.patch_size, rng, force_scar=b < n_forced)
        img, lab = augment_arrays(img, lab, v.spacing, cfg, rng)
        images.append(img)
        labels.append(lab)
    x = torch.as_tensor(np.stack(images)[:, None], dtype=torch.float32)
    y = torch.as_tensor(np.stack(labels)[:, None].astype(np.int64))
    return x, y


def branch_targets(y: torch.Tensor, la_includes_scar: bool = True):
    scar = (y == SCAR).float()
    la = (y >= 1).float() if la_includes_scar else (y == 1).float()
    return scar, la


# ---------------------------------------------------------------- loop

class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    best_scar_ds: Optional[float] = None
    evaluations: list[EvalResult] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([row["total"] for row in self.log])


LOG_FIELDS = ("step", "epoch", "lr", "dcs_scar", "ce_scar", "dcs_la", "ce_la", "total")


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def preprocess_cases(cases: Sequence[Case]) -> list[Case]:
    return [(normalize_intensity(v), lm) for v, lm in cases]


def make_optimizer(net: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        [p for p in net.parameters() if p.requires_grad],
        lr=cfg.lr0,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )


def train_on_cases(
    net: MDBANet,
    cases: Sequence[Case],
    cfg: TrainConfig,
    eval_cases: Optional[Sequence[Case]] = None,
    out_dir=None,
) -> TrainResult:
    """Train ``net`` in place on in-memory (Volume, LabelMap) pairs.

    Volumes are z-scored here. If ``out_dir`` is given, writes ``train_log.csv``,
    ``last.pt`` at the checkpoint cadence and ``best.pt`` whenever the eval
    scar Dice improves.
    """
    cfg.validate()
    if not cases:
        raise TrainingError("empty training set")
    set_determinism(cfg.seed, cfg.deterministic)
    rng = np.random.default_rng(cfg.seed)
    data = preprocess_cases(cases)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    opt = make_optimizer(net, cfg)
    result = TrainResult()
    step = 0
    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        net.train()
        for _ in range(cfg.steps_per_epoch):
            x, y = make_batch(data, cfg, rng)
            scar_gt, la_gt = branch_targets(y, cfg.la_includes_scar)
            scar_out, la_out = net(x)
            losses = total_loss(scar_out, scar_gt, la_out, la_gt if la_out is not None else None,
                                deep_supervision=cfg.deep_supervision)
            if not torch.isfinite(losses.total):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}, lr {lr:g}): {losses.as_floats()}")
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            opt.step()
            row = {"step": step, "epoch": epoch, "lr": lr, **losses.as_floats()}
            result.log.append(row)
            logger.debug("step %d total %.5f", step, row["total"])
            step += 1

        if out_dir is not None and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / "last.pt", net, step)
            if out_dir / "last.pt" not in result.checkpoints:
                result.checkpoints.append(out_dir / "last.pt")
        if eval_cases and (epoch + 1) % cfg.eval_every == 0:
            ev = evaluate_cases(net, eval_cases, cfg.threshold, cfg.la_includes_scar)
            result.evaluations.append(ev)
            ds = ev.aggregates["ds_scar"].mean
            logger.info("epoch %d eval scar DS %.4f", epoch, ds)
            if result.best_scar_ds is None or ds > result.best_scar_ds:
                result.best_scar_ds = ds
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.pt", net, step, eval_scar_ds=ds)
                    if out_dir / "best.pt" not in result.checkpoints:
                        result.checkpoints.append(out_dir / "best.pt")

    if out_dir is not None:
        save_checkpoint(out_dir / "last.pt", net, step)
        if out_dir / "last.pt" not in result.checkpoints:
            result.checkpoints.append(out_dir / "last.pt")
        write_log(result.log, out_dir / "train_log.csv")
    return result


def write_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{row[k]:.8g}" if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})


def load_split(manifest: DatasetManifest, split: str, label_mapping=None) -> list[Case]:
    cases = []
    for entry in manifest.subset(split):
        v, lm = load_entry(entry, label_mapping)
        if lm is None:
            raise ValueError(f"case {entry.case_id!r} in split {split!r} has no label")
        cases.append((v, lm))
    return cases


def train(net: MDBANet, manifest: DatasetManifest, cfg: TrainConfig, out_dir=None, label_mapping=None) -> TrainResult:
    train_cases = load_split(manifest, "train", label_mapping)
    if not train_cases:
        raise TrainingError("manifest has no training cases")
    eval_cases = load_split(manifest, "eval", label_mapping)
    return train_on_cases(net, train_cases, cfg, eval_cases or None, out_dir)


# ---------------------------------------------------------------- evaluation

Predictor = Callable[[Volume], LabelMap]


def evaluate_cases(
    net_or_predictor,
    cases: Sequence[Case],
    threshold: float = 0.5,
    la_includes_scar: bool = True,
    hd_percentile: Optional[float] = None,
    method: Optional[str] = None,
) -> EvalResult:
    """Per-case Dice/Hausdorff plus mean(std) aggregates.

    Accepts a network or any callable mapping a Volume to a LabelMap.
    """
    if isinstance(net_or_predictor, MDBANet):
        net = net_or_predictor
        predict = lambda v: predict_case(v, net, threshold)
        with_la = net.cfg.la_branch
        method = method or net.cfg.method_name
    else:
        predict = net_or_predictor
        with_la = True
    records = []
    for v, ref in cases:
        pred = predict(v)
        records.append(evaluate_case(v.case_id, pred, ref, with_la, la_includes_scar, hd_percentile))
    return aggregate_eval(records, method or "")


def evaluate(net_or_predictor, manifest: DatasetManifest, split: str = "eval", label_mapping=None, **kwargs) -> EvalResult:
    cases = load_split(manifest, split, label_mapping)
    if not cases:
        raise ValueError(f"no labeled cases in split {split!r}")
    return evaluate_cases(net_or_predictor, cases, **kwargs)
