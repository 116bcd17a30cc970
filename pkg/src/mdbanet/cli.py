"""Command-line entry point: ``mdbanet {phantom,stats,train,predict,evaluate,report,ablation}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 failure while running.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .metrics import (
    LASCARQS2022_TRAIN_REFERENCE,
    ScarSizeHistogram,
    aggregate_eval,
    evaluate_case,
    scar_histogram,
    summary_csv,
)
from .network import METHODS, NetworkConfig, build_network, load_checkpoint, predict_case
from .phantom import PhantomSpec, generate_phantom
from .report import plot_histogram, select_slices, write_case_overlays
from .training import TrainConfig, evaluate, evaluate_cases, train
from .volume_io import (
    DatasetManifest,
    LabelMap,
    ManifestEntry,
    load_case,
    load_entry,
    read_manifest,
    save_labels,
    save_volume,
    split_dataset,
    write_manifest,
)

logger = logging.getLogger("mdbanet")


class ConfigError(ValueError):
    """Invalid command line or configuration file; maps to exit code 1."""


@dataclass
class RunConfig:
    manifest: Optional[Path] = None
    output_dir: Optional[Path] = None
    seed: int = 0
    n_train: Optional[int] = None
    split_seed: int = 0
    eval_split: str = "eval"
    label_mapping: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: ["MDBAnet", "MDBAnet_mul", "MDnet"])
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "manifest": None if self.manifest is None else str(self.manifest),
            "output_dir": None if self.output_dir is None else str(self.output_dir),
            "seed": self.seed,
            "n_train": self.n_train,
            "split_seed": self.split_seed,
            "eval_split": self.eval_split,
            "label_mapping": {str(k): v for k, v in self.label_mapping.items()},
            "methods": list(self.methods),
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
        }


RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def load_run_config(path: Optional[Path], args: argparse.Namespace) -> RunConfig:
    """Merge a JSON config file with command-line flags (flags win) and validate."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config: file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: not valid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        base = path.parent
    unknown = set(raw) - RUN_KEYS
    if unknown:
        raise ConfigError(f"config: unknown field(s) {sorted(unknown)}")

    net_d = dict(raw.get("network", {}))
    train_d = dict(raw.get("train", {}))
    for flag, key in (("fusion_mode", "fusion_mode"),):
        if getattr(args, flag, None) is not None:
            net_d[key] = getattr(args, flag)
    for flag, key in (("epochs", "max_epochs"), ("steps_per_epoch", "steps_per_epoch")):
        if getattr(args, flag, None) is not None:
            train_d[key] = getattr(args, flag)

    cfg = RunConfig()
    for key in ("seed", "n_train", "split_seed", "eval_split", "label_mapping", "methods"):
        if key in raw:
            setattr(cfg, key, raw[key])
    for key in ("seed", "n_train"):
        if getattr(args, key, None) is not None:
            setattr(cfg, key, getattr(args, key))
    if getattr(args, "methods", None):
        cfg.methods = args.methods.split(",")

    manifest = getattr(args, "manifest", None) or raw.get("manifest")
    out = getattr(args, "out", None) or raw.get("output_dir")
    cfg.manifest = None if manifest is None else _resolve(manifest, base, args, "manifest")
    cfg.output_dir = None if out is None else _resolve(out, base, args, "out")

    if "seed" not in train_d:
        train_d["seed"] = cfg.seed
    try:
        cfg.network = NetworkConfig.from_dict(net_d)
        cfg.train = TrainConfig.from_dict(train_d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if getattr(args, "method", None):
        cfg.methods = [args.method]
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"methods: unknown method(s) {bad}; expected {sorted(METHODS)}")
    if getattr(args, "method", None):
        cfg.network = cfg.network.for_method(args.method)
    if cfg.eval_split not in ("train", "eval"):
        raise ConfigError(f"eval_split: must be 'train' or 'eval', got {cfg.eval_split!r}")
    if not isinstance(cfg.seed, int):
        raise ConfigError(f"seed: must be an integer, got {cfg.seed!r}")
    if cfg.n_train is not None and (not isinstance(cfg.n_train, int) or cfg.n_train < 1):
        raise ConfigError(f"n_train: must be a positive integer, got {cfg.n_train!r}")
    try:
        cfg.label_mapping = {int(k): int(v) for k, v in cfg.label_mapping.items()}
    except (TypeError, ValueError, AttributeError):
        raise ConfigError("label_mapping: must map integer source labels to 0, 1 or 2") from None
    return cfg


def _resolve(p, base: Path, args, flag: str) -> Path:
    # paths given on the command line are relative to the cwd, config paths to the config file
    if getattr(args, flag, None):
        return Path(p)
    return (base / p) if not Path(p).is_absolute() else Path(p)


def _require_manifest(path: Optional[Path]) -> DatasetManifest:
    if path is None:
        raise ConfigError("manifest: no manifest given")
    if not Path(path).exists():
        raise ConfigError(f"manifest: file not found: {path}")
    try:
        return read_manifest(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(f"manifest: {e}") from None


def _require_out(path) -> Path:
    if path is None:
        raise ConfigError("out: no output directory given")
    return Path(path)


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_label_map(text: Optional[str]) -> dict:
    if not text:
        return {}
    try:
        src = Path(text).read_text() if Path(text).exists() else text
        return {int(k): int(v) for k, v in json.loads(src).items()}
    except (ValueError, AttributeError, TypeError):
        raise ConfigError(f"label-map: expected a JSON object of integer labels, got {text!r}") from None


# ---------------------------------------------------------------- commands

def cmd_phantom(args) -> int:
    out = _require_out(args.out)
    try:
        specs = [
            PhantomSpec(
                seed=args.seed + i,
                shape=tuple(args.shape),
                spacing=tuple(args.spacing),
                n_scars=args.n_scars,
                scar_radius_range=tuple(args.scar_radius),
                shell_thickness=args.shell_thickness,
                noise_sigma=args.noise_sigma,
            )
            for i in range(args.n_cases)
        ]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if args.n_train is not None and not 0 < args.n_train < args.n_cases:
        raise ConfigError(f"n-train: must be in [1, {args.n_cases - 1}]")
    try:
        cases = [generate_phantom(spec) for spec in specs]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    entries = []
    for v, lm in cases:
        img = out / "images" / f"{v.case_id}.nii.gz"
        lab = out / "labels" / f"{v.case_id}.nii.gz"
        save_volume(v, img)
        save_labels(lm, lab)
        entries.append(ManifestEntry(v.case_id, img, lab))
    manifest = DatasetManifest(entries)
    if args.n_train is not None:
        manifest = split_dataset(manifest, args.n_train, args.seed)
    write_manifest(manifest, out / "manifest.json")
    print(f"wrote {len(entries)} phantoms and {out / 'manifest.json'}")
    return 0


def histograms_for_manifest(manifest: DatasetManifest, connectivity: int, label_mapping=None) -> ScarSizeHistogram:
    total = ScarSizeHistogram()
    for entry in manifest.labeled():
        _, lm = load_entry(entry, label_mapping)
        total = total + scar_histogram(lm, connectivity)
    return total


def reference_check(hist: ScarSizeHistogram, reference=LASCARQS2022_TRAIN_REFERENCE) -> dict:
    got = {
        "total_count": hist.total_count,
        "total_volume_mm3": int(round(hist.total_volume)),
        "count_0_50": int(hist.counts[0]),
    }
    return {"observed": got, "reference": dict(reference), "match": got == dict(reference)}


def cmd_stats(args) -> int:
    manifest = _require_manifest(args.manifest)
    out = _require_out(args.out)
    mapping = _parse_label_map(args.label_map)
    if not manifest.labeled():
        raise ConfigError("manifest: no labeled cases found")
    conns = [6, 18, 26] if args.connectivity == "all" else [int(args.connectivity)]
    summary = {}
    for conn in conns:
        hist = histograms_for_manifest(manifest, conn, mapping)
        stem = out / f"scar_histogram_c{conn}"
        stem.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{stem}.csv").write_text(hist.to_csv())
        _dump_json(hist.to_dict(), Path(f"{stem}.json"))
        plot_histogram(hist, Path(f"{stem}.png"), f"Scar size distribution ({conn}-connectivity)")
        summary[str(conn)] = hist.to_dict()
        if args.reference:
            summary[str(conn)]["reference_check"] = reference_check(hist)
        print(f"connectivity {conn}: {hist.total_count} scars, {hist.total_volume:.2f} mm3")
        for row in hist.table_rows():
            print("  " + " | ".join(row))
    _dump_json(summary, out / "scar_statistics.json")
    return 0


def _prepare_manifest(cfg: RunConfig) -> DatasetManifest:
    manifest = _require_manifest(cfg.manifest)
    if not manifest.subset("train"):
        if cfg.n_train is None:
            raise ConfigError("manifest has no train split; set n_train to split it")
        try:
            manifest = split_dataset(manifest, cfg.n_train, cfg.split_seed)
        except ValueError as e:
            raise ConfigError(f"n_train: {e}") from None
    return manifest


def run_training(cfg: RunConfig, manifest: DatasetManifest, out: Path, method: Optional[str] = None):
    net_cfg = cfg.network.for_method(method) if method else cfg.network
    out.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.to_dict()
    snapshot["network"] = net_cfg.to_dict()
    snapshot["method"] = net_cfg.method_name
    _dump_json(snapshot, out / "config.resolved.json")
    write_manifest(manifest, out / "manifest.split.json")
    net = build_network(net_cfg, seed=cfg.seed)
    train(net, manifest, cfg.train, out_dir=out, label_mapping=cfg.label_mapping)
    result = None
    if manifest.subset(cfg.eval_split):
        result = evaluate(net, manifest, cfg.eval_split, cfg.label_mapping, threshold=cfg.train.threshold,
                          la_includes_scar=cfg.train.la_includes_scar)
        result.write(out)
        print(f"{result.method}: " + ", ".join(f"{k}={v}" for k, v in result.summary_row().items() if k != "method"))
    return net, result


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args)
    manifest = _prepare_manifest(cfg)
    out = _require_out(cfg.output_dir)
    run_training(cfg, manifest, out)
    return 0


def cmd_ablation(args) -> int:
    cfg = load_run_config(args.config, args)
    manifest = _prepare_manifest(cfg)
    out = _require_out(cfg.output_dir)
    if not manifest.subset(cfg.eval_split):
        raise ConfigError(f"manifest has no '{cfg.eval_split}' cases to report on")
    results = []
    for method in cfg.methods:
        _, result = run_training(cfg, manifest, out / method, method)
        results.append(result)
    (out / "summary.csv").write_text(summary_csv(results))
    _dump_json([r.summary_row() for r in results], out / "summary.json")
    print(summary_csv(results), end="")
    return 0


def _select(manifest: DatasetManifest, split: str) -> list[ManifestEntry]:
    if split == "all":
        return list(manifest.entries)
    return manifest.subset(split)


def cmd_predict(args) -> int:
    manifest = _require_manifest(args.manifest)
    out = _require_out(args.out)
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint: file not found: {args.checkpoint}")
    if not 0 < args.threshold < 1:
        raise ConfigError("threshold: must be in (0, 1)")
    entries = _select(manifest, args.split)
    if not entries:
        raise ConfigError(f"no cases in split {args.split!r}")
    net, step = load_checkpoint(args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json({"checkpoint": str(args.checkpoint), "step": step, "threshold": args.threshold,
                "split": args.split, "network": net.cfg.to_dict()}, out / "config.resolved.json")
    for entry in entries:
        v, _ = load_case(entry.image, case_id=entry.case_id)
        save_labels(predict_case(v, net, args.threshold), out / f"{entry.case_id}_pred.nii.gz")
    print(f"wrote {len(entries)} predictions to {out}")
    return 0


def prediction_path(pred_dir, case_id: str) -> Path:
    return Path(pred_dir) / f"{case_id}_pred.nii.gz"


def cmd_evaluate(args) -> int:
    manifest = _require_manifest(args.manifest)
    out = _require_out(args.out)
    mapping = _parse_label_map(args.label_map)
    entries = [e for e in _select(manifest, args.split) if e.label is not None]
    if not entries:
        raise ConfigError(f"no labeled cases in split {args.split!r}")
    if args.checkpoint is None and args.predictions is None:
        raise ConfigError("evaluate needs --predictions or --checkpoint")
    if args.checkpoint is not None:
        net, _ = load_checkpoint(args.checkpoint)
        cases = [load_entry(e, mapping) for e in entries]
        result = evaluate_cases(net, cases, method=args.method)
    else:
        missing = [e.case_id for e in entries if not prediction_path(args.predictions, e.case_id).exists()]
        if missing:
            raise ConfigError(f"predictions missing for cases {missing}")
        with_la = not args.scar_only and args.method != "MDnet"
        records = []
        for e in entries:
            _, ref = load_entry(e, mapping)
            pred = _read_pred(args.predictions, e.case_id)
            if pred.shape != ref.shape:
                raise ConfigError(f"{e.case_id}: prediction shape {pred.shape} != reference shape {ref.shape}")
            records.append(evaluate_case(e.case_id, pred, ref, with_la))
        result = aggregate_eval(records, args.method or "")
    result.write(out)
    _dump_json({"manifest": str(args.manifest), "split": args.split, "predictions": args.predictions and str(args.predictions),
                "checkpoint": args.checkpoint and str(args.checkpoint), "method": result.method}, out / "config.resolved.json")
    print(", ".join(f"{k}={v}" for k, v in result.summary_row().items()))
    return 0


def _read_pred(pred_dir, case_id) -> LabelMap:
    vol, _ = load_case(prediction_path(pred_dir, case_id))
    return LabelMap(np.rint(vol.voxels).astype(np.uint8), vol.spacing)


def cmd_report(args) -> int:
    manifest = _require_manifest(args.manifest)
    out = _require_out(args.out)
    if args.zoom < 1:
        raise ConfigError("zoom: must be >= 1")
    entries = [e for e in _select(manifest, args.split) if prediction_path(args.predictions, e.case_id).exists()]
    if not entries:
        raise ConfigError(f"no predictions found in {args.predictions} for split {args.split!r}")
    written = []
    for e in entries:
        v, ref = load_entry(e)
        pred = _read_pred(args.predictions, e.case_id)
        if pred.shape != v.shape:
            raise ConfigError(f"{e.case_id}: prediction shape {pred.shape} != image shape {v.shape}")
        slices = select_slices(ref.labels if ref is not None else pred.labels, args.slices)
        written += write_case_overlays(e.case_id, v.voxels, None if ref is None else ref.labels, pred.labels,
                                       out, slices, args.zoom)
    print(f"wrote {len(written)} overlay images to {out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdbanet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="write synthetic labeled volumes and a manifest")
    ph.add_argument("--out", type=Path, required=True)
    ph.add_argument("--n-cases", type=int, default=4)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--shape", type=int, nargs=3, default=[32, 32, 32])
    ph.add_argument("--spacing", type=float, nargs=3, default=[1.0, 1.0, 1.0])
    ph.add_argument("--n-scars", type=int, default=5)
    ph.add_argument("--scar-radius", type=float, nargs=2, default=[1.5, 3.0])
    ph.add_argument("--shell-thickness", type=float, default=2.0)
    ph.add_argument("--noise-sigma", type=float, default=10.0)
    ph.add_argument("--n-train", type=int, default=None, help="also write a train/eval split")
    ph.set_defaults(func=cmd_phantom)

    st = sub.add_parser("stats", help="scar size histogram over all labeled cases")
    st.add_argument("--manifest", type=Path, required=True)
    st.add_argument("--out", type=Path, required=True)
    st.add_argument("--connectivity", choices=["6", "18", "26", "all"], default="26")
    st.add_argument("--label-map", help="JSON object (or file) mapping raw label values to 0/1/2")
    st.add_argument("--reference", action="store_true", help="compare totals with the LAScarQS 2022 training-set figures")
    st.set_defaults(func=cmd_stats)

    for name, func, helptext in (("train", cmd_train, "train one network"),
                                 ("ablation", cmd_ablation, "train and evaluate each fusion variant")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config", type=Path)
        t.add_argument("--manifest", type=Path)
        t.add_argument("--out", type=Path)
        t.add_argument("--seed", type=int)
        t.add_argument("--n-train", type=int)
        t.add_argument("--epochs", type=int)
        t.add_argument("--steps-per-epoch", type=int)
        if name == "train":
            t.add_argument("--fusion-mode", choices=["sobel", "multiply", "none"])
            t.add_argument("--method", choices=sorted(METHODS))
        else:
            t.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
        t.set_defaults(func=func)

    pr = sub.add_parser("predict", help="write label maps predicted by a checkpoint")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--manifest", type=Path, required=True)
    pr.add_argument("--out", type=Path, required=True)
    pr.add_argument("--split", choices=["all", "train", "eval"], default="all")
    pr.add_argument("--threshold", type=float, default=0.5)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", help="Dice / Hausdorff report for predictions")
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--out", type=Path, required=True)
    ev.add_argument("--predictions", type=Path)
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--split", choices=["all", "train", "eval"], default="eval")
    ev.add_argument("--method", default=None)
    ev.add_argument("--scar-only", action="store_true")
    ev.add_argument("--label-map")
    ev.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report", help="slice overlays of reference and predicted contours")
    rp.add_argument("--predictions", type=Path, required=True)
    rp.add_argument("--manifest", type=Path, required=True)
    rp.add_argument("--out", type=Path, required=True)
    rp.add_argument("--split", choices=["all", "train", "eval"], default="all")
    rp.add_argument("--slices", default="auto:3", help="auto:K, mid, or comma-separated axial indices")
    rp.add_argument("--zoom", type=int, default=4)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        logger.exception("command failed")
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
