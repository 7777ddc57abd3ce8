"""Command line interface.

Subcommands cover the full pipeline:

  prepare    slice, crop, and normalize volumes into a dataset directory
  synth      generate the synthetic border-bias benchmark
  train      train one model per seed from an experiment config
  evaluate   score a trained run against a dataset split
  diagnose   measure border shift of feature statistics for a trained run
  report     comparison tables and qualitative overlay panels

Exit codes: 0 on success, 1 for user or config errors, 2 for internal
failures. Errors are emitted to stderr as a single JSON line.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from . import diagnostics as diag
from .data import (
    LoadedDataset,
    SliceSample,
    SynthConfig,
    center_crop,
    concat_modalities,
    generate_border_bias,
    group_by_volume,
    load_dataset,
    normalize_intensity,
    restack_slices,
    save_dataset,
    save_synth_dataset,
    slice_volume,
)
from .errors import (
    ConfigError,
    ContractViolation,
    EmptyMaskError,
    GenerationError,
    ShapeError,
)
from .metrics import aggregate_metrics, conventions, evaluate_masks, write_metrics_csv
from .model import SegmentationModel, load_checkpoint, model_config_from_dict, model_config_to_dict
from .train import TrainConfig, train_model
from .validation import check_binary_array, take_keys

USER_ERRORS = (
    ConfigError,
    ShapeError,
    ContractViolation,
    GenerationError,
    EmptyMaskError,
    FileNotFoundError,
    NotADirectoryError,
    json.JSONDecodeError,
)


class _Parser(argparse.ArgumentParser):
    # Route argparse usage errors through the normal user-error path so the
    # process exits 1 with a machine-readable line instead of argparse's 2.
    def error(self, message):
        raise ConfigError(message)


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def _dump_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def synth_config_from_dict(d: dict) -> SynthConfig:
    defaults = {
        "height": 64, "width": 64, "train": 200, "val": 40, "test": 40,
        "blob_count": [4, 8], "blob_radius": [3.0, 6.0], "band": 16,
        "rule": "auto", "blob_value": 0.8, "noise": 0.05, "seed": 0,
    }
    d = take_keys(d, defaults, "synth config")
    return SynthConfig(
        height=int(d["height"]), width=int(d["width"]),
        train=int(d["train"]), val=int(d["val"]), test=int(d["test"]),
        blob_count=tuple(int(v) for v in d["blob_count"]),
        blob_radius=tuple(float(v) for v in d["blob_radius"]),
        band=int(d["band"]), rule=d["rule"],
        blob_value=float(d["blob_value"]), noise=float(d["noise"]),
        seed=int(d["seed"]),
    )


def train_config_from_dict(d: dict) -> TrainConfig:
    defaults = {
        "base_lr": 1e-3, "weight_decay": 1e-6, "batch_size": 14, "epochs": 90,
        "lr_milestones": [0.5, 0.7, 0.9], "lr_factor": 0.5,
        "loss": "bce_dice", "threshold": 0.5, "seed": 0,
    }
    d = take_keys(d, defaults, "train config")
    return TrainConfig(
        base_lr=float(d["base_lr"]), weight_decay=float(d["weight_decay"]),
        batch_size=int(d["batch_size"]), epochs=int(d["epochs"]),
        lr_milestones=tuple(float(m) for m in d["lr_milestones"]),
        lr_factor=float(d["lr_factor"]), loss=d["loss"],
        threshold=float(d["threshold"]), seed=int(d["seed"]),
    )


# ---------------------------------------------------------------------------
# prepare


def _prepare_volume(case: dict, base: Path, crop, normalize_mode, label_threshold):
    case = take_keys(case, {"volume_id": None, "images": None, "label": None},
                     "prepare case")
    if not case["volume_id"] or not case["images"] or not case["label"]:
        raise ConfigError("each prepare case needs volume_id, images, and label")
    from .volume_io import read_volume

    volume_id = str(case["volume_id"])
    modalities = [read_volume(base / p, volume_id=volume_id) for p in case["images"]]
    label_vol = read_volume(base / case["label"], volume_id=volume_id)
    shape = modalities[0].values.shape
    for k, m in enumerate(modalities[1:], start=1):
        if m.values.shape != shape:
            raise ShapeError(
                f"{volume_id}: modality {k} shape {m.values.shape} differs from {shape}"
            )
    if label_vol.values.shape != shape:
        raise ShapeError(
            f"{volume_id}: label shape {label_vol.values.shape} differs from {shape}"
        )

    def crop_stack(values: np.ndarray) -> np.ndarray:
        if crop is None:
            return values
        return np.stack([center_crop(p, crop[0], crop[1]) for p in values])

    images = [normalize_intensity(crop_stack(m.values), normalize_mode)
              for m in modalities]
    labels = crop_stack(label_vol.values)
    if label_threshold is not None:
        labels = labels > float(label_threshold)
    labels = check_binary_array(labels, f"{volume_id} label", ndim=3)
    samples = []
    for d in range(shape[0] if crop is None else labels.shape[0]):
        plane = concat_modalities([img[d] for img in images]).astype(np.float32)
        samples.append(
            SliceSample(image=plane, label=labels[d].astype(np.uint8),
                        volume_id=volume_id, index=d)
        )
    return samples, modalities[0].spacing


def cmd_prepare(args) -> int:
    config = _load_json(args.config)
    defaults = {"crop": None, "normalize": "minmax", "label_threshold": None,
                "splits": None}
    config = take_keys(config, defaults, "prepare config")
    if not isinstance(config["splits"], dict) or not config["splits"]:
        raise ConfigError("prepare config needs a non-empty splits mapping")
    crop = config["crop"]
    if crop is not None:
        crop = [int(c) for c in crop]
        if len(crop) != 2:
            raise ConfigError(f"crop must be [height, width], got {config['crop']}")
    base = Path(args.config).resolve().parent
    splits: dict[str, list[SliceSample]] = {}
    spacing = None
    for split, cases in config["splits"].items():
        samples: list[SliceSample] = []
        for case in cases:
            case_samples, case_spacing = _prepare_volume(
                case, base, crop, config["normalize"], config["label_threshold"]
            )
            samples.extend(case_samples)
            spacing = spacing or case_spacing
        splits[split] = samples
    meta = {"kind": "prepared", "crop": crop, "normalize": config["normalize"]}
    save_dataset(args.out, splits, spacing or (1.0, 1.0, 1.0), meta)
    print(f"prepared {sum(len(s) for s in splits.values())} slices into {args.out}")
    return 0


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    config = synth_config_from_dict(_load_json(args.config) if args.config else {})
    if args.seed is not None:
        config = SynthConfig(**{**asdict(config), "seed": int(args.seed)})
    dataset = generate_border_bias(config)
    save_synth_dataset(args.out, dataset)
    counts = {split: len(s) for split, s in dataset.splits.items()}
    print(f"generated {counts} samples under rule '{dataset.rule}' into {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _experiment_config(path) -> tuple[dict, Path]:
    raw = _load_json(path)
    defaults = {"data": None, "model": {}, "train": {}, "seeds": [0]}
    cfg = take_keys(raw, defaults, "experiment config")
    if not isinstance(cfg["data"], dict) or "path" not in cfg["data"]:
        raise ConfigError('experiment config needs data: {"path": ...}')
    data_path = Path(cfg["data"]["path"])
    if not data_path.is_absolute():
        data_path = Path(path).resolve().parent / data_path
    seeds = [int(s) for s in cfg["seeds"]]
    if len(seeds) == 0 or len(set(seeds)) != len(seeds):
        raise ConfigError(f"seeds must be non-empty and unique, got {cfg['seeds']}")
    return cfg, data_path


def _infer_in_channels(dataset: LoadedDataset) -> int:
    for samples in dataset.splits.values():
        for s in samples:
            image = np.asarray(s.image)
            return 1 if image.ndim == 2 else image.shape[-1]
    raise ConfigError("dataset has no samples")


def cmd_train(args) -> int:
    cfg, data_path = _experiment_config(args.config)
    dataset = load_dataset(data_path)
    for split in ("train", "val"):
        if not dataset.splits.get(split):
            raise ConfigError(f"dataset {data_path} is missing a non-empty '{split}' split")
    model_dict = dict(cfg["model"])
    backbone_dict = dict(model_dict.get("backbone", {}))
    backbone_dict.setdefault("in_channels", _infer_in_channels(dataset))
    model_dict["backbone"] = backbone_dict
    model_config = model_config_from_dict(model_dict)
    train_config = train_config_from_dict(cfg["train"])
    seeds = [int(s) for s in (args.seeds if args.seeds else cfg["seeds"])]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "data": {"path": str(data_path)},
        "model": model_config_to_dict(model_config),
        "train": asdict(train_config),
        "seeds": seeds,
    }
    config_path = out / "config.json"
    if config_path.exists() and not args.resume:
        existing = _load_json(config_path)
        if existing != json.loads(json.dumps(resolved)):
            raise ConfigError(
                f"{config_path} already holds a different config; "
                "use a fresh --out or pass --resume"
            )
    _dump_json(config_path, resolved)

    summary_rows = []
    for seed in seeds:
        seed_train = TrainConfig(**{**asdict(train_config), "seed": seed})
        model = SegmentationModel(model_config, seed=seed)
        result = train_model(
            model,
            dataset.splits["train"],
            dataset.splits["val"],
            seed_train,
            out_dir=out / f"seed_{seed}",
            resume=args.resume,
        )
        summary_rows.append(
            {"seed": seed, "best_epoch": result.best_epoch,
             "best_val_dice": result.best_val_dice}
        )
        print(f"seed {seed}: best val dice {result.best_val_dice:.4f} "
              f"at epoch {result.best_epoch}")
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["seed", "best_epoch", "best_val_dice"])
        writer.writeheader()
        for row in summary_rows:
            writer.writerow({**row, "best_val_dice": repr(row["best_val_dice"])})
    _dump_json(out / "summary.json", {"runs": summary_rows})
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _run_seeds(run: Path) -> list[int]:
    seeds = sorted(
        int(p.name.split("_", 1)[1]) for p in run.glob("seed_*") if p.is_dir()
    )
    if not seeds:
        raise FileNotFoundError(f"no seed_* run directories under {run}")
    return seeds


def _load_run_model(run: Path, seed: int, which: str) -> SegmentationModel:
    path = run / f"seed_{seed}" / "checkpoints" / f"{which}.pt"
    if which == "best":
        model, _ = load_checkpoint(path)
        return model
    # last.pt is a resume point; rebuild the model it describes
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = SegmentationModel(model_config_from_dict(payload["model_config"]),
                              seed=int(payload["seed"]))
    model.load_state_dict(payload["state_dict"])
    return model


def _predict_volumes(model, samples, threshold, batch_size=16):
    """Per-volume (volume_id, predicted (D,H,W), reference (D,H,W)) triples."""
    grouped = group_by_volume(samples)
    results = []
    for volume_id in sorted(grouped):
        group = grouped[volume_id]
        images = np.stack([np.asarray(s.image, dtype=np.float32) for s in group])
        if images.ndim == 3:
            images = images[..., None]
        masks = model.predict_mask(images, threshold=threshold, batch_size=batch_size)
        reference = restack_slices([s.label.astype(bool) for s in group])
        results.append((volume_id, masks.astype(bool), reference))
    return results


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    dataset = load_dataset(args.data)
    samples = dataset.splits.get(args.split)
    if not samples:
        raise ConfigError(f"dataset has no non-empty split {args.split!r}")
    seeds = [int(s) for s in args.seeds] if args.seeds else _run_seeds(run)
    out = Path(args.out) if args.out else run / "metrics"
    out.mkdir(parents=True, exist_ok=True)
    block = conventions(threshold=args.threshold, connectivity=args.connectivity,
                        ldice_factor=args.ldice_factor)
    block["split"] = args.split
    block["mode"] = args.mode
    block["checkpoint"] = args.checkpoint
    per_seed_summary = {}
    for seed in seeds:
        model = _load_run_model(run, seed, args.checkpoint)
        rows = []
        for volume_id, pred, ref in _predict_volumes(model, samples, args.threshold):
            if args.mode == "slice":
                for d in range(pred.shape[0]):
                    row = evaluate_masks(pred[d], ref[d], spacing=dataset.spacing[1:],
                                         connectivity=args.connectivity,
                                         ldice_factor=args.ldice_factor)
                    rows.append({"case": f"{volume_id}/{d:04d}", **row})
            else:
                row = evaluate_masks(pred, ref, spacing=dataset.spacing,
                                     connectivity=args.connectivity,
                                     ldice_factor=args.ldice_factor)
                rows.append({"case": volume_id, **row})
            if args.save_masks:
                mask_dir = out / f"masks_seed{seed}"
                mask_dir.mkdir(parents=True, exist_ok=True)
                np.savez(mask_dir / f"{volume_id}.npz", mask=pred.astype(np.uint8))
        write_metrics_csv(out / f"metrics_seed{seed}.csv", rows, block)
        per_seed_summary[str(seed)] = aggregate_metrics(rows)
        mean_dice = per_seed_summary[str(seed)]["dice"]["mean"]
        print(f"seed {seed}: mean {args.mode} dice {mean_dice:.4f} over {len(rows)} cases")
    seed_means = {
        name: [per_seed_summary[str(s)][name]["mean"] for s in seeds]
        for name in next(iter(per_seed_summary.values()))
    }
    across = {
        name: {
            "mean": None if any(v is None for v in vals) else float(np.mean(vals)),
            "std": None if any(v is None for v in vals) else float(np.std(vals)),
        }
        for name, vals in seed_means.items()
    }
    _dump_json(out / "aggregate.json",
               {"seeds": per_seed_summary, "across_seeds": across,
                "conventions": block})
    return 0


# ---------------------------------------------------------------------------
# diagnose


def cmd_diagnose(args) -> int:
    run = Path(args.run)
    dataset = load_dataset(args.data)
    samples = dataset.splits.get(args.split)
    if not samples:
        raise ConfigError(f"dataset has no non-empty split {args.split!r}")
    if args.limit is not None:
        samples = samples[: args.limit]
    seed = args.seed if args.seed is not None else _run_seeds(run)[0]
    model = _load_run_model(run, seed, args.checkpoint)
    out = Path(args.out) if args.out else run / "diagnostics"
    out.mkdir(parents=True, exist_ok=True)
    stats = diag.feature_stats(model, samples, batch_size=args.batch_size)
    score = diag.shift_score(stats, band=args.band)
    control = diag.shift_score(stats, band=args.band, offset=args.band)
    diag.save_stats(out / "stats.npz", stats)
    files = diag.export_heatmaps(stats, out / "heatmaps")
    payload = {
        "seed": seed,
        "split": args.split,
        "band": args.band,
        "count": stats.count,
        "channels": stats.mean.shape[-1],
        "shift_score": score,
        "control_score": control,
        "heatmaps": [str(p.relative_to(out)) for p in files],
    }
    _dump_json(out / "diagnostics.json", payload)
    print(f"shift score {score:.4f} vs interior control {control:.4f} "
          f"(band {args.band}, {stats.count} samples)")
    return 0


# ---------------------------------------------------------------------------
# report


def _overlay(ax, image: np.ndarray, mask: np.ndarray | None, title: str) -> None:
    ax.imshow(image, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    if mask is not None:
        shaded = np.zeros(mask.shape + (4,))
        shaded[mask.astype(bool)] = (1.0, 0.1, 0.1, 0.55)
        ax.imshow(shaded, interpolation="nearest")
    ax.set_title(title, fontsize=8)
    ax.axis("off")


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = args.label or []
    if labels and len(labels) != len(args.metrics):
        raise ConfigError("--label must be given once per --metrics directory")
    table_rows = []
    for i, metrics_dir in enumerate(args.metrics):
        path = Path(metrics_dir) / "aggregate.json"
        payload = _load_json(path)
        label = labels[i] if labels else Path(metrics_dir).parent.name or str(metrics_dir)
        across = payload["across_seeds"]
        row = {"run": label, "seeds": len(payload["seeds"])}
        for name, cell in across.items():
            row[name] = cell["mean"]
            row[f"{name}_std"] = cell["std"]
        table_rows.append(row)
    if table_rows:
        names = [k for k in table_rows[0] if k not in ("run", "seeds")]
        with open(out / "table.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["run", "seeds"] + names)
            writer.writeheader()
            for row in table_rows:
                writer.writerow(
                    {k: (repr(v) if isinstance(v, float) else "" if v is None else v)
                     for k, v in row.items()}
                )
        base_metrics = [n for n in names if not n.endswith("_std")]
        lines = ["run".ljust(24) + "".join(name.rjust(18) for name in base_metrics)]
        for row in table_rows:
            cells = []
            for name in base_metrics:
                mean, std = row.get(name), row.get(f"{name}_std")
                cells.append("-".rjust(18) if mean is None
                             else f"{mean:.4f} ({std:.4f})".rjust(18))
            lines.append(str(row["run"]).ljust(24) + "".join(cells))
        (out / "table.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))

    panels = []
    if args.run and args.data:
        dataset = load_dataset(args.data)
        samples = dataset.splits.get(args.split)
        if not samples:
            raise ConfigError(f"dataset has no non-empty split {args.split!r}")
        grouped = group_by_volume(samples)
        wanted = args.slices or []
        if not wanted:
            volume_id = sorted(grouped)[0]
            wanted = [f"{volume_id}:{len(grouped[volume_id]) // 2}"]
        run_dirs = [Path(r) for r in args.run]
        run_labels = labels if labels and len(labels) == len(run_dirs) else \
            [r.name or str(r) for r in run_dirs]
        for spec_str in wanted:
            volume_id, _, index_str = spec_str.partition(":")
            if volume_id not in grouped:
                raise ConfigError(f"volume {volume_id!r} not in split {args.split!r}")
            group = grouped[volume_id]
            index = int(index_str) if index_str else len(group) // 2
            by_index = {s.index: s for s in group}
            if index not in by_index:
                raise ConfigError(f"volume {volume_id!r} has no slice {index}")
            sample = by_index[index]
            image = np.asarray(sample.image, dtype=np.float32)
            if image.ndim == 2:
                image = image[..., None]
            cols = 2 + len(run_dirs)
            fig, axes = plt.subplots(1, cols, figsize=(2.2 * cols, 2.5))
            _overlay(axes[0], image[..., 0], None, f"{volume_id}[{index}]")
            _overlay(axes[1], image[..., 0], sample.label, "reference")
            for ax, run_dir, run_label in zip(axes[2:], run_dirs, run_labels):
                seed = _run_seeds(run_dir)[0]
                model = _load_run_model(run_dir, seed, args.checkpoint)
                mask = model.predict_mask(image[None], threshold=args.threshold)[0]
                _overlay(ax, image[..., 0], mask, run_label)
            fig.tight_layout()
            panel_path = out / f"panel_{volume_id}_{index:04d}.png"
            fig.savefig(panel_path, dpi=150)
            plt.close(fig)
            panels.append(panel_path.name)
    _dump_json(out / "report.json",
               {"table": "table.csv" if table_rows else None, "panels": panels})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nerdseg",
                     description="Border-aware binary segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[], help="build a dataset from volumes")
    p.add_argument("--config", required=True, help="JSON describing cases per split")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate the synthetic border-bias benchmark")
    p.add_argument("--config", help="JSON with generator settings (optional)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model per seed")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true",
                   help="continue interrupted runs from their last checkpoint")
    p.add_argument("--seeds", type=int, nargs="+", help="override config seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a run on a dataset split")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="defaults to <run>/metrics")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--checkpoint", choices=("best", "last"), default="best")
    p.add_argument("--mode", choices=("volume", "slice"), default="volume")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--connectivity", type=int, default=None)
    p.add_argument("--ldice-factor", type=float, default=2.0, dest="ldice_factor")
    p.add_argument("--save-masks", action="store_true", dest="save_masks")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="border shift of feature statistics")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", choices=("best", "last"), default="best")
    p.add_argument("--band", type=int, default=diag.DEFAULT_BAND)
    p.add_argument("--limit", type=int)
    p.add_argument("--batch-size", type=int, default=8, dest="batch_size")
    p.add_argument("--out", help="defaults to <run>/diagnostics")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("report", help="tables and overlay panels")
    p.add_argument("--metrics", nargs="+", default=[],
                   help="evaluate output directories to tabulate")
    p.add_argument("--label", nargs="+", help="display name per metrics/run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--run", nargs="+", default=[],
                   help="run directories for qualitative panels")
    p.add_argument("--data", help="dataset for qualitative panels")
    p.add_argument("--split", default="test")
    p.add_argument("--slices", nargs="+", help="volume_id:index panels to render")
    p.add_argument("--checkpoint", choices=("best", "last"), default="best")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args) or 0)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except USER_ERRORS as exc:
        line = {"error": "user", "type": type(exc).__name__, "message": str(exc)}
        print(json.dumps(line), file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        line = {"error": "internal", "type": type(exc).__name__, "message": str(exc)}
        print(json.dumps(line), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
