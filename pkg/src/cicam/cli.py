"""Command line: ``cicam {datagen,train,eval,visualize}``.

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .combiner import GAMMA_KINDS, CombinerConfig, localization_map
from .datagen import SceneSpec, generate_dataset, read_dataset, write_dataset
from .evaluator import TOP5_MODES, evaluate, predict, score_predictions, tally, theta_sweep, write_records_csv
from .localizer import BoundingBox, LocalizerConfig, NoForeground, segment_box, upsample
from .trainer import TrainConfig, train
from .visualize import composite, save_png

log = logging.getLogger("cicam")

EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
RUN_MANIFEST = "run.json"


class ValidationError(Exception):
    pass


def dataset_hash(root: Path) -> str:
    """sha256 over the manifest and every image file, in manifest order."""
    h = hashlib.sha256()
    manifest = root / "manifest.json"
    h.update(manifest.read_bytes())
    for entry in json.loads(manifest.read_text()):
        h.update((root / entry["file"]).read_bytes())
    return h.hexdigest()


def write_run_manifest(out: Path, command: str, config: dict, seed: int | None, started: float,
                       outputs: list[str], data: Path | None = None) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "dataset_hash": dataset_hash(data) if data is not None else None,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": outputs,
    }
    with open(out / RUN_MANIFEST, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def _data_dir(value: str | None) -> Path:
    if value is None:
        value = os.environ.get("CICAM_DATA_DIR")
        if value is None:
            raise ValidationError("no dataset given: pass --data or set CICAM_DATA_DIR")
    path = Path(value)
    if not (path / "manifest.json").exists():
        raise ValidationError(f"{path} is not a dataset directory (no manifest.json)")
    return path


def _checkpoint_path(value: str) -> Path:
    path = Path(value)
    if path.is_dir():
        ckpts = sorted((path / "checkpoints").glob("epoch_*.npz")) or sorted(path.glob("epoch_*.npz"))
        if not ckpts:
            raise ValidationError(f"no checkpoints under {path}")
        return ckpts[-1]
    if not path.exists():
        raise ValidationError(f"checkpoint {path} does not exist")
    return path


def _parse_range(spec: str) -> list[float]:
    try:
        start, stop, step = (float(v) for v in spec.split(":"))
    except ValueError:
        raise ValidationError(f"expected start:stop:step, got {spec!r}")
    if step <= 0 or stop < start:
        raise ValidationError(f"bad range {spec!r}")
    count = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 10) for i in range(count)]


def _parse_floats(spec: str) -> list[float]:
    try:
        return [float(v) for v in spec.split(",") if v]
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {spec!r}")


def _combiner(args) -> CombinerConfig:
    return CombinerConfig(args.gamma, args.top_frac, args.bottom_frac, args.gamma_scale)


def _localizer(args) -> LocalizerConfig:
    cfg = LocalizerConfig(args.theta, args.connectivity)
    try:
        cfg.validate()
    except ValueError as e:
        raise ValidationError(str(e))
    return cfg


def cmd_datagen(args) -> None:
    started = time.time()
    lo, hi = args.scale_min, args.scale_max
    spec = SceneSpec(args.image_size, args.classes, args.rho, (lo, hi), args.seed)
    try:
        spec.validate()
        if args.count <= 0:
            raise ValueError(f"count must be >= 1, got {args.count}")
        if args.test_rho is not None and not 0 <= args.test_rho <= 1:
            raise ValueError(f"test rho must lie in [0, 1], got {args.test_rho}")
    except ValueError as e:
        raise ValidationError(str(e))
    out = Path(args.out)
    rho = args.test_rho if args.split == "test" else None
    samples = generate_dataset(spec, args.count, args.split, rho=rho)
    write_dataset(samples, out)
    config = {"spec": dataclasses.asdict(spec), "count": args.count, "split": args.split, "test_rho": args.test_rho}
    write_run_manifest(out, "datagen", config, args.seed, started, ["manifest.json", "images/"], data=out)
    print(f"wrote {len(samples)} samples to {out}")


def _train_config(args, num_classes: int, image_size: int) -> TrainConfig:
    base = {}
    if args.config:
        with open(args.config) as f:
            base = json.load(f)
    overrides = {
        "learning_rate": args.lr, "batch_size": args.batch, "epochs": args.epochs, "lam": args.lam,
        "seed": args.seed, "dtype": args.dtype, "aggregate": args.aggregate,
        "stage_channels": [int(c) for c in args.stage_channels.split(",")] if args.stage_channels else None,
    }
    if args.pool is not None:
        overrides["pool"] = args.pool == "on"
    if args.per_channel_enhance:
        overrides["per_channel_enhance"] = True
    base.update({k: v for k, v in overrides.items() if v is not None})
    base.setdefault("num_classes", num_classes)
    base.setdefault("image_size", image_size)
    try:
        cfg = TrainConfig.from_dict(base)
        cfg.validate()
    except (ValueError, TypeError) as e:
        raise ValidationError(str(e))
    return cfg


def cmd_train(args) -> None:
    started = time.time()
    data = _data_dir(args.data)
    samples = read_dataset(data)
    num_classes = max(s.label for s in samples) + 1
    cfg = _train_config(args, num_classes, samples[0].image.shape[-1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = _checkpoint_path(args.resume) if args.resume else None
    result = train(cfg, samples, out, resume=resume,
                   on_epoch=lambda e, l: print(f"epoch {e:3d}  loss {l:.5f}", flush=True))
    write_run_manifest(out, "train", dataclasses.asdict(cfg), cfg.seed, started,
                       ["train_log.jsonl", "checkpoints/"], data=data)
    print(f"final epoch loss {result.epoch_losses[-1] if result.epoch_losses else float('nan'):.5f}")


def cmd_eval(args) -> None:
    started = time.time()
    data = _data_dir(args.data)
    ckpt = _checkpoint_path(args.checkpoint)
    if args.top5_mode not in TOP5_MODES:
        raise ValidationError(f"top5 mode must be one of {TOP5_MODES}")
    loc, comb = _localizer(args), _combiner(args)
    try:
        comb.validate()
    except ValueError as e:
        raise ValidationError(str(e))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = read_dataset(data)
    model, pool, meta = load_checkpoint(ckpt)
    outputs = ["report.json"]

    preds = predict(model, pool, samples)
    records = score_predictions(preds, samples, loc, comb, args.top5_mode)
    report = tally(records)
    report.to_json(out / "report.json")
    print(json.dumps(report.to_dict()))
    if args.per_sample_csv:
        write_records_csv(records, out / "per_sample.csv")
        outputs.append("per_sample.csv")

    if args.theta_sweep:
        rows = theta_sweep(preds, samples, _parse_range(args.theta_sweep), comb, args.connectivity)
        _write_table(rows, out / "theta_sweep.json")
        outputs.append("theta_sweep.json")
        for row in rows:
            print(f"theta={row['theta']:.3f} gtknown={row['gtknown_loc']:.4f} top1_loc={row['top1_loc']:.4f} "
                  f"area={row['mean_box_area']:.1f}")

    if args.lambda_list:
        if not args.train_data:
            raise ValidationError("--lambda-list needs --train-data to retrain one model per update rate")
        train_data = _data_dir(args.train_data)
        train_samples = read_dataset(train_data)
        base = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else TrainConfig()
        rows = []
        for lam in _parse_floats(args.lambda_list):
            cfg = dataclasses.replace(base, lam=lam, pool=True)
            result = train(cfg, train_samples)
            rep, _ = evaluate(result.model, result.pool, samples, loc, comb, args.top5_mode)
            rows.append({"lambda": lam, **rep.to_dict()})
            print(f"lambda={lam:g} top1_cls={rep.top1_cls:.4f} top1_loc={rep.top1_loc:.4f} "
                  f"gtknown={rep.gtknown_loc:.4f}", flush=True)
        _write_table(rows, out / "lambda_sweep.json")
        outputs.append("lambda_sweep.json")

    config = {"checkpoint": str(ckpt), "localizer": dataclasses.asdict(loc), "combiner": dataclasses.asdict(comb),
              "top5_mode": args.top5_mode, "theta_sweep": args.theta_sweep, "lambda_list": args.lambda_list}
    write_run_manifest(out, "eval", config, meta.get("train_config", {}).get("seed"), started, outputs, data=data)


def _write_table(rows: list[dict], path: Path) -> None:
    with open(path, "w") as f:
        json.dump(rows, f, indent=2)
        f.write("\n")


def cmd_visualize(args) -> None:
    started = time.time()
    data = _data_dir(args.data)
    ckpt = _checkpoint_path(args.checkpoint)
    loc, comb = _localizer(args), _combiner(args)
    samples = read_dataset(data)
    indices = [int(i) for i in args.indices.split(",")] if args.indices else list(range(min(args.count, len(samples))))
    if any(not 0 <= i < len(samples) for i in indices):
        raise ValidationError(f"sample index out of range [0, {len(samples)})")
    model, pool, _ = load_checkpoint(ckpt)
    chosen = [samples[i] for i in indices]
    preds = predict(model, pool, chosen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    boxes = {}
    for i, s, p in zip(indices, chosen, preds):
        size = s.image.shape[-2:]
        h = localization_map(p.maps, p.probs, comb)
        try:
            box = segment_box(h, size, loc)
        except NoForeground:
            box = BoundingBox.full(*size)
        img = composite(s.image, upsample(h, size), box, s.gt_box, scale=args.scale)
        save_png(img, out / f"sample_{i:06d}.png")
        boxes[f"sample_{i:06d}.png"] = list(box.as_tuple())
    with open(out / "boxes.json", "w") as f:
        json.dump(boxes, f, indent=1)
        f.write("\n")
    config = {"checkpoint": str(ckpt), "indices": indices, "scale": args.scale,
              "localizer": dataclasses.asdict(loc), "combiner": dataclasses.asdict(comb)}
    write_run_manifest(out, "visualize", config, None, started, sorted(boxes) + ["boxes.json"], data=data)
    print(f"wrote {len(indices)} composites to {out}")


def _add_map_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", choices=GAMMA_KINDS, default="nlccam-bipolar")
    p.add_argument("--top-frac", type=float, default=0.1)
    p.add_argument("--bottom-frac", type=float, default=0.1)
    p.add_argument("--gamma-scale", type=float, default=1.0)
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cicam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="render a synthetic confounded dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--rho", type=float, default=0.95, help="class/texture co-occurrence rate (train split)")
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--test-rho", type=float, default=None, help="override the test split's 1/n coupling")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--scale-min", type=float, default=0.25)
    p.add_argument("--scale-max", type=float, default=0.5)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a model, writing epoch checkpoints and a JSONL loss log")
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file with TrainConfig fields")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--pool", choices=("on", "off"), default=None)
    p.add_argument("--aggregate", choices=("predicted", "all-classes"), default=None)
    p.add_argument("--per-channel-enhance", action="store_true")
    p.add_argument("--stage-channels", default=None, help="e.g. 32,64,128")
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="epoch checkpoint (or run directory) to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute the metric report; optional theta and lambda sweeps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--top5-mode", default="single-box")
    p.add_argument("--per-sample-csv", action="store_true")
    p.add_argument("--theta-sweep", default=None, metavar="START:STOP:STEP")
    p.add_argument("--lambda-list", default=None, metavar="L1,L2,...")
    p.add_argument("--train-data", default=None, help="training set for --lambda-list retraining")
    _add_map_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="write input/heatmap/box composites")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--indices", default=None)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--scale", type=int, default=4)
    _add_map_flags(p)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        log.exception("command failed")
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
