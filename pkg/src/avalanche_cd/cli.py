"""Command-line entry point: synth, stats, extract, train, infer, tune, eval, bench."""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .raster import RasterFormatError, atomic_write_json, read_raster, write_raster

log = logging.getLogger("avalanche_cd")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_RUNTIME = 4

DEFAULT_PIXEL_AREA_M2 = 100.0     # 10 m x 10 m ground sampling
REFERENCE_NOTE = ("reference only: ~87 km^2/s was reported for 128 px tiles, stride 64, "
                  "on an NVIDIA A100; throughput here is hardware-specific")


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _plain(obj):
    return json.loads(json.dumps(obj, default=_json_default))


def write_run_manifest(path: Path, command: str, args: argparse.Namespace, *, inputs=(), outputs=(),
                       seed=None, wall_seconds: float, pixels: int = 0,
                       pixel_area_m2: float | None = None, extra: dict | None = None) -> dict:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config_file")}
    pps = pixels / wall_seconds if wall_seconds > 0 else 0.0
    area = pixel_area_m2 if pixel_area_m2 is not None else DEFAULT_PIXEL_AREA_M2
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "timing": {"wall_seconds": wall_seconds},
        "pixels": int(pixels),
        "pixel_area_m2": area,
        "throughput": {"pixels_per_second": pps, "km2_per_second": pps * area / 1e6},
    }
    if extra:
        manifest.update(extra)
    atomic_write_json(path, _plain(manifest))
    return manifest


def _manifest_path(out: Path) -> Path:
    out = Path(out)
    if out.suffix:
        return out.with_name(out.stem + ".run.json")
    return out / "run_manifest.json"


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None


def _parse_widths(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from None


def _on_off(text: str) -> bool:
    if text.lower() in ("on", "true", "1", "yes"):
        return True
    if text.lower() in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _scene_dirs(root, splits=None):
    from .scene import find_scenes

    dirs = find_scenes(root, splits)
    if not dirs:
        raise FileNotFoundError(f"no scenes under {root}" + (f" for splits {splits}" if splits else ""))
    return dirs


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    from .evalx import write_inventory
    from .scene import save_scene
    from .synthgen import SynthConfig, generate_dataset, load_config

    t0 = time.perf_counter()
    cfg = load_config(args.config) if args.config else SynthConfig()
    if args.seed is not None:
        cfg = SynthConfig(**{**cfg.__dict__, "seed": args.seed})
    out = Path(args.out)
    pixels = 0
    written = []
    for item in generate_dataset(cfg, args.n_train, args.n_val, args.n_test):
        d = save_scene(item.scene, out / item.scene.event_id)
        write_inventory(item.inventory, d / "inventory.jsonl")
        pixels += item.scene.height * item.scene.width
        written.append(d)
    atomic_write_json(out / "synth_config.json", _plain(cfg.__dict__))
    write_run_manifest(out / "run_manifest.json", "synth", args, outputs=written, seed=cfg.seed,
                       wall_seconds=time.perf_counter() - t0, pixels=pixels)
    print(f"wrote {len(written)} scenes to {out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    from .normalize import compute_dataset_stats
    from .scene import load_scene

    t0 = time.perf_counter()
    splits = None if args.all_splits else ("train",)
    scenes = [load_scene(d) for d in _scene_dirs(args.input, splits)]
    grids = [g for s in scenes for g in (s.pre, s.post, s.aux) if g is not None]
    stats = compute_dataset_stats(grids, source="all" if args.all_splits else "train")
    stats.save(args.out)
    write_run_manifest(_manifest_path(Path(args.out)), "stats", args, inputs=[args.input],
                       outputs=[args.out], wall_seconds=time.perf_counter() - t0,
                       pixels=sum(s.height * s.width for s in scenes))
    print(json.dumps(stats.to_json()["channels"], indent=2))
    return EXIT_OK


def cmd_extract(args) -> int:
    from .normalize import NormalizationStats
    from .patches import PatchSpec, extract_patches, subsample_balanced, write_patch_set
    from .scene import load_scene

    t0 = time.perf_counter()
    stats = NormalizationStats.load(args.stats)
    spec = PatchSpec(args.size, args.stride)
    by_split: dict = {}
    pixels = 0
    for d in _scene_dirs(args.input):
        scene = load_scene(d)
        if scene.mask is None:
            raise ValueError(f"{d}: training scenes need a mask raster")
        if not args.with_aux:
            scene = type(scene)(scene.event_id, scene.pre, scene.post, None, scene.mask, scene.split)
        samples = extract_patches(scene.normalized(stats), spec)
        by_split.setdefault(scene.split, []).extend(samples)
        pixels += scene.height * scene.width
    if "test" in by_split and not args.keep_all_test:
        by_split["test"] = subsample_balanced(by_split["test"], args.seed)
    manifest = write_patch_set(by_split, args.out)
    counts = {k: {"pos": sum(s.positive for s in v), "neg": sum(not s.positive for s in v)}
              for k, v in by_split.items()}
    write_run_manifest(Path(args.out) / "run_manifest.json", "extract", args, inputs=[args.input],
                       outputs=[manifest], seed=args.seed, wall_seconds=time.perf_counter() - t0,
                       pixels=pixels, extra={"patch_counts": counts})
    print(json.dumps(counts))
    return EXIT_OK


def cmd_train(args) -> int:
    from .normalize import NormalizationStats
    from .patches import AugmentConfig, load_split
    from .scorer import LossConfig, ScorerConfig, TrainSchedule, save_checkpoint, train

    t0 = time.perf_counter()
    stats = NormalizationStats.load(args.stats)
    train_s = load_split(args.manifest, "train")
    val_s = load_split(args.manifest, "val")
    if args.epochs > 0 and (not train_s or not val_s):
        raise ValueError(f"{args.manifest}: train and val splits must both be non-empty")
    config = ScorerConfig(widths=args.widths, use_aux=args.use_aux)
    schedule = TrainSchedule(epochs=args.epochs, warmup=args.warmup, lr=args.lr,
                             batch_size=args.batch_size, seed=args.seed,
                             weight_decay=args.weight_decay,
                             augment=None if args.no_augment else AugmentConfig())
    sar_fill = [stats[n].sentinel for n in ("VV", "VH")]
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    result = train(train_s, val_s, config, LossConfig(args.wpos), schedule, sar_fill, log_path)
    size = train_s[0].size if train_s else args.patch_size
    save_checkpoint(result.model, out, {
        "stats": stats.to_json(),
        "patch_size": size,
        "loss": {"w_p": args.wpos},
        "schedule": {"epochs": args.epochs, "warmup": args.warmup, "lr": args.lr,
                     "batch_size": args.batch_size, "betas": list(schedule.betas),
                     "weight_decay": schedule.weight_decay, "seed": args.seed},
        "best_epoch": result.best_epoch,
        "thresholds": result.thresholds,
        "val_metrics": result.val_metrics,
    })
    write_run_manifest(_manifest_path(out.with_suffix(".ckpt")), "train", args,
                       inputs=[args.manifest, args.stats], outputs=[out, log_path], seed=args.seed,
                       wall_seconds=time.perf_counter() - t0,
                       pixels=len(train_s) * size * size * max(args.epochs, 0))
    print(json.dumps({"best_epoch": result.best_epoch, **result.val_metrics}))
    return EXIT_OK


def _blend_mode(args):
    from .blend import BlendMode

    return BlendMode(args.blend, args.sigma, args.crop_border)


def infer_scene(model, header, scene, args):
    from .blend import run_scene
    from .normalize import NormalizationStats
    from .patches import PatchSpec

    stats = NormalizationStats.from_json(header["stats"])
    size = int(header["patch_size"])
    spec = PatchSpec(size, args.stride)
    if not model.config.use_aux:
        scene = type(scene)(scene.event_id, scene.pre, scene.post, None, scene.mask, scene.split)
    return run_scene(model, scene.normalized(stats), spec, _blend_mode(args), threads=args.threads,
                     batch_size=args.batch_size)


def cmd_infer(args) -> int:
    from .scene import load_scene
    from .scorer import load_checkpoint

    t0 = time.perf_counter()
    model, header = load_checkpoint(args.model)
    splits = tuple(args.split) if args.split else None
    out = Path(args.out)
    written, pixels = [], 0
    for d in _scene_dirs(args.input, splits):
        scene = load_scene(d)
        prob = infer_scene(model, header, scene, args)
        write_raster(prob, out / scene.event_id)
        written.append(out / f"{scene.event_id}.json")
        pixels += scene.height * scene.width
    write_run_manifest(out / "run_manifest.json", "infer", args, inputs=[args.model, args.input],
                       outputs=written, wall_seconds=time.perf_counter() - t0, pixels=pixels,
                       pixel_area_m2=args.pixel_area)
    print(f"wrote {len(written)} probability maps to {out}")
    return EXIT_OK


def _prob_truth_pairs(prob_dir, scene_root, splits):
    from .scene import load_scene

    pairs = []
    for d in _scene_dirs(scene_root, splits):
        scene = load_scene(d)
        prob_path = Path(prob_dir) / f"{scene.event_id}.json"
        if not prob_path.exists():
            continue
        pairs.append((scene, read_raster(prob_path), d))
    if not pairs:
        raise FileNotFoundError(f"no probability maps in {prob_dir} match scenes under {scene_root}")
    return pairs


def cmd_tune(args) -> int:
    from .decide import sweep_thresholds
    from .scorer import update_checkpoint_header

    t0 = time.perf_counter()
    splits = tuple(args.split) if args.split else None
    pairs = _prob_truth_pairs(args.probs, args.scenes, splits)
    scores = np.concatenate([p.data[0].ravel() for _, p, _ in pairs])
    labels = np.concatenate([s.mask_array().ravel() for s, _, _ in pairs])
    result = sweep_thresholds(scores, labels, args.beta, None if args.exact else args.cap)
    key = f"f{args.beta:g}"
    payload = {**result.to_json(), "blend": args.blend_label, "source": str(args.probs)}
    outputs = []
    if args.model:
        update_checkpoint_header(args.model, thresholds={key: payload})
        outputs.append(args.model)
    if args.out:
        atomic_write_json(Path(args.out), payload)
        outputs.append(args.out)
    mpath = _manifest_path(Path(args.out)) if args.out else Path(args.probs) / f"tune_{key}.run.json"
    write_run_manifest(mpath, "tune", args, inputs=[args.probs, args.scenes], outputs=outputs,
                       wall_seconds=time.perf_counter() - t0, pixels=int(scores.size))
    print(json.dumps(payload))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .decide import binarize, morph_close
    from .evalx import (ConfusionCounts, HitReport, confusion_counts, confusion_map,
                        polygon_hit_rate, read_inventory, save_confusion_png)
    from .scorer import read_checkpoint_header

    t0 = time.perf_counter()
    if args.threshold is not None:
        threshold = args.threshold
    elif args.model:
        key = f"f{args.beta:g}"
        thresholds = read_checkpoint_header(args.model).get("thresholds", {})
        if key not in thresholds:
            raise ValueError(f"checkpoint {args.model} has no {key} threshold; run `tune --beta {args.beta:g}`")
        threshold = float(thresholds[key]["threshold"])
    else:
        raise UsageError("eval needs --threshold or --model (to read a tuned threshold)")

    splits = tuple(args.split) if args.split else None
    pairs = _prob_truth_pairs(args.probs, args.scenes, splits)
    total = ConfusionCounts()
    hits = HitReport({}, args.min_size_class)
    per_scene = {}
    for scene, prob, d in pairs:
        pred = binarize(prob, threshold)
        if not args.no_morph:
            pred = morph_close(pred)
        counts = confusion_counts(pred, scene.mask)
        total = total + counts
        entry = {"pixels": counts.summary()}
        inv_path = Path(args.inventory) if args.inventory else d / "inventory.jsonl"
        if inv_path.exists():
            inventory = read_inventory(inv_path)
            if inventory:
                rep = polygon_hit_rate(pred, inventory, args.min_size_class)
                hits = hits + rep
                entry["polygons"] = rep.to_json()
        per_scene[scene.event_id] = entry
        if args.confusion_dir:
            codes = confusion_map(pred, scene.mask)
            write_raster(codes, Path(args.confusion_dir) / f"{scene.event_id}_confusion")
            save_confusion_png(codes, Path(args.confusion_dir) / f"{scene.event_id}_confusion.png")

    report = {
        "threshold": threshold,
        "morphology": not args.no_morph,
        "pixels": total.summary(),
        "polygons": hits.to_json(),
        "scenes": per_scene,
    }
    atomic_write_json(Path(args.out), _plain(report))
    write_run_manifest(_manifest_path(Path(args.out)), "eval", args, inputs=[args.probs, args.scenes],
                       outputs=[args.out], wall_seconds=time.perf_counter() - t0,
                       pixels=total.total)
    print(json.dumps({"threshold": threshold, **{k: report["pixels"][k] for k in
                      ("precision", "recall", "f1", "f2", "iou")},
                      "hit_rate": hits.hit_rate, "hits": hits.hits, "attempted": hits.attempted}))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .scorer import ScorerConfig, build_model, load_checkpoint
    from .synthgen import SynthConfig, generate

    width, height = args.size
    if args.model:
        model, header = load_checkpoint(args.model)
    else:
        from .normalize import compute_dataset_stats

        model = build_model(ScorerConfig(widths=args.widths), args.seed)
        header = None
    cfg = SynthConfig(width=width, height=height, seed=args.seed,
                      deposit_count=(0, 0) if min(width, height) < 32 else (3, 6))
    scene = generate(cfg, event_id="bench").scene
    if header is None:
        stats = compute_dataset_stats([scene.pre, scene.post, scene.aux])
        header = {"stats": stats.to_json(), "patch_size": args.patch_size}
    timings = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        infer_scene(model, header, scene, args)
        timings.append(time.perf_counter() - t0)
    med = statistics.median(timings)
    pixels = width * height
    area = args.pixel_area
    out = Path(args.out)
    manifest = write_run_manifest(
        out, "bench", args, seed=args.seed, wall_seconds=med, pixels=pixels, pixel_area_m2=area,
        extra={"timings": timings, "median_seconds": med, "repeat": args.repeat,
               "note": REFERENCE_NOTE},
    )
    print(f"# {REFERENCE_NOTE}")
    print(json.dumps({"median_seconds": med, **manifest["throughput"]}))
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _add_infer_flags(p):
    p.add_argument("--blend", default="gaussian",
                   choices=["none", "min", "max", "mean", "gaussian", "crop", "center_crop"])
    p.add_argument("--sigma", type=float, default=None, help="gaussian window sigma (px)")
    p.add_argument("--crop-border", type=int, default=None, help="center-crop border (px)")
    p.add_argument("--stride", type=int, default=None, help="tile stride (default: size/2)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--pixel-area", type=float, default=DEFAULT_PIXEL_AREA_M2,
                   help="ground area of one pixel in m^2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avalanche-cd", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config-file", default=None,
                       help="JSON file of flag defaults (command-line flags take precedence)")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate synthetic scenes with masks and inventories")
    p.add_argument("--config", default=None, help="synthetic scene config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-val", type=int, default=2)
    p.add_argument("--n-test", type=int, default=2)

    p = add("stats", cmd_stats, "channel statistics over valid observations")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--all-splits", action="store_true", help="include val/test scenes")

    p = add("extract", cmd_extract, "cut normalized patches and write a manifest")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--size", type=int, default=32, choices=[32, 64, 128])
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-aux", type=_on_off, default=True)
    p.add_argument("--keep-all-test", action="store_true",
                   help="skip balancing the test split")

    p = add("train", cmd_train, "train the Siamese scorer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True, help="checkpoint stem")
    p.add_argument("--log", default=None)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--wpos", type=float, default=3.0)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--use-aux", type=_on_off, default=False)
    p.add_argument("--widths", type=_parse_widths, default=(16, 32, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--patch-size", type=int, default=32, help=argparse.SUPPRESS)

    p = add("infer", cmd_infer, "tiled full-scene inference with blending")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True, help="scene directory or root")
    p.add_argument("--split", action="append", default=None)
    p.add_argument("--out", required=True)
    _add_infer_flags(p)

    p = add("tune", cmd_tune, "F-beta threshold sweep over probability maps")
    p.add_argument("--probs", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--split", action="append", default=None)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--model", default=None, help="checkpoint to record the threshold in")
    p.add_argument("--out", default=None)
    p.add_argument("--cap", type=int, default=4096)
    p.add_argument("--exact", action="store_true", help="sweep every unique score")
    p.add_argument("--blend-label", default=None)

    p = add("eval", cmd_eval, "pixel and polygon evaluation")
    p.add_argument("--probs", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--split", action="append", default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--inventory", default=None)
    p.add_argument("--min-size-class", type=int, default=2)
    p.add_argument("--no-morph", action="store_true")
    p.add_argument("--confusion-dir", default=None)
    p.add_argument("--out", required=True)

    p = add("bench", cmd_bench, "inference throughput on a generated scene")
    p.add_argument("--size", type=_parse_size, default=(512, 512))
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--model", default=None)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--widths", type=_parse_widths, default=(16, 32, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench_manifest.json")
    _add_infer_flags(p)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config_file:
        defaults = json.loads(Path(args.config_file).read_text())
        sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        known = {a.dest for a in sub._actions}  # noqa: SLF001
        unknown = set(defaults) - known
        if unknown:
            parser.error(f"unknown keys in {args.config_file}: {sorted(unknown)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError, RasterFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        log.debug("pipeline failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
