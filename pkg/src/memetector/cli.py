"""Command-line entry point: ``memetector <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import composition as comp
from . import vpu
from .checkpoint import PreprocessStats, load_checkpoint, save_checkpoint
from .evaluation import (aggregate, attention_map, crossed_grid, evaluate,
                         heatmap_base, read_grid_csv, render_heatmap, write_grid_csv)
from .training import (ManifestDataset, compute_channel_stats, format_config,
                       load_rgb, parse_config_text, train)

log = logging.getLogger("memetector")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def _find_image(directory: Path, image_id: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        candidate = directory / f"{image_id}{suffix}"
        if candidate.exists():
            return candidate
    return None


def cmd_extract(args) -> int:
    images, boxes_dir, out = Path(args.images), Path(args.boxes), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, results = [], []
    for box_file in sorted(boxes_dir.glob("*.json")):
        image_id, dims, boxes = vpu.parse_box_document(json.loads(box_file.read_text()))
        path = _find_image(images, image_id)
        if path is None:
            rows.append([image_id, "", "", "missing_image"])
            continue
        pixels = np.asarray(Image.open(path).convert("RGB"))
        if (pixels.shape[1], pixels.shape[0]) != (dims.width, dims.height):
            rows.append([image_id, "", "", "size_mismatch"])
            continue
        try:
            res = vpu.extract_visual_part(pixels, vpu.filter_word_boxes(boxes), args.seed, image_id)
        except vpu.NoValidRectangle:
            rows.append([image_id, "", "", "no_valid_rectangle"])
            results.append(None)
            continue
        Image.fromarray(res.crop_pixels).save(out / f"{image_id}.png")
        rows.append([image_id, f"{res.achieved_p:.2f}", res.tie_count, "ok"])
        results.append(res)
    if args.report:
        with open(args.report, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "achieved_p", "tie_count", "status"])
            writer.writerows(rows)
    s = vpu.area_fraction_report(results)
    mean = "n/a" if s.mean_p is None else f"{100 * s.mean_p:.1f}%"
    print(f"processed {s.count} images, {s.failures} without a text-free rectangle, mean area fraction {mean}")
    return 0


def cmd_scenarios(args) -> int:
    print("S\tP_W\tP_T")
    for i, s in enumerate(comp.scenario_table(), 1):
        print(f"S{i}\t{comp.percent(s.pw)}\t{comp.percent(s.pt)}")
    return 0


def cmd_compose(args) -> int:
    scenario = comp.Scenario(comp.parse_fraction(args.pw), comp.parse_fraction(args.pt))
    manifest = comp.build_manifest(
        comp.read_pool(args.memes, "M"),
        comp.read_pool(args.vparts, "V"),
        comp.read_pool(args.web_text, "Rp") if args.web_text else [],
        comp.read_pool(args.web_notext, "Ra") if args.web_notext else [],
        scenario, args.seed, args.k,
    )
    manifest.save(args.out)
    counts = {s: len(manifest.split(s)) for s in comp.SPLITS}
    print(f"wrote {len(manifest.records)} records ({counts}) for scenario {scenario.label} to {args.out}")
    return 0


def cmd_train(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    config, model = parse_config_text(text)
    flags = {"epochs": args.epochs, "batch_size": args.batch, "seed": args.seed,
             "variant": args.variant, "max_iters": args.max_iters}
    config = replace(config, **{k: v for k, v in flags.items() if v is not None})
    model = model.replace(variant=config.variant)
    manifest = comp.DatasetManifest.load(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(config, model))
    (out / "scenario.json").write_text(json.dumps(manifest.scenario.as_dict()))

    train_records = manifest.split("train")
    stats = compute_channel_stats(lambda i: load_rgb(train_records[i].path), model.height, model.width,
                                  count=len(train_records))
    kw = dict(stats=stats, config=model, skip_unreadable=config.skip_unreadable)
    train_set = ManifestDataset(train_records, **kw)
    val_set = ManifestDataset(manifest.split("val"), **kw)
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()
    result = train(config, model, train_set, val_set, stats, metrics_path,
                   on_epoch=lambda row, best: save_checkpoint(best, out / "best.vita"))
    save_checkpoint(result.best, out / "best.vita")
    print(f"best epoch {result.best.epoch} val accuracy {result.best.val_accuracy:.4f}; saved {out / 'best.vita'}")
    return 0


def _manifest_dataset(ckpt, manifest: comp.DatasetManifest, split: str):
    stats = ckpt.stats or PreprocessStats(np.zeros(ckpt.config.channels), np.ones(ckpt.config.channels))
    return ManifestDataset(manifest.split(split), stats, ckpt.config)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    manifest = comp.DatasetManifest.load(args.manifest)
    res = evaluate(ckpt, _manifest_dataset(ckpt, manifest, args.split))
    line = f"accuracy={res.accuracy:.4f} TP={res.tp} FP={res.fp} TN={res.tn} FN={res.fn}"
    print(line)
    if args.report:
        with open(args.report, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["accuracy", "tp", "fp", "tn", "fn"])
            writer.writerow([f"{res.accuracy:.6f}", res.tp, res.fp, res.tn, res.fn])
    return 0


def _scenario_of_checkpoint(path: Path) -> comp.Scenario | None:
    sidecar = path.parent / "scenario.json"
    if sidecar.exists():
        return comp.Scenario.from_dict(json.loads(sidecar.read_text()))
    table = comp.scenario_table()
    stem = path.stem.upper()
    if stem.startswith("S") and stem[1:].isdigit() and 1 <= int(stem[1:]) <= len(table):
        return table[int(stem[1:]) - 1]
    return None


def cmd_eval_grid(args) -> int:
    order = comp.scenario_table()
    checkpoints = {}
    for path in sorted(Path(args.ckpt_dir).rglob("*.vita")):
        scenario = _scenario_of_checkpoint(path)
        if scenario is None:
            log.warning("cannot tell the training scenario of %s; skipped", path)
            continue
        checkpoints[scenario] = load_checkpoint(path)
    manifests = {}
    for path in sorted(Path(args.manifest_dir).glob("*.jsonl")):
        m = comp.DatasetManifest.load(path)
        manifests[m.scenario] = m
    rows = [s for s in order if s in checkpoints] if args.present_only else order
    cols = [s for s in order if s in manifests] if args.present_only else order
    grid = crossed_grid(checkpoints, manifests, rows, cols,
                        dataset_factory=lambda ckpt, m: _manifest_dataset(ckpt, m, args.split))
    write_grid_csv(grid, args.out)
    if grid.complete():
        print(f"mean accuracy {100 * aggregate(grid).mean_accuracy:.2f}% over {grid.values.size} cells")
    else:
        print(f"{int(np.isnan(grid.values).sum())} of {grid.values.size} cells absent")
    return 0


def cmd_aggregate(args) -> int:
    grid = read_grid_csv(args.grid)
    other = read_grid_csv(args.against) if args.against else None
    summary = aggregate(grid, other)
    print(f"mean accuracy {100 * summary.mean_accuracy:.2f}%")
    if summary.surpass is not None:
        print(f"surpasses in {summary.surpass}")
    return 0


def cmd_attend(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    image = load_rgb(args.image)
    amap = attention_map(ckpt, image)
    out = render_heatmap(amap, heatmap_base(ckpt, image), args.out)
    print(f"wrote {out} and {out.with_suffix('.json')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memetector", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="crop the largest text-free rectangle of each image")
    p.add_argument("--images", required=True)
    p.add_argument("--boxes", required=True, help="directory of per-image box JSON files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="CSV with image_id, achieved_p, tie_count, status")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("scenarios", help="print the 13 composition scenarios")
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("compose", help="build a split manifest for one scenario")
    p.add_argument("--memes", required=True)
    p.add_argument("--vparts", required=True)
    p.add_argument("--web-text")
    p.add_argument("--web-notext")
    p.add_argument("--pw", required=True, help="0, 1/3, 2/3 or 1")
    p.add_argument("--pt", required=True, help="0, 1/3, 2/3 or 1")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("train", help="train ViT / ViTa on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", choices=("vit", "vita"), help="default vita")
    p.add_argument("--epochs", type=int, help="default 20")
    p.add_argument("--batch", type=int, help="default 64")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--config", help="key = value file with training/model settings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="binary accuracy of a checkpoint on a manifest split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-grid", help="crossed-scenario accuracy table")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--manifest-dir", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--present-only", action="store_true",
                   help="only rows/columns with inputs instead of all 13 scenarios")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_grid)

    p = sub.add_parser("aggregate", help="mean accuracy of a grid, optionally vs. another")
    p.add_argument("--grid", required=True)
    p.add_argument("--against")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("attend", help="render an attention heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attend)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
