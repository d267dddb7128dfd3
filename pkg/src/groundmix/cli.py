"""Command line interface.

Exit codes: 0 success, 1 invalid input (arguments, configs, annotations),
2 I/O failure. Diagnostics go to stderr; machine-readable output goes to
files (or stdout where a subcommand says so).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig, augment_sample, parse_config_text
from .dataset import (
    DatasetManifest,
    compute_stats,
    load_manifest,
    record_from_sample,
    render_overlay,
    save_manifest,
    write_image,
    write_stats_csv,
)
from .errors import GroundMixError, PatchRejected
from .evaluation import evaluate, ground_truth_from_manifest, load_detections, write_metrics_csv
from .patchbank import PatchBank
from .plane import fit_plane_to_boxes, bottom_center

log = logging.getLogger("groundmix")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(GroundMixError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def sample_seed(seed: int, image_id: str) -> np.random.SeedSequence:
    """Per-sample seed from the run seed and a stable hash of the image id."""
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    return np.random.SeedSequence([seed, int.from_bytes(digest[:8], "little")])


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def load_config(path, overrides) -> AugmentConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    try:
        return AugmentConfig.from_mapping(values)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad augment config: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def build_bank(manifest: DatasetManifest, cfg: AugmentConfig, args) -> PatchBank:
    cache = Path(args.patch_cache) if args.patch_cache else None
    if cache is not None and (cache / "index.json").exists():
        bank = PatchBank.load(cache)
        log.info("loaded %d patches from %s", len(bank), cache)
    else:
        bank = PatchBank(intrusion_threshold=cfg.intrusion_threshold)
        for sample in manifest.iter_samples():
            bank.insert_sample(sample)
        log.info("built patch bank with %d patches", len(bank))
        if cache is not None:
            bank.save(cache)
    if args.difficulty:
        with open(args.difficulty) as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    bank.update_difficulty(str(obj["uid"]), float(obj["score"]))
    return bank


def cmd_augment(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = load_config(args.config, args.set)
    out_dir = Path(args.out)
    if not args.dry_run and out_dir.resolve() == manifest.root.resolve():
        raise UsageError("output directory must differ from the input dataset directory")
    bank = build_bank(manifest, cfg, args) if cfg.groundmix else None
    records = manifest.records

    def work(i):
        record = records[i]
        rng = np.random.default_rng(sample_seed(args.seed, record.image_id))
        partner = None
        if len(records) > 1:
            j = int(rng.integers(len(records) - 1))
            partner = manifest.load_sample(records[j + (j >= i)])
        sample = manifest.load_sample(record)
        return augment_sample(sample, cfg, rng, bank, partner)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(work, range(len(records))))

    if args.dry_run:
        for r in results:
            gm = r.meta.get("groundmix", {})
            plan = {
                "image_id": r.image_id,
                "ops": [list(op) for op in r.meta.get("ops", [])],
                "pasted": gm.get("pasted", 0),
                "skipped": dict(gm.get("skipped", {})),
                "boxes": len(r.boxes),
                "size": [r.width, r.height],
            }
            sys.stdout.write(json.dumps(plan) + "\n")
        return EXIT_OK

    new_records = []
    for r in results:
        rel = f"images/{r.image_id}.png"
        write_image(out_dir / rel, r.image)
        new_records.append(record_from_sample(r, rel))
    out = DatasetManifest(manifest.split, new_records, dict(manifest.categories), root=out_dir)
    save_manifest(out, out_dir / "manifest.json")
    log.info("wrote %d augmented images to %s", len(new_records), out_dir)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.gt)
    dets = load_detections(args.detections, manifest)
    gts = ground_truth_from_manifest(manifest)
    rows = evaluate(dets, gts, manifest.categories, args.threshold)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(rows, out, args.threshold)
        if not args.no_plots:
            from .plotting import plot_pr_curves

            plot_pr_curves(rows, out.with_name(out.stem + "_pr.png"), args.threshold)
    width = max([len(r.name) for r in rows] + [8])
    print(f"{'class':<{width}}  {'n_gt':>5} {'n_det':>5}  AP3D@{args.threshold:g}  AP2D    AP_Depth AP_3DP")
    for r in rows:
        print(f"{r.name:<{width}}  {r.n_gt:>5} {r.n_det:>5}  {r.ap3d:7.4f}  {r.ap2d:6.4f}  "
              f"{r.ap_depth:6.4f}   {r.ap_3dp:6.4f}")
    return EXIT_OK


def cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest)
    source = None if args.plane_source == "none" else args.plane_source
    stats = compute_stats(manifest, source)
    written = write_stats_csv(stats, args.out)
    if not args.no_plots:
        from .plotting import plot_stats

        written.append(plot_stats(stats, Path(args.out) / "stats.png"))
    for p in written:
        log.info("wrote %s", p)
    return EXIT_OK


def cmd_plane_fit(args) -> int:
    manifest = load_manifest(args.manifest)
    lines = ["image_id,nx,ny,nz,d,n_points,rms_residual,status"]
    for r in manifest.records:
        pts = [bottom_center(b) for b in r.boxes]
        try:
            plane = fit_plane_to_boxes(r.boxes)
        except GroundMixError as exc:
            status = type(exc).__name__
            lines.append(f"{r.image_id},,,,,{len(pts)},,{status}")
            continue
        res = np.asarray(pts) @ plane.n - plane.offset
        rms = float(np.sqrt(np.mean(res**2)))
        nx, ny, nz = plane.normal
        lines.append(f"{r.image_id},{nx:.12g},{ny:.12g},{nz:.12g},{plane.offset:.12g},{len(pts)},{rms:.3g},ok")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_render(args) -> int:
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    if out_dir.resolve() == manifest.root.resolve():
        raise UsageError("output directory must differ from the input dataset directory")
    for sample in manifest.iter_samples():
        render_overlay(sample, out_dir / f"{sample.image_id}.png")
    log.info("rendered %d overlays into %s", len(manifest), out_dir)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import write_dataset

    path = write_dataset(args.out, args.images, args.seed, width=args.width, height=args.height)
    log.info("wrote %s", path)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="groundmix", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("augment", help="run the augmentation pipeline over a dataset")
    a.add_argument("--manifest", required=True, help="input annotation JSON")
    a.add_argument("--out", required=True, help="output directory (manifest.json + images/)")
    a.add_argument("--seed", required=True, type=_seed, help="unsigned 64-bit seed")
    a.add_argument("--config", help="key = value config file (AugmentConfig fields)")
    a.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    a.add_argument("--workers", type=int, default=1, help="parallel worker threads")
    a.add_argument("--patch-cache", help="directory to load/save the patch bank")
    a.add_argument("--difficulty", help="JSON lines of {uid, score} difficulty updates")
    a.add_argument("--dry-run", action="store_true", help="print planned operations as JSON lines")
    a.set_defaults(func=cmd_augment)

    e = sub.add_parser("evaluate", help="AP3D/AP2D/AP_Depth/AP_3DP per class")
    e.add_argument("--gt", required=True, help="ground-truth annotation JSON")
    e.add_argument("--detections", required=True, help="detections as JSON lines")
    e.add_argument("--out", help="metrics CSV path (a PR-curve PNG is written beside it)")
    e.add_argument("--threshold", type=float, default=0.5, help="3D IoU threshold")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("stats", help="dataset histograms as CSV (+ figure)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--plane-source", choices=["auto", "stored", "fit", "none"], default="auto")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_stats)

    f = sub.add_parser("plane-fit", help="per-image ground plane as CSV")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", help="write CSV here instead of stdout")
    f.set_defaults(func=cmd_plane_fit)

    r = sub.add_parser("render", help="draw 3D wireframes and 2D boxes over the images")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    y = sub.add_parser("synth", help="write a synthetic ground-plane dataset")
    y.add_argument("--out", required=True)
    y.add_argument("--images", type=int, default=10)
    y.add_argument("--seed", type=_seed, default=0)
    y.add_argument("--width", type=int, default=320)
    y.add_argument("--height", type=int, default=240)
    y.set_defaults(func=cmd_synth)
    return p


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"groundmix: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (GroundMixError, PatchRejected, ValueError, KeyError) as exc:
        print(f"groundmix: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"groundmix: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())
