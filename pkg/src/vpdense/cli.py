"""Command-line entry point.

    vpdense [--config FILE] [--set section.key=value ...] [--threads N] [--seed N] COMMAND ...

Exit status is 0 on success, 1 on a data error and 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, PipelineConfig
from .kitti_io import DataError, list_frames, load_frame, read_depth, read_mask_records, write_depth
from .metrics import MetricReport, vp_point_ratio, write_reports

log = logging.getLogger("vpdense")

EXIT_OK, EXIT_DATA, EXIT_CONFIG = 0, 1, 2


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = yaml.safe_load(value)
    return out


def load_config(args) -> PipelineConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        data = PipelineConfig.load(path).to_dict()
    for section, values in _parse_set(args.set).items():
        data.setdefault(section, {}).update(values)
    return PipelineConfig.from_dict(data)


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _write_manifest(out_dir: Path, rows) -> None:
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _frame_ids(root, frames):
    ids = list_frames(root)
    if frames:
        missing = sorted(set(frames) - set(ids))
        if missing:
            raise DataError(f"frames not in split: {', '.join(missing)}")
        ids = [f for f in ids if f in set(frames)]
    if not ids:
        raise DataError(f"{root}: no frames")
    return ids


def _write_results(out: Path, results) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in results:
        if r.gt is not None:
            write_depth(out / f"{r.frame}_{r.instance}.png", r.gt)
        rows.append(r.manifest_row())
    _write_manifest(out, rows)


# ---------------------------------------------------------------------------
# commands

def cmd_make_synthetic(args, cfg):
    from .synthetic import write_synthetic_split

    ids = write_synthetic_split(args.root, args.frames, args.seed)
    print(json.dumps({"root": str(args.root), "frames": ids}))
    return EXIT_OK


def cmd_gen_gt(args, cfg):
    from .pipeline import build_pool, gen_gt_frame

    frames = [load_frame(args.split, f) for f in _frame_ids(args.split, args.frames)]
    pool = build_pool(frames, cfg)
    results = [r for rs in _map(lambda f: gen_gt_frame(f, pool, cfg), frames, args.threads) for r in rs]
    _write_results(Path(args.out), results)
    ok = sum(r.status == "ok" for r in results)
    print(json.dumps({"objects": len(results), "written": ok, "pool": len(pool)}))
    return EXIT_OK


def cmd_segment(args, cfg):
    from .pipeline import segment_frame

    rows = segment_frame(load_frame(args.split, args.frame), cfg)
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_densify(args, cfg):
    from .pipeline import densify_frame

    ids = _frame_ids(args.split, None if args.frame == "all" else [args.frame])
    results = [r for rs in _map(lambda f: densify_frame(load_frame(args.split, f), cfg), ids, args.threads)
               for r in rs]
    _write_results(Path(args.out), results)
    print(json.dumps({"objects": len(results), "written": sum(r.status == "ok" for r in results)}))
    return EXIT_OK


def _eval_mask(split, name, shape):
    """Instance pixels for ``<frame>_<instance>`` (or every instance of ``<frame>``)."""
    frame, _, inst = name.partition("_")
    recs = read_mask_records(Path(split) / "instance_masks" / f"{frame}.png")
    sel = np.zeros(shape, dtype=bool)
    for r in recs:
        if not inst or str(r.id) == inst:
            sel[r.mask.pixels[:, 1], r.mask.pixels[:, 0]] = True
    return sel


def cmd_eval(args, cfg):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise DataError(f"not a directory: {d}")
    if args.foreground and not args.split:
        raise ConfigError("--foreground needs --split for the instance masks")
    names = sorted(p.name for p in gt_dir.glob("*.png") if (pred_dir / p.name).is_file())
    if not names:
        raise DataError("no depth maps common to both directories")
    sse, n, per_object = 0.0, 0, []
    for name in names:
        pred, gt = read_depth(pred_dir / name), read_depth(gt_dir / name)
        if pred.shape != gt.shape:
            raise DataError(f"{name}: shape mismatch {pred.shape} vs {gt.shape}")
        ok = (pred > 0) & (gt > 0)
        if args.foreground:
            ok &= _eval_mask(args.split, Path(name).stem, gt.shape)
        k = int(ok.sum())
        if k == 0:
            continue
        diff = pred[ok] - gt[ok]
        sse += float(diff @ diff)
        n += k
        per_object.append(float(np.sqrt(np.mean(diff * diff))))
    if n == 0:
        raise DataError("no overlapping valid pixels")
    name = "rmse_fg" if args.foreground else "rmse"
    reports = [MetricReport(name, float(np.sqrt(sse / n)), n),
               MetricReport(name + "_object", float(np.mean(per_object)), len(per_object))]
    write_reports(reports, sys.stdout)
    if args.out:
        with open(args.out, "w") as fh:
            write_reports(reports, fh)
    return EXIT_OK


def cmd_stats(args, cfg):
    from .pipeline import build_pool, frame_samples

    frames = [load_frame(args.split, f) for f in _frame_ids(args.split, None)]
    samples = [s for f in frames for s in frame_samples(f)]
    pool = build_pool(frames, cfg)
    reports = []
    for cls in ("car", "pedestrian"):
        total = sum(s.cls == cls for s in samples)
        reports.append(MetricReport(f"objects_{cls}", float(total), max(total, 1)))
        reports.append(MetricReport(f"pool_{cls}", float(len(pool.of_class(cls))), max(total, 1)))
    if args.gt:
        manifest = Path(args.gt) / "manifest.jsonl"
        if not manifest.is_file():
            raise DataError(f"missing {manifest}")
        rows = [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]
        rows = [r for r in rows if r.get("status") == "ok"]
        if rows:
            ratio = vp_point_ratio([r["pixels"] for r in rows], [r["full_shape_points"] for r in rows])
            reports.append(MetricReport("vp_point_ratio", ratio, len(rows)))
    write_reports(reports, sys.stdout)
    return EXIT_OK


def cmd_selftest(args, cfg):
    from .selftest import run_all

    results = run_all(seed=args.seed)
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(p for _, p, _ in results) else EXIT_DATA


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vpdense", description="Visible-part depth ground truth and densification.")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--threads", type=int, default=1, help="frame-level worker threads")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("make-synthetic", help="write a synthetic KITTI-format split")
    s.add_argument("root", type=Path)
    s.add_argument("--frames", type=int, default=3)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("gen-gt", help="visible-part depth ground truth for a split")
    s.add_argument("split")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", nargs="*", help="restrict to these frame ids")
    s.set_defaults(func=cmd_gen_gt)

    s = sub.add_parser("segment", help="foreground filter for one frame")
    s.add_argument("frame")
    s.add_argument("--split", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("densify", help="mesh-deformation depth for one frame (or 'all')")
    s.add_argument("frame")
    s.add_argument("--split", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_densify)

    s = sub.add_parser("eval", help="RMSE between two depth directories")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--foreground", action="store_true", help="only pixels inside instance masks")
    s.add_argument("--split", help="split root (for --foreground)")
    s.add_argument("--out", help="also write the report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="pool statistics and the visible-part point ratio")
    s.add_argument("--split", required=True)
    s.add_argument("--gt", help="gen-gt output directory")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("selftest", help="run the built-in oracle checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
