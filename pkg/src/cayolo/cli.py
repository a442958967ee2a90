"""``cayk`` command line: anchors, model audit, augmentation, evaluation, bench.

Exit codes: 0 success, 1 I/O or config problem, 2 not enough data,
3 one or more input files failed.  Every run writes one JSON run manifest.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from dataclasses import asdict, replace
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import anchor_kmeans as ak
from . import det_eval as de
from . import net_graph as ng
from . import voc_data as vd
from .config import read_config
from .errors import ConfigError, InsufficientDataError, InvariantError

EXIT_OK, EXIT_IO, EXIT_DATA, EXIT_FILES = 0, 1, 2, 3
GPU_NOTE = ("CPU numpy timings; not comparable to GPU frame rates reported for "
            "the original detector.")


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def worker_count() -> int:
    raw = os.environ.get("CAYK_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _emit(args, text):
    if not args.json:
        print(text)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def manifest_path(args) -> Path:
    """Explicit ``--manifest``, else next to the primary output, else the cwd."""
    if args.manifest:
        return Path(args.manifest)
    if args.command == "augment":
        return Path(args.out) / "run_manifest.json"
    if getattr(args, "out", None):
        return Path(args.out + ".manifest.json")
    return Path(f"cayk-{args.command}.manifest.json")


def _load_net_config(args) -> ng.NetConfig:
    values = read_config(args.config) if args.config else {}
    if getattr(args, "mode", None):
        values = {**values, "mode": args.mode}
    return ng.NetConfig.from_mapping(values)


# --- cluster-anchors ----------------------------------------------------------

def cmd_cluster_anchors(args):
    if bool(args.boxes) == bool(args.voc):
        raise CommandError("give exactly one of --boxes or --voc", EXIT_IO)
    if args.boxes:
        try:
            boxes = ak.read_boxes_file(args.boxes)
        except OSError as exc:
            raise CommandError(f"cannot read {args.boxes}: {exc}", EXIT_IO) from None
        source = args.boxes
    else:
        anns, errors = vd.load_voc_dir(args.voc)
        if errors:
            raise CommandError("; ".join(f"{k}: {v}" for k, v in errors.items()), EXIT_FILES)
        boxes = voc_boxes_at_input_size(anns, args.input_size)
        source = args.voc
    anchors, stats = ak.kmeans_anchors(boxes, k=args.k, seed=args.seed,
                                       max_iter=args.max_iter, tol=args.tol)
    out = Path(args.out)
    out.write_text(ak.format_anchors(anchors) + "\n")
    stats_path = Path(str(out) + ".stats.json")
    _write_json(stats_path, {"anchors": anchors.tolist(), "num_boxes": len(boxes),
                             **stats.to_dict()})
    _emit(args, f"anchors: {ak.format_anchors(anchors)}\nmean IoU: {stats.mean_iou:.4f} "
                f"after {stats.iterations} iterations ({stats.stop_reason})")
    return {"inputs": [source], "outputs": [str(out), str(stats_path)],
            "config": {"k": args.k, "max_iter": args.max_iter, "tol": args.tol,
                       "input_size": args.input_size}}


def voc_boxes_at_input_size(anns, input_size: int) -> np.ndarray:
    """Box extents rescaled as if each image were resized to the network input."""
    rows = []
    for _, ann in anns:
        sx, sy = input_size / ann.width, input_size / ann.height
        for o in ann.objects:
            rows.append(((o.xmax - o.xmin + 1) * sx, (o.ymax - o.ymin + 1) * sy))
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


# --- audit ----------------------------------------------------------------------

def _audit_one(cfg):
    model = ng.build_model(cfg, init_weights=False)
    rows = ng.describe(model)
    total, _ = ng.param_count(model)
    return rows, total


def cmd_audit(args):
    cfg = _load_net_config(args)
    rows, total = _audit_one(cfg)
    kinds = ng.count_kinds(rows)
    payload = {"config": cfg.to_mapping(), "total_params": total, "kinds": kinds,
               "layers": [r.to_dict() for r in rows]}
    _emit(args, ng.format_table(rows))
    _emit(args, f"\ntotal parameters: {total:,} ({total / 1e6:.2f}M)")
    if args.diff:
        base_rows, base_total = _audit_one(ng.NetConfig.baseline(
            **{k: getattr(cfg, k) for k in ("input_size", "num_classes", "width_multiplier",
                                            "ca_reduction", "anchors")}))
        diff = layer_diff(base_rows, rows)
        diff["baseline_params"] = base_total
        diff["param_delta"] = total - base_total
        payload["diff"] = diff
        lines = [f"\nvs baseline ({base_total:,} params): {total - base_total:+,}"]
        for r in diff["added"]:
            lines.append(f"  + {r['name']:<28} {r['kind']:<22} {r['params']:>12,}")
        for r in diff["removed"]:
            lines.append(f"  - {r['name']:<28} {r['kind']:<22} {r['params']:>12,}")
        _emit(args, "\n".join(lines))
    if args.out:
        _write_json(args.out, payload)
    return ({"inputs": [args.config] if args.config else [],
             "outputs": [args.out] if args.out else [], "config": cfg.to_mapping(),
             "total_params": total})


def layer_diff(base_rows, rows):
    base = {r.name: r for r in base_rows}
    new = {r.name: r for r in rows}
    added = [r.to_dict() for r in rows if r.name not in base]
    removed = [r.to_dict() for r in base_rows if r.name not in new]
    changed = [{"name": n, "before": base[n].params, "after": new[n].params}
               for n in new if n in base and base[n].params != new[n].params]
    kinds = {}
    for r in added:
        kinds[r["kind"]] = kinds.get(r["kind"], 0) + 1
    return {"added": added, "removed": removed, "changed": changed, "added_kinds": kinds}


# --- augment -----------------------------------------------------------------------

def _augment_file(index, xml_path, ann, spec, out_dir, copies):
    img_path = vd.find_image(xml_path, ann)
    img = vd.load_image(img_path)
    if img.shape[:2] != (ann.height, ann.width):
        raise InvariantError(f"image {img_path.name} is {img.shape[1]}x{img.shape[0]}, "
                                f"annotation says {ann.width}x{ann.height}")
    records = []
    for k in range(copies):
        rng = vd.item_rng(spec.seed, index * copies + k)
        new_img, new_ann, log = vd.augment(img, ann, spec, rng)
        stem = xml_path.stem if copies == 1 else f"{xml_path.stem}_aug{k}"
        if not log:
            out_img = out_dir / (stem + img_path.suffix)
            shutil.copyfile(img_path, out_img)
            if copies == 1:
                shutil.copyfile(xml_path, out_dir / f"{stem}.xml")
            else:
                (out_dir / f"{stem}.xml").write_bytes(vd.serialize_voc_xml(
                    replace(ann, image_path=out_img.name)))
        else:
            out_img = out_dir / f"{stem}.png"
            vd.save_png(out_img, new_img)
            (out_dir / f"{stem}.xml").write_bytes(
                vd.serialize_voc_xml(replace(new_ann, image_path=out_img.name)))
        records.append({"source": xml_path.name, "output": f"{stem}.xml", "image": out_img.name,
                        "ops": log, "objects_in": len(ann.objects),
                        "objects_out": len(new_ann.objects)})
    return records


def cmd_augment(args):
    spec_values = read_config(args.spec) if args.spec else {}
    spec = vd.AugmentSpec.from_mapping({**spec_values, "seed": args.seed})
    src = Path(args.voc)
    if not src.is_dir():
        raise CommandError(f"{src} is not a directory", EXIT_IO)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    anns, errors = vd.load_voc_dir(src)
    results = {}
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        futures = {pool.submit(_augment_file, i, p, a, spec, out_dir, args.copies): p
                   for i, (p, a) in enumerate(anns)}
        for fut, path in futures.items():
            try:
                results[path] = fut.result()
            except Exception as exc:
                errors[str(path)] = f"{type(exc).__name__}: {exc}"
    log_path = out_dir / "augment_log.jsonl"
    with open(log_path, "w") as fh:
        for path in sorted(results):
            for rec in results[path]:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    for path, msg in sorted(errors.items()):
        print(f"error: {path}: {msg}", file=sys.stderr)
    _emit(args, f"augmented {sum(len(v) for v in results.values())} images into {out_dir}"
                + (f"; {len(errors)} file(s) failed" if errors else ""))
    info = {"inputs": [str(src)] + ([args.spec] if args.spec else []),
            "outputs": [str(out_dir)], "config": {**asdict(spec), "copies": args.copies},
            "errors": errors}
    if errors:
        info["exit_code"] = EXIT_FILES
    return info


# --- evaluate --------------------------------------------------------------------------

def load_ground_truth(path, classes):
    path = Path(path)
    if path.is_dir():
        anns, errors = vd.load_voc_dir(path, classes)
        if errors:
            raise CommandError("; ".join(f"{k}: {v}" for k, v in errors.items()), EXIT_FILES)
        gts = {}
        for xml_path, ann in anns:
            by_cls = {}
            for o in ann.objects:
                by_cls.setdefault(classes.index(o.name), []).append(o.xyxy())
            gts[xml_path.stem] = {c: np.array(b) for c, b in by_cls.items()}
        return gts
    records = de.read_detections_jsonl(path, classes, require_score=False)
    return de.group_ground_truth(records)


def cmd_evaluate(args):
    classes = vd.read_class_names(args.classes) if args.classes else list(vd.CLASSES)
    try:
        dets = de.read_detections_jsonl(args.detections, classes)
    except OSError as exc:
        raise CommandError(f"cannot read detections: {exc}", EXIT_IO) from None
    try:
        gts = load_ground_truth(args.gt, classes)
    except OSError as exc:
        raise CommandError(f"cannot read ground truth: {exc}", EXIT_IO) from None
    for d in dets:
        gts.setdefault(d.image_id, {})
    report = de.evaluate(dets, gts, classes, args.iou)
    _emit(args, report.table())
    outputs = []
    if args.out:
        _write_json(args.out, report.to_dict())
        outputs.append(args.out)
    if args.csv:
        de.write_pr_csv(args.csv, report)
        outputs.append(args.csv)
    return ({"inputs": [args.detections, args.gt], "outputs": outputs,
             "config": {"iou": args.iou, "classes": classes},
             "map_percent": de.percent(report.map)})


# --- bench ------------------------------------------------------------------------------

def _time_calls(fn, iters):
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def cmd_bench(args):
    from threadpoolctl import threadpool_limits
    from .coord_attention import ca_forward, init_ca_params

    cfg = _load_net_config(args)
    dtype = np.float32 if args.dtype == "float32" else np.float64
    rng = np.random.default_rng(args.seed)
    if args.op == "ca":
        shape = tuple(int(v) for v in args.shape.split(","))
        params = init_ca_params(shape[1], cfg.ca_reduction, rng, dtype=dtype)
        x = rng.standard_normal(shape).astype(dtype)
        fn = lambda: ca_forward(x, params)  # noqa: E731
        work = {"shape": list(shape), "reduction": cfg.ca_reduction}
    else:
        model = ng.build_model(cfg, seed=args.seed)
        x = rng.uniform(0, 1, (1, 3, cfg.input_size, cfg.input_size))
        fn = lambda: ng.forward(model, x, dtype=dtype)  # noqa: E731
        work = {"macs": ng.mac_count(model), "config": cfg.to_mapping()}
    with threadpool_limits(limits=worker_count()):
        times = _time_calls(fn, args.iters)
    result = {"op": args.op, "iters": args.iters, "dtype": args.dtype,
              "mean_s": float(np.mean(times)), "median_s": float(np.median(times)),
              "ops_per_s": float(1.0 / np.mean(times)), "times_s": times, "note": GPU_NOTE, **work}
    _emit(args, f"{args.op}: mean {result['mean_s'] * 1e3:.2f} ms, median "
                f"{result['median_s'] * 1e3:.2f} ms, {result['ops_per_s']:.2f} ops/s\n{GPU_NOTE}")
    if args.out:
        _write_json(args.out, result)
    return ({"inputs": [args.config] if args.config else [],
             "outputs": [args.out] if args.out else [], "config": cfg.to_mapping(),
             "records": [{"iteration": i, "seconds": t} for i, t in enumerate(times)],
             "result": {k: v for k, v in result.items() if k != "times_s"}})


# --- parser / driver -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cayk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cayk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--json", action="store_true", help="suppress human-readable tables")
        p.add_argument("--manifest", help="run manifest path (default derived from outputs)")

    p = sub.add_parser("cluster-anchors", help="k-means anchors under the 1-IoU distance")
    p.add_argument("--boxes", help="text file with one 'w,h' pair per line")
    p.add_argument("--voc", help="directory of VOC XML annotations")
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--input-size", type=int, default=416,
                   help="rescale VOC boxes to this square input (--voc only)")
    p.add_argument("--out", required=True, help="anchors text file")
    common(p)
    p.set_defaults(func=cmd_cluster_anchors)

    p = sub.add_parser("audit", help="layer table and parameter totals")
    p.add_argument("--config")
    p.add_argument("--mode", choices=("baseline", "ca", "improved"))
    p.add_argument("--diff", action="store_true", help="compare against the baseline layout")
    p.add_argument("--out", help="JSON report path")
    common(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("augment", help="augment a VOC directory")
    p.add_argument("--voc", required=True)
    p.add_argument("--spec", help="key = value augmentation settings")
    p.add_argument("--copies", type=int, default=1)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("evaluate", help="per-class AP and mAP")
    p.add_argument("--detections", required=True, help="detections JSONL")
    p.add_argument("--gt", required=True, help="VOC directory or ground-truth JSONL")
    p.add_argument("--iou", type=float, default=de.MATCH_IOU)
    p.add_argument("--classes", help="class-name file, one per line")
    p.add_argument("--out", help="EvalReport JSON path")
    p.add_argument("--csv", help="PR points CSV path")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="time the attention block or a forward pass")
    p.add_argument("--config")
    p.add_argument("--mode", choices=("baseline", "ca", "improved"))
    p.add_argument("--op", choices=("ca", "forward"), default="ca")
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--shape", default="1,64,104,104", help="N,C,H,W for --op ca")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--out", help="JSON result path")
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    code = EXIT_OK
    info, error = {}, None
    try:
        info = args.func(args)
        code = info.pop("exit_code", EXIT_OK)
    except CommandError as exc:
        code, error = exc.code, str(exc)
    except InsufficientDataError as exc:
        code, error = EXIT_DATA, str(exc)
    except (ConfigError, OSError, ValueError) as exc:
        code, error = EXIT_IO, f"{type(exc).__name__}: {exc}"
    if error:
        print(f"cayk {args.command}: {error}", file=sys.stderr)
    manifest = {
        "command": args.command, "argv": argv, "seed": getattr(args, "seed", None),
        "tool_version": __version__, "exit_code": code, "error": error,
        "wall_time_s": time.perf_counter() - start, **info,
    }
    try:
        path = manifest_path(args)
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_json(path, manifest)
    except OSError as exc:
        print(f"cayk: cannot write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_IO
    return code


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
