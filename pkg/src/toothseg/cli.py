"""Command-line entry point.

Every run prints its resolved configuration as one ``config: {...}`` JSON
line first. Failures exit nonzero after writing a single JSON error record
to stderr.

    toothseg --seed 7 synth --count 8 --out data/train
    toothseg train --train-dir data/train --val-dir data/val --out run
    toothseg infer --mesh scan.obj --jaw mandible --checkpoint run/checkpoint.ckpt --out pred.obj
    toothseg eval --pred pred.labels --truth scan.labels
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import FEATURE_COLUMNS, JAWS, build_features, curvature
from .mesh import atomic_write_text, build_adjacency, load_labels, load_mesh, save_mesh
from .network import CHECKPOINT_VERSION

log = logging.getLogger("toothseg")

CURVATURE_KINDS = ("point", "gaussian", "mean")


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(f"{self.prog}: {message}")


def build_id() -> str:
    """Short digest of the package sources; changes whenever the code does."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _emit(rows, header, delimiter=","):
    lines = [delimiter.join(header)]
    lines += [delimiter.join(str(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ commands

def cmd_features(args, cfg):
    mesh = load_mesh(args.mesh)
    cloud = build_features(mesh, build_adjacency(mesh), args.jaw)
    rows = ([i] + [f"{v:.9g}" for v in row] for i, row in enumerate(cloud.features))
    atomic_write_text(args.out, _emit(rows, ("face_index",) + FEATURE_COLUMNS))
    print(f"features\t{mesh.n_faces} faces\t{args.out}")


def cmd_curvature(args, cfg):
    from .plotting import curvature_map

    mesh = load_mesh(args.mesh)
    adj = build_adjacency(mesh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = CURVATURE_KINDS if args.kind == "all" else (args.kind,)
    print("kind\tmin\tmean\tmax\tunits")
    for kind in kinds:
        field = curvature(mesh, kind, adj)
        vals = field.values
        atomic_write_text(out / f"{kind}.csv",
                          _emit(([i, f"{v:.9g}"] for i, v in enumerate(vals)), ("face_index", "value")))
        per_vertex = field.vertex_values
        if per_vertex is None:
            per_vertex = _face_to_vertex(mesh, vals)
        save_mesh(mesh, out / f"{kind}.obj", vertex_colors=_colormap(per_vertex))
        curvature_map(mesh.face_centroid, vals, out / f"{kind}.png", title=f"{kind} curvature",
                      label=field.units)
        print(f"{kind}\t{vals.min():.6g}\t{vals.mean():.6g}\t{vals.max():.6g}\t{field.units}")


def _face_to_vertex(mesh, vals):
    """Mean over incident faces, for coloring a face-native field per vertex."""
    idx = mesh.faces.ravel()
    sums = np.bincount(idx, weights=np.repeat(vals, 3), minlength=mesh.n_vertices)
    counts = np.bincount(idx, minlength=mesh.n_vertices)
    return np.divide(sums, counts, out=np.zeros(mesh.n_vertices), where=counts > 0)


def _colormap(values):
    from matplotlib import colormaps

    values = np.asarray(values, dtype=np.float64)
    lo, hi = np.percentile(values, [1, 99])
    t = np.clip((values - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros_like(values)
    return colormaps["viridis"](t)[:, :3]


def cmd_synth(args, cfg):
    from .synthetic import synthetic_samples, write_dataset

    samples = synthetic_samples(args.count, seed=args.seed, tooth_count=args.tooth_count,
                                missing_tooth_prob=args.missing_prob)
    write_dataset(samples, args.out)
    print("name\tjaw\tfaces\tclasses")
    for s in samples:
        print(f"{s.name}\t{s.jaw}\t{s.mesh.n_faces}\t{len(np.unique(s.labels))}")


def _train_config(args, cfg, **extra):
    from .training import TrainConfig

    merged = {**getattr(args, "train_fallback", {}), **cfg}
    merged["seed"] = args.seed
    for key in ("epochs", "network", "n_points", "batch_size", "lr", "train_dir", "val_dir"):
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    if getattr(args, "out", None) is not None:
        merged["out_dir"] = args.out
    merged.update(extra)
    return TrainConfig.from_dict(merged)


def cmd_train(args, cfg):
    from .metrics import AggregateReport, MetricReport, format_table
    from .plotting import loss_curves
    from .training import train

    config = _train_config(args, cfg)
    log.info("training config %s", config)
    result = train(config, resume=args.resume)
    loss_curves(result.history, Path(config.out_dir) / "loss.png")
    last = result.history[-1] if result.history else {}
    print("step\tL_total\tL_seg\tL_geo\tL_aux")
    if last:
        print(f"{last['step']}\t{last['L_total']:.6g}\t{last['L_seg']:.6g}\t"
              f"{last['L_geo']:.6g}\t{last['L_aux']:.6g}")
    print(f"checkpoint\t{result.checkpoint}")
    if result.metrics:
        groups = {k: (MetricReport(**v) if v else None)
                  for k, v in result.metrics["aggregate"].items()}
        print(format_table(AggregateReport(groups)), end="")
        print(f"aux_accuracy\t{result.metrics['aux_accuracy']:.4f}")


def cmd_infer(args, cfg):
    from .inference import export_result, infer_full_mesh
    from .network import load_checkpoint
    from .plotting import label_map

    model, meta, _ = load_checkpoint(args.checkpoint)
    mesh = load_mesh(args.mesh)
    result = infer_full_mesh(model, mesh, args.jaw, seed=args.seed, n_points=args.n_points,
                             export_probs=args.export_probs,
                             checkpoint_id=file_digest(args.checkpoint))
    out = Path(args.out)
    obj, sidecar = export_result(result, mesh, out)
    prov = dict(result.provenance(), mesh=str(args.mesh), jaw=args.jaw, n_points=args.n_points,
                n_faces=mesh.n_faces)
    atomic_write_text(out.with_suffix(".json"), json.dumps(prov, indent=2, sort_keys=True) + "\n")
    label_map(mesh.face_centroid, result.face_labels, out.with_suffix(".png"),
              title=f"{Path(args.mesh).name} ({args.jaw})")
    print("faces\trounds\tpadded\tclasses\tlabels")
    print(f"{mesh.n_faces}\t{result.rounds}\t{result.padded}\t"
          f"{len(np.unique(result.face_labels))}\t{sidecar}")


def _label_pairs(pred, truth):
    """(name, pred_labels, truth_labels, jaw) from two sidecar files or two dirs."""
    pred, truth = Path(pred), Path(truth)
    if pred.is_file() and truth.is_file():
        return [(truth.stem, load_labels(pred), load_labels(truth), "all")]
    if not (pred.is_dir() and truth.is_dir()):
        raise CLIError("--pred and --truth must both be .labels files or both directories")
    meta_path = truth / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    pairs = []
    for t in sorted(truth.glob("*.labels")):
        p = pred / t.name
        if not p.exists():
            raise FileNotFoundError(f"no prediction {p} for {t}")
        pairs.append((t.stem, load_labels(p), load_labels(t), meta.get(t.stem, {}).get("jaw", "all")))
    if not pairs:
        raise FileNotFoundError(f"no .labels files in {truth}")
    return pairs


def cmd_eval(args, cfg):
    from .metrics import aggregate, evaluate, format_table
    from .plotting import class_iou_bars

    if args.checkpoint:
        from .inference import evaluate_samples
        from .metrics import AggregateReport, MetricReport
        from .network import load_checkpoint
        from .synthetic import load_dataset

        if not args.data:
            raise CLIError("eval --checkpoint needs --data DIR")
        model, _, _ = load_checkpoint(args.checkpoint)
        result = evaluate_samples(model, load_dataset(args.data), n_points=args.n_points,
                                  seed=args.seed)
        agg = AggregateReport({k: (MetricReport(**v) if v else None)
                               for k, v in result["aggregate"].items()})
        payload = result
    else:
        if not (args.pred and args.truth):
            raise CLIError("eval needs --pred and --truth, or --checkpoint and --data")
        pairs = _label_pairs(args.pred, args.truth)
        reports = [evaluate(p, t) for _, p, t, _ in pairs]
        agg = aggregate(reports, [j for *_, j in pairs])
        payload = {"aggregate": agg.as_dict(),
                   "samples": [dict(name=n, jaw=j, accuracy=r.accuracy, miou=r.miou, dsc=r.dsc)
                               for (n, _, _, j), r in zip(pairs, reports)]}
    table = format_table(agg, scale=1.0, digits=3)
    print(table, end="")
    if "aux_accuracy" in payload:
        print(f"aux_accuracy\t{payload['aux_accuracy']:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "metrics.json", json.dumps(payload, indent=2) + "\n")
        atomic_write_text(out / "metrics.txt", table)
        class_iou_bars(agg["all"].per_class_iou, out / "per_class_iou.png")


def cmd_compare(args, cfg):
    from .inference import evaluate_samples
    from .plotting import arm_bars
    from .synthetic import load_dataset, synthetic_samples
    from .training import prepare, train

    train_dir = args.train_dir or cfg.get("train_dir")
    val_dir = args.val_dir or cfg.get("val_dir")
    if train_dir:
        train_samples = load_dataset(train_dir)
    else:
        train_samples = synthetic_samples(args.n_train, seed=args.seed)
    if val_dir:
        val_samples = load_dataset(val_dir)
    else:
        val_samples = synthetic_samples(args.n_val, seed=args.seed + 10_000)
    prepared = prepare(train_samples)
    out = Path(args.out)
    rows = []
    for arm in CURVATURE_KINDS:
        config = _train_config(args, cfg, ranking_signal=arm, out_dir=str(out / arm),
                               train_dir=None, val_dir=None)
        result = train(config, prepared=prepared)
        m = evaluate_samples(result.model, val_samples, n_points=config.n_points, seed=args.seed)
        agg = m["aggregate"]["all"]
        rows.append((arm, agg["miou"], agg["dsc"], agg["accuracy"]))
        log.info("arm %s mIoU %.4f", arm, agg["miou"])
    text = _emit(([a, f"{mi:.6f}", f"{d:.6f}", f"{acc:.6f}"] for a, mi, d, acc in rows),
                 ("ranking_signal", "miou", "dsc", "accuracy"))
    atomic_write_text(out / "compare.csv", text)
    arm_bars({a: mi for a, mi, _, _ in rows}, out / "compare.png",
             title="hard-point ranking signal")
    print(text.replace(",", "\t"), end="")
    best = max(rows, key=lambda r: r[1])[0]
    print(f"ordering\t{' > '.join(a for a, *_ in sorted(rows, key=lambda r: -r[1]))}\tbest\t{best}")


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="random seed (also accepted before the subcommand)")

    p = _Parser(prog="toothseg", description="Tooth segmentation on intraoral mesh scans.")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--config", help="key = value config file; explicit flags win")
    p.add_argument("--verbose", "-v", action="count", default=0)
    p.add_argument("--version", action="store_true", help="print build id and checkpoint format")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("features", parents=[common], help="write the per-face input matrix as CSV")
    s.add_argument("--mesh", required=True)
    s.add_argument("--jaw", choices=JAWS, default="maxillary")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("curvature", parents=[common],
                       help="export curvature fields as CSV, colored OBJ and PNG")
    s.add_argument("--mesh", required=True)
    s.add_argument("--kind", choices=CURVATURE_KINDS + ("all",), default="all")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_curvature)

    s = sub.add_parser("synth", parents=[common], help="write a labeled synthetic dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tooth-count", type=int, default=14)
    s.add_argument("--missing-prob", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a network")
    _train_flags(s)
    s.add_argument("--train-dir")
    s.add_argument("--val-dir")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="label every face of a mesh")
    s.add_argument("--mesh", required=True)
    s.add_argument("--jaw", choices=JAWS, required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="colored OBJ path; sidecars share its stem")
    s.add_argument("--n-points", type=int, default=10000)
    s.add_argument("--export-probs", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    s.add_argument("--pred", help=".labels file or directory")
    s.add_argument("--truth", help=".labels file or directory (with meta.json for jaw groups)")
    s.add_argument("--checkpoint", help="run inference on --data instead of reading --pred")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--n-points", type=int, default=10000)
    s.add_argument("--out", help="directory for metrics.json, metrics.txt and a figure")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare-curvatures", parents=[common],
                       help="short runs per ranking signal, tabulated validation mIoU")
    _train_flags(s, epochs=100, network="tiny", n_points=1024, lr=2e-3)
    s.add_argument("--train-dir")
    s.add_argument("--val-dir")
    s.add_argument("--n-train", type=int, default=8, help="synthetic jaws when no --train-dir")
    s.add_argument("--n-val", type=int, default=4, help="synthetic jaws when no --val-dir")
    s.set_defaults(func=cmd_compare)
    return p


def _train_flags(s, **fallback):
    # fallbacks apply only when neither a flag nor the config file sets the key
    s.add_argument("--epochs", type=int)
    s.add_argument("--network")
    s.add_argument("--n-points", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(train_fallback=fallback)


def _resolve(args) -> dict:
    cfg = {}
    if args.config:
        from .training import load_config
        cfg = load_config(args.config)
    if args.seed is None:
        args.seed = int(cfg.pop("seed", 0))
    else:
        cfg.pop("seed", None)
    return cfg


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.version:
            print(f"toothseg {__version__} build {build_id()} checkpoint-format {CHECKPOINT_VERSION}")
            return 0
        if command is None:
            raise CLIError("toothseg: a subcommand is required (see --help)")
        cfg = _resolve(args)
        resolved = {k: v for k, v in vars(args).items() if k != "func"}
        print("config: " + json.dumps({"args": resolved, "config_file": cfg}, sort_keys=True,
                                      default=str))
        args.func(args, cfg)
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        if any(a.startswith("-v") or a == "--verbose" for a in argv):
            log.exception("command failed")
        record = {"error": type(exc).__name__, "message": str(exc), "command": command}
        print(json.dumps(record), file=sys.stderr)
        return 2 if isinstance(exc, CLIError) else 1


if __name__ == "__main__":
    sys.exit(main())
