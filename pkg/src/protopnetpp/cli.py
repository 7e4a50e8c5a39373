"""Command-line entry point: gen-data, train, eval, explain, gradcheck, report."""

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import data as datamod
from . import diffcore as dc
from .evaluation import (
    IOU_THRESHOLDS,
    localisation_cases,
    localisation_csv,
    localisation_sweep,
    roc_auc_or_nan,
    sweep_csv,
)
from .gradchecks import run_gradchecks
from .imaging import (
    atomic_write_bytes,
    atomic_write_text,
    encode_pgm,
    encode_ppm,
    heat_overlay,
    line_plot,
    resize_bilinear,
    to_u8,
)
from .losses import HyperParams
from .model import MissingProvenanceError, checkpoint_bytes, explain, load_checkpoint, predict
from .prototypes import CLASS_NAMES, diversity_metrics, format_diversity_table, provenance_table
from .training import AugmentConfig, TrainConfig, TrainingDiverged, train

log = logging.getLogger("protopnetpp")

DEFAULT_SEED = 20220918
TEST_SEED_OFFSET = 1000


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None
    return h, w


def _triple(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return vals


def _shared(p):
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--config", type=Path, default=None, help="key=value file; command-line flags win")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="protopnetpp", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/test datasets")
    _shared(p)
    p.add_argument("--train-pos", type=int, default=200)
    p.add_argument("--train-neg", type=int, default=200)
    p.add_argument("--test-pos", type=int, default=100)
    p.add_argument("--test-neg", type=int, default=100)
    p.add_argument("--size", type=_size, default=(64, 64))

    p = sub.add_parser("train", help="three-stage training")
    _shared(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=_triple, default=(10, 10, 5))
    hp = HyperParams()
    for name in ("alpha", "beta", "omega", "lambda1", "lambda2", "gamma"):
        p.add_argument(f"--{name}", type=float, default=getattr(hp, name))
    p.add_argument("--temp", type=float, default=None, help="similarity temperature (default: feature size)")
    p.add_argument("--prototypes", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--no-kd", action="store_true", help="ablation: beta = 0")
    p.add_argument("--no-greedy", action="store_true", help="ablation: plain nearest-patch push")
    p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("eval", help="AUC, localisation PR-AUC sweep, diversity")
    _shared(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("explain", help="top-k prototype explanation for one test image")
    _shared(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--image", type=int, required=True)
    p.add_argument("--topk", type=int, default=2)

    p = sub.add_parser("gradcheck", help="finite-difference checks on a toy model")
    _shared(p)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-3)

    p = sub.add_parser("report", help="summarise one or more metrics.json files")
    _shared(p)
    p.add_argument("metrics", type=Path, nargs="+")
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with defaults from ``--config``; explicit flags still win."""
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        text = args.config.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {args.config}: {exc}") from None
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        dest = key.strip().lstrip("-").replace("-", "_")
        if not sep or dest not in actions or dest in ("config", "help"):
            raise UsageError(f"{args.config}:{n}: unknown key {key.strip()!r} for {args.command}")
        action = actions[dest]
        value = value.strip()
        if isinstance(action, (argparse._StoreTrueAction,)):
            defaults[dest] = value.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[dest] = action.type(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{args.config}:{n}: {exc}") from None
        else:
            defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _resolved(args):
    out = {}
    for k, v in sorted(vars(args).items()):
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, list):
            v = [str(x) if isinstance(x, Path) else x for x in v]
        out[k] = v
    return out


def _write_manifest(args, artifacts, started):
    manifest = {
        "command": args.command,
        "config": _resolved(args),
        "seed": args.seed,
        "artifacts": sorted(str(a) for a in artifacts),
        "tool_version": __version__,
        "duration_seconds": round(time.perf_counter() - started, 3),
    }
    path = args.out / f"manifest-{args.command}.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _split(root, name):
    root = Path(root)
    return root / name if (root / name / "labels.csv").is_file() else root


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    h, w = args.size
    written = []
    for split, n_pos, n_neg, seed in (
        ("train", args.train_pos, args.train_neg, args.seed),
        ("test", args.test_pos, args.test_neg, args.seed + TEST_SEED_OFFSET),
    ):
        cfg = datamod.GenConfig(n_neg=n_neg, n_pos=n_pos, height=h, width=w, seed=seed)
        ds = datamod.generate(cfg)
        datamod.save_dataset(ds, args.out / split)
        written.append(args.out / split)
        print(f"{split}: {n_neg} negative + {n_pos} positive images -> {args.out / split}")
    return written


def _load_prepared(path, workers):
    ds = datamod.load_dataset(path, workers=workers)
    return datamod.prepare(ds)


def cmd_train(args):
    ds = _load_prepared(_split(args.data, "train"), args.workers)
    hp = HyperParams(args.alpha, 0.0 if args.no_kd else args.beta, args.omega, args.lambda1, args.lambda2, args.gamma)
    cfg = TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        hyper=hp,
        augment=AugmentConfig(0, 0, 0) if args.no_augment else AugmentConfig(),
        seed=args.seed,
        greedy=not args.no_greedy,
        n_prototypes=args.prototypes,
        temperature=args.temp,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(ds.images, ds.labels, cfg)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            atomic_write_bytes(args.out / "last_good.ckpt", exc.last_good)
        raise
    written = []
    for stage, payload in result.checkpoints.items():
        atomic_write_bytes(args.out / f"stage{stage}.ckpt", payload)
        written.append(args.out / f"stage{stage}.ckpt")
    atomic_write_bytes(args.out / "model.ckpt", checkpoint_bytes(result.state))
    atomic_write_text(args.out / "history.csv", _history_csv(result.history))
    atomic_write_text(args.out / "provenance.csv", provenance_table(result.state))
    written += [args.out / "model.ckpt", args.out / "history.csv", args.out / "provenance.csv"]
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final loss {last['total']:.4f}; checkpoint {args.out / 'model.ckpt'}")
    return written


HISTORY_FIELDS = [
    "epoch", "stage", "stage_epoch", "total", "ce_global", "ce_proto", "cluster", "separation", "kd",
    "auc_global", "auc_proto", "auc_ensemble", "pushed",
]


def _history_csv(history):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n", restval="")
    writer.writeheader()
    for row in history:
        writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else int(v) if isinstance(v, bool) else v) for k, v in row.items()})
    return buf.getvalue()


def evaluate(state, ds):
    """Full measurement protocol on a prepared dataset; returns (metrics dict, cases, prediction)."""
    pred = predict(state, ds.images)
    y = ds.labels
    cases = localisation_cases(state, ds.images, ds.masks, pred)
    curve = localisation_sweep(cases)
    protos = state.prototypes
    try:
        div = diversity_metrics(protos.vectors.data, protos.classes)
        diversity = {CLASS_NAMES[c].lower().replace("-", "_"): {"cosine": v[0], "l2": v[1]} for c, v in div.items()}
    except ValueError as exc:
        diversity = {"error": str(exc)}
    metrics = {
        "auc": {
            "global": roc_auc_or_nan(pred.global_probs[:, 1], y),
            "protopnet": roc_auc_or_nan(pred.proto_probs[:, 1], y),
            "ensemble": roc_auc_or_nan(pred.ensemble_probs[:, 1], y),
        },
        "diversity": diversity,
        "localisation": {
            "iou_thresholds": list(IOU_THRESHOLDS),
            "pr_auc": [v for _, v in curve],
            "cases": len(cases),
            "excluded": sum(c.excluded for c in cases),
        },
        "n_test": len(ds),
    }
    return metrics, cases, pred


def _predictions_csv(state, pred):
    cancer = state.prototypes.of_class(1)
    lines = ["image,p_global,p_protopnet,p_ensemble,top_cancer_prototype,top_cancer_score"]
    for i in range(len(pred.scores)):
        m = cancer[int(np.argmax(pred.scores[i, cancer]))]
        lines.append(
            f"{i},{pred.global_probs[i, 1]:.9g},{pred.proto_probs[i, 1]:.9g},{pred.ensemble_probs[i, 1]:.9g},"
            f"{m},{pred.scores[i, m]:.9g}"
        )
    return "\n".join(lines) + "\n"


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    ds = _load_prepared(_split(args.data, "test"), args.workers)
    metrics, cases, pred = evaluate(state, ds)
    out = args.out
    atomic_write_text(out / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "localisation.csv", localisation_csv(cases))
    atomic_write_text(out / "predictions.csv", _predictions_csv(state, pred))
    curve = list(zip(metrics["localisation"]["iou_thresholds"], metrics["localisation"]["pr_auc"]))
    atomic_write_text(out / "pr_auc_sweep.csv", sweep_csv(curve))
    atomic_write_bytes(out / "pr_auc_sweep.ppm", encode_ppm(line_plot(*zip(*curve))))
    written = [out / n for n in ("metrics.json", "localisation.csv", "predictions.csv", "pr_auc_sweep.csv", "pr_auc_sweep.ppm")]
    cancer = state.prototypes.of_class(1)
    for case in cases[:8]:
        m = cancer[int(np.argmax(pred.scores[case.image, cancer]))]
        heat = np.clip(resize_bilinear(pred.maps[case.image, m], ds.images.shape[1:]), 0, 1)
        path = out / "overlays" / f"image{case.image:04d}_proto{m}.ppm"
        atomic_write_bytes(path, encode_ppm(heat_overlay(ds.images[case.image], heat)))
        written.append(path)
    a = metrics["auc"]
    print(f"AUC global {a['global']:.4f}  protopnet {a['protopnet']:.4f}  ensemble {a['ensemble']:.4f}")
    print("PR-AUC by IoU: " + ", ".join(f"{t:.2f}:{v:.3f}" for t, v in curve))
    return written


def cmd_explain(args):
    state = load_checkpoint(args.checkpoint)
    if not state.prototypes.provenance:
        raise MissingProvenanceError(f"{args.checkpoint} has no prototype provenance; run train (which pushes) first")
    test = _load_prepared(_split(args.data, "test"), args.workers)
    train_dir = Path(args.data) / "train"
    source = _load_prepared(train_dir, args.workers) if (train_dir / "labels.csv").is_file() else None
    if not 0 <= args.image < len(test):
        raise IndexError(f"image index {args.image} outside 0..{len(test) - 1}")
    image = test.images[args.image]
    ex = explain(state, image, k=args.topk)
    out = args.out / f"explain_{args.image:04d}"
    s = state.config.downsample
    written = [out / "test_image.pgm"]
    atomic_write_bytes(out / "test_image.pgm", encode_pgm(to_u8(image)))
    report = [
        f"image {args.image}: p_cancer ensemble {ex.prediction.ensemble_probs[0, 1]:.4f} "
        f"(global {ex.prediction.global_probs[0, 1]:.4f}, protopnet {ex.prediction.proto_probs[0, 1]:.4f})"
    ]
    records = []
    for c in (0, 1):
        report.append(f"{CLASS_NAMES[c]} prototypes (top {args.topk}):")
        for rank, it in enumerate(ex.by_class[c], start=1):
            stem = f"class{c}_rank{rank}_proto{it.prototype}"
            pv = it.provenance
            if source is not None:
                src = source.images[pv.image]
                r0, c0 = max(pv.row * s - s // 2, 0), max(pv.col * s - s // 2, 0)
                patch = src[r0 : r0 + 2 * s, c0 : c0 + 2 * s]
                atomic_write_bytes(out / f"{stem}_patch.pgm", encode_pgm(to_u8(patch)))
                written.append(out / f"{stem}_patch.pgm")
            atomic_write_bytes(out / f"{stem}_overlay.ppm", encode_ppm(heat_overlay(image, it.similarity_map)))
            written.append(out / f"{stem}_overlay.ppm")
            raw = ex.prediction.maps[0, it.prototype]
            report.append(
                f"  #{rank} prototype {it.prototype}: score {it.score:.6f}  map max {float(raw.max()):.6f}  "
                f"source image {pv.image} cell ({pv.row},{pv.col})"
            )
            records.append(
                {
                    "class": c,
                    "rank": rank,
                    "prototype": it.prototype,
                    "score": it.score,
                    "map_max": float(raw.max()),
                    "map_min": float(raw.min()),
                    "overlay_max": float(it.similarity_map.max()),
                    "source": asdict(pv),
                }
            )
    atomic_write_text(out / "report.txt", "\n".join(report) + "\n")
    atomic_write_text(out / "explain.json", json.dumps({"image": args.image, "prototypes": records}, indent=2) + "\n")
    written += [out / "report.txt", out / "explain.json"]
    print("\n".join(report))
    return written


class GradCheckFailed(RuntimeError):
    pass


def cmd_gradcheck(args):
    lines, ok = run_gradchecks(trials=args.trials, tolerance=args.tolerance, step=args.step, seed=args.seed)
    text = "\n".join(lines) + "\n"
    print(text, end="")
    atomic_write_text(args.out / "gradcheck.txt", text)
    if not ok:
        raise GradCheckFailed("one or more gradient checks exceeded tolerance")
    return [args.out / "gradcheck.txt"]


def cmd_report(args):
    rows = {}
    lines = []
    for path in args.metrics:
        m = json.loads(Path(path).read_text(encoding="utf-8"))
        a = m["auc"]
        lines.append(f"{path}: AUC global {a['global']:.4f} protopnet {a['protopnet']:.4f} ensemble {a['ensemble']:.4f}")
        loc = m["localisation"]
        lines.append("  PR-AUC: " + "  ".join(f"{t:.2f}={v:.3f}" for t, v in zip(loc["iou_thresholds"], loc["pr_auc"])))
        div = m.get("diversity", {})
        if "cancer" in div:
            rows[str(path)] = {
                0: (div["non_cancer"]["cosine"], div["non_cancer"]["l2"]),
                1: (div["cancer"]["cosine"], div["cancer"]["l2"]),
            }
    text = "\n".join(lines) + "\n\n" + (format_diversity_table(rows) if rows else "")
    print(text, end="")
    atomic_write_text(args.out / "report.txt", text)
    return [args.out / "report.txt"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"protopnetpp: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](args)
        _write_manifest(args, artifacts, started)
    except (
        OSError,
        ValueError,
        RuntimeError,
        ArithmeticError,
        IndexError,
        datamod.DatasetError,
        dc.NumericError,
    ) as exc:
        print(f"protopnetpp {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
