"""Command-line front end: ``aga3d <subcommand> ...``.

Every subcommand writes its outputs and a ``manifest.json`` into ``--out``
and nowhere else.  Exit codes: 0 ok, 1 internal error, 2 malformed input,
3 domain error (empty region, degenerate batch, ...), 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    AgaError,
    ContractError,
    DegenerateBatch,
    DegenerateExtent,
    EmptyPhrase,
    EmptyRegion,
    FormatError,
    InvalidVolume,
    OutOfBounds,
    PlacementError,
    SplitError,
    TrainingDiverged,
    UnknownLabel,
    ZeroVector,
)

EXIT_OK, EXIT_INTERNAL, EXIT_FORMAT, EXIT_DOMAIN, EXIT_VERIFY = 0, 1, 2, 3, 4

DOMAIN_ERRORS = (EmptyRegion, DegenerateBatch, DegenerateExtent, EmptyPhrase, ZeroVector, UnknownLabel,
                 OutOfBounds, PlacementError, SplitError, TrainingDiverged, ContractError)
FORMAT_ERRORS = (FormatError, InvalidVolume, FileNotFoundError, IsADirectoryError, NotADirectoryError,
                 UnicodeDecodeError)

BUNDLED_CONFIG = "phantom_run.json"


class UsageError(Exception):
    """Bad flag or config value; reported with the input-format exit code."""


class VerificationFailed(Exception):
    pass


# --------------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: list
    seed: int | None
    version: str = __version__
    duration_s: float = 0.0
    finished_at: str = ""
    extra: dict = field(default_factory=dict)


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(out: Path, manifest: RunManifest):
    manifest.finished_at = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    body = json.dumps(asdict(manifest), indent=1, sort_keys=True, default=str) + "\n"
    _atomic_write(out / "manifest.json", body.encode())


def _listing(out: Path):
    return sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------- config

def _read_config(path):
    """JSON config by path; ``bundled`` names the packaged phantom run config."""
    if path is None:
        return {}
    if path == "bundled":
        text = resources.files("aga3d").joinpath("data", BUNDLED_CONFIG).read_text()
        where = BUNDLED_CONFIG
    else:
        text = Path(path).read_text()
        where = path
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON config: {exc.msg}", exc.pos, where) from None
    if not isinstance(cfg, dict):
        raise FormatError("config must be a JSON object", 0, where)
    return cfg


def _apply_config(args, cfg):
    """Config keys override same-named flags (dashes become underscores)."""
    for key, value in cfg.items():
        attr = key.replace("-", "_")
        if attr in ("phantom", "train"):
            continue
        if not hasattr(args, attr):
            raise UsageError(f"config key {key!r} is not an option of '{args.command}'")
        setattr(args, attr, value)
    return args


def _resolve_seed(args):
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("AGA3D_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"AGA3D_SEED must be an integer, got {env!r}") from None
    return 0


def _run_configs(cfg, seed):
    """``(PhantomSpec, TrainConfig)`` from a run config; explicit seeds inside win."""
    from .pipeline import PhantomSpec, TrainConfig

    try:
        spec = PhantomSpec.from_dict({"seed": seed, **cfg.get("phantom", {})})
        train_cfg = TrainConfig.from_dict({"seed": seed, **cfg.get("train", {})})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad run config: {exc}") from None
    if tuple(train_cfg.net.input_dims) != tuple(spec.dims):
        raise UsageError(f"net input_dims {train_cfg.net.input_dims} differ from phantom dims {spec.dims}")
    return spec, train_cfg


def _out_dir(args):
    if args.out is None:
        raise UsageError(f"'{args.command}' needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------- commands

def _table_for(args, labels):
    from .grounding import build_table_from_registry, load_embedding_table

    if args.table in (None, "auto"):
        return build_table_from_registry(labels, d=args.embed_dim)
    return load_embedding_table(args.table)


def _groundings(phrases, table, k):
    from .grounding import ground_phrase

    return [ground_phrase(p, table, k) for p in phrases]


def cmd_ground(args):
    from .grounding import read_phrases
    from .volgrid import LabelMap, load_volume

    out = _out_dir(args)
    labels = load_volume(args.labels) if args.labels else None
    if labels is not None and not isinstance(labels, LabelMap):
        raise FormatError("expected a u32 label map", 0, args.labels)
    if args.table in (None, "auto") and labels is None:
        raise UsageError("--table auto needs --labels to supply the registry")
    phrases = read_phrases(args.phrases)
    table = _table_for(args, labels)
    rows = [g.to_dict() for g in _groundings(phrases, table, args.k)]
    _write_json(out / "grounding.json", {"k": args.k, "groundings": rows})
    for g in rows:
        print(f"{g['phrase']}: " + ", ".join(f"{m['label']}({m['score']:.4f})" for m in g["matches"]))
    return {"k": args.k, "table": args.table, "embed_dim": args.embed_dim}, \
        {"labels": args.labels, "phrases": args.phrases, "table": args.table}


def cmd_prior(args):
    from .grounding import read_phrases
    from .prior import PriorParams, build_prior_channel
    from .volgrid import LabelMap, load_volume, store_volume

    out = _out_dir(args)
    labels = load_volume(args.labels)
    if not isinstance(labels, LabelMap):
        raise FormatError("expected a u32 label map", 0, args.labels)
    phrases = read_phrases(args.phrases)
    try:
        params = PriorParams(sigma=float(args.sigma), fusion=args.fusion)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    table = _table_for(args, labels)
    groundings = _groundings(phrases, table, args.k)
    if not phrases:
        warnings.warn(f"{args.phrases} holds no phrases; the prior is all zero", stacklevel=2)
    ids = tuple(dict.fromkeys(lid for g in groundings for lid in g.label_ids))
    prior = build_prior_channel(labels, ids, params)
    store_volume(prior, out / "prior")
    _write_json(out / "grounding.json", {"k": args.k, "groundings": [g.to_dict() for g in groundings]})
    print(f"prior over {len(ids)} label(s); max weight {float(prior.data.max()):.4f}")
    return {"k": args.k, "sigma": params.sigma, "fusion": params.fusion, "table": args.table,
            "embed_dim": args.embed_dim}, \
        {"labels": args.labels, "phrases": args.phrases, "table": args.table}


def cmd_roi_transfer(args):
    from .roialign import fit_transform, load_box, load_extent, transform_box

    out = _out_dir(args)
    g_ref, g_tgt = load_extent(args.ref_extent), load_extent(args.tgt_extent)
    box = load_box(args.box)
    t = fit_transform(g_ref, g_tgt)
    moved = transform_box(t, box)
    _write_json(out / "box.json", {**moved.to_dict(), "transform": t.to_dict()})
    print("center", list(moved.center), "sides", list(moved.sides))
    return {}, {"ref_extent": args.ref_extent, "tgt_extent": args.tgt_extent, "box": args.box}


def cmd_synth(args, cfg, seed):
    from .pipeline import generate_phantoms, store_phantoms

    out = _out_dir(args)
    spec, _ = _run_configs(cfg, seed)
    scans = generate_phantoms(spec)
    store_phantoms(scans, out)
    _write_json(out / "phantom_spec.json", spec.to_dict())
    print(f"{len(scans)} scans from {len({s.patient_id for s in scans})} patients")
    return {"phantom": spec.to_dict()}, {"config": args.config}


def _dataset(args, spec):
    from .pipeline import generate_phantoms, load_phantoms

    return load_phantoms(args.data) if args.data else generate_phantoms(spec)


def _progress(record):
    val = record["val"]
    auc = "n/a" if val["auc"] is None else f"{val['auc']:.4f}"
    print(f"epoch {record['epoch']:3d}  lr {record['lr']:.2e}  loss {record['train_loss']:.4f}  val auc {auc}",
          flush=True)


def cmd_train(args, cfg, seed):
    from .pipeline import patient_split, prepare_inputs, run_experiment

    out = _out_dir(args)
    spec, train_cfg = _run_configs(cfg, seed)
    if args.epochs is not None:
        train_cfg = train_cfg.with_(epochs=int(args.epochs))
    scans = _dataset(args, spec)
    parts = patient_split(scans, train_cfg.fractions, train_cfg.seed)
    data = tuple(prepare_inputs(p, train_cfg) for p in parts)
    res = run_experiment(train_cfg, spec, out_dir=out, data=data, progress=None if args.quiet else _progress)
    resolved = {"phantom": spec.to_dict(), "train": train_cfg.to_dict()}
    _write_json(out / "run_config.json", resolved)
    print(res.test.to_json(indent=1))
    return resolved, {"config": args.config, "data": args.data}


def _roc_points(scores, labels):
    """ROC vertices (fpr, tpr) sweeping the threshold over distinct scores."""
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    pos, neg = max(int(y.sum()), 1), max(int(len(y) - y.sum()), 1)
    pts = [(0.0, 0.0)]
    tp = fp = 0
    for i in range(len(s)):
        tp += int(y[i] == 1)
        fp += int(y[i] == 0)
        if i == len(s) - 1 or s[i + 1] != s[i]:
            pts.append((fp / neg, tp / pos))
    return pts


def render_svg(scores, labels, auc=None):
    """Two panels: per-scan scores coloured by label, and the ROC polyline."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    w, h, pad = 320, 240, 30
    buf = io.StringIO()
    buf.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * w}" height="{h}" '
              f'viewBox="0 0 {2 * w} {h}" font-family="sans-serif" font-size="11">\n')
    for x0, title in ((0, "scores by scan"), (w, "ROC" + ("" if auc is None else f" (AUC {auc:.3f})"))):
        buf.write(f'<rect x="{x0 + pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" '
                  f'fill="none" stroke="#444"/>\n')
        buf.write(f'<text x="{x0 + pad}" y="{pad - 8}">{title}</text>\n')
    n = max(len(scores) - 1, 1)
    for i, (s, y) in enumerate(zip(scores, labels)):
        cx = pad + (w - 2 * pad) * i / n
        cy = h - pad - (h - 2 * pad) * s
        colour = "#c0392b" if y == 1 else "#2471a3"
        buf.write(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2.5" fill="{colour}"/>\n')
    pts = " ".join(f"{w + pad + (w - 2 * pad) * fx:.2f},{h - pad - (h - 2 * pad) * ty:.2f}"
                   for fx, ty in _roc_points(scores, labels))
    buf.write(f'<line x1="{w + pad}" y1="{h - pad}" x2="{2 * w - pad}" y2="{pad}" '
              f'stroke="#aaa" stroke-dasharray="4 3"/>\n')
    buf.write(f'<polyline points="{pts}" fill="none" stroke="#c0392b" stroke-width="1.5"/>\n')
    buf.write("</svg>\n")
    return buf.getvalue()


def cmd_eval(args, cfg, seed):
    from .autodiff import load_params
    from .pipeline import evaluate, patient_split, prepare_inputs

    out = _out_dir(args)
    spec, train_cfg = _run_configs(cfg, seed)
    params = load_params(args.model)
    scans = _dataset(args, spec)
    if args.split == "all":
        chosen = scans
    else:
        parts = patient_split(scans, train_cfg.fractions, train_cfg.seed)
        chosen = parts[("train", "val", "test").index(args.split)]
    x, y = prepare_inputs(chosen, train_cfg)
    report, scores = evaluate(params, x, y, train_cfg, threshold=float(args.threshold))
    _write_json(out / "metrics.json", report.to_dict())
    rows = io.StringIO()
    writer = csv.writer(rows, lineterminator="\n")
    writer.writerow(["scan_id", "patient_id", "label", "score"])
    for sc, s in zip(chosen, scores):
        writer.writerow([sc.scan_id, sc.patient_id, sc.label, repr(float(s))])
    (out / "scores.csv").write_text(rows.getvalue())
    if args.plot:
        (out / "plot.svg").write_text(render_svg(scores, y, report.auc))
    print(report.to_json(indent=1))
    return {"phantom": spec.to_dict(), "train": train_cfg.to_dict(), "split": args.split,
            "threshold": float(args.threshold)}, \
        {"config": args.config, "data": args.data, "model": args.model}


def cmd_gradcheck(args, seed):
    from .autodiff.suite import run_suite

    seeds = tuple(range(seed, seed + int(args.seeds)))
    report = run_suite(seeds, model=not args.no_model)
    width = max(len(k) for k in report)
    for name, entry in report.items():
        flag = "ok" if entry["passed"] else "FAIL"
        print(f"{name:<{width}}  max rel-err {entry['max_rel_err']:.3e}  tol {entry['tol']:.0e}  {flag}")
    if args.out is not None:
        out = _out_dir(args)
        _write_json(out / "gradcheck.json", report)
    failed = [k for k, e in report.items() if not e["passed"]]
    if failed:
        raise VerificationFailed(f"gradient check failed for: {', '.join(failed)}")
    return {"seeds": list(seeds), "model": not args.no_model}, {}


# --------------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="aga3d", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"aga3d {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", help="output directory (created if missing)")
        p.add_argument("--config", help="JSON file whose keys override flags ('bundled' for the packaged run config)")
        p.add_argument("--seed", type=int, help="global seed (falls back to $AGA3D_SEED, then 0)")
        return p

    for name, help_text in (("prior", "ground phrases and build the prior channel"),
                            ("ground", "ground phrases against atlas labels")):
        p = add(name, help_text)
        p.add_argument("--labels", required=name == "prior", help="label-map AVOL")
        p.add_argument("--phrases", required=True, help="text file, one phrase per line")
        p.add_argument("--table", default="auto", help="embedding table TSV, or 'auto' for the toy embedder")
        p.add_argument("--k", type=int, default=5)
        p.add_argument("--embed-dim", type=int, default=64)
        if name == "prior":
            p.add_argument("--sigma", type=float, default=3.0)
            p.add_argument("--fusion", choices=("max", "sum-clamped"), default="max")

    p = add("roi-transfer", "map a box from a reference subject onto a target subject")
    p.add_argument("--ref-extent", required=True)
    p.add_argument("--tgt-extent", required=True)
    p.add_argument("--box", required=True)

    add("synth", "materialize a phantom dataset")

    p = add("train", "train on a phantom dataset")
    p.add_argument("--data", help="dataset directory from 'synth' (generated in memory if omitted)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--quiet", action="store_true")

    p = add("eval", "score a checkpoint on one split")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--plot", action="store_true", help="also write plot.svg")

    p = add("gradcheck", "finite-difference check of every op and the full model")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--no-model", action="store_true")
    return parser


_RUN_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval}
_FILE_COMMANDS = {"prior": cmd_prior, "ground": cmd_ground, "roi-transfer": cmd_roi_transfer}


def _dispatch(args):
    start = time.perf_counter()
    if args.command in _RUN_COMMANDS:
        cfg = _read_config(args.config or "bundled")
        _apply_config(args, {k: v for k, v in cfg.items() if k != "seed"})
        seed = _resolve_seed(args) if "seed" not in cfg else int(cfg["seed"])
        config, inputs = _RUN_COMMANDS[args.command](args, cfg, seed)
    else:
        cfg = _read_config(args.config)
        _apply_config(args, cfg)
        seed = _resolve_seed(args)
        if args.command == "gradcheck":
            config, inputs = cmd_gradcheck(args, seed)
        else:
            config, inputs = _FILE_COMMANDS[args.command](args)
    if args.out is not None:
        out = Path(args.out)
        write_manifest(out, RunManifest(args.command, config, inputs, _listing(out), seed,
                                        duration_s=round(time.perf_counter() - start, 3)))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _show_warning
            _dispatch(args)
    except VerificationFailed as exc:
        print(f"aga3d: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except DOMAIN_ERRORS as exc:
        print(f"aga3d: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except FORMAT_ERRORS as exc:
        print(f"aga3d: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except UsageError as exc:
        print(f"aga3d: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except AgaError as exc:
        print(f"aga3d: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except Exception as exc:  # noqa: BLE001 - last-resort handler for the exit-code contract
        print(f"aga3d: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"aga3d: warning: {category.__name__}: {message}", file=sys.stderr)


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
