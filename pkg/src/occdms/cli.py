"""
Command-line entry point.

Exit codes: 0 success, 1 domain error (one JSON object on stderr), 2 usage
error. Data goes to stdout or ``--out``; diagnostics go to stderr. Split
fractions are always given in train,val,test order.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as ds
from . import evaluation as ev
from .backends import BackendError, Embedding, ScenarioError, mock_embedding, read_scenario, scripted_backends
from .identity import DEFAULT_THRESHOLDS, IdentityDB, IdentityError, auto_register, enroll, identify, reinforce
from .imaging import DimensionError, PnmError
from .pipeline import ConfigError, PipelineConfig, config_from_items, format_trace, load_frame_dir, parse_config, run_stream

DOMAIN_ERRORS = (
    ValueError,
    OSError,
    BackendError,
    ConfigError,
    DimensionError,
    IdentityError,
    PnmError,
    ScenarioError,
    ds.ManifestError,
    ds.SplitError,
    ev.MetricError,
)


class DomainError(Exception):
    pass


class _VersionAction(argparse.Action):
    """Prints the version to stderr so data streams never carry a banner."""

    def __init__(self, option_strings, dest=argparse.SUPPRESS, default=argparse.SUPPRESS, help=None):
        super().__init__(option_strings, dest, nargs=0, default=default, help=help)

    def __call__(self, parser, namespace, values, option_string=None):
        print(f"{parser.prog} {__version__}", file=sys.stderr)
        parser.exit(0)


def _fractions(text: str):
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected exactly three fractions: train,val,test")
    if any(p < 0 for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
        raise argparse.ArgumentTypeError(f"fractions must be non-negative and sum to 1, got {text}")
    return parts


def _key_value(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key, value


def _thresholds(text: str):
    if text.count(":") == 2:
        start, stop, n = text.split(":")
        try:
            return [float(t) for t in np.linspace(float(start), float(stop), int(n))]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad range {text!r}") from None
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# dataset subcommands


def _write_removed(path, rows) -> None:
    if path:
        Path(path).write_text("".join("\t".join(map(str, r)) + "\n" for r in rows), encoding="utf-8")


def cmd_prep_dedup(args):
    manifest = ds.read_manifest(args.manifest)
    kept, removed = ds.dedup_exact(manifest.samples, manifest.loader())
    _emit(ds.format_manifest(manifest.with_samples(kept)), args.out)
    rows = [(s.sample_id, dup) for s, dup in removed]
    _write_removed(args.removed, rows)
    if not args.removed:
        for sid, dup in rows:
            _log(f"removed {sid} (duplicate of {dup})")
    _log(f"dedup: kept {len(kept)}, removed {len(removed)}")


def cmd_prep_filter(args):
    manifest = ds.read_manifest(args.manifest)
    kept, removed = ds.filter_brightness(manifest.samples, manifest.loader(), args.low, args.high)
    _emit(ds.format_manifest(manifest.with_samples(kept)), args.out)
    _write_removed(args.removed, [(s.sample_id, repr(mean)) for s, mean in removed])
    _log(f"brightness filter [{args.low}, {args.high}]: kept {len(kept)}, removed {len(removed)}")


def cmd_prep_split(args):
    manifest = ds.read_manifest(args.manifest)
    splitter = ds.split_person_disjoint if args.mode == "person" else ds.split_stratified
    split = splitter(manifest.samples, args.fractions, args.seed)
    samples = split.apply(manifest.samples)
    _emit(ds.format_manifest(manifest.with_samples(samples, split.fractions)), args.out)
    total = len(samples) or 1
    _log("split " + ", ".join(
        f"{name}={len(getattr(split, name))} ({len(getattr(split, name)) / total:.2%})" for name in ds.SPLITS
    ))


# --------------------------------------------------------------------------
# identity subcommands


def _read_embeddings(path) -> list[Embedding]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        modality, *values = line.split()
        try:
            out.append(Embedding(np.array([float(v) for v in values]), modality))
        except ValueError as exc:
            raise DomainError(f"{path}:{lineno}: {exc}") from None
    return out


def _open_db(path, dim) -> IdentityDB:
    p = Path(path)
    return IdentityDB.load(p) if p.exists() else IdentityDB(dim)


def cmd_enroll(args):
    db = _open_db(args.db, args.dim)
    if args.embeddings:
        captures = _read_embeddings(args.embeddings)
    else:
        captures = [mock_embedding(args.mock_seed, db.dim, args.noise, k, args.modality) for k in range(args.captures)]
    rec = enroll(db, args.name, captures, args.min_rgb)
    db.save(args.db)
    counts = f"rgb={rec.rgb.count if rec.rgb else 0}\tir={rec.ir.count if rec.ir else 0}"
    _emit(f"{rec.id}\t{rec.name}\t{counts}\n", args.out)


def cmd_identify(args):
    db = IdentityDB.load(args.db)
    thresholds = {"rgb": args.rgb_threshold, "ir": args.ir_threshold}
    lines, changed = [], False
    for i, q in enumerate(_read_embeddings(args.embeddings)):
        res = identify(db, q, thresholds[q.modality])
        sim = "-" if res.similarity is None else repr(res.similarity)
        if res.matched:
            lines.append(f"{i}\t{q.modality}\tmatch\t{res.id}\t{sim}")
            if args.reinforce:
                reinforce(db, res.id, q)
                changed = True
        elif args.auto_register:
            rec = auto_register(db, q)
            changed = True
            lines.append(f"{i}\t{q.modality}\tregistered\t{rec.id}\t{sim}")
        else:
            lines.append(f"{i}\t{q.modality}\tunmatched\t-\t{sim}")
    if changed:
        db.save(args.db)
    _emit("".join(l + "\n" for l in lines), args.out)


# --------------------------------------------------------------------------
# pipeline


def cmd_run(args):
    config = parse_config(Path(args.config).read_text(encoding="utf-8")) if args.config else PipelineConfig()
    if args.set:
        config = config_from_items(args.set, config)
    if args.scenario is None:
        raise DomainError("no inference backend available: pass --scenario to drive the scripted backends")
    script = read_scenario(args.scenario)
    frames = load_frame_dir(args.frames) if args.frames else script.bundles()
    db = _open_db(args.db, script.dim) if args.db else None
    outputs, state = run_stream(frames, scripted_backends(script), config, db)
    _emit(format_trace(outputs), args.out)
    if db is not None and (config.auto_register or config.reinforce):
        db.save(args.db)
    if args.figure:
        from .plotting import plot_timeline

        plot_timeline(outputs, args.figure)
    degraded = sum(o.degraded for o in outputs)
    _log(f"run: {len(outputs)} frames, final mode {state.mode.value}, {degraded} degraded")


# --------------------------------------------------------------------------
# evaluation


def _trial_set(args) -> ev.IdTrialSet:
    if args.trials:
        if not args.db:
            raise DomainError("--trials requires --db")
        return ev.parse_trials(Path(args.trials).read_text(encoding="utf-8"), IdentityDB.load(args.db))
    return ev.synthetic_trials(args.registered, args.unregistered, args.queries, dim=args.dim,
                               noise=args.noise, modality=args.modality, seed=args.seed)


def cmd_evaluate_id(args):
    trials = _trial_set(args)
    m = ev.evaluate_identification(trials, args.rgb_threshold, args.ir_threshold)
    threshold = args.rgb_threshold if args.modality == "rgb" else args.ir_threshold
    point = ev.SweepPoint(threshold, m.far, m.frr, m.misid_rate, m.accuracy)
    _emit(ev.metrics_csv([point]), args.out)
    _log(ev.metrics_table([point]))
    _log(f"queries: {m.registered_queries} registered, {m.unregistered_queries} unregistered; "
         f"FA={m.false_accepts} FR={m.false_rejects} misid={m.misidentifications}")


def cmd_sweep(args):
    trials = _trial_set(args)
    points = ev.sweep_threshold(trials, args.modality, args.thresholds)
    _emit(ev.metrics_csv(points), args.out)
    _log(ev.metrics_table(points))
    if args.figure:
        from .plotting import plot_sweep

        plot_sweep(points, args.figure)


def _read_pairs(path):
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#") or line.lower().startswith("truth"):
            continue
        parts = line.replace("\t", ",").split(",")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except (ValueError, IndexError):
            raise DomainError(f"{path}:{lineno}: expected 'truth,predicted'") from None
    return pairs


def cmd_evaluate_gaze(args):
    pairs = _read_pairs(args.pairs)
    if args.names:
        cm = ev.confusion(pairs, args.classes, tuple(args.names.split(",")))
    elif args.classes == 9:
        cm = ev.gaze_confusion(pairs)
    else:
        cm = ev.confusion(pairs, args.classes)
    _emit(ev.confusion_csv(cm), args.out)
    _log(ev.confusion_table(cm))
    _log(f"accuracy {ev.accuracy(cm):.4f}")
    for name, r in zip(cm.class_names, ev.per_class_recall(cm)):
        _log(f"recall {name}: " + ("-" if r is None else f"{r:.4f}"))
    if args.positive is not None:
        _log(f"positive-class recall ({args.positive}): {ev.recall(cm, args.positive):.4f}")
    if args.figure:
        from .plotting import plot_confusion

        plot_confusion(cm, args.figure)


# --------------------------------------------------------------------------


def _add_trial_options(p):
    p.add_argument("--db", help="identity database (with --trials)")
    p.add_argument("--trials", help="trial file: '<registered|unregistered> <label> <modality> <values...>'")
    p.add_argument("--registered", type=int, default=15)
    p.add_argument("--unregistered", type=int, default=10)
    p.add_argument("--queries", type=int, default=20)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--modality", choices=("rgb", "ir"), default="rgb")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occdms", description=__doc__.split("\n\n")[0].strip(),
                                     allow_abbrev=False)
    parser.add_argument("--version", action=_VersionAction, help="print the version to stderr and exit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help):
        p = sub.add_parser(name, help=help, allow_abbrev=False)
        p.set_defaults(func=func)
        return p

    p = add("prep-dedup", cmd_prep_dedup, "drop images whose dHash repeats an earlier one")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--removed", help="write removed sample ids with the surviving duplicate")

    p = add("prep-filter", cmd_prep_filter, "drop images with extreme mean brightness")
    p.add_argument("--manifest", required=True)
    p.add_argument("--low", type=float, default=20.0)
    p.add_argument("--high", type=float, default=235.0)
    p.add_argument("--out")
    p.add_argument("--removed")

    p = add("prep-split", cmd_prep_split, "assign train/val/test splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("person", "stratified"), required=True)
    p.add_argument("--fractions", type=_fractions, required=True, help="train,val,test")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")

    p = add("enroll", cmd_enroll, "register a new identity")
    p.add_argument("--db", required=True)
    p.add_argument("--name", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--embeddings", help="file with '<modality> <values...>' per line")
    src.add_argument("--mock-seed", type=int, help="generate captures with the mock embedding generator")
    p.add_argument("--captures", type=int, default=3)
    p.add_argument("--modality", choices=("rgb", "ir"), default="rgb")
    p.add_argument("--dim", type=int, default=128, help="dimension for a new database")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--min-rgb", type=int, default=3, help="minimum RGB captures")
    p.add_argument("--out")

    p = add("identify", cmd_identify, "match query embeddings against the database")
    p.add_argument("--db", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--rgb-threshold", type=float, default=DEFAULT_THRESHOLDS["rgb"])
    p.add_argument("--ir-threshold", type=float, default=DEFAULT_THRESHOLDS["ir"])
    p.add_argument("--auto-register", action="store_true")
    p.add_argument("--reinforce", action="store_true")
    p.add_argument("--out")

    p = add("run", cmd_run, "run the monitoring pipeline and write a frame trace")
    p.add_argument("--scenario", help="scenario file driving the scripted backends")
    p.add_argument("--frames", help="directory of frame_<n>.rgb.pnm / frame_<n>.ir.pnm pairs")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", type=_key_value, action="append", metavar="KEY=VALUE",
                   help="override one configuration value (repeatable)")
    p.add_argument("--db", help="identity database used for periodic identification")
    p.add_argument("--out")
    p.add_argument("--figure", help="write a mode/gaze timeline figure")

    p = add("evaluate-id", cmd_evaluate_id, "FAR/FRR/accuracy of identification")
    _add_trial_options(p)
    p.add_argument("--rgb-threshold", type=float, default=DEFAULT_THRESHOLDS["rgb"])
    p.add_argument("--ir-threshold", type=float, default=DEFAULT_THRESHOLDS["ir"])

    p = add("sweep", cmd_sweep, "FAR/FRR over a range of thresholds")
    _add_trial_options(p)
    p.add_argument("--thresholds", type=_thresholds, default=_thresholds("0:1:101"),
                   help="start:stop:count or a comma list (default 0:1:101)")
    p.add_argument("--figure")

    p = add("evaluate-gaze", cmd_evaluate_gaze, "confusion matrix, accuracy and recall")
    p.add_argument("--pairs", required=True, help="CSV of truth,predicted class (1-based)")
    p.add_argument("--classes", type=int, default=9)
    p.add_argument("--names", help="comma-separated class names")
    p.add_argument("--positive", type=int, help="also report recall for this class")
    p.add_argument("--out")
    p.add_argument("--figure")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except (DomainError, *DOMAIN_ERRORS) as exc:
        record = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
