"""Command-line entry point: train, fuse, analyze, validate, simulate.

Exit codes: 0 on success, 1 for invalid arguments or contract violations
(schema, spec, compatibility), 2 for I/O failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__

log = logging.getLogger("statfuse")

THREADS_ENV = "STATFUSE_THREADS"
RUN_MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _KVFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        if "event=" not in msg:
            msg = f'event=message text="{msg}"'
        return f"level={record.levelname.lower()} logger={record.name} {msg}"


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    root = logging.getLogger("statfuse")
    for h in list(root.handlers):
        root.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(_KVFormatter())
    root.addHandler(h)
    root.setLevel(level)
    root.propagate = False


def _threads(flag) -> int:
    env = os.environ.get(THREADS_ENV)
    raw = env if env not in (None, "") else flag
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except (ImportError, ValueError):
        pass
    return n


def _csv_list(text) -> list:
    return [t.strip() for t in (text or "").split(",") if t.strip()]


def bytes_per_row(recipient, bundle) -> int:
    """Rough working-set bytes per recipient row during fusion.

    Counts the recipient columns, the expectation and scaled-expectation
    columns of every step, and one double per fused value per implicate.
    """
    n_expect = 0
    for st in bundle.steps:
        for v in st.variables:
            kind = st.kinds[v]
            if kind == "categorical":
                n_expect += len(st.levels[v])
            else:
                n_expect += 1 + len(bundle.spec.percentiles) + (kind == "semicontinuous")
    n_cols = len(recipient.columns)
    M = bundle.spec.M
    return 8 * (n_cols + 2 * n_expect + M * len(bundle.spec.fusion_variables)) + 64


def chunk_rows_for(budget_mb: float, per_row: int) -> int:
    if budget_mb <= 0:
        raise UsageError("memory budget must be positive")
    return max(1, int(budget_mb * 1024 * 1024 // per_row))


def _hash_config(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _write_manifest(path: Path, command: str, config: dict, fingerprints: dict, t0: float,
                    extra: dict | None = None) -> None:
    from .pipeline import _versions

    doc = {
        "command": command,
        "config": config,
        "config_hash": _hash_config(config),
        "versions": _versions(),
        "fingerprints": fingerprints,
        "wall_seconds": round(time.time() - t0, 3),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        doc.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, default=str)


# -- subcommands ---------------------------------------------------------------------


def cmd_train(args, t0):
    from .microdata import load_microdata
    from .pipeline import load_spec, save_bundle, train_fusion

    donor = load_microdata(args.donor, args.donor_schema)
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec = type(spec).from_dict({**spec.to_dict(), "seed": args.seed})
    bundle = train_fusion(donor, spec)
    out = save_bundle(bundle, args.out)
    cfg = {"donor": str(args.donor), "spec": spec.to_dict()}
    _write_manifest(out / RUN_MANIFEST, "train", cfg, {"donor": donor.fingerprint()}, t0,
                    {"threads": args.threads_used})
    log.info("event=train_written path=%s", out)


def cmd_fuse(args, t0):
    from .microdata import load_microdata
    from .pipeline import fuse, load_bundle

    bundle = load_bundle(args.bundle)
    recipient = load_microdata(args.recipient, args.recipient_schema)
    chunk = args.chunk_rows
    if args.memory_mb is not None:
        chunk = chunk_rows_for(args.memory_mb, bytes_per_row(recipient, bundle))
    if chunk is not None and chunk < 1:
        raise UsageError("chunk rows must be >= 1")
    imps = fuse(bundle, recipient, M=args.implicates, seed=args.seed, out_dir=args.out,
                long_format=args.long, chunk_rows=chunk, keep=False)
    cfg = {"bundle": str(args.bundle), "recipient": str(args.recipient), "M": imps.M,
           "seed": bundle.spec.seed if args.seed is None else args.seed, "long": args.long}
    _write_manifest(Path(args.out) / RUN_MANIFEST, "fuse", cfg,
                    {"recipient": recipient.fingerprint(),
                     "donor": bundle.manifest.get("donor_fingerprint")}, t0,
                    {"chunk_rows": chunk or bundle.spec.chunk_rows, "threads": args.threads_used})


def cmd_analyze(args, t0):
    from .analysis import AnalysisRequest, estimate
    from .microdata import load_microdata
    from .pipeline import load_implicates

    recipient = load_microdata(args.recipient, args.recipient_schema)
    imps = load_implicates(args.fused)
    req = AnalysisRequest(args.statistic, args.target, tuple(_csv_list(args.by)),
                          args.replicate_weights, args.confidence)
    table = estimate(imps, recipient, req)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, float_format="%.10g")
    cfg = {"recipient": str(args.recipient), "fused": str(args.fused), "statistic": args.statistic,
           "target": args.target, "by": _csv_list(args.by),
           "replicate_weights": args.replicate_weights, "confidence": args.confidence}
    _write_manifest(out.with_name(out.name + ".manifest.json"), "analyze", cfg,
                    {"recipient": recipient.fingerprint()}, t0)


def cmd_validate(args, t0):
    from .microdata import load_microdata
    from .pipeline import load_bundle
    from .validation import emit_report, internal_validate, validation_curves

    bundle = load_bundle(args.bundle)
    donor = load_microdata(args.donor, args.donor_schema)
    subset_vars = _csv_list(args.subset_vars)
    cells = internal_validate(bundle, donor, subset_vars, M=args.implicates, seed=args.seed,
                              confidence=args.confidence)
    curves = validation_curves(cells, args.window)
    files = emit_report(cells, curves, args.out)
    cfg = {"bundle": str(args.bundle), "donor": str(args.donor), "subset_vars": subset_vars,
           "M": args.implicates, "seed": args.seed, "window": args.window}
    _write_manifest(Path(args.out) / RUN_MANIFEST, "validate", cfg,
                    {"donor": donor.fingerprint()}, t0, {"files": [f.name for f in files]})


def cmd_simulate(args, t0):
    from .synthbench import SynthConfig, load_config, write_population

    cfg = load_config(args.config) if args.config else SynthConfig()
    if args.seed is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    write_population(cfg, args.out)
    _write_manifest(Path(args.out) / RUN_MANIFEST, "simulate", cfg.to_dict(), {}, t0)


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="statfuse", description="Statistical data fusion of survey microdata.")
    p.add_argument("--version", action="version", version=f"statfuse {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (overridden by ${THREADS_ENV})")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="fit fusion models on donor microdata")
    t.add_argument("--donor", required=True, type=Path)
    t.add_argument("--donor-schema", type=Path, default=None)
    t.add_argument("--spec", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", parents=[common], help="simulate implicates for a recipient")
    f.add_argument("--bundle", required=True, type=Path)
    f.add_argument("--recipient", required=True, type=Path)
    f.add_argument("--recipient-schema", type=Path, default=None)
    f.add_argument("--implicates", type=int, default=None)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--out", required=True, type=Path)
    f.add_argument("--long", action="store_true", help="one long CSV instead of one per implicate")
    g = f.add_mutually_exclusive_group()
    g.add_argument("--chunk-rows", type=int, default=None)
    g.add_argument("--memory-mb", type=float, default=None, help="memory budget; sets chunk rows")
    f.set_defaults(func=cmd_fuse)

    a = sub.add_parser("analyze", parents=[common], help="pooled estimates from implicates")
    a.add_argument("--recipient", required=True, type=Path)
    a.add_argument("--recipient-schema", type=Path, default=None)
    a.add_argument("--fused", required=True, type=Path, help="directory written by fuse")
    a.add_argument("--statistic", "--stat", dest="statistic", required=True, choices=["mean", "proportion", "sum", "count", "median"])
    a.add_argument("--target", "--var", dest="target", required=True)
    a.add_argument("--by", default="")
    a.add_argument("--replicate-weights", action="store_true")
    a.add_argument("--confidence", type=float, default=0.90)
    a.add_argument("--out", required=True, type=Path)
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("validate", parents=[common], help="internal validation on the donor")
    v.add_argument("--bundle", required=True, type=Path)
    v.add_argument("--donor", required=True, type=Path)
    v.add_argument("--donor-schema", type=Path, default=None)
    v.add_argument("--subset-vars", required=True)
    v.add_argument("--implicates", type=int, default=40)
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--confidence", type=float, default=0.90)
    v.add_argument("--window", type=float, default=0.1)
    v.add_argument("--out", required=True, type=Path)
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic donor/recipient pair")
    s.add_argument("--config", type=Path, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_simulate)
    return p


def run(argv=None) -> int:
    from .microdata import SchemaError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    t0 = time.time()
    try:
        args.threads_used = _threads(args.threads)
        log.info("event=start command=%s", args.command)
        args.func(args, t0)
    except UsageError as exc:
        print(f"statfuse: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        if getattr(exc, "filename", None):
            msg = f"{exc.filename}: {exc.strerror or exc}"
        else:
            msg = str(exc)
        print(f"statfuse: I/O error: {msg}", file=sys.stderr)
        return 2
    except (SchemaError, ValueError, KeyError, TypeError, yaml.YAMLError) as exc:
        print(f"statfuse: error: {exc}", file=sys.stderr)
        return 1
    log.info("event=done command=%s seconds=%.3f", args.command, time.time() - t0)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
