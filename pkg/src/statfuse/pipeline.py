"""Training and fusion orchestration.

A :class:`FusionSpec` lists fusion steps in chain order. Each step is a
single variable or a block of variables fused jointly. Training fits the
per-step models on the donor, predicts them back onto the donor to form the
expectation matrix, and builds the matching structures. Fusion predicts the
same models on recipient chunks and simulates ``M`` implicates, feeding each
implicate's simulated values into later steps.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy
import yaml
from scipy.spatial import cKDTree

from . import __version__
from .gbdt import Objective, TrainParams, TreeEnsemble, fit_gbm, load_ensemble, predict, save_ensemble
from .matchcore import (
    DEFAULT_K,
    DEFAULT_PERCENTILES,
    DonorPool,
    ScalingParams,
    build_donor_pools,
    knn_search,
    robust_scale_apply,
    robust_scale_fit,
)
from .microdata import Microdata, SchemaError, check_compatibility
from .prescreen import family_for, prescreen
from .rng import row_keys, uniforms

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "statfuse-bundle"
BUNDLE_VERSION = 1
PARTIAL_MARKER = "PARTIAL"


# -- specification ---------------------------------------------------------------------


@dataclass
class FusionSpec:
    """What to fuse and how.

    ``steps`` holds one list of variable names per step; a list of length
    one is a single-variable step, longer lists are blocks.
    """

    steps: list
    predictors: list
    percentiles: tuple = DEFAULT_PERCENTILES
    K: int = DEFAULT_K
    block_k: int = 10
    M: int = 40
    seed: int = 0
    reduction: int | None = None
    chunk_rows: int = 50_000
    screen: bool = True
    screen_threshold: float = 0.95
    exact_knn: bool = True
    train: TrainParams = field(default_factory=TrainParams)

    def __post_init__(self):
        self.steps = [[s] if isinstance(s, str) else list(s) for s in self.steps]
        self.predictors = list(self.predictors)
        self.percentiles = tuple(float(p) for p in self.percentiles)
        if not self.steps or any(len(s) == 0 for s in self.steps):
            raise ValueError("every step needs at least one variable")
        names = self.fusion_variables
        if len(set(names)) != len(names):
            raise ValueError("fusion steps must name disjoint variables")
        overlap = set(names) & set(self.predictors)
        if overlap:
            raise ValueError(f"variables both predictor and fusion target: {sorted(overlap)}")
        P = np.asarray(self.percentiles)
        if P.size < 2 or np.any(P <= 0) or np.any(P >= 1) or np.any(np.diff(P) <= 0):
            raise ValueError("percentiles: need at least two, strictly increasing inside (0, 1)")
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.K < 1 or self.block_k < 1:
            raise ValueError("K and block_k must be positive")
        if self.chunk_rows < 1:
            raise ValueError("chunk_rows must be positive")
        if self.reduction is not None and self.reduction < 1:
            raise ValueError("reduction must be a positive cluster count")

    @property
    def fusion_variables(self) -> list:
        return [v for s in self.steps for v in s]

    def to_dict(self) -> dict:
        return {
            "steps": [list(s) for s in self.steps],
            "predictors": list(self.predictors),
            "percentiles": list(self.percentiles),
            "K": self.K,
            "block_k": self.block_k,
            "M": self.M,
            "seed": self.seed,
            "reduction": self.reduction,
            "chunk_rows": self.chunk_rows,
            "screen": self.screen,
            "screen_threshold": self.screen_threshold,
            "exact_knn": self.exact_knn,
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        if "train" in d:
            d["train"] = TrainParams.from_dict(d["train"] or {})
        return cls(**d)


def load_spec(path) -> FusionSpec:
    with open(path) as fh:
        return FusionSpec.from_dict(yaml.safe_load(fh) or {})


# -- bundle ----------------------------------------------------------------------------


@dataclass
class StepModel:
    """Everything needed to fuse one step."""

    variables: list
    kinds: dict
    levels: dict  # categorical variable -> level tuple
    features: dict  # sub-model name -> feature list
    models: dict  # sub-model name -> TreeEnsemble
    screens: dict = field(default_factory=dict)
    scaling: ScalingParams | None = None
    pool: DonorPool | None = None
    block_scaled: np.ndarray | None = None  # blocks: scaled donor expectations
    block_records: np.ndarray | None = None  # blocks: donor values (categoricals as codes)

    @property
    def is_block(self) -> bool:
        return len(self.variables) > 1


@dataclass
class FusionBundle:
    spec: FusionSpec
    steps: list
    manifest: dict


def _sub_models(kind: str, n_levels: int, P) -> list:
    if kind == "categorical":
        return ["prob"]
    names = ["mean"] + [f"q{p:g}" for p in P]
    return (["nonzero"] if kind == "semicontinuous" else []) + names


def _objective(sub: str, n_levels: int, P) -> Objective:
    if sub == "prob":
        return Objective.binary() if n_levels == 2 else Objective.multiclass(n_levels)
    if sub == "nonzero":
        return Objective.binary()
    if sub == "mean":
        return Objective.l2()
    return Objective.pinball(float(sub[1:]))


def _expectations(step: StepModel, var: str, frame: pd.DataFrame, P) -> np.ndarray:
    """Unscaled expectation columns of one variable.

    Categorical: one probability per level. Continuous: mean then quantiles.
    Semicontinuous: probability of a nonzero value, then the conditional
    mean and quantiles given a nonzero value.
    """
    kind = step.kinds[var]
    if kind == "categorical":
        pr = predict(step.models[f"{var}:prob"], frame)
        return np.column_stack([1.0 - pr[:, 0], pr[:, 0]]) if pr.shape[1] == 1 else pr
    cols = [predict(step.models[f"{var}:mean"], frame)[:, 0]]
    cols += [predict(step.models[f"{var}:q{p:g}"], frame)[:, 0] for p in P]
    E = np.column_stack(cols)
    if kind == "semicontinuous":
        E = np.column_stack([predict(step.models[f"{var}:nonzero"], frame)[:, 0], E])
    return E


def train_fusion(donor: Microdata, spec: FusionSpec, progress=None) -> FusionBundle:
    """Fit the chain of fusion models on the donor.

    Chained steps train on the donor's observed values of earlier fusion
    variables. Degenerate sub-models (single class, zero variance) fall back
    to constants and are recorded in the manifest.
    """
    t0 = time.time()
    missing = [v for v in spec.predictors + spec.fusion_variables if not donor.has(v)]
    if missing:
        raise SchemaError(f"donor lacks columns {missing}")
    roles = {v: donor.spec(v).role for v in spec.predictors}
    bad = [v for v, r in roles.items() if r != "predictor"]
    if bad:
        raise SchemaError(f"columns used as predictors do not have the predictor role: {bad}")
    P = spec.percentiles
    w = donor.weights
    frame = donor.frame
    earlier: list = []
    steps = []
    degenerate = []
    for si, variables in enumerate(spec.steps):
        kinds = {v: donor.spec(v).kind for v in variables}
        levels = {v: tuple(donor.spec(v).levels) for v in variables if kinds[v] == "categorical"}
        step = StepModel(list(variables), kinds, levels, {}, {})
        for var in variables:
            kind = kinds[var]
            nlev = len(levels.get(var, ()))
            z = donor.values(var)
            for sub in _sub_models(kind, nlev, P):
                rows = np.arange(donor.n)
                if kind == "categorical":
                    y = z
                elif sub == "nonzero":
                    y = (z != 0).astype(np.float64)
                else:
                    y = z.astype(np.float64)
                    if kind == "semicontinuous":
                        rows = np.flatnonzero(z != 0)
                # screening once per response: the class model, the zero
                # indicator, or the magnitude (shared by mean and quantiles)
                screen_key = "magnitude" if sub not in ("prob", "nonzero") else sub
                if screen_key not in step.screens.get(var, {}):
                    step.screens.setdefault(var, {})[screen_key] = _screen(
                        frame.iloc[rows], spec, y[rows], w[rows], kind, nlev, sub, earlier)
                feats = step.screens[var][screen_key]["selected"]
                name = f"{var}:{sub}"
                step.features[name] = feats
                if rows.size == 0:
                    model = fit_gbm(frame.iloc[:1], np.zeros(1), np.ones(1), _objective(sub, nlev, P),
                                    spec.train, feature_names=[])
                else:
                    model = fit_gbm(frame.iloc[rows], y[rows], w[rows], _objective(sub, nlev, P),
                                    spec.train, feature_names=feats)
                step.models[name] = model
                if model.degenerate:
                    degenerate.append(name)
                log.info("event=model_fit step=%d model=%s features=%d iterations=%d leaves=%d",
                         si, name, len(feats), model.n_iterations, model.num_leaves)
        _build_matching(step, donor, spec)
        steps.append(step)
        earlier.extend(variables)
        if progress:
            progress(si, variables)
    manifest = {
        "format": BUNDLE_FORMAT,
        "format_version": BUNDLE_VERSION,
        "versions": _versions(),
        "spec": spec.to_dict(),
        "donor_fingerprint": donor.fingerprint(),
        "donor_rows": donor.n,
        "donor_schema": [c.to_dict() for c in donor.columns if c.name in set(spec.predictors + spec.fusion_variables)],
        "screens": {v: s for st in steps for v, s in st.screens.items()},
        "degenerate_models": degenerate,
    }
    log.info("event=train_done steps=%d seconds=%.3f", len(steps), time.time() - t0)
    return FusionBundle(spec, steps, manifest)


def _screen(frame, spec, y, w, kind, nlev, sub, earlier) -> dict:
    if not spec.screen or len(y) < 10:
        return {"selected": list(spec.predictors) + list(earlier), "screened": False}
    if sub == "prob":
        family = family_for("categorical", nlev)
    elif sub == "nonzero":
        family = "binomial"
    else:
        family = "gaussian"
    res = prescreen(frame, spec.predictors, y, family, w, spec.screen_threshold, forced=earlier)
    out = res.to_dict()
    out["screened"] = True
    return out


def _build_matching(step: StepModel, donor: Microdata, spec: FusionSpec) -> None:
    P = spec.percentiles
    frame = donor.frame
    if not step.is_block:
        var = step.variables[0]
        kind = step.kinds[var]
        if kind == "categorical":
            return
        z = donor.values(var).astype(np.float64)
        rows = np.flatnonzero(z != 0) if kind == "semicontinuous" else np.arange(donor.n)
        if rows.size == 0:
            step.pool = None
            return
        sub = frame.iloc[rows]
        E = _expectations(step, var, sub, P)
        if kind == "semicontinuous":
            E = E[:, 1:]
        step.scaling = robust_scale_fit(E)
        S = robust_scale_apply(step.scaling, E)
        step.pool = build_donor_pools(S, E, z[rows], spec.K, P, reduction=spec.reduction,
                                      scaling=step.scaling, seed=spec.seed, exact=spec.exact_knn)
        return
    E = np.column_stack([_expectations(step, v, frame, P) for v in step.variables])
    step.scaling = robust_scale_fit(E)
    step.block_scaled = robust_scale_apply(step.scaling, E)
    step.block_records = np.column_stack([donor.values(v).astype(np.float64) for v in step.variables])


def _versions() -> dict:
    return {"statfuse": __version__, "numpy": np.__version__, "pandas": pd.__version__,
            "scipy": scipy.__version__}


# -- bundle I/O ------------------------------------------------------------------------


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def save_bundle(bundle: FusionBundle, path) -> Path:
    """Write a bundle directory: manifest, ensembles, scaling and pools."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "models").mkdir(exist_ok=True)
    steps_meta = []
    for si, st in enumerate(bundle.steps):
        model_files = {}
        for name, model in st.models.items():
            fname = f"models/step{si}_{_safe(name)}.jsonl"
            save_ensemble(model, root / fname)
            model_files[name] = fname
        meta = {
            "variables": st.variables,
            "kinds": st.kinds,
            "levels": {k: list(v) for k, v in st.levels.items()},
            "features": st.features,
            "models": model_files,
            "scaling": st.scaling.to_dict() if st.scaling is not None else None,
        }
        arrays = {}
        if st.pool is not None:
            arrays.update({f"pool_{k}": v for k, v in st.pool.to_arrays().items()})
        if st.block_scaled is not None:
            arrays["block_scaled"] = st.block_scaled
            arrays["block_records"] = st.block_records
        if arrays:
            meta["arrays"] = f"step{si}.npz"
            np.savez(root / meta["arrays"], **arrays)
        steps_meta.append(meta)
    manifest = dict(bundle.manifest)
    manifest["steps"] = steps_meta
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return root


def load_bundle(path) -> FusionBundle:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no bundle manifest at {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"{root} is not a fusion bundle")
    if manifest.get("format_version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {manifest.get('format_version')}")
    spec = FusionSpec.from_dict(manifest["spec"])
    steps = []
    for meta in manifest["steps"]:
        st = StepModel(
            variables=list(meta["variables"]),
            kinds=dict(meta["kinds"]),
            levels={k: tuple(v) for k, v in meta["levels"].items()},
            features={k: list(v) for k, v in meta["features"].items()},
            models={k: load_ensemble(root / f) for k, f in meta["models"].items()},
            screens={v: manifest["screens"].get(v, {}) for v in meta["variables"]},
            scaling=ScalingParams.from_dict(meta["scaling"]) if meta["scaling"] else None,
        )
        if "arrays" in meta:
            with np.load(root / meta["arrays"]) as z:
                if "pool_anchors" in z:
                    st.pool = DonorPool.from_arrays({k[5:]: z[k] for k in z.files if k.startswith("pool_")})
                if "block_scaled" in z:
                    st.block_scaled = z["block_scaled"]
                    st.block_records = z["block_records"]
        steps.append(st)
    return FusionBundle(spec, steps, {k: v for k, v in manifest.items() if k != "steps"})


# -- simulation kernels ----------------------------------------------------------------


def fuse_categorical(probabilities, uniform) -> np.ndarray:
    """Inverse-CDF draw of level indices from rows of class probabilities.

    Rows are renormalised; levels with zero probability are never drawn.
    """
    Pm = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    u = np.broadcast_to(np.asarray(uniform, dtype=np.float64), (Pm.shape[0],))
    if np.any(Pm < 0):
        raise ValueError("negative probability")
    tot = Pm.sum(axis=1)
    if np.any(tot <= 0):
        raise ValueError("probability row sums to zero")
    cdf = np.cumsum(Pm, axis=1) / tot[:, None]
    idx = np.sum(cdf <= u[:, None], axis=1)
    # never land on a trailing zero-probability level through rounding
    last = Pm.shape[1] - 1 - np.argmax(Pm[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)


def fuse_continuous(scaled_rows, pool: DonorPool, uniform, exact: bool = True) -> np.ndarray:
    """Match each row to its nearest anchor and draw from that anchor's pool."""
    anchor = pool.nearest_anchor(scaled_rows, exact=exact)
    return pool.draw(anchor, uniform)


def fuse_semicontinuous(zero_prob, u_zero, continuous) -> np.ndarray:
    """Zero where ``u_zero < zero_prob``, else the continuous draw.

    ``continuous`` is an array of candidate nonzero values, or a callable
    taking the boolean mask of nonzero rows and returning their values.
    """
    zero_prob = np.asarray(zero_prob, dtype=np.float64)
    nonzero = np.asarray(u_zero) >= zero_prob
    out = np.zeros(zero_prob.shape[0])
    if nonzero.any():
        vals = continuous(nonzero) if callable(continuous) else np.asarray(continuous)[nonzero]
        out[nonzero] = vals
    return out


def fuse_block(scaled_rows, donor_scaled, donor_records, block_k: int, uniform,
               exact: bool = True, tree: cKDTree | None = None) -> np.ndarray:
    """Copy whole donor records from one of the ``block_k`` nearest donors."""
    R = np.asarray(donor_records)
    if block_k > R.shape[0]:
        raise ValueError(f"block_k={block_k} exceeds {R.shape[0]} donor rows")
    S = np.atleast_2d(np.asarray(scaled_rows, dtype=np.float64))
    if np.asarray(donor_scaled).shape[1] == 0:
        idx = np.tile(np.arange(block_k), (S.shape[0], 1))
    else:
        idx, _ = knn_search(donor_scaled, S, block_k, exact=exact, tree=tree)
    u = np.broadcast_to(np.asarray(uniform, dtype=np.float64), (S.shape[0],))
    pick = np.minimum((u * block_k).astype(np.int64), block_k - 1)
    return R[idx[np.arange(S.shape[0]), pick]]


# -- fusion ----------------------------------------------------------------------------


@dataclass
class ImplicateSet:
    """Simulated fusion variables for ``M`` implicates.

    ``frame`` is long format: recipient id, implicate (1..M), one column
    per fusion variable, sorted by implicate then recipient row order.
    """

    frame: pd.DataFrame
    id_name: str
    variables: list
    M: int
    files: list = field(default_factory=list)

    def implicate(self, m: int) -> pd.DataFrame:
        f = self.frame[self.frame["implicate"] == m]
        return f.drop(columns="implicate").reset_index(drop=True)

    @property
    def n_rows(self) -> int:
        return len(self.frame) // max(self.M, 1)


def _as_level_frame(values: dict, step_levels: dict) -> dict:
    out = {}
    for v, arr in values.items():
        if v in step_levels:
            out[v] = pd.Categorical.from_codes(arr.astype(np.int64), categories=list(step_levels[v]))
        else:
            out[v] = arr
    return out


class _Writer:
    """Append-only CSV writer with a partial-output marker on failure."""

    def __init__(self, out_dir, M, long_format, id_name, variables):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.long = long_format
        self.files = []
        self.started = set()
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        marker = self.out_dir / PARTIAL_MARKER
        if marker.exists():
            marker.unlink()
        # long output is staged per implicate and joined at the end so that
        # row order never depends on chunking
        self.parts = [self.out_dir / f"implicate_{m:03d}.csv" for m in range(1, M + 1)]
        if long_format:
            self.parts = [p.with_suffix(".part") for p in self.parts]
            self.files = [self.out_dir / "implicates.csv"]
        else:
            self.files = list(self.parts)
        for f in self.files + self.parts:
            if f.exists():
                f.unlink()

    def write(self, m: int, df: pd.DataFrame):
        if self.out_dir is None:
            return
        path = self.parts[m - 1]
        header = path not in self.started
        if not self.long:
            df = df.drop(columns="implicate")
        df.to_csv(path, mode="a", header=header, index=False, float_format="%.17g")
        self.started.add(path)

    def mark_partial(self, exc):
        if self.out_dir is None:
            return
        try:
            (self.out_dir / PARTIAL_MARKER).write_text(f"fusion aborted: {exc}\n")
        except OSError:
            pass

    def finish(self, meta: dict):
        if self.out_dir is None:
            return
        if self.long:
            with open(self.files[0], "wb") as out:
                for i, part in enumerate(self.parts):
                    with open(part, "rb") as fh:
                        if i:
                            fh.readline()  # header
                        shutil.copyfileobj(fh, out)
                    part.unlink()
        index = dict(meta)
        index["files"] = [f.name for f in self.files]
        with open(self.out_dir / "index.json", "w") as fh:
            json.dump(index, fh, indent=1)


def load_implicates(path) -> ImplicateSet:
    """Read implicates written by :func:`fuse` (either layout)."""
    root = Path(path)
    ipath = root / "index.json"
    if not ipath.exists():
        raise FileNotFoundError(f"no implicate index at {ipath}")
    if (root / PARTIAL_MARKER).exists():
        raise ValueError(f"{root} holds partial output from an aborted run")
    with open(ipath) as fh:
        index = json.load(fh)
    id_name = index["id"]
    levels = index.get("levels", {})
    dtypes = {id_name: str}
    dtypes.update({v: str for v in levels})
    frames = []
    for m, name in enumerate(index["files"], start=1):
        f = pd.read_csv(root / name, dtype=dtypes, keep_default_na=False)
        if not index["long_format"]:
            f.insert(1, "implicate", m)
        frames.append(f)
    frame = pd.concat(frames, ignore_index=True)
    frame["implicate"] = frame["implicate"].astype(np.int64)
    for v, lv in levels.items():
        frame[v] = pd.Categorical(frame[v], categories=list(lv))
    return ImplicateSet(frame, id_name, list(index["variables"]), int(index["M"]),
                        [str(root / n) for n in index["files"]])


def fuse(bundle: FusionBundle, recipient: Microdata, M: int | None = None, seed: int | None = None,
         out_dir=None, long_format: bool = False, chunk_rows: int | None = None,
         keep: bool = True) -> ImplicateSet:
    """Simulate ``M`` implicates of the fusion variables for ``recipient``.

    Recipient rows are processed in chunks; output is appended to disk per
    chunk when ``out_dir`` is given (one CSV per implicate, or a single long
    CSV with ``long_format``). Every random draw is keyed by
    ``(seed, implicate, step, row id)``, so chunk size and row order do not
    change the result.
    """
    spec = bundle.spec
    M = spec.M if M is None else int(M)
    seed = spec.seed if seed is None else int(seed)
    chunk = int(chunk_rows or spec.chunk_rows)
    if M < 1:
        raise ValueError("M must be at least 1")
    report = check_compatibility_bundle(bundle, recipient)
    if report:
        raise SchemaError("recipient incompatible with bundle: " + "; ".join(report))
    id_name = recipient.id_name or "row"
    ids = recipient.ids
    keys = row_keys(ids)
    variables = spec.fusion_variables
    writer = _Writer(out_dir, M, long_format, id_name, variables)
    parts = {m: [] for m in range(1, M + 1)}
    n_chunks = 0
    t0 = time.time()
    try:
        for start in range(0, recipient.n, chunk):
            stop = min(start + chunk, recipient.n)
            sims = _fuse_chunk(bundle, recipient.frame.iloc[start:stop].reset_index(drop=True),
                               keys[start:stop], M, seed)
            for m in range(1, M + 1):
                df = pd.DataFrame({id_name: ids[start:stop] if recipient.id_name is None
                                   else recipient.frame[id_name].iloc[start:stop].to_numpy(),
                                   "implicate": m})
                for v in variables:
                    df[v] = sims[m][v]
                writer.write(m, df)
                if keep:
                    parts[m].append(df)
            n_chunks += 1
            log.info("event=chunk_done rows=%d-%d implicates=%d", start, stop, M)
    except OSError as exc:
        writer.mark_partial(exc)
        raise
    # index.json holds only what determines the output, so reruns compare byte for byte
    writer.finish({"M": M, "seed": seed, "rows": recipient.n, "long_format": long_format,
                   "id": id_name, "variables": variables,
                   "levels": {v: list(lv) for v, lv in _levels_in(bundle).items()}})
    log.info("event=fuse_done rows=%d implicates=%d chunk_rows=%d chunks=%d seconds=%.3f",
             recipient.n, M, chunk, n_chunks, time.time() - t0)
    frame = pd.concat([pd.concat(parts[m], ignore_index=True) for m in range(1, M + 1)],
                      ignore_index=True) if keep else pd.DataFrame()
    return ImplicateSet(frame, id_name, variables, M, [str(f) for f in writer.files])


def check_compatibility_bundle(bundle: FusionBundle, recipient: Microdata) -> list:
    """Problems preventing ``recipient`` from being fused with ``bundle``."""
    problems = []
    schema = {c["name"]: c for c in bundle.manifest.get("donor_schema", [])}
    for name in bundle.spec.predictors:
        if not recipient.has(name):
            problems.append(f"{name}: predictor missing from recipient")
            continue
        d = schema.get(name)
        if d is None:
            continue
        r = recipient.spec(name)
        if d["kind"] != r.kind:
            problems.append(f"{name}: kind differs (donor {d['kind']}, recipient {r.kind})")
        elif r.is_categorical and list(d.get("levels") or []) != list(r.levels):
            problems.append(f"{name}: levels differ (donor {d.get('levels')}, recipient {list(r.levels)})")
    for v in bundle.spec.fusion_variables:
        if recipient.has(v):
            problems.append(f"{v}: fusion variable present in recipient")
    return problems


def _fuse_chunk(bundle: FusionBundle, frame: pd.DataFrame, keys, M: int, seed: int) -> dict:
    spec = bundle.spec
    P = spec.percentiles
    n = len(frame)
    sims = {m: {} for m in range(1, M + 1)}
    fused_so_far: list = []
    for si, st in enumerate(bundle.steps):
        chained = any(f in fused_so_far for feats in st.features.values() for f in feats)
        shared = None
        for m in range(1, M + 1):
            if chained:
                fr = frame.copy()
                for v, col in _as_level_frame(sims[m], _levels_in(bundle)).items():
                    fr[v] = col
            else:
                fr = frame
            if shared is None or chained:
                E = {v: _expectations(st, v, fr, P) for v in st.variables}
                if not chained:
                    shared = E
            else:
                E = shared
            out = _simulate_step(st, E, keys, seed, m, si, spec)
            sims[m].update(out)
        fused_so_far.extend(st.variables)
    return {m: _as_level_frame(sims[m], _levels_in(bundle)) for m in sims}


def _levels_in(bundle: FusionBundle) -> dict:
    out = {}
    for st in bundle.steps:
        out.update(st.levels)
    return out


def _simulate_step(st: StepModel, E: dict, keys, seed, m, si, spec) -> dict:
    n = len(keys)
    if st.is_block:
        D = np.column_stack([E[v] for v in st.variables])
        S = robust_scale_apply(st.scaling, D)
        if getattr(st, "_tree", None) is None:
            st._tree = cKDTree(st.block_scaled) if st.block_scaled.shape[1] else None
        k = min(spec.block_k, st.block_records.shape[0])
        rec = fuse_block(S, st.block_scaled, st.block_records, k,
                         uniforms(keys, seed, m, si, 0), exact=spec.exact_knn, tree=st._tree)
        return {v: rec[:, j] for j, v in enumerate(st.variables)}
    var = st.variables[0]
    kind = st.kinds[var]
    e = E[var]
    if kind == "categorical":
        return {var: fuse_categorical(e, uniforms(keys, seed, m, si, 0))}
    u_draw = uniforms(keys, seed, m, si, 1)
    if kind == "continuous":
        S = robust_scale_apply(st.scaling, e)
        return {var: fuse_continuous(S, st.pool, u_draw, exact=spec.exact_knn)}
    zero_prob = 1.0 - e[:, 0]
    if st.pool is None:
        return {var: np.zeros(n)}

    def nonzero_values(mask):
        S = robust_scale_apply(st.scaling, e[mask, 1:])
        return fuse_continuous(S, st.pool, u_draw[mask], exact=spec.exact_knn)

    return {var: fuse_semicontinuous(zero_prob, uniforms(keys, seed, m, si, 0), nonzero_values)}
