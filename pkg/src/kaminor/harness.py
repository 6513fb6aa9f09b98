"""Experiment runner: config validation, kind dispatch, artifact files and manifests.

A config is a JSON document::

    {"kind": "baseline", "seed": 7, "formats": ["csv", "json", "svg"],
     "params": {"p": 4, "q": 4, "h": 2, "trials": 500}}

Every run writes ``manifest.json`` listing the config, the seed and the
SHA-256 of every artifact it produced. On failure every file already
written is removed and no manifest is left behind.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np

from . import __version__
from .exterior import mc_baseline, mc_report, minors, random_gaussian_matrix
from .ka import (
    KAEmbedding,
    TargetFunction,
    build_embedding,
    check_distinct_plateaus,
    default_eval_grid,
    embedding_jacobian,
    represent,
)
from .mc_training import (
    InterleaveSchedule,
    MCObjectiveSpec,
    MCStepConfig,
    compare_runs,
    interleaved_train,
)
from .nn import MLP, MLPConfig, init_mlp, jacobian_between
from .plotting import render_svg

KINDS = ("minors", "mc-analyze", "baseline", "train", "ka-demo")
FORMATS = ("csv", "json", "svg")
PROBE_SOURCES = ("uniform-random", "training-data")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for sub-experiment ``keys`` of a run seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0])


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else fmt(c) for c in row])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


class RunWriter:
    """Single writer for one run directory; tracks everything it writes."""

    def __init__(self, out_dir, formats):
        self.out = Path(out_dir)
        self.formats = set(formats)
        self.artifacts: list[dict] = []
        self._written: list[Path] = []

    def _write(self, name: str, data: bytes) -> None:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        self._written.append(path)
        path.write_bytes(data)
        self.artifacts.append({"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})

    def csv(self, name, header, rows):
        if "csv" in self.formats:
            self._write(name, csv_text(header, rows).encode())

    def csv_raw(self, name, text):
        if "csv" in self.formats:
            self._write(name, text.encode())

    def json(self, name, obj, always=False):
        if always or "json" in self.formats:
            self._write(name, dumps(obj).encode())

    def svg(self, name, series, **kwargs):
        if "svg" in self.formats:
            self._write(name, render_svg(series, **kwargs))

    def finalize(self, config: dict) -> Path:
        manifest = {
            "kind": config["kind"],
            "seed": config["seed"],
            "config": config,
            "package": {"name": "kaminor", "version": __version__},
            "artifacts": sorted(self.artifacts, key=lambda a: a["path"]),
        }
        path = self.out / "manifest.json"
        self._written.append(path)
        path.write_text(dumps(manifest))
        return path

    def abort(self) -> None:
        for p in reversed(self._written):
            if p.exists():
                p.unlink()
        self._written.clear()
        self.artifacts.clear()


# --- validation -----------------------------------------------------------


def _require(params: dict, key: str, kind, prefix="params"):
    if key not in params:
        raise ConfigError(f"{prefix}.{key}", "missing")
    value = params[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{prefix}.{key}", f"expected an integer, got {value!r}")
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{prefix}.{key}", f"expected a number, got {value!r}")
    if kind is list and not isinstance(value, list):
        raise ConfigError(f"{prefix}.{key}", f"expected a list, got {value!r}")
    if kind is str and not isinstance(value, str):
        raise ConfigError(f"{prefix}.{key}", f"expected a string, got {value!r}")
    return value


def _positive(params, key, default=None):
    if key not in params and default is not None:
        return default
    v = _require(params, key, int)
    if v < 1:
        raise ConfigError(f"params.{key}", f"must be >= 1, got {v}")
    return v


def _existing_file(params, key, base: Path) -> Path:
    raw = _require(params, key, str)
    path = Path(raw)
    if not path.is_absolute():
        path = base / path
    if not path.is_file():
        raise ConfigError(f"params.{key}", f"file not found: {raw}")
    return path


def _int_list(params, key):
    v = params[key]
    if isinstance(v, int) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, list) or not v or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        raise ConfigError(f"params.{key}", f"expected an integer or a nonempty list of integers, got {v!r}")
    return v


def validate_config(config: dict, base_dir: Path | None = None) -> dict:
    """Check the top-level fields and the parameter block of the chosen kind; return a normalised copy."""
    if not isinstance(config, dict):
        raise ConfigError("config", "expected a JSON object")
    config = copy.deepcopy(config)
    base = Path(base_dir or ".")
    kind = config.get("kind")
    if kind not in KINDS:
        raise ConfigError("kind", f"unknown kind {kind!r}; expected one of {', '.join(KINDS)}")
    seed = config.get("seed")
    if seed is None:
        raise ConfigError("seed", "missing (a seed is mandatory)")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", f"expected a non-negative integer, got {seed!r}")
    formats = config.setdefault("formats", list(FORMATS))
    if not isinstance(formats, list) or not set(formats) <= set(FORMATS):
        raise ConfigError("formats", f"must be a subset of {list(FORMATS)}, got {formats!r}")
    params = config.setdefault("params", {})
    if not isinstance(params, dict):
        raise ConfigError("params", "expected a JSON object")
    extra = set(config) - {"kind", "seed", "formats", "params", "outputDir"}
    if extra:
        raise ConfigError(sorted(extra)[0], "unknown field")
    _VALIDATORS[kind](params, base)
    return config


def _validate_minors(p, base):
    if ("matrix" in p) == ("random" in p):
        raise ConfigError("params.matrix", "give exactly one of 'matrix' or 'random'")
    if "matrix" in p:
        try:
            shape = np.array(p["matrix"], dtype=np.float64).shape
        except (TypeError, ValueError) as exc:
            raise ConfigError("params.matrix", str(exc)) from None
        if len(shape) != 2 or min(shape) < 1:
            raise ConfigError("params.matrix", f"expected a nonempty 2-D array, got shape {shape}")
    else:
        r = p["random"]
        if not isinstance(r, dict):
            raise ConfigError("params.random", "expected an object with p and q")
        shape = (_positive(r, "p"), _positive(r, "q"))
    p["h"] = _int_list(p, "h") if "h" in p else [1]
    for h in p["h"]:
        if not 1 <= h <= min(shape):
            raise ConfigError("params.h", f"order {h} outside [1, {min(shape)}]")


def _validate_baseline(p, base):
    m, n = _positive(p, "p"), _positive(p, "q")
    h = _positive(p, "h")
    if h > min(m, n):
        raise ConfigError("params.h", f"order {h} outside [1, {min(m, n)}]")
    _positive(p, "trials")


def _validate_mc_analyze(p, base):
    path = _existing_file(p, "checkpoint", base)
    p["_checkpointPath"] = str(path)
    pairs = _require(p, "pairs", list)
    if not pairs or not all(isinstance(q, list) and len(q) == 2 for q in pairs):
        raise ConfigError("params.pairs", "expected a nonempty list of [i, j] pairs")
    p["h"] = _int_list(p, "h") if "h" in p else [1]
    src = p.setdefault("probeSource", "uniform-random")
    if src not in PROBE_SOURCES:
        raise ConfigError("params.probeSource", f"expected one of {PROBE_SOURCES}, got {src!r}")
    if src == "training-data":
        p["_datasetPath"] = str(_existing_file(p, "dataset", base))
    p.setdefault("sampleCount", 16)
    p.setdefault("baselineTrials", 200)
    _positive(p, "sampleCount")
    _positive(p, "baselineTrials")


def _validate_train(p, base):
    sizes = _require(p, "layerSizes", list)
    acts = _require(p, "activations", list)
    try:
        MLPConfig(sizes, acts)
    except ValueError as exc:
        raise ConfigError("params.layerSizes", str(exc)) from None
    task = p.setdefault("task", {"kind": "sinprod", "samples": 64})
    if not isinstance(task, dict):
        raise ConfigError("params.task", "expected an object")
    if "dataset" in task:
        task["_datasetPath"] = str(_existing_file(task, "dataset", base))
    elif task.get("kind") not in ("sinprod", "linear"):
        raise ConfigError("params.task.kind", f"expected 'sinprod' or 'linear', got {task.get('kind')!r}")
    elif task["kind"] == "sinprod" and sizes[-1] != 1:
        raise ConfigError("params.task.kind", "sinprod needs a single output neuron")
    _require(p, "totalSteps", int)
    _require(p, "lr", float)
    p.setdefault("k", 1)
    _positive(p, "k")
    dps = p.setdefault("deltaPrimes", [0.0])
    if not isinstance(dps, list) or not dps or not all(isinstance(d, (int, float)) for d in dps):
        raise ConfigError("params.deltaPrimes", "expected a nonempty list of numbers")
    obj = _require(p, "objective", dict)
    depth = len(sizes) - 1
    i, j = _require(obj, "source", int, "params.objective"), _require(obj, "target", int, "params.objective")
    if not 0 <= i < j <= depth:
        raise ConfigError("params.objective.target", f"need 0 <= source < target <= {depth}")
    h = _require(obj, "h", int, "params.objective")
    if not 1 <= h <= min(sizes[i], sizes[j]):
        raise ConfigError("params.objective.h", f"order {h} outside [1, {min(sizes[i], sizes[j])}]")
    obj.setdefault("probeCount", 8)
    obj.setdefault("probeSource", "training-data")
    if obj["probeSource"] not in PROBE_SOURCES:
        raise ConfigError("params.objective.probeSource", f"expected one of {PROBE_SOURCES}")
    scope = p.get("scope")
    if scope is not None and (not isinstance(scope, list) or not all(isinstance(s, int) and i < s <= j for s in scope)):
        raise ConfigError("params.scope", f"expected layers in ({i}, {j}]")
    p.setdefault("fdStep", 1e-4)


def _validate_ka_demo(p, base):
    level = _require(p, "level", int)
    if level < 2:
        raise ConfigError("params.level", "must be >= 2")
    gamma = p.setdefault("gamma", 0.01)
    if not isinstance(gamma, (int, float)) or not 0 < gamma <= 0.2:
        raise ConfigError("params.gamma", f"must lie in (0, 1/5], got {gamma!r}")
    target = p.setdefault("target", "product")
    if isinstance(target, str):
        target = {"kind": target}
    if not isinstance(target, dict):
        raise ConfigError("params.target", "expected a catalog name or an object")
    try:
        TargetFunction.catalog(target.get("kind", ""), target.get("c", 1.0))
    except ValueError as exc:
        raise ConfigError("params.target", str(exc)) from None
    p["target"] = target
    p.setdefault("maxIterations", 25)
    p.setdefault("divisor", 3.0)


_VALIDATORS = {
    "minors": _validate_minors,
    "baseline": _validate_baseline,
    "mc-analyze": _validate_mc_analyze,
    "train": _validate_train,
    "ka-demo": _validate_ka_demo,
}


def _public(config: dict) -> dict:
    """Config echo without the resolved-path helpers added during validation."""

    def strip(o):
        if isinstance(o, dict):
            return {k: strip(v) for k, v in o.items() if not k.startswith("_")}
        if isinstance(o, list):
            return [strip(v) for v in o]
        return o

    return strip(config)


# --- runners --------------------------------------------------------------


def _run_minors(cfg, w: RunWriter):
    p, seed = cfg["params"], cfg["seed"]
    if "matrix" in p:
        M = np.array(p["matrix"], dtype=np.float64)
    else:
        M = random_gaussian_matrix(p["random"]["p"], p["random"]["q"], seed)
    w.json("matrix.json", {"matrix": M})
    summary = []
    for h in p["h"]:
        table = minors(M, h)
        rep = mc_report(M, h)
        w.csv_raw(f"minors_h{h}.csv", table.to_csv())
        w.json(f"minors_h{h}.json", table.to_dict())
        w.json(f"mc_report_h{h}.json", rep.to_dict())
        summary.append([h, rep.mc_global, rep.row_concentration, rep.col_concentration, rep.max_abs_minor, rep.total_minor_count])
        w.svg(f"minors_h{h}.svg", {f"|minor| h={h}, sorted": sorted(np.abs(table.values).ravel(), reverse=True)},
              title=f"{M.shape[0]}x{M.shape[1]} minors of order {h}", xlabel="rank", ylabel="|minor|")
    w.csv("mc_summary.csv", ["h", "mcGlobal", "rowConcentration", "colConcentration", "maxAbsMinor", "totalMinorCount"], summary)


def _run_baseline(cfg, w: RunWriter):
    p, seed = cfg["params"], cfg["seed"]
    s = mc_baseline(p["p"], p["q"], p["h"], p["trials"], seed)
    w.json("baseline.json", s.to_dict(include_values=True))
    w.csv("baseline_values.csv", ["trial", "mc"], [[i, v] for i, v in enumerate(s.values)])
    w.svg("baseline.svg", {"mc (sorted)": np.sort(s.values)}, title=f"Gaussian {p['p']}x{p['q']}, h={p['h']}",
          xlabel="rank", ylabel="MC")


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        d = json.load(fh)
    X = np.array(d["inputs"], dtype=np.float64)
    Y = np.array(d["targets"], dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    return X, Y


def save_dataset(path, X, Y) -> None:
    with open(path, "w") as fh:
        json.dump({"inputs": np.asarray(X).tolist(), "targets": np.asarray(Y).tolist()}, fh)


def load_model(path):
    """An MLP checkpoint, or a KA embedding exported as a pseudo-checkpoint."""
    with open(path) as fh:
        d = json.load(fh)
    if d.get("kind") == "ka-embedding":
        return KAEmbedding.from_dict(d)
    return MLP.from_dict(d)


def _ka_points(emb: KAEmbedding, rng, count: int) -> np.ndarray:
    pts = []
    while len(pts) < count:
        x = rng.uniform(0.0, 1.0, 2)
        if emb.distance_to_break(x) > 1e-9:
            pts.append(x)
    return np.array(pts)


def mc_analyze(model, pairs, hs, probes: np.ndarray, baseline_trials: int, seed: int) -> list[dict]:
    """Per (pair, h): an MCReport per probe point, a shape-matched Gaussian baseline, and z-scores."""
    results = []
    for pi, (i, j) in enumerate(pairs):
        if isinstance(model, KAEmbedding):
            if (i, j) != (0, 1):
                raise ConfigError("params.pairs", "a KA embedding only has the layer pair [0, 1]")
            jacs = [embedding_jacobian(model, y) for y in probes]
        else:
            if not 0 <= i < j <= model.depth:
                raise ConfigError("params.pairs", f"pair [{i}, {j}] invalid for a depth-{model.depth} network")
            jacs = [jacobian_between(model, y, i, j) for y in probes]
        shape = jacs[0].shape
        for h in hs:
            if not 1 <= h <= min(shape):
                raise ConfigError("params.h", f"order {h} invalid for Jacobians of shape {shape}")
            reports = [mc_report(J, h) for J in jacs]
            base = mc_baseline(shape[0], shape[1], h, baseline_trials, derive_seed(seed, pi, h))
            z = []
            for r in reports:
                if r.mc_global is None or not base.stddev > 0:
                    z.append(None)
                else:
                    z.append((r.mc_global - base.mean) / base.stddev)
            results.append({"pair": [i, j], "h": h, "shape": list(shape), "reports": reports, "baseline": base, "z": z})
    return results


def _run_mc_analyze(cfg, w: RunWriter):
    p, seed = cfg["params"], cfg["seed"]
    model = load_model(p["_checkpointPath"])
    rng = np.random.default_rng(derive_seed(seed, 0))
    n = p["sampleCount"]
    if isinstance(model, KAEmbedding):
        probes = _ka_points(model, rng, n)
    elif p["probeSource"] == "training-data":
        X, _ = load_dataset(p["_datasetPath"])
        probes = X[rng.permutation(len(X))[:n]]
    else:
        probes = rng.uniform(0.0, 1.0, (n, model.sizes[0]))
    pairs = [tuple(q) for q in p["pairs"]]
    results = mc_analyze(model, pairs, p["h"], probes, p["baselineTrials"], seed)
    rows, records = [], []
    for res in results:
        i, j = res["pair"]
        for idx, (rep, z) in enumerate(zip(res["reports"], res["z"])):
            rows.append([i, j, res["h"], idx, rep.mc_global, rep.row_concentration, rep.col_concentration,
                         rep.max_abs_minor, z, "true" if rep.degenerate else "false"])
        records.append({
            "pair": res["pair"],
            "h": res["h"],
            "shape": res["shape"],
            "baseline": res["baseline"].to_dict(include_values=True),
            "reports": [r.to_dict() for r in res["reports"]],
            "zScores": res["z"],
            "degenerateCount": sum(r.degenerate for r in res["reports"]),
        })
        w.svg(f"mc_field_{i}_{j}_h{res['h']}.svg",
              {"probe MC": [r.mc_global for r in res["reports"]],
               "baseline mean": [res["baseline"].mean] * len(res["reports"])},
              title=f"J_{i}{j}, h={res['h']}", xlabel="probe point", ylabel="MC")
    w.csv("mc_field.csv", ["i", "j", "h", "point", "mcGlobal", "rowConcentration", "colConcentration",
                           "maxAbsMinor", "zScore", "degenerate"], rows)
    w.json("mc_field.json", {"probes": probes, "records": records})


def make_task(task: dict, n_in: int, n_out: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if "_datasetPath" in task:
        return load_dataset(task["_datasetPath"])
    rng = np.random.default_rng(seed)
    n = int(task.get("samples", 64))
    X = rng.uniform(0.0, 1.0, (n, n_in))
    if task["kind"] == "sinprod":
        Y = np.prod(np.sin(np.pi * X), axis=1, keepdims=True)
    else:
        A = rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
        Y = X @ A.T
    return X, Y


def _run_train(cfg, w: RunWriter):
    p, seed = cfg["params"], cfg["seed"]
    sizes, acts, obj = p["layerSizes"], p["activations"], p["objective"]
    X, Y = make_task(p["task"], sizes[0], sizes[-1], derive_seed(seed, 1))
    w.json("dataset.json", {"inputs": X, "targets": Y})
    if obj["probeSource"] == "training-data":
        probes = X[: obj["probeCount"]]
    else:
        probes = np.random.default_rng(derive_seed(seed, 2)).uniform(0.0, 1.0, (obj["probeCount"], sizes[0]))
    spec = MCObjectiveSpec(obj["source"], obj["target"], obj["h"], probes)
    schedule = InterleaveSchedule(p["k"], p["totalSteps"], float(p["lr"]), seed, p.get("batchSize"))
    runs = []
    for idx, dp in enumerate(p["deltaPrimes"]):
        mlp = init_mlp(MLPConfig(sizes, acts, seed))
        step = MCStepConfig(float(dp), tuple(p["scope"]) if p.get("scope") else None, float(p["fdStep"]))
        metrics = interleaved_train(mlp, X, Y, spec, step, schedule)
        runs.append(metrics)
        w.csv_raw(f"metrics_{idx}.csv", metrics.to_csv())
        w.json(f"metrics_{idx}.json", metrics.to_dict())
        w.json(f"checkpoint_{idx}.json", mlp.to_dict())
    labels = [f"delta'={dp:g}" for dp in p["deltaPrimes"]]
    if len(runs) >= 2:
        cmp = compare_runs(runs, p.get("lossThreshold"))
        w.csv_raw("comparison.csv", cmp.aligned_csv)
        w.json("comparison.json", cmp.to_dict())
    if runs[0].records:
        w.svg("loss.svg", {lbl: r.losses() for lbl, r in zip(labels, runs)}, title="task loss",
              ylabel="MSE", logy=True)
        w.svg("mc.svg", {lbl: r.mc_values() for lbl, r in zip(labels, runs)}, title="MC objective", ylabel="MC")


def _run_ka_demo(cfg, w: RunWriter):
    p = cfg["params"]
    emb = build_embedding(p["level"], p["gamma"])
    gap = check_distinct_plateaus(emb)
    t = p["target"]
    f = TargetFunction.catalog(t["kind"], t.get("c", 1.0))
    grid = default_eval_grid(emb)
    g, report = represent(emb, f, p["maxIterations"], grid, divisor=p["divisor"])
    w.csv_raw("iteration_report.csv", report.to_csv())
    w.json("iteration_report.json", {**report.to_dict(), "target": f.to_dict(), "minPlateauGap": gap})
    w.json("embedding.json", emb.to_dict())
    w.json("outer_function.json", g.to_dict())
    w.svg("error_history.svg", {"sup error": report.errors, "floor": [report.floor] * len(report.errors)},
          title=f"outer iteration, level {emb.level}", xlabel="iteration", ylabel="sup error")


_RUNNERS = {
    "minors": _run_minors,
    "baseline": _run_baseline,
    "mc-analyze": _run_mc_analyze,
    "train": _run_train,
    "ka-demo": _run_ka_demo,
}


def run(config: dict, out_dir, base_dir=None) -> Path:
    """Validate ``config``, run it into ``out_dir`` and return the manifest path.

    Relative file references in the config resolve against ``base_dir``.
    """
    cfg = validate_config(config, base_dir)
    writer = RunWriter(out_dir, cfg["formats"])
    os.makedirs(out_dir, exist_ok=True)
    try:
        _RUNNERS[cfg["kind"]](cfg, writer)
        return writer.finalize(_public(cfg))
    except BaseException:
        writer.abort()
        raise
