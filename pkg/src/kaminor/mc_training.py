"""Minor-concentration objective, its gradient, and interleaved training.

Training alternates ``k`` ordinary gradient-descent epochs on the task loss
with one step ``W <- W + delta_prime * grad MC`` on the weights of the
scoped layers, where MC is the mean minor concentration of J_ij over a
fixed set of probe inputs.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exterior import mc
from .nn import MLP, _as_dataset, jacobian_between, run_epoch


class DegenerateObjectiveError(ValueError):
    """Every probe point produced an all-zero minor table."""


@dataclass
class MCObjectiveSpec:
    source: int
    target: int
    h: int
    probe_points: np.ndarray

    def __post_init__(self):
        self.probe_points = np.atleast_2d(np.asarray(self.probe_points, dtype=np.float64))
        if self.probe_points.shape[0] == 0:
            raise ValueError("probe_points must be nonempty")

    def validate(self, mlp: MLP) -> None:
        i, j, sizes = self.source, self.target, mlp.sizes
        if not 0 <= i < j <= mlp.depth:
            raise ValueError(f"need 0 <= source < target <= {mlp.depth}, got {i}, {j}")
        if not 1 <= self.h <= min(sizes[i], sizes[j]):
            raise ValueError(f"h={self.h} outside [1, {min(sizes[i], sizes[j])}]")
        if self.probe_points.shape[1] != sizes[0]:
            raise ValueError(f"probe points have dimension {self.probe_points.shape[1]}, network expects {sizes[0]}")


@dataclass
class MCStepConfig:
    delta_prime: float
    scope: tuple[int, ...] | None = None  # defaults to (target,)
    fd_step: float = 1e-4

    def resolved_scope(self, spec: MCObjectiveSpec) -> tuple[int, ...]:
        scope = tuple(self.scope) if self.scope is not None else (spec.target,)
        for layer in scope:
            if not spec.source < layer <= spec.target:
                raise ValueError(f"scope layer {layer} outside ({spec.source}, {spec.target}]")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")
        return scope


@dataclass
class InterleaveSchedule:
    task_steps_per_mc_step: int
    total_steps: int
    lr: float
    seed: int = 0
    batch_size: int | None = None

    def __post_init__(self):
        if self.task_steps_per_mc_step < 1:
            raise ValueError("task_steps_per_mc_step must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")


@dataclass
class ObjectiveValue:
    value: float | None
    degenerate_count: int
    per_point: list[float | None] = field(repr=False)


def evaluate_objective(mlp: MLP, spec: MCObjectiveSpec) -> ObjectiveValue:
    """Mean mc(J_ij(y), h) over the probe points, dropping degenerate points."""
    spec.validate(mlp)
    per_point = [mc(jacobian_between(mlp, y, spec.source, spec.target), spec.h) for y in spec.probe_points]
    good = [v for v in per_point if v is not None]
    value = float(np.mean(good)) if good else None
    return ObjectiveValue(value, len(per_point) - len(good), per_point)


def mc_objective(mlp: MLP, spec: MCObjectiveSpec) -> float:
    res = evaluate_objective(mlp, spec)
    if res.value is None:
        raise DegenerateObjectiveError("all probe points are degenerate")
    return res.value


def mc_gradient(mlp: MLP, spec: MCObjectiveSpec, step: MCStepConfig) -> dict[int, np.ndarray]:
    """Central finite-difference gradient of the objective over the scoped weights.

    Keys are layer indices j (weights ``mlp.weights[j-1]``); each entry
    w is perturbed by ``fd_step * (1 + |w|)``.
    """
    scope = step.resolved_scope(spec)
    mc_objective(mlp, spec)  # raises on a degenerate starting point
    probe = mlp.copy()
    grads = {}
    for layer in scope:
        W = probe.weights[layer - 1]
        G = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            w0 = W[idx]
            hstep = step.fd_step * (1.0 + abs(w0))
            W[idx] = w0 + hstep
            up = mc_objective(probe, spec)
            W[idx] = w0 - hstep
            down = mc_objective(probe, spec)
            W[idx] = w0
            G[idx] = (up - down) / (2.0 * hstep)
        grads[layer] = G
    return grads


def mc_step(mlp: MLP, gradient: dict[int, np.ndarray], delta_prime: float) -> MLP:
    """Return a copy of ``mlp`` with ``W_j += delta_prime * grad_j`` for each scoped layer."""
    out = mlp.copy()
    for layer, g in gradient.items():
        if not 1 <= layer <= mlp.depth:
            raise ValueError(f"gradient for unknown layer {layer}")
        if g.shape != out.weights[layer - 1].shape:
            raise ValueError(f"gradient for layer {layer} has shape {g.shape}, expected {out.weights[layer - 1].shape}")
        out.weights[layer - 1] = out.weights[layer - 1] + delta_prime * g
    return out


@dataclass
class StepRecord:
    step: int
    task_loss: float
    mc_value: float | None
    delta_prime_applied: float
    degenerate_count: int
    mc_skipped: bool = False


METRIC_FIELDS = ("step", "taskLoss", "mcValue", "deltaPrimeApplied", "degenerateCount")


@dataclass
class RunMetrics:
    records: list[StepRecord]
    config: dict
    seed: int

    def losses(self) -> list[float]:
        return [r.task_loss for r in self.records]

    def mc_values(self) -> list[float | None]:
        return [r.mc_value for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in self.records:
            w.writerow([
                r.step,
                format(r.task_loss, ".17g"),
                "" if r.mc_value is None else format(r.mc_value, ".17g"),
                format(r.delta_prime_applied, ".17g"),
                r.degenerate_count,
            ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, config: dict | None = None, seed: int = 0) -> "RunMetrics":
        records = []
        for row in csv.DictReader(io.StringIO(text)):
            records.append(StepRecord(
                step=int(row["step"]),
                task_loss=float(row["taskLoss"]),
                mc_value=None if row["mcValue"] == "" else float(row["mcValue"]),
                delta_prime_applied=float(row["deltaPrimeApplied"]),
                degenerate_count=int(row["degenerateCount"]),
            ))
        return cls(records, config or {}, seed)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "records": [
                {
                    "step": r.step,
                    "taskLoss": r.task_loss,
                    "mcValue": r.mc_value,
                    "deltaPrimeApplied": r.delta_prime_applied,
                    "degenerateCount": r.degenerate_count,
                    "mcSkipped": r.mc_skipped,
                }
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunMetrics":
        records = [
            StepRecord(r["step"], r["taskLoss"], r["mcValue"], r["deltaPrimeApplied"], r["degenerateCount"], r["mcSkipped"])
            for r in d["records"]
        ]
        return cls(records, d["config"], d["seed"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def interleaved_train(
    mlp: MLP,
    X,
    Y,
    spec: MCObjectiveSpec,
    step_config: MCStepConfig,
    schedule: InterleaveSchedule,
) -> RunMetrics:
    """Train ``mlp`` in place, inserting an MC step after every k task epochs.

    Every record carries the task loss of its epoch (pre-update, as in
    ``train_sgd``) and the objective after the step. With
    ``delta_prime == 0`` the weights follow ``train_sgd`` bit for bit.
    An MC step whose objective is degenerate is skipped and flagged.
    """
    X, Y = _as_dataset(mlp, X, Y)
    spec.validate(mlp)
    step_config.resolved_scope(spec)
    rng = np.random.default_rng(schedule.seed)
    k = schedule.task_steps_per_mc_step
    records = []
    for step in range(1, schedule.total_steps + 1):
        loss = run_epoch(mlp, X, Y, schedule.lr, rng, schedule.batch_size)
        applied, skipped = 0.0, False
        if step % k == 0 and step_config.delta_prime != 0.0:
            try:
                grad = mc_gradient(mlp, spec, step_config)
            except DegenerateObjectiveError:
                skipped = True
            else:
                updated = mc_step(mlp, grad, step_config.delta_prime)
                mlp.weights[:] = updated.weights
                applied = step_config.delta_prime
        obj = evaluate_objective(mlp, spec)
        records.append(StepRecord(step, loss, obj.value, applied, obj.degenerate_count, skipped))
    config = {
        "source": spec.source,
        "target": spec.target,
        "h": spec.h,
        "probeCount": int(spec.probe_points.shape[0]),
        "deltaPrime": step_config.delta_prime,
        "scope": list(step_config.resolved_scope(spec)),
        "fdStep": step_config.fd_step,
        "schedule": asdict(schedule),
        "layerSizes": mlp.config.layer_sizes,
        "activationKinds": mlp.config.activations,
    }
    return RunMetrics(records, config, schedule.seed)


# keys that are allowed to differ between runs being compared
_VARIABLE_KEYS = {"deltaPrime", "seed"}


def _task_config(config: dict) -> dict:
    out = {k: v for k, v in config.items() if k not in _VARIABLE_KEYS}
    if isinstance(out.get("schedule"), dict):
        out["schedule"] = {k: v for k, v in out["schedule"].items() if k != "seed"}
    return out


def steps_to_threshold(losses, threshold: float) -> int | None:
    for i, loss in enumerate(losses, start=1):
        if loss <= threshold:
            return i
    return None


@dataclass
class Comparison:
    config_match: bool
    seeds: list[int]
    seed_differs: bool
    delta_primes: list[float]
    steps_to_threshold: list[int | None]
    final_mc: list[float | None]
    threshold: float
    loss_differences: np.ndarray
    mc_differences: np.ndarray
    aligned_csv: str = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "configMatch": self.config_match,
            "seeds": self.seeds,
            "seedDiffers": self.seed_differs,
            "deltaPrimes": self.delta_primes,
            "lossThreshold": self.threshold,
            "stepsToThreshold": self.steps_to_threshold,
            "finalMC": self.final_mc,
            "maxAbsLossDifference": [float(np.nanmax(np.abs(d))) if d.size else 0.0 for d in self.loss_differences],
            "maxAbsMCDifference": [float(np.nanmax(np.abs(d))) if d.size and not np.all(np.isnan(d)) else 0.0 for d in self.mc_differences],
        }


def compare_runs(runs: list[RunMetrics], threshold: float | None = None) -> Comparison:
    """Align several runs of the same task and summarise them.

    Differences are taken against the first run. ``threshold`` defaults to
    the first run's initial loss divided by 10.
    """
    if len(runs) < 2:
        raise ValueError("compare_runs needs at least two runs")
    base = _task_config(runs[0].config)
    for r in runs[1:]:
        if _task_config(r.config) != base:
            raise ValueError("runs have mismatched task configurations")
    n = min(len(r.records) for r in runs)
    if threshold is None:
        threshold = runs[0].records[0].task_loss / 10.0 if runs[0].records else 0.0

    def mc_arr(r):
        return np.array([np.nan if v is None else v for v in r.mc_values()[:n]], dtype=np.float64)

    losses = [np.array(r.losses()[:n]) for r in runs]
    mcs = [mc_arr(r) for r in runs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["step"]
    for idx in range(len(runs)):
        header += [f"taskLoss_{idx}", f"mcValue_{idx}"]
    w.writerow(header)
    for s in range(n):
        row = [runs[0].records[s].step]
        for L, M in zip(losses, mcs):
            row += [format(L[s], ".17g"), "" if np.isnan(M[s]) else format(M[s], ".17g")]
        w.writerow(row)
    seeds = [r.seed for r in runs]
    return Comparison(
        config_match=True,
        seeds=seeds,
        seed_differs=len(set(seeds)) > 1,
        delta_primes=[r.config.get("deltaPrime", 0.0) for r in runs],
        steps_to_threshold=[steps_to_threshold(r.losses(), threshold) for r in runs],
        final_mc=[r.records[-1].mc_value if r.records else None for r in runs],
        threshold=threshold,
        loss_differences=np.array([L - losses[0] for L in losses]),
        mc_differences=np.array([M - mcs[0] for M in mcs]),
        aligned_csv=buf.getvalue(),
    )
