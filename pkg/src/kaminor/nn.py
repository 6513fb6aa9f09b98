"""A small dense feedforward network with exact inter-layer Jacobians.

Jacobian convention, used everywhere in this package: rows index the
source layer's neurons and columns the target layer's, so entry (a, b) of
``jacobian_between(mlp, x, i, j)`` is d a_j[b] / d a_i[a], and composites
multiply left to right: ``J_ik = J_ij @ J_jk``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "tanh", "softplus")
INIT_SCHEMES = ("xavier-uniform",)


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return z.copy()
    if kind == "tanh":
        return np.tanh(z)
    if kind == "softplus":
        return np.logaddexp(0.0, z)
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivative(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(z)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if kind == "softplus":
        # logistic sigmoid, written to stay finite for large |z|
        return np.exp(-np.logaddexp(0.0, -z))
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class MLPConfig:
    layer_sizes: list[int]
    activations: list[str]
    seed: int = 0
    init_scheme: str = "xavier-uniform"

    def __post_init__(self):
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        self.activations = list(self.activations)
        if len(self.layer_sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output size")
        if any(n < 1 for n in self.layer_sizes):
            raise ValueError("layer sizes must be >= 1")
        if len(self.activations) != len(self.layer_sizes) - 1:
            raise ValueError(
                f"need {len(self.layer_sizes) - 1} activations, got {len(self.activations)}"
            )
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}; choose from {ACTIVATIONS}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")

    @property
    def depth(self) -> int:
        return len(self.layer_sizes) - 1


@dataclass
class MLP:
    """Weights ``W[j-1]`` map layer j-1 to layer j and have shape (n_j, n_{j-1})."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    config: MLPConfig

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def sizes(self) -> list[int]:
        return self.config.layer_sizes

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.config)

    def to_dict(self) -> dict:
        return {
            "layerSizes": self.config.layer_sizes,
            "activationKinds": self.config.activations,
            "initScheme": self.config.init_scheme,
            "seed": self.config.seed,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        config = MLPConfig(d["layerSizes"], d["activationKinds"], d["seed"], d.get("initScheme", "xavier-uniform"))
        weights = [np.array(w, dtype=np.float64) for w in d["weights"]]
        biases = [np.array(b, dtype=np.float64) for b in d["biases"]]
        sizes = config.layer_sizes
        for j, (w, b) in enumerate(zip(weights, biases), start=1):
            if w.shape != (sizes[j], sizes[j - 1]) or b.shape != (sizes[j],):
                raise ValueError(f"layer {j}: weight/bias shapes inconsistent with layerSizes")
        if len(weights) != config.depth or len(biases) != config.depth:
            raise ValueError("number of weight matrices does not match layerSizes")
        return cls(weights, biases, config)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "MLP":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def xavier_bound(n_in: int, n_out: int) -> float:
    return float(np.sqrt(6.0 / (n_in + n_out)))


def init_mlp(config: MLPConfig) -> MLP:
    """Xavier-uniform weights and zero biases, drawn from PCG64 seeded with ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for n_in, n_out in zip(config.layer_sizes[:-1], config.layer_sizes[1:]):
        bound = xavier_bound(n_in, n_out)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MLP(weights, biases, config)


@dataclass
class ActivationTrace:
    """``a[j]`` is the post-activation of layer j (a[0] = x); ``z[j]`` the pre-activation (z[0] is None)."""

    x: np.ndarray
    a: list[np.ndarray]
    z: list[np.ndarray | None] = field(repr=False)

    @property
    def output(self) -> np.ndarray:
        return self.a[-1]


def _as_input(mlp: MLP, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mlp.sizes[0],):
        raise ValueError(f"input must have shape ({mlp.sizes[0]},), got {x.shape}")
    return x


def _propagate(mlp: MLP, a: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Push post-activations of layer ``start`` forward to layer ``stop``; works on stacked rows."""
    for j in range(start + 1, stop + 1):
        a = activate(mlp.config.activations[j - 1], a @ mlp.weights[j - 1].T + mlp.biases[j - 1])
    return a


def forward(mlp: MLP, x) -> ActivationTrace:
    x = _as_input(mlp, x)
    a, z = [x], [None]
    for j in range(1, mlp.depth + 1):
        zj = mlp.weights[j - 1] @ a[-1] + mlp.biases[j - 1]
        z.append(zj)
        a.append(activate(mlp.config.activations[j - 1], zj))
    return ActivationTrace(x, a, z)


def predict(mlp: MLP, X) -> np.ndarray:
    """Network outputs for a batch of inputs, shape (N, n_L)."""
    return _propagate(mlp, np.atleast_2d(np.asarray(X, dtype=np.float64)), 0, mlp.depth)


def layer_jacobian(mlp: MLP, trace: ActivationTrace, j: int) -> np.ndarray:
    """d a_j / d a_{j-1}, shape (n_{j-1}, n_j)."""
    if not 1 <= j <= mlp.depth:
        raise ValueError(f"layer index j={j} outside [1, {mlp.depth}]")
    d = activation_derivative(mlp.config.activations[j - 1], trace.z[j])
    return mlp.weights[j - 1].T * d[None, :]


def _check_pair(mlp: MLP, i: int, j: int):
    if not 0 <= i < j <= mlp.depth:
        raise ValueError(f"need 0 <= i < j <= {mlp.depth}, got i={i}, j={j}")


def jacobian_between(mlp: MLP, x, i: int, j: int, trace: ActivationTrace | None = None) -> np.ndarray:
    """d a_j / d a_i at input ``x``, shape (n_i, n_j)."""
    _check_pair(mlp, i, j)
    if trace is None:
        trace = forward(mlp, x)
    J = layer_jacobian(mlp, trace, i + 1)
    for k in range(i + 2, j + 1):
        J = J @ layer_jacobian(mlp, trace, k)
    return J


def finite_diff_jacobian(mlp: MLP, x, i: int, j: int, step: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of ``jacobian_between``.

    The perturbation is applied to the stored a_i and propagated forward
    from layer i+1.
    """
    _check_pair(mlp, i, j)
    if step <= 0:
        raise ValueError("step must be positive")
    a_i = forward(mlp, x).a[i]
    E = np.eye(a_i.size) * step
    plus = _propagate(mlp, a_i[None, :] + E, i, j)
    minus = _propagate(mlp, a_i[None, :] - E, i, j)
    return (plus - minus) / (2.0 * step)


# --- training -------------------------------------------------------------


def _as_dataset(mlp: MLP, X, Y) -> tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] == 0:
        raise ValueError("dataset is empty")
    if X.shape[1] != mlp.sizes[0] or Y.shape != (X.shape[0], mlp.sizes[-1]):
        raise ValueError(
            f"dataset shapes {X.shape}, {Y.shape} do not match network sizes {mlp.sizes[0]} -> {mlp.sizes[-1]}"
        )
    return X, Y


def mse(mlp: MLP, X, Y) -> float:
    """Mean over samples and outputs of the squared error."""
    X, Y = _as_dataset(mlp, X, Y)
    return float(np.mean((predict(mlp, X) - Y) ** 2))


def loss_and_gradients(mlp: MLP, X, Y):
    """MSE on a batch and its gradients with respect to every weight and bias, by backpropagation."""
    X, Y = _as_dataset(mlp, X, Y)
    acts = mlp.config.activations
    a, z = [X], []
    for j in range(mlp.depth):
        z.append(a[-1] @ mlp.weights[j].T + mlp.biases[j])
        a.append(activate(acts[j], z[-1]))
    err = a[-1] - Y
    loss = float(np.mean(err**2))
    delta = (2.0 / err.size) * err * activation_derivative(acts[-1], z[-1])
    grad_w = [None] * mlp.depth
    grad_b = [None] * mlp.depth
    for j in range(mlp.depth - 1, -1, -1):
        grad_w[j] = delta.T @ a[j]
        grad_b[j] = delta.sum(axis=0)
        if j > 0:
            delta = (delta @ mlp.weights[j]) * activation_derivative(acts[j - 1], z[j - 1])
    return loss, grad_w, grad_b


def run_epoch(mlp: MLP, X: np.ndarray, Y: np.ndarray, lr: float, rng, batch_size: int | None = None) -> float:
    """One pass over the data; returns the mean pre-update batch loss.

    Full batch when ``batch_size`` is None, otherwise minibatches in an
    order shuffled by ``rng``.
    """
    n = X.shape[0]
    if batch_size is None or batch_size >= n:
        batches = [np.arange(n)]
    else:
        order = rng.permutation(n)
        batches = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    losses = []
    for idx in batches:
        loss, gw, gb = loss_and_gradients(mlp, X[idx], Y[idx])
        for j in range(mlp.depth):
            mlp.weights[j] -= lr * gw[j]
            mlp.biases[j] -= lr * gb[j]
        losses.append(loss)
    return float(np.mean(losses))


def train_sgd(
    mlp: MLP,
    X,
    Y,
    epochs: int,
    lr: float,
    seed: int = 0,
    loss: str = "mse",
    batch_size: int | None = None,
) -> list[float]:
    """Train ``mlp`` in place by gradient descent and return per-epoch mean losses."""
    if loss != "mse":
        raise ValueError(f"unsupported loss {loss!r}")
    X, Y = _as_dataset(mlp, X, Y)
    rng = np.random.default_rng(seed)
    return [run_epoch(mlp, X, Y, lr, rng, batch_size) for _ in range(epochs)]
