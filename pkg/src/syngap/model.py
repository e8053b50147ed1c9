"""MLP feature extractor with a linear classification head.

The trainee and the frozen prior are both ``MlpModel`` instances. The feature
representation of a batch is the activation output of the penultimate layer;
the logits are the final linear map applied to it. ``backward`` returns the
exact gradient of the cross-entropy loss, optionally extended with an
externally supplied gradient with respect to the features (the coupling point
for the distance-distribution regularizer).

Models are treated as immutable values: ``sgd_step`` returns a new model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from .numcore import Matrix, cross_entropy

if TYPE_CHECKING:
    from .datagen import LabeledDataset

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpModel:
    """Fully connected network: len(layer_dims) - 1 linear layers.

    ``weights[i]`` has shape (layer_dims[i], layer_dims[i+1]); every layer
    except the last is followed by the activation. ``frozen`` models reject
    parameter updates.
    """

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"
    frozen: bool = False

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValueError("a model needs at least an input and an output layer")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError(f"all layer dims must be >= 1, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expect:
                raise ValueError(f"layer {i} weight shape {w.shape} does not compose, expected {expect}")
            if b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i} bias shape {b.shape}, expected ({self.layer_dims[i + 1]},)")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-2]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_model(layer_dims, activation: str = "tanh", seed: int = 0) -> MlpModel:
    """Deterministic initialisation: uniform fan-in weights, zero biases.

    Weights of layer i are drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ValueError(f"need at least 2 layer dims, got {dims}")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for i in range(len(dims) - 1):
        bound = 1.0 / np.sqrt(dims[i])
        weights.append(rng.uniform(-bound, bound, size=(dims[i], dims[i + 1])))
        biases.append(np.zeros(dims[i + 1]))
    return MlpModel(dims, tuple(weights), tuple(biases), activation=activation)


def _act(z: Matrix, kind: str) -> Matrix:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_deriv(z: Matrix, a: Matrix, kind: str) -> Matrix:
    # a is the already-computed activation of z
    return 1.0 - a * a if kind == "tanh" else (z > 0.0).astype(np.float64)


def forward(model: MlpModel, batch: Matrix) -> tuple[Matrix, Matrix]:
    """Run a batch through the network.

    Returns ``(features, logits)``: features are the penultimate activations
    (the batch itself for a head-only model), logits the final linear layer.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ValueError(f"batch shape {batch.shape} does not match input dim {model.input_dim}")
    a = batch
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        a = _act(a @ w + b, model.activation)
    logits = a @ model.weights[-1] + model.biases[-1]
    return a, logits


def backward(
    model: MlpModel,
    batch: Matrix,
    labels: np.ndarray,
    extra_feature_grad: Matrix | None = None,
) -> tuple[float, np.ndarray]:
    """Exact gradient of the batch loss with respect to all parameters.

    The loss whose gradient is returned is the mean cross-entropy plus, when
    ``extra_feature_grad`` is given, the inner product of that matrix with the
    feature activations (chain-rule hand-off for a regularizer defined on the
    features). The returned scalar is the cross-entropy term only. The
    gradient comes back flattened in parameter enumeration order (per layer:
    weights row-major, then biases).
    """
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n = batch.shape[0]

    # forward, keeping pre-activations and activations per layer
    pre = []
    acts = [batch]
    a = batch
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = a @ w + b
        a = _act(z, model.activation)
        pre.append(z)
        acts.append(a)
    logits = a @ model.weights[-1] + model.biases[-1]

    loss, probs = cross_entropy(logits, labels)
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n

    grads_w = [np.empty(0)] * len(model.weights)
    grads_b = [np.empty(0)] * len(model.biases)
    grads_w[-1] = acts[-1].T @ d_logits
    grads_b[-1] = d_logits.sum(axis=0)

    d_a = d_logits @ model.weights[-1].T
    if extra_feature_grad is not None:
        extra = np.asarray(extra_feature_grad, dtype=np.float64)
        if extra.shape != acts[-1].shape:
            raise ValueError(
                f"extra_feature_grad shape {extra.shape} does not match features {acts[-1].shape}"
            )
        d_a = d_a + extra

    for i in range(len(model.weights) - 2, -1, -1):
        d_z = d_a * _act_deriv(pre[i], acts[i + 1], model.activation)
        grads_w[i] = acts[i].T @ d_z
        grads_b[i] = d_z.sum(axis=0)
        if i > 0:
            d_a = d_z @ model.weights[i].T

    flat = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(grads_w, grads_b)])
    return loss, flat


def flatten_params(model: MlpModel) -> np.ndarray:
    """Parameters as one flat vector, same enumeration order as gradients."""
    return np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(model.weights, model.biases)]
    )


def unflatten_params(model: MlpModel, flat: np.ndarray) -> MlpModel:
    """Inverse of flatten_params: a new model with the given parameter vector."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (model.num_params,):
        raise ValueError(f"expected {model.num_params} parameters, got shape {flat.shape}")
    weights = []
    biases = []
    pos = 0
    for w, b in zip(model.weights, model.biases):
        weights.append(flat[pos : pos + w.size].reshape(w.shape).copy())
        pos += w.size
        biases.append(flat[pos : pos + b.size].copy())
        pos += b.size
    return replace(model, weights=tuple(weights), biases=tuple(biases))


def sgd_step(model: MlpModel, grad: np.ndarray, lr: float) -> MlpModel:
    """One plain gradient-descent step: theta <- theta - lr * g."""
    if model.frozen:
        raise ValueError("cannot update a frozen model")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (model.num_params,):
        raise ValueError(f"gradient length {grad.shape} does not match {model.num_params} parameters")
    return unflatten_params(model, flatten_params(model) - lr * grad)


def evaluate(model: MlpModel, ds: "LabeledDataset") -> float:
    """Fraction of rows whose argmax logit equals the label.

    Ties resolve to the lowest class index.
    """
    if ds.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _, logits = forward(model, ds.features)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def pretrain(
    prior_dataset: "LabeledDataset",
    layer_dims,
    *,
    epochs: int = 40,
    batch_size: int = 32,
    lr: float = 0.05,
    seed: int = 0,
    activation: str = "tanh",
) -> MlpModel:
    """Train a model with plain cross-entropy on the prior data, then freeze it.

    This is the stand-in for a large-scale pretrained feature extractor: the
    prior mixture covers all modes, so the frozen model's features retain the
    full span of the data.
    """
    if prior_dataset.n == 0:
        raise ValueError("prior dataset is empty")
    m = init_model(layer_dims, activation=activation, seed=seed)
    rng = np.random.default_rng([seed, 1])
    x, y = prior_dataset.features, prior_dataset.labels
    for _ in range(epochs):
        order = rng.permutation(prior_dataset.n)
        for lo in range(0, prior_dataset.n, batch_size):
            idx = order[lo : lo + batch_size]
            _, g = backward(m, x[idx], y[idx])
            m = sgd_step(m, g, lr)
    return replace(m, frozen=True)


def save_model(model: MlpModel, path) -> None:
    """Write a checkpoint: one header line, then one parameter per line."""
    header = (
        f"dims={','.join(str(d) for d in model.layer_dims)} "
        f"activation={model.activation} frozen={int(model.frozen)}"
    )
    lines = [header]
    lines.extend(repr(float(v)) for v in flatten_params(model))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> MlpModel:
    """Read a checkpoint written by save_model."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty checkpoint file")
    fields = dict(part.split("=", 1) for part in lines[0].split())
    try:
        dims = tuple(int(d) for d in fields["dims"].split(","))
        activation = fields["activation"]
        frozen = bool(int(fields["frozen"]))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed checkpoint header: {lines[0]!r}") from exc
    skeleton = init_model(dims, activation=activation)
    values = []
    for ln, text in enumerate(lines[1:], start=2):
        try:
            values.append(float(text))
        except ValueError as exc:
            raise ValueError(f"{path}: line {ln}: not a number: {text!r}") from exc
    if len(values) != skeleton.num_params:
        raise ValueError(f"{path}: expected {skeleton.num_params} parameters, found {len(values)}")
    return replace(unflatten_params(skeleton, np.array(values)), frozen=frozen)
