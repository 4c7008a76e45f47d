"""Dense MLP training engine.

Everything a participant needs to train locally: forward pass, analytic
gradients for three losses, SGD/Adam steps, and evaluation metrics. Model
parameters travel as flat float64 vectors (layer weight matrices in order,
each row-major, followed by the layer bias) so that models, updates and
attack payloads can all be treated as plain vectors by the rest of the
package.

All functions are value-in / value-out: models and optimizer states are
never mutated, which keeps concurrent per-user training safe.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ACTIVATIONS = ("relu", "identity")
OUTPUT_HEADS = ("softmax_xent", "linear_mse", "hinge_margin")
LOSSES = ("cross_entropy", "hinge", "mse")
METRICS = ("accuracy", "error_rate", "rmse", "mean_loss")

# Default loss paired with each output head.
HEAD_LOSS = {
    "softmax_xent": "cross_entropy",
    "linear_mse": "mse",
    "hinge_margin": "hinge",
}

CLASSIFICATION_HEADS = ("softmax_xent", "hinge_margin")


class EngineError(ValueError):
    """Dimension, label, or metric contract violation."""


@dataclass(frozen=True)
class ModelShape:
    """Architecture of a dense MLP: layer widths, hidden activation, head."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    output_head: str = "softmax_xent"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise EngineError("a model needs at least an input and an output layer")
        if any(s <= 0 for s in self.layer_sizes):
            raise EngineError(f"layer sizes must be positive, got {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise EngineError(f"unknown activation {self.activation!r}")
        if self.output_head not in OUTPUT_HEADS:
            raise EngineError(f"unknown output head {self.output_head!r}")

    @property
    def param_count(self) -> int:
        sizes = self.layer_sizes
        return sum((a + 1) * b for a, b in zip(sizes, sizes[1:]))

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class Model:
    shape: ModelShape
    params: np.ndarray

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        object.__setattr__(self, "params", params)
        if params.ndim != 1 or params.size != self.shape.param_count:
            raise EngineError(
                f"parameter vector has length {params.size}, "
                f"shape requires {self.shape.param_count}"
            )

    def with_params(self, params: np.ndarray) -> "Model":
        return Model(self.shape, params)


def unflatten(shape: ModelShape, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat parameter vector into per-layer (W, b) views.

    Canonical order: layers front to back, each layer's weight matrix
    (n_in, n_out) row-major, then its bias.
    """
    out = []
    pos = 0
    sizes = shape.layer_sizes
    for n_in, n_out in zip(sizes, sizes[1:]):
        w = params[pos : pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        b = params[pos : pos + n_out]
        pos += n_out
        out.append((w, b))
    return out


def flatten(layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts)


def init_model(shape: ModelShape, rng: np.random.Generator, scale: float = 1.0) -> Model:
    """He-style initialization, optionally rescaled; biases start at zero."""
    layers = []
    for n_in, n_out in zip(shape.layer_sizes, shape.layer_sizes[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)) * scale
        layers.append((w, np.zeros(n_out)))
    return Model(shape, flatten(layers))


def _check_inputs(shape: ModelShape, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise EngineError(f"batch inputs must be 2-D, got ndim={x.ndim}")
    if x.shape[1] != shape.layer_sizes[0]:
        raise EngineError(
            f"input rows have {x.shape[1]} features, model expects {shape.layer_sizes[0]}"
        )
    return x


def _forward_trace(model: Model, x: np.ndarray):
    """Forward pass keeping pre-activations for backprop."""
    layers = unflatten(model.shape, model.params)
    act = model.shape.activation
    a = x
    activations = [x]  # activations[i] feeds layer i
    pre = []
    for k, (w, b) in enumerate(layers):
        z = a @ w + b
        pre.append(z)
        if k < len(layers) - 1 and act == "relu":
            a = np.maximum(z, 0.0)
        else:
            a = z  # identity hidden units, and the output layer is always linear
        if k < len(layers) - 1:
            activations.append(a)
    return activations, pre, a


def forward(model: Model, batch_inputs: np.ndarray) -> np.ndarray:
    """Raw output scores of the last layer (head applied downstream)."""
    x = _check_inputs(model.shape, batch_inputs)
    if x.shape[0] == 0:
        return np.zeros((0, model.shape.n_outputs))
    _, _, out = _forward_trace(model, x)
    return out


def _class_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.floor(y)):
            raise EngineError("classification labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise EngineError(
            f"label out of range: saw {int(y.min())}..{int(y.max())}, "
            f"model has {n_classes} outputs"
        )
    return y.astype(np.int64)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_grad_outputs(outputs, labels, loss, n_outputs):
    """Mean batch loss and its gradient w.r.t. the output scores."""
    n = outputs.shape[0]
    if loss == "cross_entropy":
        y = _class_labels(labels, n_outputs)
        probs = _softmax(outputs)
        picked = np.clip(probs[np.arange(n), y], 1e-300, None)
        value = float(-np.mean(np.log(picked)))
        grad = probs.copy()
        grad[np.arange(n), y] -= 1.0
        return value, grad / n
    if loss == "hinge":
        # One-vs-rest margin: max(0, 1 - s_y + max_{k != y} s_k).
        y = _class_labels(labels, n_outputs)
        if n_outputs < 2:
            raise EngineError("hinge loss needs at least 2 output scores")
        masked = outputs.copy()
        masked[np.arange(n), y] = -np.inf
        rival = masked.argmax(axis=1)
        margins = 1.0 - outputs[np.arange(n), y] + masked[np.arange(n), rival]
        active = margins > 0.0
        value = float(np.mean(np.where(active, margins, 0.0)))
        grad = np.zeros_like(outputs)
        rows = np.arange(n)[active]
        grad[rows, y[active]] -= 1.0
        grad[rows, rival[active]] += 1.0
        return value, grad / n
    if loss == "mse":
        y = np.asarray(labels)
        if np.issubdtype(y.dtype, np.integer) and n_outputs > 1:
            targets = np.zeros((n, n_outputs))
            targets[np.arange(n), _class_labels(y, n_outputs)] = 1.0
        else:
            targets = np.asarray(y, dtype=np.float64).reshape(n, -1)
            if targets.shape[1] != n_outputs:
                raise EngineError(
                    f"mse targets have {targets.shape[1]} columns, model outputs {n_outputs}"
                )
        diff = outputs - targets
        value = float(0.5 * np.sum(diff * diff) / n)
        return value, diff / n
    raise EngineError(f"unknown loss {loss!r}")


def loss_and_gradient(model: Model, inputs, labels, loss: str | None = None):
    """Mean batch loss and its gradient w.r.t. the flat parameter vector.

    The loss defaults to the one paired with the model's output head.
    """
    x = _check_inputs(model.shape, inputs)
    if x.shape[0] == 0:
        raise EngineError("loss needs a non-empty batch")
    if loss is None:
        loss = HEAD_LOSS[model.shape.output_head]
    if loss not in LOSSES:
        raise EngineError(f"unknown loss {loss!r}")

    activations, pre, outputs = _forward_trace(model, x)
    value, delta = _loss_grad_outputs(outputs, labels, loss, model.shape.n_outputs)

    layers = unflatten(model.shape, model.params)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore
    act = model.shape.activation
    for k in range(len(layers) - 1, -1, -1):
        a_in = activations[k]
        grads[k] = (a_in.T @ delta, delta.sum(axis=0))
        if k > 0:
            delta = delta @ layers[k][0].T
            if act == "relu":
                delta = delta * (pre[k - 1] > 0.0)
    return value, flatten(grads)


@dataclass(frozen=True)
class OptimizerState:
    """SGD or Adam state; moment accumulators are sized like the parameters."""

    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    moment1: np.ndarray | None = None
    moment2: np.ndarray | None = None
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise EngineError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise EngineError("learning rate must be non-negative")


def init_optimizer(kind: str, learning_rate: float, param_count: int) -> OptimizerState:
    if kind == "adam":
        return OptimizerState(
            kind, learning_rate, moment1=np.zeros(param_count), moment2=np.zeros(param_count)
        )
    return OptimizerState(kind, learning_rate)


def optimizer_step(
    state: OptimizerState, params: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, OptimizerState]:
    if state.kind == "sgd":
        return params - state.learning_rate * grad, replace(
            state, step_count=state.step_count + 1
        )
    t = state.step_count + 1
    m1 = state.beta1 * state.moment1 + (1.0 - state.beta1) * grad
    m2 = state.beta2 * state.moment2 + (1.0 - state.beta2) * grad * grad
    m1_hat = m1 / (1.0 - state.beta1**t)
    m2_hat = m2 / (1.0 - state.beta2**t)
    new_params = params - state.learning_rate * m1_hat / (np.sqrt(m2_hat) + state.eps)
    return new_params, replace(state, moment1=m1, moment2=m2, step_count=t)


def _check_finite(vec: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(vec)):
        raise EngineError(f"{what} contains non-finite values")
    return vec


def local_train_step(
    model: Model,
    opt: OptimizerState,
    inputs,
    labels,
    batch_size: int,
    rng_seed: int,
    loss: str | None = None,
    passes: int = 1,
) -> tuple[Model, np.ndarray, OptimizerState]:
    """One local training round: `passes` shuffled passes over the data.

    Returns the updated model, the additive update (new params minus old),
    and the advanced optimizer state. Deterministic for a fixed seed.
    """
    x = _check_inputs(model.shape, inputs)
    y = np.asarray(labels)
    if x.shape[0] == 0:
        raise EngineError("local training needs a non-empty dataset")
    if batch_size < 1:
        raise EngineError("batch size must be positive")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(rng_seed))))
    params = model.params
    state = opt
    current = model
    for _ in range(max(1, int(passes))):
        order = rng.permutation(x.shape[0])
        for lo in range(0, x.shape[0], batch_size):
            idx = order[lo : lo + batch_size]
            current = current.with_params(params)
            _, grad = loss_and_gradient(current, x[idx], y[idx], loss)
            params, state = optimizer_step(state, params, grad)
    _check_finite(params, "trained parameters")
    new_model = model.with_params(params)
    return new_model, params - model.params, state


def train_for_steps(
    model: Model,
    opt: OptimizerState,
    inputs,
    labels,
    steps: int,
    batch_size: int,
    rng_seed: int,
    loss: str | None = None,
) -> tuple[Model, OptimizerState]:
    """Train for a fixed optimizer-step budget (used for learning-potential runs)."""
    x = _check_inputs(model.shape, inputs)
    y = np.asarray(labels)
    if x.shape[0] == 0:
        raise EngineError("training needs a non-empty dataset")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(rng_seed))))
    params = model.params
    state = opt
    done = 0
    while done < steps:
        order = rng.permutation(x.shape[0])
        for lo in range(0, x.shape[0], batch_size):
            if done >= steps:
                break
            idx = order[lo : lo + batch_size]
            _, grad = loss_and_gradient(model.with_params(params), x[idx], y[idx], loss)
            params, state = optimizer_step(state, params, grad)
            done += 1
    return model.with_params(params), state


def evaluate(model: Model, inputs, labels, metric: str) -> float:
    """Score the model on labelled data with one of the supported metrics."""
    if metric not in METRICS:
        raise EngineError(f"unknown metric {metric!r}")
    x = _check_inputs(model.shape, inputs)
    if x.shape[0] == 0:
        raise EngineError("evaluation needs a non-empty dataset")
    head = model.shape.output_head

    if metric in ("accuracy", "error_rate"):
        if head not in CLASSIFICATION_HEADS:
            raise EngineError(f"metric {metric!r} needs a classification head, got {head!r}")
        y = _class_labels(labels, model.shape.n_outputs)
        pred = forward(model, x).argmax(axis=1)
        acc = float(np.mean(pred == y))
        return acc if metric == "accuracy" else 1.0 - acc
    if metric == "rmse":
        if head != "linear_mse":
            raise EngineError(f"metric 'rmse' needs the linear_mse head, got {head!r}")
        targets = np.asarray(labels, dtype=np.float64).reshape(x.shape[0], -1)
        pred = forward(model, x)
        return float(np.sqrt(np.mean((pred - targets) ** 2)))
    value, _ = _loss_grad_outputs(
        forward(model, x), labels, HEAD_LOSS[head], model.shape.n_outputs
    )
    return value


def mean_loss(model: Model, inputs, labels, loss: str | None = None) -> float:
    """Mean loss without the gradient (cheaper than loss_and_gradient)."""
    x = _check_inputs(model.shape, inputs)
    if x.shape[0] == 0:
        raise EngineError("loss needs a non-empty batch")
    if loss is None:
        loss = HEAD_LOSS[model.shape.output_head]
    value, _ = _loss_grad_outputs(forward(model, x), labels, loss, model.shape.n_outputs)
    return value
