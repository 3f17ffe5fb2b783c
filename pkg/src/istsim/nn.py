"""Dense feedforward networks with manual backpropagation.

Everything here is value-semantic and deterministic: operations take a model
and return a new one, arrays are 64-bit, and no global state is touched.
Hidden pre-activations pass through a per-neuron standardizer ((x - mu) / sigma,
no learned affine) that either uses per-batch statistics during training or
frozen calibrated statistics for deployment.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

# Clamp on sigma so dead (constant) neurons never divide by zero.
EPSILON_STD = 1e-8


class DimensionError(ValueError):
    """Shapes of inputs do not match the model's layer widths."""


class ActivationKind(str, Enum):
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


@dataclass(frozen=True)
class ModelDims:
    """Layer widths [N_0, ..., N_t]: N_0 input features, N_t output labels."""

    widths: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.widths) < 3:
            raise DimensionError("need at least input, one hidden, and output layer")
        if any(w < 1 for w in self.widths):
            raise DimensionError(f"all widths must be >= 1, got {self.widths}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def n_layers(self) -> int:
        """Number of weight matrices t."""
        return len(self.widths) - 1

    @property
    def hidden(self) -> tuple[int, ...]:
        return self.widths[1:-1]

    def weight_shape(self, layer: int) -> tuple[int, int]:
        """Shape (N_l, N_{l-1}) of the 1-indexed weight matrix W^l."""
        return (self.widths[layer], self.widths[layer - 1])


@dataclass(frozen=True)
class StandardizerState:
    """Per-neuron (x - mu) / sigma state for one hidden layer."""

    mean: np.ndarray
    std: np.ndarray
    mode: str = "frozen"  # "batch_stats" | "frozen"

    def __post_init__(self) -> None:
        if self.mode not in ("batch_stats", "frozen"):
            raise ValueError(f"unknown standardizer mode {self.mode!r}")
        if np.any(self.std < EPSILON_STD):
            raise ValueError("standardizer std below clamp")

    @staticmethod
    def identity(width: int, mode: str = "frozen") -> "StandardizerState":
        return StandardizerState(np.zeros(width), np.ones(width), mode)


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (N_l, N_{l-1})
    bias: np.ndarray  # (N_l,)


@dataclass(frozen=True)
class Model:
    dims: ModelDims
    layers: tuple[Layer, ...]
    activation: ActivationKind
    standardizers: tuple[StandardizerState, ...]  # one per hidden layer

    def __post_init__(self) -> None:
        if len(self.layers) != self.dims.n_layers:
            raise DimensionError("layer count does not match dims")
        for l, layer in enumerate(self.layers, start=1):
            if layer.weights.shape != self.dims.weight_shape(l):
                raise DimensionError(
                    f"layer {l} weights {layer.weights.shape} != {self.dims.weight_shape(l)}"
                )
            if layer.bias.shape != (self.dims.widths[l],):
                raise DimensionError(f"layer {l} bias shape {layer.bias.shape}")
            if not np.all(np.isfinite(layer.bias)):
                raise ValueError(f"layer {l} bias not finite")
        if len(self.standardizers) != self.dims.n_layers - 1:
            raise DimensionError("need one standardizer per hidden layer")

    def float_count(self) -> int:
        """Total number of 64-bit parameters (weights + biases)."""
        return sum(layer.weights.size + layer.bias.size for layer in self.layers)

    def weight_float_count(self) -> int:
        return sum(layer.weights.size for layer in self.layers)


@dataclass(frozen=True)
class LayerCache:
    raw_pre: np.ndarray  # (B, N_l), pre-activation before standardization
    std_pre: np.ndarray | None  # standardized pre-activation (hidden layers)
    mu: np.ndarray | None
    sigma: np.ndarray | None
    batch_mode: bool
    clamped: np.ndarray | None  # neurons whose sigma hit the clamp


@dataclass(frozen=True)
class ActivationCache:
    activations: tuple[np.ndarray, ...]  # f^0 .. f^t, f^t are the logits
    layers: tuple[LayerCache, ...]

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]


@dataclass(frozen=True)
class Gradients:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]


def init_model(
    dims: ModelDims,
    activation: ActivationKind = ActivationKind.RELU,
    seed: int = 0,
    standardizer_mode: str = "frozen",
) -> Model:
    """Seeded He-style initialization; biases zero, standardizers identity."""
    rng = np.random.default_rng(seed)
    layers = []
    for l in range(1, dims.n_layers + 1):
        fan_in = dims.widths[l - 1]
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=dims.weight_shape(l))
        layers.append(Layer(w, np.zeros(dims.widths[l])))
    stands = tuple(
        StandardizerState.identity(w, mode=standardizer_mode) for w in dims.hidden
    )
    return Model(dims, tuple(layers), ActivationKind(activation), stands)


def set_standardizer_mode(model: Model, mode: str) -> Model:
    stands = tuple(replace(s, mode=mode) for s in model.standardizers)
    return replace(model, standardizers=stands)


def _activate(kind: ActivationKind, z: np.ndarray) -> np.ndarray:
    if kind is ActivationKind.RELU:
        return np.maximum(z, 0.0)
    if kind is ActivationKind.TANH:
        return np.tanh(z)
    if kind is ActivationKind.SIGMOID:
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _activate_grad(kind: ActivationKind, z: np.ndarray, post: np.ndarray) -> np.ndarray:
    # Derivative of the activation wrt its input z, using post where cheaper.
    if kind is ActivationKind.RELU:
        return (z > 0.0).astype(np.float64)
    if kind is ActivationKind.TANH:
        return 1.0 - post * post
    if kind is ActivationKind.SIGMOID:
        return post * (1.0 - post)
    return np.ones_like(z)


def forward(model: Model, batch: np.ndarray) -> ActivationCache:
    """Full forward pass; hidden layers standardize per their mode.

    The cache keeps raw and standardized pre-activations per layer so that
    backward() can differentiate through batch statistics when needed.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.dims.widths[0]:
        raise DimensionError(
            f"batch shape {batch.shape} does not match input width {model.dims.widths[0]}"
        )
    acts = [batch]
    caches = []
    a = batch
    t = model.dims.n_layers
    for l in range(1, t + 1):
        layer = model.layers[l - 1]
        z_raw = a @ layer.weights.T + layer.bias  # (B, N_l)
        if l < t:
            st = model.standardizers[l - 1]
            if st.mode == "batch_stats":
                mu = z_raw.mean(axis=0)
                raw_sd = z_raw.std(axis=0)
                clamped = raw_sd < EPSILON_STD
                sigma = np.where(clamped, EPSILON_STD, raw_sd)
                batch_mode = True
            else:
                mu, sigma = st.mean, st.std
                clamped = None
                batch_mode = False
            z_std = (z_raw - mu) / sigma
            a = _activate(model.activation, z_std)
            caches.append(LayerCache(z_raw, z_std, mu, sigma, batch_mode, clamped))
        else:
            # Output layer: identity logits; loss supplies the nonlinearity.
            a = z_raw
            caches.append(LayerCache(z_raw, None, None, None, False, None))
        acts.append(a)
    return ActivationCache(tuple(acts), tuple(caches))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient wrt logits."""
    labels = np.asarray(labels)
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(b), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


def mse_loss(outputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """0.5 * mean over the batch of the squared error, and gradient wrt outputs."""
    targets = np.asarray(targets, dtype=np.float64)
    b = outputs.shape[0]
    diff = outputs - targets
    loss = 0.5 * float((diff * diff).sum()) / b
    return loss, diff / b


def _standardizer_backward(cache: LayerCache, d_std: np.ndarray) -> np.ndarray:
    """Gradient through (x - mu) / sigma wrt the raw pre-activation."""
    if not cache.batch_mode:
        return d_std / cache.sigma
    n = d_std.shape[0]
    zh = cache.std_pre
    # Batch statistics: mu and sigma are functions of x.
    # dx = (1/(n*sigma)) * (n*dzh - sum(dzh) - zh * sum(dzh*zh))
    full = (n * d_std - d_std.sum(axis=0) - zh * (d_std * zh).sum(axis=0)) / (
        n * cache.sigma
    )
    if cache.clamped is not None and cache.clamped.any():
        # Clamped columns have constant sigma; only the mean depends on x.
        mean_path = (d_std - d_std.mean(axis=0)) / cache.sigma
        full = np.where(cache.clamped, mean_path, full)
    return full


def backward(
    model: Model,
    cache: ActivationCache,
    targets: np.ndarray,
    loss: str = "cross_entropy",
) -> Gradients:
    """Gradients of the mean batch loss wrt every weight and bias."""
    logits = cache.logits
    if loss == "cross_entropy":
        _, d_out = softmax_cross_entropy(logits, targets)
    elif loss == "mse":
        _, d_out = mse_loss(logits, targets)
    else:
        raise ValueError(f"unknown loss {loss!r}")

    t = model.dims.n_layers
    d_weights: list[np.ndarray] = [None] * t
    d_biases: list[np.ndarray] = [None] * t

    d_raw = d_out  # gradient wrt raw pre-activation of the current layer
    for l in range(t, 0, -1):
        a_prev = cache.activations[l - 1]
        d_weights[l - 1] = d_raw.T @ a_prev
        d_biases[l - 1] = d_raw.sum(axis=0)
        if l == 1:
            break
        d_prev_post = d_raw @ model.layers[l - 1].weights  # (B, N_{l-1})
        prev = cache.layers[l - 2]
        d_std = d_prev_post * _activate_grad(
            model.activation, prev.std_pre, cache.activations[l - 1]
        )
        d_raw = _standardizer_backward(prev, d_std)
    return Gradients(tuple(d_weights), tuple(d_biases))


def loss_value(model: Model, batch: np.ndarray, targets: np.ndarray, loss: str = "cross_entropy") -> float:
    """Convenience: forward + loss, no gradients."""
    logits = forward(model, batch).logits
    if loss == "cross_entropy":
        return softmax_cross_entropy(logits, targets)[0]
    if loss == "mse":
        return mse_loss(logits, targets)[0]
    raise ValueError(f"unknown loss {loss!r}")


def sgd_step(model: Model, grads: Gradients, eta: float) -> Model:
    """One step of w <- w - eta * g, elementwise, returning a new model."""
    if eta < 0:
        raise ValueError("learning rate must be >= 0")
    layers = tuple(
        Layer(layer.weights - eta * dw, layer.bias - eta * db)
        for layer, dw, db in zip(model.layers, grads.weights, grads.biases)
    )
    return replace(model, layers=layers)


def average_gradients(grads: list[Gradients]) -> Gradients:
    """Elementwise mean of per-worker gradients."""
    k = len(grads)
    weights = tuple(
        sum(g.weights[i] for g in grads) / k for i in range(len(grads[0].weights))
    )
    biases = tuple(
        sum(g.biases[i] for g in grads) / k for i in range(len(grads[0].biases))
    )
    return Gradients(weights, biases)


def calibrate_standardizers(model: Model, batch: np.ndarray) -> Model:
    """Freeze per-neuron mu, sigma measured on the full network.

    Layers are calibrated in order: each hidden layer's statistics are taken
    over its raw pre-activations with all earlier layers already standardized
    by their freshly frozen state, which is what deployment will reproduce.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise ValueError("calibration batch is empty")
    if batch.ndim != 2 or batch.shape[1] != model.dims.widths[0]:
        raise DimensionError(f"calibration batch shape {batch.shape}")
    t = model.dims.n_layers
    a = batch
    new_stands = []
    for l in range(1, t):
        layer = model.layers[l - 1]
        z = a @ layer.weights.T + layer.bias
        mu = z.mean(axis=0)
        sd = np.maximum(z.std(axis=0), EPSILON_STD)
        new_stands.append(StandardizerState(mu, sd, "frozen"))
        a = _activate(model.activation, (z - mu) / sd)
    return replace(model, standardizers=tuple(new_stands))


def masked_forward_unbiased(
    model: Model, batch: np.ndarray, plan
) -> list[np.ndarray]:
    """Subnet-masked pre-activation estimates, one per hidden layer.

    For hidden layer l this evaluates the site-mean of the n^2-scaled masked
    product, i.e. (1/n) * sum_s n^2 * m^l_s o (W^l (m^{l-1}_s o f^{l-1})) plus
    the layer bias, with f^{l-1} the exact activations of the unmasked forward
    pass. Per site, n^2 times the doubly masked product is an unbiased
    estimate of the full product (the co-location probability of an input and
    an output neuron at one given site is 1/n^2); averaging sites keeps that
    expectation. Layer 1 needs a sampled input-layer assignment, so the plan
    must carry one (see masks.sample_plan(include_input=True)).

    With n = 1 all masks are ones and the result is bit-identical to the raw
    pre-activations of forward().
    """
    from . import masks  # local import to avoid a module cycle

    if not isinstance(plan, masks.MaskPlan):
        raise TypeError("plan must be a MaskPlan")
    plan.validate(model.dims)
    if plan.input_assignment is None:
        raise masks.ConfigError(
            "masked_forward_unbiased needs a plan with an input-layer assignment"
        )
    cache = forward(model, batch)
    n = plan.n_sites
    estimates = []
    for l in range(1, model.dims.n_layers):
        prev_sites = plan.input_assignment if l == 1 else plan.assignments[l - 2]
        cur_sites = plan.assignments[l - 1]
        w = model.layers[l - 1].weights
        a_prev = cache.activations[l - 1]
        acc = np.zeros((a_prev.shape[0], model.dims.widths[l]))
        for s in range(n):
            masked_in = a_prev * (prev_sites == s)
            acc += (masked_in @ w.T) * (cur_sites == s)
        estimates.append(n * acc + model.layers[l - 1].bias)
    return estimates
