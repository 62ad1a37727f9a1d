"""
Multilayer perceptron core: forward pass, reverse-mode log-likelihood gradients,
parameter (de)flattening, prior initialization and a finite-difference oracle.

Parameters live in one flat float64 vector. Each layer contributes its weight
matrix (in x out, row-major) followed by its bias (out).
"""
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.special import log_softmax, softmax


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: ReLU hidden layers, softmax output"""
    input_dim: int
    hidden_widths: Tuple[int, ...] = field(default_factory=tuple)
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"Layer widths must be >= 1: {self.layer_sizes}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def layer_sizes(self):
        return (self.input_dim, *self.hidden_widths, self.num_classes)

    @property
    def layer_shapes(self):
        sizes = self.layer_sizes
        return [(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]

    @property
    def num_params(self):
        return sum((n_in + 1) * n_out for n_in, n_out in self.layer_shapes)

    def to_dict(self):
        return {"input_dim": self.input_dim, "hidden_widths": list(self.hidden_widths), "num_classes": self.num_classes}


# ---------------- Parameter Layout ----------------
def check_params(spec, params):
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise ValueError(f"Parameter vector has shape {params.shape}, expected ({spec.num_params},)")
    return params


def unflatten(spec, params):
    """
    Split a flat parameter vector into per-layer (W, b) pairs

    Args:
        spec: MlpSpec
        params: Flat vector of length spec.num_params

    Returns:
        List of (W, b) with W of shape (in, out) and b of shape (out,).
        The arrays are views into params.
    """
    params = check_params(spec, params)
    layers, offset = [], 0
    for n_in, n_out in spec.layer_shapes:
        w = params[offset:offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        b = params[offset:offset + n_out]
        offset += n_out
        layers.append((w, b))
    return layers


def flatten(spec, layers):
    """Inverse of unflatten"""
    if len(layers) != len(spec.layer_shapes):
        raise ValueError(f"Expected {len(spec.layer_shapes)} layers, got {len(layers)}")
    chunks = []
    for (w, b), (n_in, n_out) in zip(layers, spec.layer_shapes):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.shape != (n_in, n_out) or b.shape != (n_out,):
            raise ValueError(f"Layer shapes {w.shape}/{b.shape} do not match ({n_in}, {n_out})")
        chunks.append(w.ravel())
        chunks.append(b)
    return np.concatenate(chunks)


def init_params(spec, prior_std, seed):
    """Draw a parameter vector from the prior N(0, prior_std^2 I)"""
    if not prior_std > 0:
        raise ValueError(f"prior_std must be > 0, got {prior_std}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, prior_std, size=spec.num_params)


# ---------------- Forward ----------------
def _check_inputs(spec, inputs):
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise ValueError(f"Inputs have shape {inputs.shape}, expected (n, {spec.input_dim})")
    return inputs


def _forward_cache(spec, params, inputs):
    layers = unflatten(spec, params)
    activations = [_check_inputs(spec, inputs)]
    preacts = []
    for w, b in layers[:-1]:
        z = activations[-1] @ w + b
        preacts.append(z)
        activations.append(np.maximum(z, 0.0))
    w, b = layers[-1]
    logits = activations[-1] @ w + b
    return layers, activations, preacts, logits


def forward(spec, params, inputs):
    """Logits (n x C) of the network for a batch of inputs (n x p)"""
    return _forward_cache(spec, params, inputs)[3]


def preactivations(spec, params, inputs):
    """Pre-ReLU values of every hidden layer"""
    return _forward_cache(spec, params, inputs)[2]


def predict_proba(spec, params, inputs):
    return softmax(forward(spec, params, inputs), axis=1)


# ---------------- Log-likelihood and Gradient ----------------
def target_matrix(targets, num_classes, n):
    """
    Normalize targets to an n x C weight matrix

    Integer labels become one-hot rows; count (or soft-target) matrices pass
    through after validation.
    """
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != n:
            raise ValueError(f"Got {targets.shape[0]} labels for {n} inputs")
        if not np.issubdtype(targets.dtype, np.integer):
            raise ValueError("Label targets must be integers")
        if targets.size and (targets.min() < 0 or targets.max() >= num_classes):
            raise ValueError(f"Labels must lie in [0, {num_classes})")
        onehot = np.zeros((n, num_classes))
        onehot[np.arange(n), targets] = 1.0
        return onehot
    if targets.ndim == 2:
        if targets.shape != (n, num_classes):
            raise ValueError(f"Target matrix has shape {targets.shape}, expected ({n}, {num_classes})")
        weights = targets.astype(np.float64)
        if np.any(weights < 0):
            raise ValueError("Count targets must be non-negative")
        return weights
    raise ValueError(f"Targets must be 1-D labels or a 2-D count matrix, got ndim={targets.ndim}")


def loglik(spec, params, inputs, targets):
    """Sum over the batch of y_i^T log softmax(f(x_i))"""
    logits = forward(spec, params, inputs)
    weights = target_matrix(targets, spec.num_classes, logits.shape[0])
    value = float(np.sum(weights * log_softmax(logits, axis=1)))
    if not np.isfinite(value):
        raise FloatingPointError("Non-finite log-likelihood")
    return value


def grad_loglik(spec, params, inputs, targets):
    """
    Batch log-likelihood and its exact gradient by reverse accumulation

    Args:
        spec: MlpSpec
        params: Flat parameter vector
        inputs: Feature matrix (B x p)
        targets: Integer labels (B,) or non-negative count vectors (B x C)

    Returns:
        Tuple of (loglik, grad) where grad has the layout of params
    """
    layers, activations, preacts, logits = _forward_cache(spec, params, inputs)
    weights = target_matrix(targets, spec.num_classes, logits.shape[0])
    log_probs = log_softmax(logits, axis=1)
    value = float(np.sum(weights * log_probs))

    # d/dlogits of sum_c y_c log p_c = y - (sum_c y_c) p
    delta = weights - weights.sum(axis=1, keepdims=True) * np.exp(log_probs)

    grads = [None] * len(layers)
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        grads[idx] = (activations[idx].T @ delta, delta.sum(axis=0))
        if idx > 0:
            # ReLU subgradient at 0 is 0
            delta = (delta @ w.T) * (preacts[idx - 1] > 0.0)

    grad = flatten(spec, grads)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise FloatingPointError("Non-finite value in log-likelihood gradient")
    return value, grad


# ---------------- Finite Differences ----------------
def central_difference(fn, x, h):
    """Coordinate-wise central differences with step h * (1 + |x_i|)"""
    if not h > 0:
        raise ValueError(f"Finite-difference step must be > 0, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        step = h * (1.0 + abs(x[i]))
        orig = x[i]
        x[i] = orig + step
        f_plus = fn(x)
        x[i] = orig - step
        f_minus = fn(x)
        x[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def finite_diff_grad(spec, params, inputs, targets, h=1e-5):
    """Finite-difference oracle for grad_loglik"""
    params = check_params(spec, params)
    return central_difference(lambda p: loglik(spec, p, inputs, targets), params, h)


def relative_grad_error(grad, reference):
    """max_i |g_i - r_i| / (1 + |r_i|)"""
    grad = np.asarray(grad)
    reference = np.asarray(reference)
    return float(np.max(np.abs(grad - reference) / (1.0 + np.abs(reference))))


def dead_unit_fraction(spec, params, inputs) -> List[float]:
    """Fraction of hidden units that never fire on the given inputs, per layer"""
    return [float(np.mean(np.all(z <= 0.0, axis=0))) for z in preactivations(spec, params, inputs)]
