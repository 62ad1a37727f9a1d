"""
Posterior energy U(theta) = -sum_i y_i^T log f_i - log p(theta), its minibatch
gradient estimator, and the tempering conventions used by the samplers.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from config import DEFAULT_PRIOR_STD, LIKELIHOOD_VARIANTS
from nn_utils import grad_loglik, loglik


@dataclass(frozen=True)
class PriorConfig:
    std: float = DEFAULT_PRIOR_STD

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"Prior std must be > 0, got {self.std}")


@dataclass(frozen=True)
class LikelihoodKind:
    """
    Which targets enter y_i^T log f_i

    categorical      one-hot of the integer label
    counts           raw labeller counts (L_c)
    counts_smoothed  counts / S (L_ls); S=None divides each row by its own total
    label_smoothing  1 - alpha on the label, alpha / C elsewhere (L_alpha)

    weight multiplies the whole likelihood term (over-weighting experiments).
    """
    variant: str = "categorical"
    num_labellers: Optional[int] = None
    alpha: float = 0.1
    weight: float = 1.0

    def __post_init__(self):
        if self.variant not in LIKELIHOOD_VARIANTS:
            raise ValueError(f"Unknown likelihood variant: {self.variant}")
        if self.variant == "label_smoothing" and not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.num_labellers is not None and self.num_labellers < 1:
            raise ValueError(f"num_labellers must be >= 1, got {self.num_labellers}")
        if not self.weight > 0:
            raise ValueError(f"Likelihood weight must be > 0, got {self.weight}")

    @property
    def needs_counts(self):
        return self.variant in ("counts", "counts_smoothed")


TEMPER_MODES = ("joint", "likelihood_only")


# ---------------- Prior ----------------
def log_prior(params, prior):
    """
    Isotropic Gaussian log-density and gradient

    Returns:
        Tuple of (value, grad)
    """
    params = np.asarray(params, dtype=np.float64)
    var = prior.std ** 2
    d = params.shape[0]
    value = -float(params @ params) / (2.0 * var) - 0.5 * d * np.log(2.0 * np.pi * var)
    return value, -params / var


# ---------------- Likelihood Targets ----------------
def likelihood_targets(kind, labels, counts, num_classes):
    """
    Target-weight matrix for the rows given

    Args:
        kind: LikelihoodKind
        labels: Integer labels (n,)
        counts: Count matrix (n x C) or None
        num_classes: C

    Returns:
        Integer labels (categorical) or an n x C float matrix
    """
    if kind.variant == "categorical":
        return labels
    if kind.variant == "label_smoothing":
        n = labels.shape[0]
        targets = np.full((n, num_classes), kind.alpha / num_classes)
        targets[np.arange(n), labels] = 1.0 - kind.alpha
        return targets
    if counts is None:
        raise ValueError(f"Likelihood variant {kind.variant} needs per-class counts")
    counts = np.asarray(counts, dtype=np.float64)
    if kind.variant == "counts":
        return counts
    if kind.num_labellers is not None:
        return counts / kind.num_labellers
    totals = counts.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise ValueError("Every counts row needs at least one count for counts_smoothed")
    return counts / totals


def target_sum(kind, num_classes):
    """Sum of one smoothed target row: 1 - alpha + (C - 1) alpha / C"""
    if kind.variant != "label_smoothing":
        return 1.0
    return 1.0 - kind.alpha + (num_classes - 1) * kind.alpha / num_classes


def _rows(dataset, indices, kind):
    inputs = dataset.features[indices]
    labels = dataset.labels[indices]
    counts = dataset.counts[indices] if dataset.counts is not None else None
    return inputs, likelihood_targets(kind, labels, counts, dataset.num_classes)


# ---------------- Energy ----------------
def full_energy(spec, params, dataset, likelihood, prior):
    """Exact full-batch U(theta)"""
    if dataset.n == 0:
        raise ValueError("full_energy needs a non-empty dataset")
    inputs, targets = _rows(dataset, np.arange(dataset.n), likelihood)
    lik = likelihood.weight * loglik(spec, params, inputs, targets)
    return -lik - log_prior(params, prior)[0]


def full_energy_grad(spec, params, dataset, likelihood, prior):
    inputs, targets = _rows(dataset, np.arange(dataset.n), likelihood)
    _, grad = grad_loglik(spec, params, inputs, targets)
    return -likelihood.weight * grad - log_prior(params, prior)[1]


def minibatch_energy_and_grad(spec, params, dataset, batch_indices, likelihood, prior, lik_scale=1.0, inputs=None):
    """
    Unbiased minibatch estimate of U and its gradient

    U~ = -(n / B) * lik_scale * sum_batch y_i^T log f_i - log p(theta)

    Args:
        inputs: Optional replacement features for the batch rows (augmented images)

    Returns:
        Tuple of (energy estimate, gradient)
    """
    batch_indices = np.asarray(batch_indices)
    if batch_indices.size == 0:
        raise ValueError("Empty minibatch")
    if batch_indices.min() < 0 or batch_indices.max() >= dataset.n:
        raise ValueError("Minibatch indices out of range")
    batch_inputs, targets = _rows(dataset, batch_indices, likelihood)
    if inputs is not None:
        batch_inputs = inputs
    value, grad = grad_loglik(spec, params, batch_inputs, targets)
    scale = likelihood.weight * lik_scale * dataset.n / batch_indices.size
    prior_value, prior_grad = log_prior(params, prior)
    return -scale * value - prior_value, -scale * grad - prior_grad


def minibatch_energy_grad(spec, params, dataset, batch_indices, likelihood, prior, lik_scale=1.0):
    return minibatch_energy_and_grad(spec, params, dataset, batch_indices, likelihood, prior, lik_scale)[1]


# ---------------- Tempering ----------------
def effective_scales(temperature, mode):
    """
    Map a temperature to (lik_scale, prior_scale, noise_temp)

    joint: the sampler noise runs at T, which targets exp(-U / T).
    likelihood_only: the likelihood gradient is scaled by 1 / T at unit noise.
    """
    if not temperature > 0:
        raise ValueError(f"Temperature must be > 0, got {temperature}")
    if mode == "joint":
        return 1.0, 1.0, float(temperature)
    if mode == "likelihood_only":
        return 1.0 / temperature, 1.0, 1.0
    raise ValueError(f"Unknown temper mode: {mode}")
