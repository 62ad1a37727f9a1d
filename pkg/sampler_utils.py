"""
SG-MCMC samplers (SGLD, SG-HMC) with cyclical step sizes, plus the Adam/SGD
optimizers used to train synthetic labellers.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    ADAM_LR,
    AUGMENT_KINDS,
    DEFAULT_MOMENTUM_WEIGHT,
    DEFAULT_SAMPLER_KIND,
    DIVERGENCE_ENERGY_LIMIT,
)
from data_utils import augment_batch, steps_per_epoch
from energy_utils import TEMPER_MODES, effective_scales, minibatch_energy_and_grad
from nn_utils import init_params
from seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    """
    One chain's settings

    base_step is the learning rate of the cyclical schedule. With
    per_datum_step the rate is per datum: SGLD uses eps = lr / n and SG-HMC
    uses eps = sqrt(lr / n). Otherwise lr is used as eps directly.
    """
    temperature: float = 1.0
    base_step: float = 0.1
    batch_size: Optional[int] = None
    burn_in_epochs: int = 0
    cycle_epochs: int = 1
    total_epochs: int = 1
    momentum_weight: float = DEFAULT_MOMENTUM_WEIGHT
    temper_mode: str = "joint"
    seed: int = 0
    kind: str = DEFAULT_SAMPLER_KIND
    per_datum_step: bool = True
    augment: Optional[str] = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"Temperature must be > 0, got {self.temperature}")
        if not self.base_step > 0:
            raise ValueError(f"base_step must be > 0, got {self.base_step}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.burn_in_epochs < 0 or self.cycle_epochs < 1:
            raise ValueError("burn_in_epochs must be >= 0 and cycle_epochs >= 1")
        if self.total_epochs <= self.burn_in_epochs:
            raise ValueError(f"total_epochs ({self.total_epochs}) leaves no cycles after burn-in ({self.burn_in_epochs})")
        if (self.total_epochs - self.burn_in_epochs) % self.cycle_epochs:
            raise ValueError("Epochs after burn-in must be a whole number of cycles")
        if not 0.0 <= self.momentum_weight < 1.0:
            raise ValueError(f"momentum_weight must lie in [0, 1), got {self.momentum_weight}")
        if self.temper_mode not in TEMPER_MODES:
            raise ValueError(f"Unknown temper mode: {self.temper_mode}")
        if self.kind not in ("sgld", "sghmc"):
            raise ValueError(f"Unknown sampler kind: {self.kind}")
        if self.augment is not None and self.augment not in AUGMENT_KINDS:
            raise ValueError(f"Unknown augmentation kind: {self.augment}")

    @property
    def num_samples(self):
        return (self.total_epochs - self.burn_in_epochs) // self.cycle_epochs


@dataclass
class ChainState:
    params: np.ndarray
    momentum: np.ndarray
    step: int = 0
    diverged: bool = False

    @classmethod
    def start(cls, params):
        params = np.asarray(params, dtype=np.float64)
        return cls(params=params, momentum=np.zeros_like(params))


@dataclass
class PosteriorEnsemble:
    """Collected parameter samples, one per cycle after burn-in"""
    samples: List[np.ndarray] = field(default_factory=list)
    momenta: List[np.ndarray] = field(default_factory=list)
    meta: List[dict] = field(default_factory=list)
    gradient_evaluations: int = 0
    kind: str = DEFAULT_SAMPLER_KIND

    @property
    def size(self):
        return len(self.samples)


class ChainDivergedError(RuntimeError):
    def __init__(self, report):
        super().__init__(
            f"Chain diverged at step {report.get('step')} (epoch {report.get('epoch')}, "
            f"eps={report.get('step_size'):.3e}): {report.get('reason')}"
        )
        self.report = report


# ---------------- Step Size ----------------
def cyclical_step(t, steps_per_cycle, base_step):
    """Cosine schedule: base_step at the start of each cycle, decaying towards 0"""
    if steps_per_cycle < 1:
        raise ValueError(f"steps_per_cycle must be >= 1, got {steps_per_cycle}")
    phase = (t % steps_per_cycle) / steps_per_cycle
    return 0.5 * base_step * (math.cos(math.pi * phase) + 1.0)


def step_size_for(kind, lr, n, per_datum_step=True):
    if not per_datum_step:
        return lr
    return lr / n if kind == "sgld" else math.sqrt(lr / n)


# ---------------- Sampler Steps ----------------
def _finite(state):
    return bool(np.all(np.isfinite(state.params)) and np.all(np.isfinite(state.momentum)))


def sgld_step(state, grad, step_size, noise_temp, rng):
    """
    theta <- theta - (eps / 2) grad U~ + N(0, eps * T)

    Returns:
        New ChainState, flagged diverged on a non-finite update
    """
    noise = math.sqrt(step_size * noise_temp) * rng.standard_normal(state.params.shape[0])
    new = ChainState(
        params=state.params - 0.5 * step_size * grad + noise,
        momentum=state.momentum,
        step=state.step + 1,
    )
    new.diverged = not _finite(new)
    return new


def sghmc_step(state, grad, step_size, momentum_weight, noise_temp, rng):
    """
    m <- (1 - eps a) m - eps grad U~ + sqrt(2) eta,  eta ~ N(0, eps a T)
    theta <- theta + eps m

    The friction a and the noise variance are balanced so that the chain
    targets exp(-U / T) with kinetic temperature T.
    """
    if not 0.0 <= momentum_weight < 1.0:
        raise ValueError(f"momentum_weight must lie in [0, 1), got {momentum_weight}")
    eta = math.sqrt(step_size * momentum_weight * noise_temp) * rng.standard_normal(state.params.shape[0])
    momentum = (1.0 - step_size * momentum_weight) * state.momentum - step_size * grad + math.sqrt(2.0) * eta
    new = ChainState(
        params=state.params + step_size * momentum,
        momentum=momentum,
        step=state.step + 1,
    )
    new.diverged = not _finite(new)
    return new


def kinetic_temperature(momenta):
    """Mean of m^T m / d over collected momenta; about T for a well-simulated chain"""
    momenta = [np.asarray(m, dtype=np.float64) for m in momenta]
    if not momenta:
        raise ValueError("kinetic_temperature needs at least one momentum vector")
    return float(np.mean([m @ m / m.shape[0] for m in momenta]))


# ---------------- Chain Driver ----------------
def _augmented_inputs(dataset, indices, kind, rng):
    if dataset.image_shape is None:
        raise ValueError(f"Augmentation '{kind}' needs image data, {dataset.name} has flat features")
    images = dataset.features[indices].reshape(len(indices), *dataset.image_shape)
    return augment_batch(images, kind, rng).reshape(len(indices), -1)


def run_chain(spec, dataset, likelihood, prior, config, initial_params=None):
    """
    Run one SG-MCMC chain and collect one sample at the end of every cycle

    The data are reshuffled every epoch and visited in minibatches, the last
    one possibly partial. The cosine schedule restarts when burn-in ends, so
    the final step of each cycle (smallest step size) is the collection point.

    Args:
        spec: MlpSpec
        dataset: LabeledDataset
        likelihood: LikelihoodKind
        prior: PriorConfig
        config: SamplerConfig
        initial_params: Starting point; defaults to a prior draw from the chain seed

    Returns:
        PosteriorEnsemble with config.num_samples samples

    Raises:
        ChainDivergedError with a diagnostic report
    """
    if dataset.n < 1:
        raise ValueError("run_chain needs a non-empty dataset")
    if initial_params is None:
        initial_params = init_params(spec, prior.std, derive_seed(config.seed, "init"))
    rng = np.random.default_rng(derive_seed(config.seed, "sampler"))
    augment_rng = np.random.default_rng(derive_seed(config.seed, "augment"))

    n = dataset.n
    batch = n if config.batch_size is None else min(config.batch_size, n)
    spe = steps_per_epoch(n, config.batch_size)
    burn_steps = spe * config.burn_in_epochs
    cycle_steps = spe * config.cycle_epochs
    lik_scale, _, noise_temp = effective_scales(config.temperature, config.temper_mode)

    state = ChainState.start(initial_params)
    ensemble = PosteriorEnsemble(kind=config.kind)
    t = 0
    for epoch in range(config.total_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            indices = perm[start:start + batch]
            lr = cyclical_step(t - burn_steps, cycle_steps, config.base_step)
            eps = step_size_for(config.kind, lr, n, config.per_datum_step)
            inputs = _augmented_inputs(dataset, indices, config.augment, augment_rng) if config.augment else None

            report = {"step": t, "epoch": epoch, "step_size": eps, "temperature": config.temperature, "seed": config.seed}
            try:
                energy, grad = minibatch_energy_and_grad(spec, state.params, dataset, indices, likelihood, prior, lik_scale, inputs=inputs)
            except FloatingPointError as e:
                raise ChainDivergedError({**report, "energy": float("nan"), "reason": str(e)}) from None
            ensemble.gradient_evaluations += 1
            if not math.isfinite(energy) or abs(energy) > DIVERGENCE_ENERGY_LIMIT:
                raise ChainDivergedError({**report, "energy": energy, "reason": "energy estimate out of range"})

            if config.kind == "sgld":
                state = sgld_step(state, grad, eps, noise_temp, rng)
            else:
                state = sghmc_step(state, grad, eps, config.momentum_weight, noise_temp, rng)
            if state.diverged:
                raise ChainDivergedError({**report, "energy": energy, "reason": "non-finite parameters"})

            if t >= burn_steps and (t - burn_steps) % cycle_steps == cycle_steps - 1:
                cycle = (t - burn_steps) // cycle_steps
                ensemble.samples.append(state.params.copy())
                ensemble.momenta.append(state.momentum.copy())
                ensemble.meta.append({"cycle": cycle, "epoch": epoch, "step_size": eps})
                kinetic = state.momentum @ state.momentum / state.momentum.shape[0]
                logger.info(
                    "[CHAIN] T=%g seed=%d cycle=%d/%d epoch=%d eps=%.3e U=%.5e kinetic_T=%s",
                    config.temperature, config.seed, cycle + 1, config.num_samples, epoch, eps, energy,
                    f"{kinetic:.4f}" if config.kind == "sghmc" else "n/a",
                )
            t += 1
    return ensemble


# ---------------- Optimizers ----------------
def adam_step(params, grad, moment1, moment2, t, lr=ADAM_LR, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """
    One bias-corrected Adam step (descent on the loss whose gradient is grad)

    Returns:
        Tuple of (params, moment1, moment2)
    """
    if t < 1:
        raise ValueError(f"Adam step counter starts at 1, got {t}")
    moment1 = beta1 * moment1 + (1.0 - beta1) * grad
    moment2 = beta2 * moment2 + (1.0 - beta2) * (grad * grad)
    m_hat = moment1 / (1.0 - beta1 ** t)
    v_hat = moment2 / (1.0 - beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), moment1, moment2


def sgd_step(params, grad, lr):
    return params - lr * grad
