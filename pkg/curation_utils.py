"""
Synthetic dataset curation: a probabilistic labeller relabels the data with S
simulated annotators and a point survives only under unanimous consensus.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from config import ADAM_LR, LABELLER_BATCH_SIZE, LABELLER_EPOCHS
from data_utils import LabeledDataset, save_csv, subsample
from nn_utils import MlpSpec, flatten, grad_loglik, init_params, predict_proba
from sampler_utils import adam_step, sgd_step
from seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

RELABEL_MODES = ("consensus_label", "original_label")
SAMPLING_MODES = ("shared", "independent")


@dataclass(frozen=True)
class CurationConfig:
    num_labellers: int = 3
    flatten_alpha: float = 1.0
    pretrain_fraction: float = 0.5
    labeller_hidden_widths: Tuple[int, ...] = (20,)
    labeller_optimizer: str = "adam"
    labeller_epochs: int = LABELLER_EPOCHS
    labeller_batch_size: int = LABELLER_BATCH_SIZE
    labeller_lr: float = ADAM_LR
    labeller_init_std: float = 0.1
    sampling: str = "shared"
    relabel_mode: str = "consensus_label"
    curate_test: bool = True
    target_size: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "labeller_hidden_widths", tuple(self.labeller_hidden_widths))
        if self.num_labellers < 1:
            raise ValueError(f"num_labellers must be >= 1, got {self.num_labellers}")
        if not 0.0 < self.flatten_alpha <= 1.0:
            raise ValueError(f"flatten_alpha must lie in (0, 1], got {self.flatten_alpha}")
        if not 0.0 < self.pretrain_fraction < 1.0:
            raise ValueError(f"pretrain_fraction must lie in (0, 1), got {self.pretrain_fraction}")
        if self.labeller_optimizer not in ("adam", "sgd"):
            raise ValueError(f"Unknown labeller optimizer: {self.labeller_optimizer}")
        if self.labeller_epochs < 0 or self.labeller_batch_size < 1:
            raise ValueError("labeller_epochs must be >= 0 and labeller_batch_size >= 1")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"Unknown sampling mode: {self.sampling}")
        if self.relabel_mode not in RELABEL_MODES:
            raise ValueError(f"Unknown relabel mode: {self.relabel_mode}")
        if self.target_size is not None and self.target_size < 1:
            raise ValueError(f"target_size must be >= 1, got {self.target_size}")


@dataclass
class Labeller:
    """A probabilistic classifier whose softmax is the labelling distribution"""
    spec: MlpSpec
    params: np.ndarray

    def predict_proba(self, inputs):
        return predict_proba(self.spec, self.params, inputs)

    def checksum(self):
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.params, dtype=np.float64).tobytes())
        return h.hexdigest()

    @classmethod
    def constant(cls, input_dim, probs):
        """Labeller that ignores its input and always outputs probs"""
        probs = np.asarray(probs, dtype=np.float64)
        spec = MlpSpec(input_dim, (), probs.shape[0])
        with np.errstate(divide="ignore"):
            bias = np.maximum(np.log(probs), -745.0)
        return cls(spec, flatten(spec, [(np.zeros((input_dim, probs.shape[0])), bias)]))


@dataclass
class CurationResult:
    curated: LabeledDataset
    retained_mask: np.ndarray
    retention_rate: float
    consensus_vs_original_agreement: float
    num_labellers: int = 1
    flatten_alpha: float = 1.0
    meta: dict = field(default_factory=dict)


# ---------------- Split & Labeller ----------------
def split_pretrain(dataset, fraction, seed):
    """Disjoint (D_pre, D_tr) split with round(n * fraction) pre-training rows"""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n_pre = int(round(dataset.n * fraction))
    if n_pre < 1 or n_pre >= dataset.n:
        raise ValueError(f"Splitting {dataset.n} rows at {fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    return dataset.take(perm[:n_pre], name=f"{dataset.name}_pre"), dataset.take(perm[n_pre:], name=f"{dataset.name}_tr")


def train_labeller(pretrain, config):
    """
    Fit the labeller MLP on D_pre by minimizing the mean cross-entropy

    Args:
        pretrain: LabeledDataset D_pre
        config: CurationConfig

    Returns:
        Labeller
    """
    spec = MlpSpec(pretrain.input_dim, config.labeller_hidden_widths, pretrain.num_classes)
    params = init_params(spec, config.labeller_init_std, derive_seed(config.seed, "labeller_init"))
    rng = derive_rng(config.seed, "labeller_batches")
    moment1 = np.zeros_like(params)
    moment2 = np.zeros_like(params)
    t = 0
    for epoch in range(config.labeller_epochs):
        perm = rng.permutation(pretrain.n)
        total = 0.0
        for start in range(0, pretrain.n, config.labeller_batch_size):
            idx = perm[start:start + config.labeller_batch_size]
            value, grad = grad_loglik(spec, params, pretrain.features[idx], pretrain.labels[idx])
            loss_grad = -grad / idx.size
            t += 1
            if config.labeller_optimizer == "adam":
                params, moment1, moment2 = adam_step(params, loss_grad, moment1, moment2, t, lr=config.labeller_lr)
            else:
                params = sgd_step(params, loss_grad, config.labeller_lr)
            total -= value
        if not np.all(np.isfinite(params)):
            raise FloatingPointError(f"Labeller training diverged in epoch {epoch}")
        if epoch == config.labeller_epochs - 1 or epoch % 10 == 0:
            logger.info("[CURATION] labeller epoch %d/%d loss=%.4f", epoch + 1, config.labeller_epochs, total / pretrain.n)
    return Labeller(spec, params)


# ---------------- Labelling ----------------
def flatten_probs(p, alpha):
    """
    Raise probabilities to the power alpha and renormalize (rank preserving)

    Works on a single vector or row-wise on a matrix.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("Probabilities must be non-negative")
    q = p ** alpha
    total = q.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("Cannot flatten an all-zero probability vector")
    return q / total


def _slot_uniforms(n, num_labellers, seed, sampling):
    if sampling == "shared":
        # Slot s always sees the same uniforms, so adding labellers only removes points
        return np.column_stack([derive_rng(seed, "labeller_slot", s).random(n) for s in range(num_labellers)])
    return derive_rng(seed, "independent_labellers", num_labellers).random((n, num_labellers))


def sample_labels(probs, num_labellers, seed, sampling="shared"):
    """
    Draw num_labellers labels per row by inverse CDF

    Returns:
        Integer matrix (n x S)
    """
    if num_labellers < 1:
        raise ValueError(f"num_labellers must be >= 1, got {num_labellers}")
    if sampling not in SAMPLING_MODES:
        raise ValueError(f"Unknown sampling mode: {sampling}")
    cdf = np.cumsum(probs, axis=1)
    u = _slot_uniforms(probs.shape[0], num_labellers, seed, sampling)
    labels = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2)
    return np.minimum(labels, probs.shape[1] - 1)


def curate(dataset, labeller, num_labellers, alpha=1.0, seed=0, relabel_mode="consensus_label", sampling="shared"):
    """
    Keep a point iff all S simulated labellers agree

    Args:
        dataset: LabeledDataset to relabel
        labeller: Anything with predict_proba(inputs)
        num_labellers: S
        alpha: Flattening exponent (1 = none)
        relabel_mode: consensus_label, or original_label to keep the dataset labels

    Returns:
        CurationResult
    """
    if relabel_mode not in RELABEL_MODES:
        raise ValueError(f"Unknown relabel mode: {relabel_mode}")
    probs = flatten_probs(labeller.predict_proba(dataset.features), alpha)
    votes = sample_labels(probs, num_labellers, seed, sampling)
    consensus = votes[:, 0]
    retained = np.all(votes == consensus[:, None], axis=1)
    kept = np.flatnonzero(retained)
    labels = consensus[kept] if relabel_mode == "consensus_label" else dataset.labels[kept]
    curated = dataset.take(kept, name=f"{dataset.name}_S{num_labellers}", labels=labels)
    agreement = float(np.mean(consensus[kept] == dataset.labels[kept])) if kept.size else 0.0
    rate = float(retained.mean()) if dataset.n else 0.0
    logger.info("[CURATION] S=%d alpha=%g retained %d/%d (%.4f)", num_labellers, alpha, kept.size, dataset.n, rate)
    return CurationResult(
        curated=curated,
        retained_mask=retained,
        retention_rate=rate,
        consensus_vs_original_agreement=agreement,
        num_labellers=num_labellers,
        flatten_alpha=alpha,
        meta={"seed": seed, "sampling": sampling, "relabel_mode": relabel_mode},
    )


def curate_split(train, test, labeller, num_labellers, alpha=1.0, seed=0, curate_test=True,
                 relabel_mode="consensus_label", sampling="shared"):
    """
    Curate the training set, and either curate the test set with the same S or
    just relabel it with one draw from the labeller

    Returns:
        Tuple of (train CurationResult, test LabeledDataset)
    """
    train_result = curate(train, labeller, num_labellers, alpha, derive_seed(seed, "curate_train"), relabel_mode, sampling)
    if curate_test:
        test_out = curate(test, labeller, num_labellers, alpha, derive_seed(seed, "curate_test"), relabel_mode, sampling).curated
    else:
        # A single labeller always agrees with itself: nothing is filtered
        test_out = curate(test, labeller, 1, alpha, derive_seed(seed, "relabel_test"), "consensus_label", sampling).curated
    return train_result, test_out


def curate_to_size(dataset, labeller, num_labellers, alpha, seed, target_size, relabel_mode="original_label", sampling="shared"):
    """Curate, then subsample the curated set down to target_size"""
    result = curate(dataset, labeller, num_labellers, alpha, seed, relabel_mode, sampling)
    if result.curated.n < target_size:
        raise ValueError(
            f"Curation with S={num_labellers} kept {result.curated.n} points, fewer than the target {target_size}; "
            "use fewer labellers or a flatter labeller"
        )
    result.curated = subsample(result.curated, target_size, derive_seed(seed, "curate_to_size"))
    result.meta["target_size"] = target_size
    return result


# ---------------- Count-labelled Data ----------------
def simulate_counts(dataset, labeller, num_labellers, alpha=1.0, seed=0, sampling="shared"):
    """Per-class vote counts from S labellers for every point (no filtering)"""
    probs = flatten_probs(labeller.predict_proba(dataset.features), alpha)
    votes = sample_labels(probs, num_labellers, seed, sampling)
    counts = np.stack([np.sum(votes == c, axis=1) for c in range(dataset.num_classes)], axis=1)
    out = dataset.take(np.arange(dataset.n), name=f"{dataset.name}_counts{num_labellers}")
    out.counts = counts.astype(np.int64)
    return out


def resample_counts(dataset, s_tilde, seed):
    """Replace each counts row by s_tilde draws from the categorical it implies"""
    if dataset.counts is None:
        raise ValueError(f"{dataset.name} has no counts to resample")
    if s_tilde < 1:
        raise ValueError(f"s_tilde must be >= 1, got {s_tilde}")
    pvals = dataset.counts / dataset.counts.sum(axis=1, keepdims=True)
    counts = np.random.default_rng(seed).multinomial(s_tilde, pvals)
    out = dataset.take(np.arange(dataset.n), name=f"{dataset.name}_s{s_tilde}")
    out.counts = counts.astype(np.int64)
    return out


# ---------------- Serialization ----------------
def save_curated(result, path, labeller=None, extra=None):
    """
    Write the curated set as CSV plus a JSON provenance sidecar

    Returns:
        Tuple of (csv path, sidecar path)
    """
    path = Path(path)
    save_csv(result.curated, path)
    provenance = {
        "num_labellers": result.num_labellers,
        "flatten_alpha": result.flatten_alpha,
        "labeller_checksum": labeller.checksum() if labeller is not None else None,
        "labeller_arch": labeller.spec.to_dict() if labeller is not None else None,
        "retention_rate": result.retention_rate,
        "consensus_vs_original_agreement": result.consensus_vs_original_agreement,
        "n_input": int(result.retained_mask.shape[0]),
        "n_retained": int(result.retained_mask.sum()),
        **result.meta,
        **(extra or {}),
    }
    sidecar = path.with_suffix(".provenance.json")
    sidecar.write_text(json.dumps(provenance, indent=2))
    return path, sidecar
