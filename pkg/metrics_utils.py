"""
Posterior-predictive evaluation: test cross-entropy, accuracy, ECE, CPER over
a temperature sweep, and decision-boundary grids for 2D models.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
from PIL import Image
from scipy.special import softmax

from config import ECE_BINS, GRID_BOUNDS, GRID_RESOLUTION, PROB_FLOOR
from nn_utils import forward

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["dataset", "n", "seed", "T", "K", "ce", "acc", "ece"]


@dataclass
class MetricsRecord:
    temperature: float
    test_ce: float
    accuracy: float
    ece: float
    n_train: int
    seed: int
    ensemble_size: int
    dataset: str = ""
    ce_floored: int = 0
    kinetic_temperature: Optional[float] = None

    def __post_init__(self):
        values = [self.temperature, self.test_ce, self.accuracy, self.ece]
        if not all(np.isfinite(v) for v in values):
            raise ValueError(f"Non-finite metric in {self}")
        if not (0.0 <= self.accuracy <= 1.0 and 0.0 <= self.ece <= 1.0):
            raise ValueError(f"accuracy and ece must lie in [0, 1]: {self}")

    def to_row(self):
        return {
            "dataset": self.dataset, "n": self.n_train, "seed": self.seed, "T": self.temperature,
            "K": self.ensemble_size, "ce": self.test_ce, "acc": self.accuracy, "ece": self.ece,
        }

    def to_dict(self):
        return asdict(self)


@dataclass
class SweepResult:
    records: List[MetricsRecord] = field(default_factory=list)

    @property
    def temperatures(self):
        return sorted({r.temperature for r in self.records})

    @property
    def cper(self):
        return cper(self)


# ---------------- Posterior Predictive ----------------
def posterior_predictive(spec, ensemble, inputs):
    """
    Bayesian model average: mean over samples of softmax(f(x; theta_k))

    Args:
        ensemble: PosteriorEnsemble or a list of parameter vectors
    """
    samples = getattr(ensemble, "samples", ensemble)
    if len(samples) == 0:
        raise ValueError("posterior_predictive needs at least one sample")
    probs = np.zeros((np.asarray(inputs).shape[0], spec.num_classes))
    for params in samples:
        probs += softmax(forward(spec, params, inputs), axis=1)
    return probs / len(samples)


# ---------------- Metrics ----------------
def _true_class_probs(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError(f"probs {probs.shape} do not match {labels.shape[0]} labels")
    return probs[np.arange(labels.shape[0]), labels]


def floored_count(probs, labels):
    return int(np.sum(_true_class_probs(probs, labels) < PROB_FLOOR))


def test_ce(probs, labels):
    """Mean negative log predictive probability of the true label, in nats"""
    p = _true_class_probs(probs, labels)
    floored = int(np.sum(p < PROB_FLOOR))
    if floored:
        logger.warning("[METRICS] %d of %d true-class probabilities floored at %g", floored, p.shape[0], PROB_FLOOR)
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


def accuracy(probs, labels):
    # np.argmax breaks ties towards the lowest index
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def ece(probs, labels, n_bins=ECE_BINS):
    """
    Expected calibration error over equal-width confidence bins (lo, hi]

    ECE = sum_b |B_b| / n * |acc(B_b) - conf(B_b)|; empty bins contribute 0.
    """
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    confidences = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    edges = np.arange(n_bins + 1) / n_bins
    bins = np.clip(np.searchsorted(edges, confidences, side="left") - 1, 0, n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        mask = bins == b
        if mask.any():
            total += mask.sum() / labels.shape[0] * abs(correct[mask].mean() - confidences[mask].mean())
    return float(total)


def evaluate(spec, ensemble, dataset, temperature, seed, n_train, dataset_name="", n_bins=ECE_BINS):
    """Posterior-predictive metrics on a test set as a MetricsRecord"""
    probs = posterior_predictive(spec, ensemble, dataset.features)
    record = MetricsRecord(
        temperature=float(temperature),
        test_ce=test_ce(probs, dataset.labels),
        accuracy=accuracy(probs, dataset.labels),
        ece=ece(probs, dataset.labels, n_bins),
        n_train=int(n_train),
        seed=int(seed),
        ensemble_size=len(getattr(ensemble, "samples", ensemble)),
        dataset=dataset_name,
        ce_floored=floored_count(probs, dataset.labels),
    )
    momenta = getattr(ensemble, "momenta", None)
    if momenta and getattr(ensemble, "kind", None) == "sghmc":
        record.kinetic_temperature = float(np.mean([m @ m / m.shape[0] for m in momenta]))
    return record


# ---------------- CPER ----------------
def _mean_ce_by_temperature(records):
    table = {}
    for r in records:
        table.setdefault(r.temperature, []).append(r.test_ce)
    return {t: float(np.mean(v)) for t, v in sorted(table.items())}


def _unit_temperature(temperatures):
    for t in temperatures:
        if np.isclose(t, 1.0):
            return t
    return None


def _ratio(curve):
    t_one = _unit_temperature(curve)
    if t_one is None:
        raise ValueError("The temperature grid must contain T = 1")
    t_star = min(curve, key=lambda t: (curve[t], t != t_one))
    if curve[t_one] <= 0.0:
        return 1.0, t_one
    return curve[t_star] / curve[t_one], t_star


def cper(sweep):
    """CE at the best grid temperature over CE at T = 1, on seed-averaged curves"""
    if not sweep.records:
        raise ValueError("Empty sweep")
    return _ratio(_mean_ce_by_temperature(sweep.records))[0]


def t_star(sweep):
    return _ratio(_mean_ce_by_temperature(sweep.records))[1]


def cper_per_seed(sweep):
    """CPER computed separately for every seed that has a T = 1 record"""
    by_seed = {}
    for r in sweep.records:
        by_seed.setdefault(r.seed, []).append(r)
    result = {}
    for seed, records in sorted(by_seed.items()):
        curve = _mean_ce_by_temperature(records)
        if _unit_temperature(curve) is not None:
            result[seed] = _ratio(curve)[0]
    return result


def _mean_se(values):
    values = np.asarray(values, dtype=np.float64)
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return float(values.mean()), se


def sweep_summary(sweep):
    """cper, t_star and per-temperature means with standard errors over seeds"""
    per_t = []
    for t in sweep.temperatures:
        rows = [r for r in sweep.records if r.temperature == t]
        ce_mean, ce_se = _mean_se([r.test_ce for r in rows])
        acc_mean, acc_se = _mean_se([r.accuracy for r in rows])
        ece_mean, ece_se = _mean_se([r.ece for r in rows])
        entry = {
            "T": t, "num_seeds": len(rows),
            "ce_mean": ce_mean, "ce_se": ce_se,
            "acc_mean": acc_mean, "acc_se": acc_se,
            "ece_mean": ece_mean, "ece_se": ece_se,
        }
        kinetic = [r.kinetic_temperature for r in rows if r.kinetic_temperature is not None]
        if kinetic:
            entry["kinetic_temperature_mean"] = float(np.mean(kinetic))
        per_t.append(entry)
    ratio, best = _ratio(_mean_ce_by_temperature(sweep.records))
    return {
        "cper": ratio,
        "t_star": best,
        "cper_per_seed": {str(k): v for k, v in cper_per_seed(sweep).items()},
        "per_temperature": per_t,
    }


def metrics_frame(records):
    return pd.DataFrame([r.to_row() for r in records], columns=METRICS_COLUMNS)


# ---------------- Decision Grid ----------------
@dataclass
class DecisionGrid:
    """Posterior-mean class-1 probability on a regular grid; probs[i, j] is at (xs[j], ys[i])"""
    xs: np.ndarray
    ys: np.ndarray
    probs: np.ndarray

    @property
    def bounds(self):
        return float(self.xs[0]), float(self.xs[-1]), float(self.ys[0]), float(self.ys[-1])

    def points(self):
        gx, gy = np.meshgrid(self.xs, self.ys)
        return gx.ravel(), gy.ravel()


def decision_grid(spec, ensemble, bounds=GRID_BOUNDS, resolution=GRID_RESOLUTION):
    if spec.input_dim != 2:
        raise ValueError(f"Decision grids need 2D inputs, model has input_dim={spec.input_dim}")
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    xmin, xmax, ymin, ymax = bounds
    xs = np.linspace(xmin, xmax, resolution)
    ys = np.linspace(ymin, ymax, resolution)
    gx, gy = np.meshgrid(xs, ys)
    probs = posterior_predictive(spec, ensemble, np.column_stack([gx.ravel(), gy.ravel()]))[:, 1]
    return DecisionGrid(xs=xs, ys=ys, probs=probs.reshape(resolution, resolution))


def bayes_rule_toy(x, y):
    """Class 1 on or above the line y = -x"""
    return (np.asarray(x) + np.asarray(y)) >= 0.0


def boundary_agreement(grid, bayes_rule=bayes_rule_toy):
    """Fraction of cells where (posterior mean >= 0.5) matches the reference rule"""
    x, y = grid.points()
    predicted = grid.probs.ravel() >= 0.5
    return float(np.mean(predicted == bayes_rule(x, y)))


def export_grid_csv(grid, path):
    x, y = grid.points()
    pd.DataFrame({"x": x, "y": y, "prob1": grid.probs.ravel()}).to_csv(path, index=False)


def load_grid_csv(path):
    frame = pd.read_csv(path)
    xs = np.unique(frame["x"].to_numpy())
    ys = np.unique(frame["y"].to_numpy())
    return DecisionGrid(xs=xs, ys=ys, probs=frame["prob1"].to_numpy().reshape(ys.size, xs.size))


def export_grid_png(grid, path, scale=4):
    """Shade cells from blue (class 0) to red (class 1), y axis pointing up"""
    p = np.flipud(grid.probs)
    rgb = np.stack([p, 0.2 * np.ones_like(p), 1.0 - p], axis=-1)
    img = Image.fromarray((255 * rgb).astype(np.uint8))
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)
    return path
