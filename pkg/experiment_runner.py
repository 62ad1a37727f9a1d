"""
Experiment orchestration: parse an experiment document, plan one chain per
(group, n, seed, T), run chains on a worker pool and write every artifact.
"""
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

from config import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_OUTPUT_DIR,
    DEFAULT_PRIOR_STD,
    EXPERIMENT_KINDS,
    EXPERIMENT_SCHEMA,
    GRID_BOUNDS,
    GRID_RESOLUTION,
    LIKELIHOOD_VARIANTS,
    MNIST_HIDDEN_WIDTHS,
    OUTPUT_DIR_ENV,
    SCHEDULES,
    TEMPERATURE_GRID_MIN_EXPONENT,
    TEMPERATURE_GRID_SIZE,
    TOY_HIDDEN_WIDTHS,
    TOY_TEST_SIZE,
    WORKERS_ENV,
)
from curation_utils import (
    CurationConfig,
    curate,
    curate_split,
    curate_to_size,
    resample_counts,
    save_curated,
    simulate_counts,
    split_pretrain,
    train_labeller,
)
from data_utils import (
    BudgetSchedule,
    gen_toy_gaussians,
    load_csv,
    load_idx,
    schedule_for_budget,
    subsample,
    train_test_split,
)
from energy_utils import LikelihoodKind, PriorConfig
from metrics_utils import (
    MetricsRecord,
    boundary_agreement,
    decision_grid,
    evaluate,
    export_grid_csv,
    export_grid_png,
    metrics_frame,
    sweep_summary,
)
from nn_utils import MlpSpec, dead_unit_fraction, init_params
from pdf_utils import generate_pdf_report
from report_utils import emit_report, group_sweeps
from sampler_utils import ChainDivergedError, SamplerConfig, run_chain
from seeding import derive_seed

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def default_temperature_grid():
    """Six log-spaced temperatures from 1e-3 to 1"""
    exponents = np.linspace(TEMPERATURE_GRID_MIN_EXPONENT, 0.0, TEMPERATURE_GRID_SIZE)
    return [float(10.0 ** e) for e in exponents]


def chain_key(group, n, seed, temperature):
    return f"{group}|n={n}|seed={seed}|T={temperature:g}"


# ---------------- Configuration ----------------
@dataclass
class ExperimentConfig:
    kind: str
    dataset: dict
    name: str = "experiment"
    model: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    likelihood: dict = field(default_factory=dict)
    temperatures: List[float] = field(default_factory=default_temperature_grid)
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    subsample_sizes: Optional[List[int]] = None
    reference_n: Optional[int] = None
    budget_mode: str = "fixed_gradients"
    explicit_schedules: dict = field(default_factory=dict)
    curation: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    shared_init: bool = False
    master_seed: int = 0
    workers: Optional[int] = None
    output_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, doc, base_dir=None):
        """
        Build and validate a config from a parsed JSON document

        Relative file paths are resolved against base_dir.

        Raises:
            ValueError naming the offending field
        """
        if not isinstance(doc, dict):
            raise ValueError("Experiment document must be a JSON object")
        allowed = set(EXPERIMENT_SCHEMA["properties"]) | {"shared_init"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"Unknown field(s): {sorted(unknown)}")
        for key in EXPERIMENT_SCHEMA["required"]:
            if key not in doc:
                raise ValueError(f"Missing required field '{key}'")
        doc = dict(doc)
        dataset = dict(doc.pop("dataset"))
        if base_dir is not None:
            for key in ("images", "labels", "test_images", "test_labels", "path", "test_path"):
                if key in dataset and not os.path.isabs(dataset[key]):
                    dataset[key] = str(Path(base_dir) / dataset[key])
        config = cls(dataset=dataset, **doc)
        config.validate()
        return config

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as f:
            doc = json.load(f)
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self):
        return asdict(self)

    def checksum(self):
        """sha256 of the canonical JSON, ignoring settings that do not change results"""
        doc = {k: v for k, v in self.to_dict().items() if k not in ("workers", "output_dir")}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    # The published schema is the source of truth for names and ranges
    def validate(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"kind must be one of {EXPERIMENT_KINDS}, got '{self.kind}'")
        source = self.dataset.get("source")
        if source not in ("toy", "idx", "csv"):
            raise ValueError(f"dataset.source must be toy, idx or csv, got '{source}'")
        required_files = {"idx": ("images", "labels"), "csv": ("path",)}.get(source, ())
        for key in required_files:
            if key not in self.dataset:
                raise ValueError(f"dataset.{key} is required for source '{source}'")
        for key in ("images", "labels", "test_images", "test_labels", "path", "test_path"):
            if key in self.dataset and not Path(self.dataset[key]).exists():
                raise ValueError(f"dataset.{key}: file not found: {self.dataset[key]}")
        if not self.temperatures or not any(math.isclose(t, 1.0) for t in self.temperatures):
            raise ValueError("temperatures must contain 1.0")
        if any(not t > 0 for t in self.temperatures):
            raise ValueError("temperatures must be positive")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.budget_mode not in ("fixed_gradients", "explicit"):
            raise ValueError(f"Unknown budget_mode '{self.budget_mode}'")
        if self.kind in ("subsample", "curate_and_subsample") and not self.subsample_sizes:
            raise ValueError(f"subsample_sizes is required for kind '{self.kind}'")
        if self.budget_mode == "explicit":
            missing = [n for n in (self.subsample_sizes or []) if str(n) not in self.explicit_schedules]
            if missing:
                raise ValueError(f"explicit_schedules has no entry for n={missing}")
        if self.kind == "toy_cpe" and source != "toy":
            raise ValueError("toy_cpe needs dataset.source = toy")
        if self.kind == "toy_cpe" and any(n % 2 for n in (self.subsample_sizes or [])):
            raise ValueError("toy_cpe sizes must be even")
        # Building the typed objects runs their own range checks
        self.sampler_template()
        self.likelihood_kind()
        self.prior()
        self.step_divisor()
        if self.kind in ("curation_sweep", "curate_and_subsample", "counts_losses"):
            self.curation_config()
        for variant in self.counts.get("variants", []):
            if variant not in LIKELIHOOD_VARIANTS:
                raise ValueError(f"counts.variants: unknown variant '{variant}'")

    # ---------------- Typed Views ----------------
    def _schedule_defaults(self):
        if self.dataset.get("source") == "toy":
            return SCHEDULES["toy"]
        if self.kind == "counts_losses":
            return SCHEDULES["counts"]
        return SCHEDULES["mnist"]

    def sampler_template(self):
        unknown = set(self.sampler) - set(EXPERIMENT_SCHEMA["properties"]["sampler"]["properties"])
        if unknown:
            raise ValueError(f"sampler: unknown field(s) {sorted(unknown)}")
        defaults = dict(self._schedule_defaults())
        defaults.update(self.sampler)
        return SamplerConfig(
            base_step=defaults["base_step"],
            batch_size=defaults.get("batch_size", DEFAULT_BATCH_SIZE),
            burn_in_epochs=defaults["burn_in_epochs"],
            cycle_epochs=defaults["cycle_epochs"],
            total_epochs=defaults["total_epochs"],
            **{k: v for k, v in defaults.items() if k in ("momentum_weight", "temper_mode", "kind", "per_datum_step", "augment")},
        )

    def likelihood_kind(self):
        return LikelihoodKind(
            variant=self.likelihood.get("variant", "categorical"),
            num_labellers=self.likelihood.get("num_labellers"),
            alpha=self.likelihood.get("alpha", 0.1),
            weight=self.likelihood.get("weight", 1.0),
        )

    def prior(self):
        return PriorConfig(std=self.model.get("prior_std", DEFAULT_PRIOR_STD))

    def hidden_widths(self):
        default = TOY_HIDDEN_WIDTHS if self.dataset.get("source") == "toy" else MNIST_HIDDEN_WIDTHS
        return tuple(self.model.get("hidden_widths", default))

    def curation_config(self):
        fields = {k: v for k, v in self.curation.items() if k != "num_labellers_grid"}
        fields.setdefault("seed", derive_seed(self.master_seed, "curation"))
        try:
            return CurationConfig(**fields)
        except TypeError as e:
            raise ValueError(f"curation: {e}") from None

    def step_divisor(self):
        divisor = self.likelihood.get("step_divisor", 1.0)
        if not divisor > 0:
            raise ValueError(f"likelihood.step_divisor must be > 0, got {divisor}")
        return divisor


# ---------------- Manifest ----------------
@dataclass
class RunManifest:
    config_checksum: str
    config: dict
    temperature_grid: List[float]
    entries: Dict[str, dict] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    output_dir: str = ""

    @property
    def status(self):
        if self.entries and all(e["status"] == "completed" for e in self.entries.values()):
            return "completed"
        return "partial"

    def records(self):
        return [MetricsRecord(**e["metrics"]) for e in self.entries.values() if e["status"] == "completed"]

    def add_output(self, path):
        path = str(path)
        if path not in self.outputs:
            self.outputs.append(path)

    def save(self, path=None):
        path = Path(path or Path(self.output_dir) / MANIFEST_NAME)
        path.write_text(json.dumps(asdict(self), indent=2, default=float))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        return cls(**json.loads(path.read_text()))


# ---------------- Chain Jobs ----------------
@dataclass
class ChainJob:
    key: str
    group: str
    n: int
    seed: int
    temperature: float
    spec: MlpSpec
    train: object
    test: object
    likelihood: LikelihoodKind
    prior: PriorConfig
    sampler: SamplerConfig
    dataset_name: str
    init_seed: Optional[int] = None
    grid: Optional[dict] = None


def _grid_stem(job):
    return f"grid_{job.group}_n{job.n}_seed{job.seed}_T{job.temperature:g}".replace("=", "").replace("|", "_")


def run_chain_job(job):
    """
    Run, evaluate and (for 2D models) export the decision grid of one chain

    Returns:
        Manifest entry dict with status completed, diverged or failed
    """
    entry = {
        "group": job.group, "n": job.n, "seed": job.seed, "temperature": job.temperature,
        "gradient_steps": 0, "wall_clock": 0.0, "metrics": None, "outputs": [],
    }
    started = time.perf_counter()
    try:
        initial = None
        if job.init_seed is not None:
            initial = init_params(job.spec, job.prior.std, job.init_seed)
        ensemble = run_chain(job.spec, job.train, job.likelihood, job.prior, job.sampler, initial_params=initial)
        entry["gradient_steps"] = ensemble.gradient_evaluations
        record = evaluate(job.spec, ensemble, job.test, job.temperature, job.seed, job.n, job.dataset_name)
        entry["metrics"] = record.to_dict()
        if job.spec.hidden_widths:
            entry["dead_units"] = dead_unit_fraction(job.spec, ensemble.samples[-1], job.train.features)
        if job.grid is not None and job.spec.input_dim == 2:
            grid = decision_grid(job.spec, ensemble, job.grid["bounds"], job.grid["resolution"])
            stem = Path(job.grid["dir"]) / _grid_stem(job)
            export_grid_csv(grid, stem.with_suffix(".csv"))
            export_grid_png(grid, stem.with_suffix(".png"))
            entry["boundary_agreement"] = boundary_agreement(grid)
            entry["outputs"] = [str(stem.with_suffix(".csv")), str(stem.with_suffix(".png"))]
        entry["status"] = "completed"
    except ChainDivergedError as e:
        logger.warning("[SWEEP] %s diverged: %s", job.key, e)
        entry["status"] = "diverged"
        entry["error"] = str(e)
        entry["report"] = {k: (v if not isinstance(v, float) or math.isfinite(v) else str(v)) for k, v in e.report.items()}
    except Exception as e:
        logger.error("[SWEEP] %s failed: %s", job.key, e)
        entry["status"] = "failed"
        entry["error"] = f"{type(e).__name__}: {e}"
    entry["wall_clock"] = time.perf_counter() - started
    return entry


def _init_worker(level):
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# ---------------- Runner ----------------
class ExperimentRunner:
    """
    Plans and executes every chain of an experiment

    Re-running into the same output directory skips chains the manifest
    already records as completed or diverged.
    """

    def __init__(self, config, output_dir=None, workers=None, seed_offset=0):
        self.config = config
        self.seeds = [s + seed_offset for s in config.seeds]
        self.output_dir = Path(output_dir or config.output_dir or os.getenv(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))
        configured = workers or config.workers or os.getenv(WORKERS_ENV)
        self.workers = int(configured) if configured else None
        self.spec = None
        self.extras = {}
        self.outputs = []

    # ---------------- Data ----------------
    def _seed(self, role, index=0):
        return derive_seed(self.config.master_seed, role, index)

    def load_data(self):
        """Training pool and test set for non-toy_cpe kinds"""
        ds = self.config.dataset
        source = ds["source"]
        if source == "toy":
            train = gen_toy_gaussians(ds.get("n_total", 4096), self._seed("toy_train"))
            test = gen_toy_gaussians(ds.get("test_size", TOY_TEST_SIZE), self._seed("toy_test"))
            return train, test
        if source == "idx":
            train = load_idx(ds["images"], ds["labels"])
            test = load_idx(ds["test_images"], ds["test_labels"]) if "test_images" in ds else None
        else:
            train = load_csv(ds["path"])
            test = load_csv(ds["test_path"], num_classes=train.num_classes) if "test_path" in ds else None
        if test is None:
            train, test = train_test_split(train, ds.get("test_fraction", 0.2), self._seed("test_split"))
        if "test_size" in ds and ds["test_size"] < test.n:
            test = subsample(test, ds["test_size"], self._seed("test_subsample"))
        return train, test

    def _spec_for(self, dataset):
        return MlpSpec(dataset.input_dim, self.config.hidden_widths(), dataset.num_classes)

    # ---------------- Schedules ----------------
    def reference_schedule(self, n_full):
        template = self.config.sampler_template()
        return BudgetSchedule(
            n=self.config.reference_n or n_full,
            epochs=template.total_epochs,
            burn_in_epochs=template.burn_in_epochs,
            cycle_epochs=template.cycle_epochs,
            batch_size=template.batch_size,
        )

    def schedule_for(self, n, n_full):
        if self.config.budget_mode == "explicit":
            s = self.config.explicit_schedules[str(n)]
            template = self.config.sampler_template()
            return BudgetSchedule(n=n, epochs=s["epochs"], burn_in_epochs=s["burn_in_epochs"],
                                  cycle_epochs=s["cycle_epochs"], batch_size=s.get("batch_size", template.batch_size))
        return schedule_for_budget(self.reference_schedule(n_full), n)

    def _sampler(self, temperature, seed_value, schedule=None, base_step=None, kind=None):
        template = self.config.sampler_template()
        updates = {"temperature": float(temperature), "seed": int(seed_value)}
        if schedule is not None:
            updates.update(total_epochs=schedule.epochs, burn_in_epochs=schedule.burn_in_epochs,
                           cycle_epochs=schedule.cycle_epochs, batch_size=schedule.batch_size)
        updates["base_step"] = base_step if base_step is not None else template.base_step / self.config.step_divisor()
        if kind is not None:
            updates["kind"] = kind
        return replace(template, **updates)

    # ---------------- Planning ----------------
    def _jobs_for(self, group, train, test, schedule=None, likelihood=None, base_step=None, kind=None, grid_dir=None, seeds=None):
        likelihood = likelihood or self.config.likelihood_kind()
        spec = self._spec_for(train)
        self.spec = spec
        jobs = []
        for seed in (self.seeds if seeds is None else seeds):
            init_seed = self._seed(f"init/{group}/n{train.n}", seed) if self.config.shared_init else None
            for t in self.config.temperatures:
                key = chain_key(group, train.n, seed, t)
                chain_seed = derive_seed(self.config.master_seed, f"chain/{key}", seed)
                grid = None
                if grid_dir is not None and self._export_grid(t):
                    grid = {
                        "bounds": tuple(self.config.grid.get("bounds", GRID_BOUNDS)),
                        "resolution": self.config.grid.get("resolution", GRID_RESOLUTION),
                        "dir": str(grid_dir),
                    }
                jobs.append(ChainJob(
                    key=key, group=group, n=train.n, seed=seed, temperature=float(t), spec=spec,
                    train=train, test=test, likelihood=likelihood, prior=self.config.prior(),
                    sampler=self._sampler(t, chain_seed, schedule, base_step, kind),
                    dataset_name=f"{self.config.name}:{group}", init_seed=init_seed, grid=grid,
                ))
        return jobs

    def _export_grid(self, temperature):
        wanted = self.config.grid.get("temperatures")
        return wanted is None or any(math.isclose(temperature, w) for w in wanted)

    def _train_labeller(self, train):
        curation = self.config.curation_config()
        pretrain, rest = split_pretrain(train, curation.pretrain_fraction, self._seed("pretrain_split"))
        labeller = train_labeller(pretrain, curation)
        self.extras["labeller"] = {"checksum": labeller.checksum(), "arch": labeller.spec.to_dict(), "n_pretrain": pretrain.n}
        return curation, labeller, rest

    def plan(self):
        """All chain jobs of the experiment (datasets are materialized here)"""
        kind = self.config.kind
        self.output_dir.mkdir(parents=True, exist_ok=True)
        planner = getattr(self, f"_plan_{kind}")
        jobs = planner()
        self.extras["temperature_grid"] = list(self.config.temperatures)
        return jobs

    def _plan_toy_cpe(self):
        ds = self.config.dataset
        sizes = self.config.subsample_sizes or [ds.get("n_total", 32)]
        test = gen_toy_gaussians(ds.get("test_size", TOY_TEST_SIZE), self._seed("toy_test"))
        grid_dir = self.output_dir / "grids"
        grid_dir.mkdir(exist_ok=True)
        jobs = []
        for n in sizes:
            # Full batch: one gradient step per epoch at every n, so the budget is the same for all sizes
            for seed in self.seeds:
                train = gen_toy_gaussians(n, self._seed(f"toy_train/n{n}", seed))
                jobs += self._jobs_for("toy", train, test, grid_dir=grid_dir, seeds=[seed])
        return jobs

    def _plan_subsample(self):
        train, test = self.load_data()
        schedules = {}
        jobs = []
        for n in self.config.subsample_sizes:
            schedule = self.schedule_for(n, train.n)
            schedules[str(n)] = asdict(schedule) | {"total_gradient_steps": schedule.total_gradient_steps, "num_samples": schedule.num_samples}
            for seed in self.seeds:
                sub = subsample(train, n, self._seed(f"subsample/n{n}", seed))
                jobs += self._jobs_for("random", sub, test, schedule=schedule, seeds=[seed])
        self.extras["schedules"] = schedules
        return jobs

    def _plan_curation_sweep(self):
        train, test = self.load_data()
        curation, labeller, rest = self._train_labeller(train)
        grid = self.curation_grid(curation)
        table = []
        jobs = []
        for s in grid:
            result, test_out = curate_split(
                rest, test, labeller, s, curation.flatten_alpha, self._seed("curate"),
                curate_test=curation.curate_test, relabel_mode=curation.relabel_mode, sampling=curation.sampling,
            )
            table.append({
                "num_labellers": s, "retention_rate": result.retention_rate, "n_train": result.curated.n,
                "n_test": test_out.n, "agreement": result.consensus_vs_original_agreement,
            })
            csv_path, sidecar = save_curated(result, self.output_dir / f"curated_S{s}.csv", labeller,
                                             extra={"curate_test": curation.curate_test})
            self.outputs += [csv_path, sidecar]
            if result.curated.n == 0 or test_out.n == 0:
                logger.warning("[CURATION] S=%d leaves an empty set, skipping its chains", s)
                continue
            jobs += self._jobs_for(f"S={s}", result.curated, test_out)
        self.extras["curation"] = table
        return jobs

    def curation_grid(self, curation):
        return self.config.curation.get("num_labellers_grid", [curation.num_labellers])

    def _plan_curate_and_subsample(self):
        train, test = self.load_data()
        curation, labeller, rest = self._train_labeller(train)
        if curation.target_size is not None:
            result = curate_to_size(rest, labeller, curation.num_labellers, curation.flatten_alpha, self._seed("curate"),
                                    curation.target_size, relabel_mode="original_label", sampling=curation.sampling)
        else:
            result = curate(rest, labeller, curation.num_labellers, curation.flatten_alpha, self._seed("curate"),
                            relabel_mode="original_label", sampling=curation.sampling)
        self.extras["curation"] = [{
            "num_labellers": curation.num_labellers, "retention_rate": result.retention_rate,
            "n_train": result.curated.n, "n_test": test.n, "agreement": result.consensus_vs_original_agreement,
            "target_size": curation.target_size,
        }]
        self.outputs += list(save_curated(result, self.output_dir / f"curated_S{curation.num_labellers}.csv", labeller))
        schedules = {}
        jobs = []
        for n in self.config.subsample_sizes:
            if n > result.curated.n:
                raise ValueError(f"Curated set has {result.curated.n} points, cannot subsample {n}")
            schedule = self.schedule_for(n, self.config.reference_n or rest.n)
            schedules[str(n)] = asdict(schedule) | {"total_gradient_steps": schedule.total_gradient_steps}
            for seed in self.seeds:
                curated = subsample(result.curated, n, self._seed(f"curated_subsample/n{n}", seed))
                random = subsample(rest, n, self._seed(f"random_subsample/n{n}", seed))
                jobs += self._jobs_for("curated", curated, test, schedule=schedule, seeds=[seed])
                jobs += self._jobs_for("random", random, test, schedule=schedule, seeds=[seed])
        self.extras["schedules"] = schedules
        return jobs

    def _plan_counts_losses(self):
        train, test = self.load_data()
        curation, labeller, rest = self._train_labeller(train)
        opts = self.config.counts
        num_labellers = opts.get("num_labellers", 10)
        counted = simulate_counts(rest, labeller, num_labellers, curation.flatten_alpha, self._seed("counts"))
        template = self.config.sampler_template()
        step_divisor = opts.get("step_divisor", num_labellers)
        jobs = []
        for variant in opts.get("variants", list(LIKELIHOOD_VARIANTS)):
            weight = opts.get("label_smoothing_weight", 1.0) if variant == "label_smoothing" else 1.0
            likelihood = LikelihoodKind(variant=variant, alpha=opts.get("alpha", 0.1), weight=weight)
            # The counts likelihood is about S times stronger; the step is reduced to match
            divisor = step_divisor if variant == "counts" or weight > 1.0 else 1.0
            jobs += self._jobs_for(variant, counted, test, likelihood=likelihood, base_step=template.base_step / divisor)
        for s_tilde in opts.get("s_tilde", []):
            resampled = resample_counts(counted, s_tilde, self._seed("resample_counts", s_tilde))
            jobs += self._jobs_for(f"counts_s{s_tilde}", resampled, test, likelihood=LikelihoodKind(variant="counts"),
                                   base_step=template.base_step / s_tilde)
        self.extras["counts"] = {"num_labellers": num_labellers, "n_train": counted.n, "step_divisor": step_divisor}
        return jobs

    def _plan_diagnostics(self):
        train, test = self.load_data()
        if self.config.subsample_sizes:
            jobs = []
            for n in self.config.subsample_sizes:
                for seed in self.seeds:
                    sub = subsample(train, n, self._seed(f"subsample/n{n}", seed))
                    jobs += self._jobs_for("sghmc", sub, test, kind="sghmc", seeds=[seed])
            return jobs
        return self._jobs_for("sghmc", train, test, kind="sghmc")

    # ---------------- Execution ----------------
    def _load_previous(self, checksum):
        path = self.output_dir / MANIFEST_NAME
        if not path.exists():
            return None
        previous = RunManifest.load(path)
        if previous.config_checksum != checksum:
            logger.warning("[SWEEP] %s belongs to a different config, starting a fresh manifest", path)
            return None
        return previous

    def run(self):
        """
        Execute the experiment

        Returns:
            RunManifest (also written to <output_dir>/manifest.json)
        """
        started = time.perf_counter()
        checksum = self.config.checksum()
        jobs = self.plan()
        manifest = self._load_previous(checksum) or RunManifest(
            config_checksum=checksum,
            config=self.config.to_dict(),
            temperature_grid=list(self.config.temperatures),
            output_dir=str(self.output_dir),
        )
        manifest.output_dir = str(self.output_dir)
        manifest.extras.update(self.extras)
        pending = [j for j in jobs if manifest.entries.get(j.key, {}).get("status") not in ("completed", "diverged")]
        workers = self.worker_count(len(pending))
        logger.info("[SWEEP] %d chains planned, %d to run, %d workers", len(jobs), len(pending), workers)

        for key, entry in self._execute(pending, workers):
            manifest.entries[key] = entry
            manifest.save()

        for path in self.outputs:
            manifest.add_output(path)
        self._write_outputs(manifest)
        manifest.wall_clock += time.perf_counter() - started
        if manifest.entries:
            self.write_report(manifest)
        manifest.save()
        logger.info("[SWEEP] finished with status %s in %.1fs", manifest.status, manifest.wall_clock)
        return manifest

    def write_report(self, manifest):
        report_path = self.output_dir / "report.md"
        emit_report(manifest, report_path)
        manifest.add_output(report_path)
        pdf_path = self.output_dir / "report.pdf"
        pdf_path.write_bytes(generate_pdf_report(manifest))
        manifest.add_output(pdf_path)

    def worker_count(self, num_jobs):
        """Configured worker count, else one per pending chain up to the core count"""
        if self.workers is not None:
            return self.workers
        return max(1, min(num_jobs, os.cpu_count() or 1))

    def _execute(self, jobs, workers=1):
        if not jobs:
            return
        if workers <= 1:
            for job in tqdm(jobs, desc="chains"):
                yield job.key, run_chain_job(job)
            return
        level = logging.getLogger().getEffectiveLevel()
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(level,)) as pool:
            futures = {pool.submit(run_chain_job, job): job.key for job in jobs}
            for future in tqdm(as_completed(futures), total=len(futures), desc="chains"):
                yield futures[future], future.result()

    def _write_outputs(self, manifest):
        records = manifest.records()
        metrics_path = self.output_dir / "metrics.csv"
        metrics_frame(records).to_csv(metrics_path, index=False)
        manifest.add_output(metrics_path)

        sweeps = group_sweeps(manifest.entries)
        for entry in manifest.entries.values():
            for path in entry.get("outputs", []):
                manifest.add_output(path)
        summary = {}
        for (group, n), sweep in sweeps.items():
            try:
                summary[f"{group}|n={n}"] = sweep_summary(sweep)
            except ValueError as e:
                logger.warning("[SWEEP] no CPER for %s n=%d: %s", group, n, e)
        agreement = self._boundary_agreement(manifest)
        if agreement:
            manifest.extras["boundary_agreement"] = agreement
        summary_path = self.output_dir / "sweep_summary.json"
        summary_path.write_text(json.dumps(summary, indent=2))
        manifest.add_output(summary_path)
        manifest.extras["sweeps"] = summary

        schema_path = self.output_dir / "experiment.schema.json"
        schema_path.write_text(json.dumps(EXPERIMENT_SCHEMA, indent=2))
        manifest.add_output(schema_path)

    @staticmethod
    def _boundary_agreement(manifest):
        table = {}
        for entry in manifest.entries.values():
            if "boundary_agreement" in entry:
                key = f"{entry['group']}|n={entry['n']}|T={entry['temperature']:g}"
                table.setdefault(key, []).append(entry["boundary_agreement"])
        return {
            key: {"mean": float(np.mean(v)), "se": float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0}
            for key, v in sorted(table.items())
        }


def run_experiment(config, output_dir=None, workers=None, seed_offset=0):
    return ExperimentRunner(config, output_dir, workers, seed_offset).run()
