"""
Configuration constants for the Cold Posterior Lab
"""

# ---------------- Environment ----------------
OUTPUT_DIR_ENV = "CPE_LAB_OUTPUT_DIR"
WORKERS_ENV = "CPE_LAB_WORKERS"
DEFAULT_OUTPUT_DIR = "runs"

# ---------------- Model Defaults ----------------
DEFAULT_PRIOR_STD = 1.0
TOY_HIDDEN_WIDTHS = [20]
MNIST_HIDDEN_WIDTHS = [20, 20, 20]

# ---------------- Sampler Schedules ----------------
# Learning rate / burn-in / cycle length / epochs per experiment family.
# Epoch counts refer to the reference (full) dataset size.
SCHEDULES = {
    "toy": {"base_step": 0.1, "burn_in_epochs": 500, "cycle_epochs": 75, "total_epochs": 2000, "batch_size": None},
    "svhn_subsample": {"base_step": 0.1, "burn_in_epochs": 100, "cycle_epochs": 25, "total_epochs": 500, "batch_size": 128},
    "mnist": {"base_step": 0.1, "burn_in_epochs": 150, "cycle_epochs": 50, "total_epochs": 1500, "batch_size": 128},
    "counts": {"base_step": 0.1, "burn_in_epochs": 100, "cycle_epochs": 50, "total_epochs": 1000, "batch_size": 128},
}

DEFAULT_BATCH_SIZE = 128
DEFAULT_MOMENTUM_WEIGHT = 0.9
DEFAULT_SAMPLER_KIND = "sghmc"

# Any |U| above this, or a non-finite parameter, aborts the chain
DIVERGENCE_ENERGY_LIMIT = 1e12

# ---------------- Labeller Training (Adam defaults) ----------------
ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LABELLER_EPOCHS = 50
LABELLER_BATCH_SIZE = 128

# ---------------- Temperatures ----------------
# Six log-spaced values on [1e-3, 1]; the exact grid behind the published
# figures is not known, so this grid is recorded in every manifest.
TEMPERATURE_GRID_MIN_EXPONENT = -3.0
TEMPERATURE_GRID_SIZE = 6

# ---------------- Metrics ----------------
ECE_BINS = 15
PROB_FLOOR = 1e-12

# ---------------- Toy Data ----------------
TOY_MEANS = ((-1.0, -1.0), (1.0, 1.0))
TOY_TEST_SIZE = 10000
GRID_BOUNDS = (-3.0, 3.0, -3.0, 3.0)
GRID_RESOLUTION = 101

# ---------------- Augmentation ----------------
AUGMENT_PAD = 4
AUGMENT_BRIGHTNESS = (-0.15, 0.15)
AUGMENT_CONTRAST = (0.45, 0.55)
AUGMENT_KINDS = ("flip_crop", "brightness_contrast_crop")

# ---------------- IDX Format ----------------
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# ---------------- Experiment Schema ----------------
EXPERIMENT_KINDS = (
    "toy_cpe",
    "subsample",
    "curation_sweep",
    "curate_and_subsample",
    "counts_losses",
    "diagnostics",
)

LIKELIHOOD_VARIANTS = ("categorical", "counts", "counts_smoothed", "label_smoothing")

EXPERIMENT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Cold posterior experiment",
    "type": "object",
    "required": ["kind", "dataset"],
    "properties": {
        "name": {"type": "string"},
        "kind": {"enum": list(EXPERIMENT_KINDS)},
        "dataset": {
            "type": "object",
            "required": ["source"],
            "properties": {
                "source": {"enum": ["toy", "idx", "csv"]},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "path": {"type": "string"},
                "test_path": {"type": "string"},
                "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "n_total": {"type": "integer", "minimum": 2},
                "test_size": {"type": "integer", "minimum": 1},
            },
        },
        "model": {
            "type": "object",
            "properties": {
                "hidden_widths": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "prior_std": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "sampler": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["sgld", "sghmc"]},
                "base_step": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": ["integer", "null"], "minimum": 1},
                "burn_in_epochs": {"type": "integer", "minimum": 0},
                "cycle_epochs": {"type": "integer", "minimum": 1},
                "total_epochs": {"type": "integer", "minimum": 1},
                "momentum_weight": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "temper_mode": {"enum": ["joint", "likelihood_only"]},
                "per_datum_step": {"type": "boolean"},
                "augment": {"enum": [None, *AUGMENT_KINDS]},
            },
        },
        "likelihood": {
            "type": "object",
            "properties": {
                "variant": {"enum": list(LIKELIHOOD_VARIANTS)},
                "num_labellers": {"type": ["integer", "null"], "minimum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "weight": {"type": "number", "exclusiveMinimum": 0},
                "step_divisor": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "temperatures": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "contains": {"const": 1.0}},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "subsample_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "reference_n": {"type": "integer", "minimum": 1},
        "budget_mode": {"enum": ["fixed_gradients", "explicit"]},
        "explicit_schedules": {"type": "object"},
        "curation": {"type": "object"},
        "counts": {"type": "object"},
        "grid": {"type": "object"},
        "master_seed": {"type": "integer"},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
    },
}
