"""Experiment documents, chain planning, manifests and the command line."""

import copy
import json
import math
import os
import warnings

import numpy as np
import pytest

from cli import main
from config import WORKERS_ENV
from data_utils import gen_toy_gaussians, save_csv
from experiment_runner import (
    MANIFEST_NAME,
    ExperimentConfig,
    ExperimentRunner,
    RunManifest,
    chain_key,
    default_temperature_grid,
    run_experiment,
)

TINY_TOY = {
    "name": "tiny",
    "kind": "toy_cpe",
    "dataset": {"source": "toy", "n_total": 16, "test_size": 200},
    "sampler": {"burn_in_epochs": 2, "cycle_epochs": 2, "total_epochs": 6},
    "temperatures": [0.1, 1.0],
    "seeds": [0],
    "grid": {"resolution": 11},
}


def _toy(**overrides):
    doc = copy.deepcopy(TINY_TOY)
    doc.update(overrides)
    return doc


@pytest.fixture
def csv_experiment(tmp_path):
    """A 64-point CSV pool with a small minibatch schedule (48 train / 16 test)"""
    save_csv(gen_toy_gaussians(64, seed=8), tmp_path / "pool.csv")
    return {
        "name": "csv",
        "kind": "subsample",
        "dataset": {"source": "csv", "path": "pool.csv", "test_fraction": 0.25},
        "model": {"hidden_widths": [8]},
        "sampler": {"batch_size": 8, "burn_in_epochs": 2, "cycle_epochs": 2, "total_epochs": 6},
        "temperatures": [1.0, 0.1],
        "seeds": [0],
        "subsample_sizes": [24, 48],
    }


def _write(tmp_path, doc, name="experiment.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


class TestTemperatureGrid:
    def test_default_grid(self):
        grid = default_temperature_grid()
        assert len(grid) == 6
        assert grid[0] == pytest.approx(1e-3)
        assert grid[-1] == 1.0
        np.testing.assert_allclose(np.diff(np.log10(grid)), 0.6)

    def test_chain_key(self):
        assert chain_key("toy", 32, 1, 0.001) == "toy|n=32|seed=1|T=0.001"


class TestExperimentConfig:
    def test_defaults(self):
        config = ExperimentConfig.from_dict({"kind": "toy_cpe", "dataset": {"source": "toy"}})
        assert config.seeds == [0, 1, 2]
        assert any(math.isclose(t, 1.0) for t in config.temperatures)
        assert config.sampler_template().total_epochs == 2000
        assert config.hidden_widths() == (20,)

    def test_grid_without_unit_temperature(self):
        with pytest.raises(ValueError, match="1.0"):
            ExperimentConfig.from_dict(_toy(temperatures=[0.1, 0.5]))

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="Unknown field"):
            ExperimentConfig.from_dict(_toy(temprature=[1.0]))

    def test_missing_dataset(self):
        doc = _toy()
        del doc["dataset"]
        with pytest.raises(ValueError, match="dataset"):
            ExperimentConfig.from_dict(doc)

    def test_unknown_sampler_field(self):
        with pytest.raises(ValueError, match="sampler"):
            ExperimentConfig.from_dict(_toy(sampler={"friction": 0.1}))

    def test_missing_file(self, tmp_path):
        doc = {"kind": "subsample", "dataset": {"source": "csv", "path": "nope.csv"}, "subsample_sizes": [10]}
        with pytest.raises(ValueError, match="not found"):
            ExperimentConfig.from_dict(doc, base_dir=tmp_path)

    def test_subsample_needs_sizes(self, csv_experiment, tmp_path):
        doc = dict(csv_experiment)
        del doc["subsample_sizes"]
        with pytest.raises(ValueError, match="subsample_sizes"):
            ExperimentConfig.from_dict(doc, base_dir=tmp_path)

    def test_relative_paths_resolve_against_document(self, csv_experiment, tmp_path):
        config = ExperimentConfig.load(_write(tmp_path, csv_experiment))
        assert config.dataset["path"] == str(tmp_path / "pool.csv")

    def test_checksum_ignores_execution_settings(self):
        base = ExperimentConfig.from_dict(_toy())
        assert ExperimentConfig.from_dict(_toy(workers=4, output_dir="elsewhere")).checksum() == base.checksum()
        assert ExperimentConfig.from_dict(_toy(seeds=[0, 1])).checksum() != base.checksum()

    def test_explicit_budget_needs_every_size(self, csv_experiment, tmp_path):
        doc = dict(csv_experiment, budget_mode="explicit", explicit_schedules={"24": {"epochs": 6, "burn_in_epochs": 2, "cycle_epochs": 2}})
        with pytest.raises(ValueError, match="explicit_schedules"):
            ExperimentConfig.from_dict(doc, base_dir=tmp_path)


class TestToyRun:
    @pytest.fixture
    def run_dir(self, tmp_path):
        return tmp_path / "run"

    def test_chains_and_artifacts(self, run_dir):
        manifest = run_experiment(ExperimentConfig.from_dict(TINY_TOY), output_dir=run_dir)
        assert manifest.status == "completed"
        assert set(manifest.entries) == {"toy|n=16|seed=0|T=0.1", "toy|n=16|seed=0|T=1"}
        for entry in manifest.entries.values():
            assert entry["gradient_steps"] == 6
            assert entry["metrics"]["ensemble_size"] == 2
            assert 0.0 <= entry["boundary_agreement"] <= 1.0
            assert len(entry["dead_units"]) == 1 and 0.0 <= entry["dead_units"][0] <= 1.0
        for name in (MANIFEST_NAME, "metrics.csv", "sweep_summary.json", "report.md", "report.pdf", "experiment.schema.json"):
            assert (run_dir / name).exists(), name
        assert len(list((run_dir / "grids").glob("*.png"))) == 2
        assert "toy|n=16" in json.loads((run_dir / "sweep_summary.json").read_text())
        assert "## Dead hidden units on the training inputs" in (run_dir / "report.md").read_text()

    def test_rerun_is_idempotent(self, run_dir):
        config = ExperimentConfig.from_dict(TINY_TOY)
        run_experiment(config, output_dir=run_dir)
        first = RunManifest.load(run_dir).entries
        run_experiment(config, output_dir=run_dir)
        assert RunManifest.load(run_dir).entries == first

    def test_same_seeds_same_metrics(self, tmp_path):
        config = ExperimentConfig.from_dict(TINY_TOY)
        a = run_experiment(config, output_dir=tmp_path / "a")
        b = run_experiment(config, output_dir=tmp_path / "b")
        for key in a.entries:
            assert a.entries[key]["metrics"] == b.entries[key]["metrics"]

    def test_worker_pool_matches_sequential(self, tmp_path):
        config = ExperimentConfig.from_dict(TINY_TOY)
        serial = run_experiment(config, output_dir=tmp_path / "serial", workers=1)
        pooled = run_experiment(config, output_dir=tmp_path / "pooled", workers=2)
        for key in serial.entries:
            assert pooled.entries[key]["metrics"] == serial.entries[key]["metrics"]

    def test_default_workers_follow_pending_chains(self, tmp_path, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV, raising=False)
        monkeypatch.setattr(os, "cpu_count", lambda: 4)
        config = ExperimentConfig.from_dict(TINY_TOY)
        runner = ExperimentRunner(config, output_dir=tmp_path)
        assert runner.worker_count(2) == 2
        assert runner.worker_count(12) == 4
        assert ExperimentRunner(config, output_dir=tmp_path, workers=1).worker_count(12) == 1

    def test_seed_offset_shifts_seeds(self, run_dir):
        runner = ExperimentRunner(ExperimentConfig.from_dict(TINY_TOY), output_dir=run_dir, seed_offset=10)
        assert {job.seed for job in runner.plan()} == {10}

    def test_divergence_is_recorded_not_raised(self, run_dir):
        doc = _toy(sampler={"kind": "sgld", "base_step": 1e6, "per_datum_step": False,
                            "burn_in_epochs": 2, "cycle_epochs": 2, "total_epochs": 6})
        with np.errstate(all="ignore"):
            manifest = run_experiment(ExperimentConfig.from_dict(doc), output_dir=run_dir)
        assert manifest.status == "partial"
        for entry in manifest.entries.values():
            assert entry["status"] == "diverged"
            assert entry["report"]["step"] < 6
            assert entry["gradient_steps"] == 0
        assert "did not complete" in (run_dir / "report.md").read_text()


class TestSubsampleRun:
    def test_fixed_gradient_budget(self, csv_experiment, tmp_path):
        config = ExperimentConfig.load(_write(tmp_path, csv_experiment))
        manifest = run_experiment(config, output_dir=tmp_path / "run")
        assert manifest.status == "completed"
        schedules = manifest.extras["schedules"]
        assert schedules["24"]["total_gradient_steps"] == schedules["48"]["total_gradient_steps"] == 36
        assert schedules["24"]["epochs"] == 12
        assert {e["gradient_steps"] for e in manifest.entries.values()} == {36}
        assert {e["metrics"]["ensemble_size"] for e in manifest.entries.values()} == {2}


class TestPlanning:
    def test_curation_sweep_groups(self, tmp_path):
        doc = _toy(kind="curation_sweep", dataset={"source": "toy", "n_total": 200, "test_size": 100},
                   curation={"num_labellers_grid": [1, 3], "labeller_epochs": 2})
        runner = ExperimentRunner(ExperimentConfig.from_dict(doc), output_dir=tmp_path)
        jobs = runner.plan()
        assert {job.group for job in jobs} == {"S=1", "S=3"}
        table = runner.extras["curation"]
        assert table[0]["retention_rate"] == 1.0
        assert table[1]["retention_rate"] <= table[0]["retention_rate"]
        assert (tmp_path / "curated_S3.csv").exists()
        assert (tmp_path / "curated_S3.provenance.json").exists()

    def test_curate_and_subsample_target_size(self, tmp_path):
        doc = _toy(kind="curate_and_subsample", dataset={"source": "toy", "n_total": 400, "test_size": 100},
                   curation={"num_labellers": 2, "labeller_epochs": 2, "target_size": 60}, subsample_sizes=[20])
        runner = ExperimentRunner(ExperimentConfig.from_dict(doc), output_dir=tmp_path)
        jobs = runner.plan()
        (row,) = runner.extras["curation"]
        assert row["n_train"] == 60 and row["target_size"] == 60
        sidecar = json.loads((tmp_path / "curated_S2.provenance.json").read_text())
        assert sidecar["target_size"] == 60
        assert {job.group for job in jobs} == {"curated", "random"}
        assert {job.n for job in jobs} == {20}

    def test_target_size_beyond_curated_set(self, tmp_path):
        doc = _toy(kind="curate_and_subsample", dataset={"source": "toy", "n_total": 400, "test_size": 100},
                   curation={"num_labellers": 2, "labeller_epochs": 2, "target_size": 1000}, subsample_sizes=[20])
        with pytest.raises(ValueError):
            ExperimentRunner(ExperimentConfig.from_dict(doc), output_dir=tmp_path).plan()

    def test_counts_losses_step_sizes(self, tmp_path):
        doc = _toy(kind="counts_losses", dataset={"source": "toy", "n_total": 100, "test_size": 50},
                   curation={"labeller_epochs": 1},
                   counts={"num_labellers": 5, "variants": ["categorical", "counts"], "s_tilde": [2]})
        runner = ExperimentRunner(ExperimentConfig.from_dict(doc), output_dir=tmp_path)
        jobs = runner.plan()
        base = {job.group: job.sampler.base_step for job in jobs}
        assert set(base) == {"categorical", "counts", "counts_s2"}
        assert base["counts"] == pytest.approx(base["categorical"] / 5)
        assert base["counts_s2"] == pytest.approx(base["categorical"] / 2)
        counted = next(job.train for job in jobs if job.group == "counts")
        np.testing.assert_array_equal(counted.counts.sum(axis=1), 5)
        assert len(jobs) == 3 * 2

    def test_diagnostics_forces_sghmc(self, tmp_path):
        doc = _toy(kind="diagnostics", sampler={"kind": "sgld", "burn_in_epochs": 2, "cycle_epochs": 2, "total_epochs": 6})
        jobs = ExperimentRunner(ExperimentConfig.from_dict(doc), output_dir=tmp_path).plan()
        assert {job.sampler.kind for job in jobs} == {"sghmc"}

    def test_shared_init_within_group(self, tmp_path):
        runner = ExperimentRunner(ExperimentConfig.from_dict(_toy(shared_init=True)), output_dir=tmp_path)
        assert len({job.init_seed for job in runner.plan()}) == 1


class TestCli:
    def test_grid(self, capsys):
        assert main(["grid"]) == 0
        assert json.loads(capsys.readouterr().out) == pytest.approx(default_temperature_grid())

    def test_validate(self, tmp_path, capsys):
        assert main(["validate", str(_write(tmp_path, TINY_TOY))]) == 0
        assert main(["validate", str(_write(tmp_path, _toy(temperatures=[0.5]), "bad.json"))]) == 1

    def test_run_and_report(self, tmp_path):
        out = tmp_path / "out"
        assert main(["run", str(_write(tmp_path, TINY_TOY)), "--out", str(out)]) == 0
        assert (out / MANIFEST_NAME).exists()
        assert (out / "run.log").exists()
        (out / "report.md").unlink()
        assert main(["report", str(out)]) == 0
        assert (out / "report.md").exists()

    def test_partial_run_exit_code(self, tmp_path):
        doc = _toy(sampler={"kind": "sgld", "base_step": 1e6, "per_datum_step": False,
                            "burn_in_epochs": 2, "cycle_epochs": 2, "total_epochs": 6})
        with np.errstate(all="ignore"):
            assert main(["run", str(_write(tmp_path, doc)), "--out", str(tmp_path / "out")]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["run", str(tmp_path / "absent.json")]) == 1

    def test_infeasible_budget(self, csv_experiment, tmp_path):
        doc = dict(csv_experiment, subsample_sizes=[40])
        assert main(["run", str(_write(tmp_path, doc)), "--out", str(tmp_path / "out")]) == 1


@pytest.mark.slow
class TestToyReproduction:
    @pytest.fixture(scope="class")
    def manifest(self, tmp_path_factory):
        doc = {
            "name": "toy-reproduction",
            "kind": "toy_cpe",
            "dataset": {"source": "toy"},
            "subsample_sizes": [32, 512],
            "seeds": [0, 1, 2],
        }
        return run_experiment(ExperimentConfig.from_dict(doc), output_dir=tmp_path_factory.mktemp("toy"))

    def test_cold_posterior_effect_is_stronger_for_small_n(self, manifest):
        assert manifest.status == "completed"
        small = manifest.extras["sweeps"]["toy|n=32"]["cper"]
        large = manifest.extras["sweeps"]["toy|n=512"]["cper"]
        assert small < large
        assert small < 0.95

    def test_cold_boundary_is_closer_to_bayes_rule(self, manifest):
        def agreement(temperature):
            values = [e["boundary_agreement"] for e in manifest.entries.values()
                      if e["n"] == 32 and math.isclose(e["temperature"], temperature)]
            assert len(values) == 3
            return np.mean(values), np.std(values, ddof=1) / math.sqrt(len(values))

        cold_t = min(manifest.temperature_grid, key=lambda t: abs(math.log10(t) + 2.0))
        cold, cold_se = agreement(cold_t)
        warm, warm_se = agreement(1.0)
        se = math.hypot(cold_se, warm_se)
        if abs(cold - warm) <= se:
            warnings.warn(f"boundary agreement at T={cold_t:g} ({cold:.4f}) and T=1 ({warm:.4f}) are within one SE ({se:.4f})")
        else:
            assert cold > warm
