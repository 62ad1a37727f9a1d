"""
Markdown report for a finished (or partial) run manifest
"""
import logging
from pathlib import Path

import numpy as np

from metrics_utils import MetricsRecord, SweepResult, boundary_agreement, load_grid_csv, sweep_summary

logger = logging.getLogger(__name__)


def group_sweeps(entries):
    """Completed chain entries grouped into one SweepResult per (group, n)"""
    sweeps = {}
    for entry in entries.values():
        if entry.get("status") != "completed":
            continue
        key = (entry["group"], int(entry["n"]))
        sweeps.setdefault(key, SweepResult()).records.append(MetricsRecord(**entry["metrics"]))
    return dict(sorted(sweeps.items()))


def markdown_table(headers, rows):
    lines = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(_cell(v) for v in row) + " |")
    return "\n".join(lines)


def _cell(value):
    if isinstance(value, float):
        return f"{value:.4g}"
    return "" if value is None else str(value)


def _pm(mean, se):
    return f"{mean:.4f} +/- {se:.4f}"


def summarize(manifest):
    """
    Tables of a manifest as (title, headers, rows) triples

    Shared by the Markdown and PDF renderers.
    """
    sweeps = group_sweeps(manifest.entries)
    tables = []

    summaries = {}
    for (group, n), sweep in sweeps.items():
        try:
            summaries[(group, n)] = sweep_summary(sweep)
        except ValueError as e:
            logger.warning("[REPORT] skipping %s n=%d: %s", group, n, e)
    cper_rows = [
        [group, n, s["cper"], s["t_star"], len({r.seed for r in sweeps[(group, n)].records})]
        for (group, n), s in summaries.items()
    ]
    if cper_rows:
        tables.append(("CPER by training-set size", ["group", "n", "CPER", "T*", "seeds"], cper_rows))

    for (group, n), summary in summaries.items():
        rows = []
        for entry in summary["per_temperature"]:
            row = [entry["T"], _pm(entry["ce_mean"], entry["ce_se"]), _pm(entry["acc_mean"], entry["acc_se"]),
                   _pm(entry["ece_mean"], entry["ece_se"])]
            if "kinetic_temperature_mean" in entry:
                row.append(entry["kinetic_temperature_mean"])
            rows.append(row)
        if rows:
            headers = ["T", "test CE", "accuracy", "ECE"] + (["kinetic T"] if len(rows[0]) == 5 else [])
            tables.append((f"Temperature sweep: {group}, n={n}", headers, rows))

    curation = manifest.extras.get("curation")
    if curation:
        tables.append((
            "Curation retention",
            ["S", "retention", "n train", "n test", "consensus agreement"],
            [[c["num_labellers"], c["retention_rate"], c["n_train"], c["n_test"], c["agreement"]] for c in curation],
        ))

    agreement = manifest.extras.get("boundary_agreement")
    if agreement:
        tables.append((
            "Decision boundary agreement with the Bayes rule",
            ["chain group", "agreement"],
            [[key, _pm(v["mean"], v["se"])] for key, v in agreement.items()],
        ))

    dead = {}
    for e in manifest.entries.values():
        if e["status"] == "completed" and e.get("dead_units"):
            dead.setdefault((e["group"], int(e["n"]), e["temperature"]), []).append(float(np.mean(e["dead_units"])))
    if dead:
        tables.append((
            "Dead hidden units on the training inputs",
            ["group", "n", "T", "fraction"],
            [[group, n, t, float(np.mean(v))] for (group, n, t), v in sorted(dead.items())],
        ))

    problems = [
        [key, e["status"], e.get("error", "")]
        for key, e in sorted(manifest.entries.items()) if e["status"] != "completed"
    ]
    if problems:
        tables.append(("Chains that did not complete", ["chain", "status", "error"], problems))
    return tables


def grid_agreement(png_path):
    """Bayes-rule agreement of the grid exported next to png_path, or None without its CSV"""
    csv_path = Path(png_path).with_suffix(".csv")
    if not csv_path.exists():
        return None
    return boundary_agreement(load_grid_csv(csv_path))


def existing_outputs(manifest):
    return [p for p in manifest.outputs if Path(p).exists()]


def emit_report(manifest, path=None):
    """
    Render the manifest as Markdown, optionally writing it to path

    Raises:
        ValueError if the manifest records no chains
    """
    if not manifest.entries:
        raise ValueError("Manifest records no chains; nothing to report")
    counts = {}
    for entry in manifest.entries.values():
        counts[entry["status"]] = counts.get(entry["status"], 0) + 1
    config = manifest.config
    parts = [
        f"# {config.get('name', 'experiment')} ({config.get('kind')})",
        "",
        f"- status: {manifest.status}",
        f"- config checksum: `{manifest.config_checksum}`",
        f"- chains: " + ", ".join(f"{k} {v}" for k, v in sorted(counts.items())),
        f"- temperatures: " + ", ".join(f"{t:g}" for t in manifest.temperature_grid),
        f"- wall clock: {manifest.wall_clock:.1f}s",
    ]
    for title, headers, rows in summarize(manifest):
        parts += ["", f"## {title}", "", markdown_table(headers, rows)]
    outputs = existing_outputs(manifest)
    if outputs:
        parts += ["", "## Artifacts", ""] + [f"- `{p}`" for p in outputs]
    text = "\n".join(parts) + "\n"
    if path is not None:
        Path(path).write_text(text)
        logger.info("[REPORT] wrote %s", path)
    return text
