"""
Report - Gathers cell artifacts into tables and vector-graphic plots
    transfer      per-topic condition table, category means, bar charts
    alignment     per-layer profiles (steered / subtractive / skyline) and family peaks
    recovery      cos(v_r, v_c) per cell for steered and control data
    verbalization deterministic (and external) scores
    correlation   delta NLL vs recovery cosine and vs verbalization score
"""
import glob
import json
import logging
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from core.errors import StageDependencyError  # noqa: E402
from core.evalkit import CONDITION_ORDER, MetricReport  # noqa: E402
from core.recovery import RecoveryResult, transfer_correlation  # noqa: E402

logger = logging.getLogger(__name__)

matplotlib.rcParams["svg.hashsalt"] = "subliminal-lab"

REPORT_DIR = "report"
RECOVERY_COLUMNS = ["slug", "seed", "condition", "cosine", "alpha", "window_lo", "window_hi", "weak",
                    "initial_loss", "final_loss", "baseline_loss"]
VERBAL_COLUMNS = ["slug", "seed", "condition", "score", "external_score", "external_available"]


def cell_dirs(out_dir):
    """(slug, seed, path) for every cell directory"""
    cells = []
    for path in sorted(glob.glob(os.path.join(out_dir, "cells", "*", "seed*"))):
        slug = os.path.basename(os.path.dirname(path))
        seed = int(os.path.basename(path)[len("seed"):])
        cells.append((slug, seed, path))
    return cells


def _tag(frame, slug, seed):
    frame.insert(0, "seed_dir", seed)
    frame.insert(0, "slug", slug)
    return frame


def collect(out_dir):
    """name -> DataFrame for every artifact family found under out_dir"""
    metrics, profiles, peaks, recovery, verbal, migration = [], [], [], [], [], []
    for slug, seed, path in cell_dirs(out_dir):
        metrics_path = os.path.join(path, "evaluate", "metrics.csv")
        if os.path.exists(metrics_path):
            metrics.append(_tag(MetricReport.read_csv(metrics_path).to_frame(), slug, seed))
        profile_path = os.path.join(path, "analyze", "profiles.csv")
        if os.path.exists(profile_path):
            profiles.append(_tag(pd.read_csv(profile_path), slug, seed))
        peaks_path = os.path.join(path, "analyze", "peaks.json")
        if os.path.exists(peaks_path):
            with open(peaks_path, "r", encoding="utf-8") as f:
                summary = json.load(f)
            for condition, by_family in summary["peaks"].items():
                for family, value in by_family.items():
                    peaks.append({"slug": slug, "seed": seed, "condition": condition, "family": family,
                                  "peak": value})
        migration_path = os.path.join(path, "analyze", "migration.csv")
        if os.path.exists(migration_path):
            migration.append(_tag(pd.read_csv(migration_path), slug, seed))
        for result_path in sorted(glob.glob(os.path.join(path, "*", "recovery.npz"))):
            condition = os.path.basename(os.path.dirname(result_path))
            result = RecoveryResult.load(result_path)
            recovery.append({"slug": slug, "seed": seed, "condition": condition,
                             "cosine": math.nan if result.cosine is None else result.cosine,
                             "alpha": result.effective_alpha, "window_lo": result.window[0],
                             "window_hi": result.window[1], "weak": result.weak,
                             "initial_loss": result.initial_loss, "final_loss": result.final_loss,
                             "baseline_loss": result.baseline_loss})
        for verdict_path in sorted(glob.glob(os.path.join(path, "*", "verdict.json"))):
            condition = os.path.basename(os.path.dirname(verdict_path))
            with open(verdict_path, "r", encoding="utf-8") as f:
                verdicts = json.load(f)
            external = verdicts.get("external") or {}
            verbal.append({"slug": slug, "seed": seed, "condition": condition,
                           "score": verdicts["deterministic"]["score"],
                           "external_score": external.get("score"),
                           "external_available": bool(external.get("available", False))})
    return {
        "metrics": pd.concat(metrics, ignore_index=True) if metrics else pd.DataFrame(),
        "profiles": pd.concat(profiles, ignore_index=True) if profiles else pd.DataFrame(),
        "peaks": pd.DataFrame(peaks),
        "recovery": pd.DataFrame(recovery, columns=RECOVERY_COLUMNS),
        "verbalization": pd.DataFrame(verbal, columns=VERBAL_COLUMNS),
        "migration": pd.concat(migration, ignore_index=True) if migration else pd.DataFrame(),
    }


def correlation_rows(frames):
    """One row per (bias, seed) cell: steered delta NLL, steered recovery cosine, steered score"""
    metrics = frames["metrics"]
    if metrics.empty:
        return []
    steered = metrics[(metrics["condition"] == "steered") & ~metrics["missing"].astype(bool)]
    recovery = frames["recovery"].query("condition == 'steered'").set_index(["slug", "seed"])
    verbal = frames["verbalization"].query("condition == 'steered'").set_index(["slug", "seed"])
    rows = []
    for _, row in steered.iterrows():
        key = (row["slug"], row["seed_dir"])
        rows.append({"delta_nll": row["delta_nll"],
                     "cosine": recovery["cosine"].get(key, math.nan) if not recovery.empty else math.nan,
                     "score": verbal["score"].get(key, math.nan) if not verbal.empty else math.nan})
    return rows


# ---------------------------------------------------------------- plots

def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_transfer(metrics, category, column, path):
    frame = metrics[(metrics["category"] == category) & ~metrics["missing"].astype(bool)]
    if frame.empty:
        return None
    table = frame.groupby(["bias", "condition"])[column].mean().unstack("condition")
    table = table[[c for c in CONDITION_ORDER if c in table.columns]]
    fig, ax = plt.subplots(figsize=(max(6, 1.4 * len(table)), 4))
    width = 0.8 / max(1, len(table.columns))
    x = np.arange(len(table))
    for i, condition in enumerate(table.columns):
        ax.bar(x + i * width, table[condition].values, width, label=condition)
    ax.set_xticks(x + width * (len(table.columns) - 1) / 2)
    ax.set_xticklabels(table.index, rotation=20, ha="right")
    ax.set_ylabel("pick rate" if column == "pick_rate" else "mean log p(y_c)")
    ax.set_title(f"{category} biases by condition")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_alignment(profiles, path):
    pooled = profiles[profiles["family"] == "pooled"]
    if pooled.empty:
        return None
    slugs = sorted(pooled["slug"].unique())
    fig, axes = plt.subplots(1, len(slugs), figsize=(4 * len(slugs), 3.5), squeeze=False)
    for ax, slug in zip(axes[0], slugs):
        sub = pooled[pooled["slug"] == slug]
        for condition, group in sub.groupby("condition"):
            curve = group.groupby("layer")["score"].mean()
            ax.plot(curve.index, curve.values, marker="o", label=condition)
        ax.axhline(0.0, color="grey", linewidth=0.5)
        ax.set_ylim(-1.05, 1.05)
        ax.set_xlabel("layer")
        ax.set_title(slug)
    axes[0][0].set_ylabel("alignment score")
    axes[0][0].legend(fontsize=8)
    return _save(fig, path)


def plot_family_peaks(peaks, path):
    frame = peaks[(peaks["condition"] == "steered") & (peaks["family"] != "pooled")]
    if frame.empty:
        return None
    table = frame.groupby(["slug", "family"])["peak"].mean().unstack("family")
    ax = table.plot.bar(figsize=(max(6, 1.2 * len(table)), 4))
    ax.set_ylabel("peak alignment")
    ax.set_title("peak alignment by prompt family")
    return _save(ax.get_figure(), path)


def plot_by_condition(frame, column, ylabel, path):
    if frame.empty or frame[column].isna().all():
        return None
    table = frame.groupby(["slug", "condition"])[column].mean().unstack("condition")
    ax = table.plot.bar(figsize=(max(6, 1.2 * len(table)), 4))
    ax.set_ylabel(ylabel)
    return _save(ax.get_figure(), path)


def plot_correlation(rows, path):
    frame = pd.DataFrame(rows, columns=["delta_nll", "cosine", "score"])
    if frame.dropna(subset=["delta_nll"]).empty:
        return None
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    for ax, column in zip(axes, ("cosine", "score")):
        pair = frame[["delta_nll", column]].dropna()
        ax.scatter(pair["delta_nll"], pair[column])
        ax.set_xlabel("normalized delta NLL")
        ax.set_ylabel(column)
    return _save(fig, path)


def write_report(out_dir):
    """Every table and plot under <out_dir>/report; returns the written paths"""
    frames = collect(out_dir)
    if all(frame.empty for frame in frames.values()):
        raise StageDependencyError("full-run", f"no artifacts found in {out_dir}")
    report_dir = os.path.join(out_dir, REPORT_DIR)
    os.makedirs(report_dir, exist_ok=True)
    paths = []

    def table(frame, name):
        if frame.empty:
            return
        path = os.path.join(report_dir, name)
        frame.to_csv(path, index=False)
        paths.append(path)

    def plot(result):
        if result:
            paths.append(result)

    metrics = frames["metrics"]
    table(metrics, "transfer_table.csv")
    if not metrics.empty:
        present = metrics[~metrics["missing"].astype(bool)]
        table(present.groupby(["category", "condition"], sort=False)[["pick_rate", "logprob", "delta_nll"]]
              .mean().reset_index(), "transfer_summary.csv")
        plot(plot_transfer(metrics, "animal", "pick_rate", os.path.join(report_dir, "transfer_animal.svg")))
        plot(plot_transfer(metrics, "complex", "logprob", os.path.join(report_dir, "transfer_complex.svg")))
    table(frames["profiles"], "alignment_profiles.csv")
    if not frames["profiles"].empty:
        plot(plot_alignment(frames["profiles"], os.path.join(report_dir, "alignment_layers.svg")))
    table(frames["peaks"], "family_peaks.csv")
    if not frames["peaks"].empty:
        plot(plot_family_peaks(frames["peaks"], os.path.join(report_dir, "family_peaks.svg")))
    table(frames["migration"], "window_migration.csv")
    table(frames["recovery"], "recovery.csv")
    plot(plot_by_condition(frames["recovery"], "cosine", "cos(v_r, v_c)",
                           os.path.join(report_dir, "recovery_cosine.svg")))
    table(frames["verbalization"], "verbalization.csv")
    plot(plot_by_condition(frames["verbalization"], "score", "verbalization score",
                           os.path.join(report_dir, "verbalization.svg")))

    rows = correlation_rows(frames)
    if rows:
        correlation = transfer_correlation(rows)
        path = os.path.join(report_dir, "correlation.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in correlation.items()},
                      f, indent=2, sort_keys=True)
        paths.append(path)
        plot(plot_correlation(rows, os.path.join(report_dir, "correlation.svg")))
    logger.info(f"✓ Report written to {report_dir} ({len(paths)} files)")
    return paths


def report_inputs(out_dir):
    """Artifact checksums of every cell manifest, keyed by cell directory"""
    inputs = {}
    for _, _, path in cell_dirs(out_dir):
        manifest_path = os.path.join(path, "cell_manifest.json")
        if not os.path.exists(manifest_path):
            continue
        with open(manifest_path, "r", encoding="utf-8") as f:
            data = json.load(f)
        inputs[os.path.relpath(path, out_dir)] = {rel: checksum for s in data.get("stages", [])
                                                  if s.get("status") == "ok"
                                                  for rel, checksum in s.get("artifacts", {}).items()}
    return inputs


def stage_report(ctx):
    from cli.pipeline import run_stage

    return run_stage(ctx.manifest, "report", "run", lambda: (write_report(ctx.out_dir), {}),
                     inputs=report_inputs(ctx.out_dir))
