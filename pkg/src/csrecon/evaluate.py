"""Acceleration sweeps, per-slice metric reports and reconstruction timing."""
import csv
import math
import time
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .cascade import reconstruct, zero_filled
from .data import KSpaceVolume, reference_image
from .errors import ParameterError
from .metrics import nrmse, psnr, vif
from .sampling import apply_mask, fixed_mask_seed, poisson_disc_mask
from .stats import dunn_posthoc, friedman_test

BASELINE = "zero-filled"
METRICS = ("nrmse", "psnr", "vif")
FOREGROUND_LEVEL = 0.05
FOREGROUND_FRACTION = 0.02
WARMUP_SLICES = 4


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    excluded: list = field(default_factory=list)
    policy: str = ""

    def models(self):
        return list(OrderedDict.fromkeys(r["model"] for r in self.records))

    def accelerations(self):
        return sorted({r["r"] for r in self.records})

    def values(self, model, r, metric):
        return np.array([rec[metric] for rec in self.records if rec["model"] == model and rec["r"] == r])

    def aggregates(self):
        """``{(model, R): {metric: (mean, std, n)}}``; infinite pSNR values are dropped."""
        out = OrderedDict()
        for model in self.models():
            for r in self.accelerations():
                row = {}
                for metric in METRICS:
                    v = self.values(model, r, metric)
                    if v.size == 0:
                        continue
                    finite = v[np.isfinite(v)]
                    if finite.size < v.size:
                        warnings.warn(f"{v.size - finite.size} infinite {metric} values dropped for {model} at R={r:g}")
                    if finite.size == 0:
                        row[metric] = (math.inf, 0.0, 0)
                        continue
                    sd = float(np.std(finite, ddof=1)) if finite.size > 1 else 0.0
                    row[metric] = (float(np.mean(finite)), sd, int(finite.size))
                if row:
                    out[(model, r)] = row
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "r", "volume", "slice", *METRICS])
            for rec in self.records:
                w.writerow([rec["model"], f"{rec['r']:g}", rec["volume"], rec["slice"], *(repr(rec[m]) for m in METRICS)])

    def write_aggregate_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "r", "n", *METRICS])
            for (model, r), row in self.aggregates().items():
                n = max(v[2] for v in row.values())
                w.writerow([model, f"{r:g}", n, *(format_mean_std(*row[m][:2], m) for m in METRICS)])

    def friedman(self, metric, r):
        """Friedman test and Dunn post-hoc across models on the slices of one acceleration."""
        models = self.models()
        cols = [self.values(m, r, metric) for m in models]
        scores = np.stack(cols, axis=1)
        if metric == "psnr":
            scores = np.where(np.isfinite(scores), scores, np.finfo(np.float64).max)
        return friedman_test(scores, models), dunn_posthoc(scores, models)

    def stats_text(self):
        blocks = []
        if len(self.models()) < 2:
            return "fewer than two models; no tests run\n"
        for r in self.accelerations():
            for metric in METRICS:
                if len(self.values(self.models()[0], r, metric)) < 2:
                    continue
                _, dunn = self.friedman(metric, r)
                blocks.append(f"[R={r:g} metric={metric}]\n" + dunn.to_text())
        return "\n".join(blocks)


def format_mean_std(mean, std, metric="nrmse"):
    """``0.0280 ± 0.0071``; pSNR uses two decimals."""
    digits = 2 if metric == "psnr" else 4
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def edge_slices(reference, level=FOREGROUND_LEVEL, fraction=FOREGROUND_FRACTION):
    """Indices of slices with under ``fraction`` of pixels above ``level`` times the volume maximum."""
    ref = np.asarray(reference.data if hasattr(reference, "data") else reference)
    thresh = level * ref.max()
    fg = (ref > thresh).reshape(ref.shape[0], -1).mean(axis=1)
    return [int(i) for i in np.flatnonzero(fg < fraction)]


def evaluation_masks(ny, nz, r, n, seed, center_radius, start=0):
    """One fixed mask per slice, shared by every model at this acceleration."""
    tag = int(round(r * 1000))
    return np.stack([
        poisson_disc_mask(ny, nz, r, center_radius, fixed_mask_seed(seed, start + i, tag)).grid
        for i in range(n)
    ])


def _as_volumes(test_set):
    if isinstance(test_set, KSpaceVolume):
        return [test_set]
    return list(test_set)


def evaluate(models, test_set, r_list, seed=0, center_radius=16, level=FOREGROUND_LEVEL,
             fraction=FOREGROUND_FRACTION, include_baseline=True):
    """Metrics for every (model, R, slice) against the fully sampled SOS reference.

    ``models`` maps names to cascade models (a list is named by spec). All
    models see the same mask per slice. pSNR uses the volume maximum as peak.
    """
    if not isinstance(models, dict):
        models = OrderedDict((m.spec.name, m) for m in models)
    names = ([BASELINE] if include_baseline else []) + list(models)
    if not names:
        raise ParameterError("nothing to evaluate")
    volumes = _as_volumes(test_set)
    report = MetricsReport(
        policy=f"slices with < {fraction:.0%} of pixels above {level:.0%} of the volume max are excluded"
    )
    offset = 0
    for v_idx, volume in enumerate(volumes):
        data = volume.data if isinstance(volume, KSpaceVolume) else np.asarray(volume)
        ref = reference_image(data).data
        skip = set(edge_slices(ref, level, fraction))
        report.excluded.extend((v_idx, s) for s in sorted(skip))
        peak = float(ref.max())
        s_total, _, ny, nz = data.shape
        for r in r_list:
            masks = evaluation_masks(ny, nz, r, s_total, seed, center_radius, start=offset)
            x_u = np.where(masks[:, None], data, np.zeros((), data.dtype))
            recons = {}
            for name in names:
                if name == BASELINE:
                    recons[name] = zero_filled(x_u).data
                else:
                    recons[name] = reconstruct(models[name], x_u, masks).data
            for s in range(s_total):
                if s in skip:
                    continue
                for name in names:
                    out = recons[name][s]
                    report.records.append({
                        "model": name,
                        "r": float(r),
                        "volume": v_idx,
                        "slice": s,
                        "nrmse": nrmse(out, ref[s]),
                        "psnr": psnr(out, ref[s], peak=peak),
                        "vif": vif(out, ref[s]),
                    })
        offset += s_total
    return report


def plot_report(report, path, metric="nrmse"):
    """Metric-versus-R curve per model, saved as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    agg = report.aggregates()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for model in report.models():
        rs = [r for r in report.accelerations() if (model, r) in agg and metric in agg[(model, r)]]
        mean = [agg[(model, r)][metric][0] for r in rs]
        std = [agg[(model, r)][metric][1] for r in rs]
        ax.errorbar(rs, mean, yerr=std, marker="o", capsize=3, label=model)
    ax.set_xlabel("acceleration R")
    ax.set_ylabel(metric.upper() if metric != "psnr" else "pSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def benchmark_time(model, kspace, r=4.0, n_slices=256, seed=0, center_radius=16, warmup=WARMUP_SLICES, repeats=1):
    """Mean wall-clock milliseconds to reconstruct one slice.

    Slices are reconstructed one at a time, cycling through ``kspace``
    (``[S, Nc, Ny, Nz]``) until ``n_slices`` have been timed; ``warmup``
    untimed reconstructions come first. With ``repeats > 1`` the fastest
    pass is reported, which suppresses interference from other processes.
    """
    data = kspace.data if isinstance(kspace, KSpaceVolume) else np.asarray(kspace)
    if n_slices < 1 or repeats < 1:
        raise ParameterError("need at least one timed slice and one pass")
    _, _, ny, nz = data.shape
    mask = poisson_disc_mask(ny, nz, r, center_radius, seed).grid
    x_u = apply_mask(data, mask)
    for i in range(warmup):
        reconstruct(model, x_u[i % len(x_u)][None], mask)
    best = np.inf
    for _ in range(repeats):
        tic = time.perf_counter()
        for i in range(n_slices):
            reconstruct(model, x_u[i % len(x_u)][None], mask)
        best = min(best, time.perf_counter() - tic)
    return 1000.0 * best / n_slices
