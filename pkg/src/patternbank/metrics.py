"""Forecast metrics and the historical-average baseline.

Horizons are named in minutes; at interval m a horizon of h minutes is the
(h/m)-th forecast step. MAPE is computed only over samples with nonzero
ground truth and reported as absent when no such samples exist.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D


@dataclass
class HorizonMetrics:
    horizon_minutes: int
    rmse: float
    mae: float
    mape: float | None
    n_samples: int


@dataclass
class MetricsReport:
    rows: list[HorizonMetrics] = field(default_factory=list)
    seed: int | None = None
    label: str = ""

    def by_horizon(self, minutes: int) -> HorizonMetrics:
        for row in self.rows:
            if row.horizon_minutes == minutes:
                return row
        raise KeyError(f"no metrics at horizon {minutes} min")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "seed", "horizon_minutes", "rmse", "mae",
                        "mape_percent", "n_samples"])
            for r in self.rows:
                w.writerow([self.label, self.seed, r.horizon_minutes,
                            f"{r.rmse:.10g}", f"{r.mae:.10g}",
                            "" if r.mape is None else f"{r.mape:.10g}",
                            r.n_samples])


def compute_metrics(pred: np.ndarray, truth: np.ndarray,
                    horizons_minutes: list[int], interval_minutes: int,
                    seed: int | None = None, label: str = "") -> MetricsReport:
    """RMSE/MAE/MAPE per horizon over stacked forecast windows.

    ``pred`` and ``truth`` are (windows, N, T', 1) in native units. Every
    horizon must be a multiple of the interval within the forecast span.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth {truth.shape}")
    T_prime = pred.shape[2]
    report = MetricsReport(seed=seed, label=label)
    for h in horizons_minutes:
        if h % interval_minutes != 0:
            raise ValueError(f"horizon {h} min is not a multiple of the "
                             f"{interval_minutes}-min interval")
        step = h // interval_minutes - 1
        if not 0 <= step < T_prime:
            raise ValueError(f"horizon {h} min exceeds the {T_prime}-step forecast")
        err = pred[:, :, step, 0] - truth[:, :, step, 0]
        rmse = float(np.sqrt(np.mean(err ** 2)))
        mae = float(np.mean(np.abs(err)))
        t = truth[:, :, step, 0]
        nz = t != 0
        mape = float(np.mean(np.abs(err[nz] / t[nz])) * 100) if nz.any() else None
        if rmse < mae - 1e-12:
            raise AssertionError("RMSE < MAE: metric computation is broken")
        report.rows.append(HorizonMetrics(h, rmse, mae, mape, int(err.size)))
    return report


@dataclass
class HourOfWeekAverages:
    """Per-node means conditioned on the step-of-week slot."""

    slot_means: np.ndarray   # (steps_per_week, N); NaN where never observed
    node_means: np.ndarray   # (N,) global fallback
    steps_per_week: int
    start_offset: int


def fit_ha(city: D.CityDataset, train_range: tuple[int, int]) -> HourOfWeekAverages:
    lo, hi = train_range
    if hi <= lo:
        raise ValueError("HA needs a non-empty training range")
    values = city.speed[lo:hi, :, 0]
    spw = city.steps_per_week
    slots = (city.start_offset + np.arange(lo, hi)) % spw
    sums = np.zeros((spw, city.num_nodes))
    counts = np.zeros((spw, 1))
    np.add.at(sums, slots, values)
    np.add.at(counts, slots, 1.0)
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return HourOfWeekAverages(slot_means=means, node_means=values.mean(axis=0),
                              steps_per_week=spw, start_offset=city.start_offset)


def ha_predict(ha: HourOfWeekAverages, origins: list[int],
               horizon: int) -> np.ndarray:
    """Slot-mean predictions, (len(origins), N, horizon, 1) in native units."""
    n = ha.node_means.shape[0]
    out = np.empty((len(origins), n, horizon, 1))
    for wi, origin in enumerate(origins):
        steps = (ha.start_offset + origin + np.arange(horizon)) % ha.steps_per_week
        vals = ha.slot_means[steps]  # (horizon, N), NaN where unseen
        vals = np.where(np.isnan(vals), ha.node_means[None, :], vals)
        out[wi] = vals.T[:, :, None]
    return out


def ha_baseline(city: D.CityDataset, train_range: tuple[int, int],
                origins: list[int], horizon: int) -> np.ndarray:
    """Fit slot means on the training range and predict at each origin."""
    return ha_predict(fit_ha(city, train_range), origins, horizon)
