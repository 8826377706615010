"""Regression metrics, run aggregation, Bland-Altman limits and Clarke zones."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

MGDL_PER_MMOL = 18.016
ZONES = ("A", "B", "C", "D", "E")
_TOL = 1e-9  # slack on inclusive boundaries after unit conversion


def _pair(gt, est, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt, dtype=np.float64).ravel()
    est = np.asarray(est, dtype=np.float64).ravel()
    if gt.shape != est.shape:
        raise DataError(f"length mismatch: {gt.size} references vs {est.size} estimates")
    if gt.size < min_len:
        raise DataError(f"need at least {min_len} pairs, got {gt.size}")
    if not (np.isfinite(gt).all() and np.isfinite(est).all()):
        raise DataError("non-finite values in metric inputs")
    return gt, est


@dataclass(frozen=True)
class RegressionMetrics:
    mae: float
    rmse: float
    mape: float | None  # None when a reference is (numerically) zero


def regression_metrics(gt, est) -> RegressionMetrics:
    gt, est = _pair(gt, est)
    e = est - gt
    mae = float(np.abs(e).mean())
    rmse = float(np.sqrt((e**2).mean()))
    mape = None
    if (np.abs(gt) > 1e-9).all():
        mape = float((np.abs(e) / np.abs(gt)).mean())
    return RegressionMetrics(mae, rmse, mape)


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass(frozen=True)
class MetricSummary:
    mae: tuple[float, float]
    rmse: tuple[float, float]
    mape: tuple[float, float] | None
    n_runs: int

    @classmethod
    def from_runs(cls, runs: list[RegressionMetrics]) -> "MetricSummary":
        """Mean and sample standard deviation (n - 1) across runs; a single run has std 0."""
        if not runs:
            raise DataError("no runs to summarise")
        mape = None
        if all(r.mape is not None for r in runs):
            mape = _mean_std([r.mape for r in runs])
        return cls(
            _mean_std([r.mae for r in runs]), _mean_std([r.rmse for r in runs]), mape, len(runs)
        )

    def as_dict(self) -> dict:
        return {
            "mae": list(self.mae),
            "rmse": list(self.rmse),
            "mape": None if self.mape is None else list(self.mape),
            "n_runs": self.n_runs,
        }


def bland_altman(gt, est) -> tuple[float, float, float]:
    """(bias, lower, upper) with limits bias -/+ 1.96 sample std of est - gt."""
    gt, est = _pair(gt, est, min_len=2)
    d = est - gt
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return bias, bias - 1.96 * sd, bias + 1.96 * sd


def pearson_r(gt, est) -> float:
    gt, est = _pair(gt, est, min_len=2)
    if gt.std() == 0 or est.std() == 0:
        return float("nan")
    return float(np.corrcoef(gt, est)[0, 1])


def clarke_zone(ref: float, est: float) -> str:
    """Zone of one (reference, estimate) pair, both in mg/dL.

    The zone rectangles overlap, so the test order A, E, C, D is part of the
    definition; B is whatever is left. A is tested first with inclusive
    limits so ties on its boundary stay in A.
    """
    if (ref <= 70 + _TOL and est <= 70 + _TOL) or abs(est - ref) <= 0.2 * ref + _TOL:
        return "A"
    if (ref <= 70 and est >= 180) or (ref >= 180 and est <= 70):
        return "E"
    if (70 <= ref <= 290 and est >= ref + 110) or (130 <= ref <= 180 and est <= 1.4 * ref - 182):
        return "C"
    if (ref >= 240 and 70 <= est <= 180) or (ref <= 175 / 3 and 70 <= est <= 180) or (
        175 / 3 <= ref <= 70 and est >= 1.2 * ref
    ):
        return "D"
    return "B"


def clarke_zones(ref_mmol, est_mmol) -> dict[str, int]:
    """Zone counts A..E for glucose pairs given in mmol/L."""
    ref, est = _pair(ref_mmol, est_mmol)
    if (ref <= 0).any() or (est <= 0).any():
        raise DataError("glucose values must be positive")
    counts = dict.fromkeys(ZONES, 0)
    for r, e in zip(ref * MGDL_PER_MMOL, est * MGDL_PER_MMOL):
        counts[clarke_zone(float(r), float(e))] += 1
    return counts


def clarke_labels(ref_mmol, est_mmol) -> list[str]:
    ref, est = _pair(ref_mmol, est_mmol)
    if (ref <= 0).any() or (est <= 0).any():
        raise DataError("glucose values must be positive")
    return [clarke_zone(float(r), float(e)) for r, e in zip(ref * MGDL_PER_MMOL, est * MGDL_PER_MMOL)]
