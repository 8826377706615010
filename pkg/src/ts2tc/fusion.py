"""Ternary least-squares combination of the three downstream predictors.

The bilinear fusion network itself lives in :mod:`ts2tc.models` (``Nbtsf``)
and is re-exported here for convenience.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, NumericalError
from .models import Nbtsf, nbtsf_fuse

__all__ = ["FusionReport", "Nbtsf", "nbtsf_fuse", "ols_fit", "ternary_predict", "fitted_values"]

MIN_ROWS = 4


@dataclass(frozen=True)
class FusionReport:
    phi0: float
    phi: tuple[float, float, float]
    r_squared: float

    @property
    def residual_potential(self) -> float:
        return 1.0 - self.r_squared

    def as_dict(self) -> dict:
        d = asdict(self)
        d["phi"] = list(self.phi)
        d["residual_potential"] = self.residual_potential
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FusionReport":
        return cls(float(d["phi0"]), tuple(float(v) for v in d["phi"]), float(d["r_squared"]))


def _design(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DataError(f"prediction matrix must be 2-D, got shape {X.shape}")
    return X


def ols_fit(X, y) -> FusionReport:
    """Least squares for y ~ phi0 + X phi with an intercept.

    Rank-deficient designs get the minimum-norm solution (SVD pseudo-inverse),
    so ties between collinear predictors are broken deterministically.
    """
    X = _design(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    m = X.shape[0]
    if m < MIN_ROWS:
        raise DataError(f"need at least {MIN_ROWS} rows to fit the combiner, got {m}")
    if y.shape[0] != m:
        raise DataError(f"{m} prediction rows but {y.shape[0]} labels")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise NumericalError("non-finite values in the combiner inputs")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DataError("labels are constant, R-squared is undefined")
    A = np.hstack([np.ones((m, 1)), X])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    r2 = 1.0 - float(resid @ resid) / ss_tot
    return FusionReport(float(coef[0]), tuple(float(c) for c in coef[1:]), r2)


def fitted_values(X, report: FusionReport) -> np.ndarray:
    X = _design(X)
    if X.shape[1] != len(report.phi):
        raise DataError(f"expected {len(report.phi)} prediction columns, got {X.shape[1]}")
    return report.phi0 + X @ np.asarray(report.phi)


def ternary_predict(preds, report: FusionReport):
    """phi0 + sum_j phi_j * y_j for one (y1, y2, y3) triple or an (m, 3) matrix."""
    vals = np.asarray(preds, dtype=np.float64)
    coefs = np.array([report.phi0, *report.phi])
    if not np.isfinite(coefs).all():
        raise NumericalError("fusion report holds non-finite weights")
    if not np.isfinite(vals).all():
        raise NumericalError("non-finite predictions passed to the combiner")
    if vals.ndim == 1:
        if vals.shape[0] != len(report.phi):
            raise DataError(f"expected {len(report.phi)} predictions, got {vals.shape[0]}")
        return float(report.phi0 + vals @ np.asarray(report.phi))
    return fitted_values(vals, report)
