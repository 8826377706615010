"""Variational mode decomposition (ADMM solver on the half spectrum) and signal dilation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VmdConfig:
    k: int = 4
    alpha: float = 2000.0
    tau: float = 0.0
    eps: float = 1e-7
    max_iter: int = 500

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 0:
            raise DataError(f"mode count k must be a non-negative integer, got {self.k}")
        if not self.alpha > 0:
            raise DataError(f"alpha must be > 0, got {self.alpha}")
        if not self.tau >= 0:
            raise DataError(f"tau must be >= 0, got {self.tau}")
        if not self.eps > 0:
            raise DataError(f"eps must be > 0, got {self.eps}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise DataError(f"max_iter must be a positive integer, got {self.max_iter}")


@dataclass(frozen=True)
class ModeSet:
    """Decomposition result.

    ``modes`` has shape (k, n); ``center_freqs`` are in cycles/sample.
    ``criterion`` is the final value of the relative-update stopping rule.
    """

    modes: np.ndarray
    center_freqs: np.ndarray
    residual: np.ndarray
    iterations_used: int
    criterion: float = float("nan")
    max_imag: float = 0.0

    @property
    def k(self) -> int:
        return self.modes.shape[0]


def _mirror(x: np.ndarray) -> tuple[np.ndarray, int]:
    n = x.size
    half = n // 2
    ext = np.concatenate([x[:half][::-1], x, x[half:][::-1]])
    return ext, half


def _hermitian_inverse(half_spec: np.ndarray, T: int) -> np.ndarray:
    """Inverse DFT of a spectrum given on bins 0..T//2, conjugate-mirrored to full length."""
    full = np.zeros(half_spec.shape[:-1] + (T,), dtype=np.complex128)
    nh = half_spec.shape[-1]
    full[..., :nh] = half_spec
    full[..., nh:] = np.conj(half_spec[..., 1 : T - nh + 1][..., ::-1])
    return np.fft.ifft(full, axis=-1)


def vmd_decompose(signal, cfg: VmdConfig | None = None) -> ModeSet:
    """Split ``signal`` into ``cfg.k`` band-limited modes.

    Each sweep updates every mode spectrum with a Wiener-type filter centred
    on its current frequency, moves that frequency to the power-spectrum
    centroid of the mode and then takes a dual ascent step on the
    reconstruction constraint. Iteration stops when the summed relative
    squared change of the mode spectra drops below ``cfg.eps``.
    """
    cfg = cfg or VmdConfig()
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size < 8:
        raise DataError("VMD needs a 1-D signal of at least 8 samples")
    if not np.all(np.isfinite(x)):
        raise DataError("VMD input contains non-finite values")
    n = x.size
    k = int(cfg.k)
    if k == 0:
        return ModeSet(np.zeros((0, n)), np.zeros(0), x.copy(), 0, 0.0)

    ext, offset = _mirror(x)
    T = ext.size
    nh = T // 2 + 1
    freqs = np.arange(nh) / T
    x_hat = np.fft.fft(ext)[:nh]

    u_hat = np.zeros((k, nh), dtype=np.complex128)
    omega = 0.5 * np.arange(1, k + 1) / (k + 1)
    lam = np.zeros(nh, dtype=np.complex128)
    alpha = float(cfg.alpha)

    crit = np.inf
    it = 0
    while it < cfg.max_iter:
        it += 1
        prev = u_hat.copy()
        total = u_hat.sum(axis=0)
        for i in range(k):
            total -= u_hat[i]
            u_hat[i] = (x_hat - total + lam / 2) / (1 + 2 * alpha * (freqs - omega[i]) ** 2)
            power = np.abs(u_hat[i]) ** 2
            p_sum = power.sum()
            if p_sum > 0:
                omega[i] = float(freqs @ power / p_sum)
            total += u_hat[i]
        if cfg.tau:
            lam = lam + cfg.tau * (x_hat - total)
        if not (np.all(np.isfinite(u_hat)) and np.all(np.isfinite(lam))):
            raise NumericalError(f"VMD diverged at iteration {it}")
        prev_norm = np.sum(np.abs(prev) ** 2, axis=1)
        if np.all(prev_norm > 0):
            crit = float(np.sum(np.sum(np.abs(u_hat - prev) ** 2, axis=1) / prev_norm))
            if crit < cfg.eps:
                break

    full = _hermitian_inverse(u_hat, T)
    scale = max(np.linalg.norm(x), np.finfo(float).tiny)
    max_imag = float(np.abs(full.imag).max() / scale)
    modes = full.real[:, offset : offset + n]
    residual = x - modes.sum(axis=0)
    logger.debug("vmd: k=%d iterations=%d criterion=%.3g", k, it, crit)
    return ModeSet(modes, omega.copy(), residual, it, crit, max_imag)


def dilate(signal, modes: ModeSet) -> np.ndarray:
    """Stack the raw signal on top of its modes: shape (k + 1, n)."""
    x = np.asarray(signal, dtype=np.float64)
    if modes.modes.shape[0] and modes.modes.shape[1] != x.size:
        raise DataError(f"mode length {modes.modes.shape[1]} != signal length {x.size}")
    return np.vstack([x[None, :], modes.modes.reshape(-1, x.size)])
