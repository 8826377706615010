"""STFT log-magnitude spectrograms and random patch masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 128
    hop: int = 32
    window_fn: str = "hann"

    def __post_init__(self):
        if self.n_fft < 2:
            raise DataError(f"n_fft must be >= 2, got {self.n_fft}")
        if not 1 <= self.hop <= self.n_fft:
            raise DataError(f"hop must lie in [1, n_fft], got {self.hop}")
        if self.window_fn not in ("hann", "rect"):
            raise DataError(f"unknown window {self.window_fn!r}")

    @property
    def overlap(self) -> int:
        return self.n_fft - self.hop

    def window(self) -> np.ndarray:
        if self.window_fn == "rect":
            return np.ones(self.n_fft)
        n = np.arange(self.n_fft)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / self.n_fft)  # periodic Hann


@dataclass(frozen=True)
class Spectrogram:
    grid: np.ndarray  # frames x bins, log(1 + |X|)

    @property
    def frames(self) -> int:
        return self.grid.shape[0]

    @property
    def bins(self) -> int:
        return self.grid.shape[1]


def frame_count(length: int, cfg: StftConfig) -> int:
    L = cfg.overlap
    return (length - L) // (cfg.n_fft - L)


def stft_complex(signal, cfg: StftConfig) -> np.ndarray:
    """Complex one-sided STFT, shape (frames, n_fft // 2 + 1)."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise DataError("STFT input must be 1-D")
    if x.size < cfg.n_fft:
        raise DataError(f"signal of {x.size} samples is shorter than one window ({cfg.n_fft})")
    m = frame_count(x.size, cfg)
    idx = np.arange(m)[:, None] * cfg.hop + np.arange(cfg.n_fft)[None, :]
    return np.fft.rfft(x[idx] * cfg.window()[None, :], axis=1)


def stft(signal, cfg: StftConfig | None = None) -> Spectrogram:
    cfg = cfg or StftConfig()
    return Spectrogram(np.log1p(np.abs(stft_complex(signal, cfg))))


@dataclass(frozen=True)
class SpectrogramPatchSet:
    """A spectrogram cut into row-major patches with a visibility split.

    ``patches`` has shape (n_patches, h * w); ``positions`` gives each
    patch's (row, col) in patch units. ``visible_idx`` and ``masked_idx``
    are sorted and partition ``range(n_patches)``.
    """

    patches: np.ndarray
    positions: np.ndarray
    patch_size: tuple[int, int]
    grid_shape: tuple[int, int]
    padded_shape: tuple[int, int]
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    mask_ratio: float

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def visible(self) -> np.ndarray:
        return self.patches[self.visible_idx]

    def padded_grid(self) -> np.ndarray:
        h, w = self.patch_size
        H, W = self.padded_shape
        return (
            self.patches.reshape(H // h, W // w, h, w).transpose(0, 2, 1, 3).reshape(H, W)
        )

    def grid(self) -> np.ndarray:
        """Reassemble the original (un-padded) grid."""
        r, c = self.grid_shape
        return self.padded_grid()[:r, :c]


def mask_count(total: int, ratio: float) -> int:
    return int(np.floor(ratio * total + 0.5))


def patchify_and_mask(spec, patch=(8, 8), ratio: float = 0.75, seed: int = 0) -> SpectrogramPatchSet:
    grid = spec.grid if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    if not 0 <= ratio < 1:
        raise DataError(f"mask ratio must lie in [0, 1), got {ratio}")
    h, w = int(patch[0]), int(patch[1])
    if h < 1 or w < 1:
        raise DataError("patch dimensions must be positive")
    r, c = grid.shape
    H = -(-r // h) * h
    W = -(-c // w) * w
    if h > H or w > W:
        raise DataError(f"patch {h}x{w} exceeds padded grid {H}x{W}")
    padded = np.zeros((H, W))
    padded[:r, :c] = grid
    patches = padded.reshape(H // h, h, W // w, w).transpose(0, 2, 1, 3).reshape(-1, h * w)
    rows, cols = np.divmod(np.arange(patches.shape[0]), W // w)
    n_mask = mask_count(patches.shape[0], ratio)
    order = np.random.default_rng(seed).permutation(patches.shape[0])
    return SpectrogramPatchSet(
        patches=patches,
        positions=np.stack([rows, cols], axis=1),
        patch_size=(h, w),
        grid_shape=(r, c),
        padded_shape=(H, W),
        visible_idx=np.sort(order[n_mask:]),
        masked_idx=np.sort(order[:n_mask]),
        mask_ratio=float(ratio),
    )
