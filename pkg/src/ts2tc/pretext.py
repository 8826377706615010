"""Self-supervised pretraining: anchor reconstruction, masked spectrogram
reconstruction and time-window order classification."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError, NumericalError
from .models import (
    MlpClassifier,
    Nbtsf,
    SpecDecoder,
    SpecEncoder,
    TemporalModels,
    patches_to_grid,
)
from .nn import ParamStore, adagrad_step, backward, reseed_dropout
from .signal import PpgRecord, derivatives, partition_paf
from .spectrogram import StftConfig, patchify_and_mask, stft
from .vmd import VmdConfig, dilate, vmd_decompose

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.epochs > 0):
            raise DataError("lr, batch_size and epochs must be positive")


@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    params: ParamStore | None = None

    @property
    def ratio(self) -> float:
        """Final-epoch loss over first-epoch loss."""
        return self.losses[-1] / self.losses[0] if self.losses and self.losses[0] else float("nan")


# -- datasets ----------------------------------------------------------------


@dataclass
class TemporalWindows:
    """Partitioned dilated windows; arrays are (N, channels, time)."""

    past: np.ndarray
    anchor: np.ndarray
    future: np.ndarray
    past_d: np.ndarray
    future_d: np.ndarray
    labels: np.ndarray | None = None
    record_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return self.past.shape[0]

    def subset(self, idx) -> "TemporalWindows":
        idx = np.asarray(idx)
        return TemporalWindows(
            self.past[idx], self.anchor[idx], self.future[idx], self.past_d[idx], self.future_d[idx],
            None if self.labels is None else self.labels[idx],
            None if self.record_ids is None else self.record_ids[idx],
        )

    def tensors(self, idx=None) -> dict[str, torch.Tensor]:
        sel = slice(None) if idx is None else np.asarray(idx)
        return {
            "past": torch.as_tensor(self.past[sel]),
            "future": torch.as_tensor(self.future[sel]),
            "past_d": torch.as_tensor(self.past_d[sel]),
            "future_d": torch.as_tensor(self.future_d[sel]),
            "anchor": torch.as_tensor(self.anchor[sel]),
        }


def build_temporal_windows(windows: list[PpgRecord], vmd_cfg: VmdConfig, gamma: float,
                           record_ids=None) -> TemporalWindows:
    """VMD-dilate each window, derive vpg/apg/jpg from its raw row and split it."""
    if not windows:
        raise DataError("no windows to build a temporal dataset from")
    parts, ders = [], []
    for w in windows:
        x = w.samples
        dil = dilate(x, vmd_decompose(x, vmd_cfg))
        part = partition_paf(dil, gamma)
        d = derivatives(x).as_array()
        side = part.past.shape[1]
        parts.append(part)
        ders.append((d[:, :side], d[:, -side:]))
    labels = None
    if all(w.label is not None for w in windows):
        labels = np.array([w.label for w in windows], dtype=np.float64)
    return TemporalWindows(
        past=np.stack([p.past for p in parts]),
        anchor=np.stack([p.anchor for p in parts]),
        future=np.stack([p.future for p in parts]),
        past_d=np.stack([d[0] for d in ders]),
        future_d=np.stack([d[1] for d in ders]),
        labels=labels,
        record_ids=None if record_ids is None else np.asarray(record_ids),
    )


@dataclass
class SpectrogramSet:
    patch_sets: list
    grids: np.ndarray  # (N, frames, bins) un-padded targets
    labels: np.ndarray | None = None
    record_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.patch_sets)

    def subset(self, idx) -> "SpectrogramSet":
        idx = np.asarray(idx)
        return SpectrogramSet(
            [self.patch_sets[i] for i in idx], self.grids[idx],
            None if self.labels is None else self.labels[idx],
            None if self.record_ids is None else self.record_ids[idx],
        )

    @property
    def n_patches(self) -> int:
        return self.patch_sets[0].n_patches

    @property
    def n_visible(self) -> int:
        return self.patch_sets[0].visible_idx.size

    def tensors(self, idx=None) -> dict[str, torch.Tensor]:
        sel = range(len(self)) if idx is None else np.asarray(idx)
        sets = [self.patch_sets[i] for i in sel]
        patches = torch.as_tensor(np.stack([ps.patches for ps in sets]))
        vis = torch.as_tensor(np.stack([ps.visible_idx for ps in sets]), dtype=torch.long)
        masked = torch.as_tensor(np.stack([ps.masked_idx for ps in sets]), dtype=torch.long)
        visible = torch.gather(patches, 1, vis[..., None].expand(-1, -1, patches.shape[-1]))
        return {
            "patches": patches,
            "visible": visible,
            "vis_idx": vis,
            "masked_idx": masked,
            "grid": torch.as_tensor(self.grids[np.asarray(list(sel))]),
        }


def build_spectrogram_set(windows: list[PpgRecord], stft_cfg: StftConfig, patch=(8, 8),
                          ratio: float = 0.75, seed: int = 0, record_ids=None) -> SpectrogramSet:
    if not windows:
        raise DataError("no windows to build a spectrogram dataset from")
    sets, grids = [], []
    for i, w in enumerate(windows):
        spec = stft(w.samples, stft_cfg)
        sets.append(patchify_and_mask(spec, patch, ratio, seed + i))
        grids.append(spec.grid)
    labels = None
    if all(w.label is not None for w in windows):
        labels = np.array([w.label for w in windows], dtype=np.float64)
    return SpectrogramSet(sets, np.stack(grids), labels,
                          None if record_ids is None else np.asarray(record_ids))


# -- loop plumbing -----------------------------------------------------------


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle split into ceil(n / batch_size) near-equal batches."""
    perm = rng.permutation(n)
    return np.array_split(perm, max(1, math.ceil(n / batch_size)))


def _step(loss: torch.Tensor, store: ParamStore, lr: float, what: str) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericalError(f"{what}: loss became non-finite ({value})")
    if loss.requires_grad:
        backward(loss, store)
        adagrad_step(store, lr)
    return value


def anchor_loss(models: TemporalModels, batch: dict[str, torch.Tensor]) -> torch.Tensor:
    h_a = models.encoder(batch["past"], batch["past_d"])
    h_c = models.encoder(batch["future"], batch["future_d"])
    pred = models.decoder(torch.cat([h_a, h_c], dim=1))
    return (pred - batch["anchor"]).abs().mean()


def ctfga_pretrain(data: TemporalWindows, models: TemporalModels, cfg: TrainConfig,
                   store: ParamStore | None = None) -> tuple[ParamStore, TrainTrace]:
    """Train encoder (theta) and decoder (delta) to rebuild the anchor from past and future."""
    if len(data) == 0:
        raise DataError("empty pretraining set")
    store = store or ParamStore({"theta": models.encoder, "delta": models.decoder})
    rng = np.random.default_rng(cfg.seed)
    reseed_dropout(models.decoder, cfg.seed)
    trace = TrainTrace(params=store)
    store.train()
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in batches(len(data), cfg.batch_size, rng):
            loss = anchor_loss(models, data.tensors(idx))
            total += _step(loss, store, cfg.lr, f"CTFGA epoch {epoch + 1}") * len(idx)
        trace.losses.append(total / len(data))
        logger.debug("ctfga epoch %d loss %.6f", epoch + 1, trace.losses[-1])
    store.eval()
    return store, trace


def reconstruction_loss(encoder: SpecEncoder, decoder: SpecDecoder, batch) -> torch.Tensor:
    """Mean absolute error over every pixel of the (un-padded) spectrogram."""
    z = encoder(batch["visible"], batch["vis_idx"])
    pred = decoder(z, batch["vis_idx"], batch["masked_idx"])
    grid = batch["grid"]
    ps = decoder.spec.patch
    H = -(-grid.shape[1] // ps[0]) * ps[0]
    W = -(-grid.shape[2] // ps[1]) * ps[1]
    full = patches_to_grid(pred, ps, (H, W))
    return (full[:, : grid.shape[1], : grid.shape[2]] - grid).abs().mean()


def mae_pretrain(data: SpectrogramSet, encoder: SpecEncoder, decoder: SpecDecoder, cfg: TrainConfig,
                 store: ParamStore | None = None) -> tuple[ParamStore, TrainTrace]:
    if len(data) == 0:
        raise DataError("empty pretraining set")
    store = store or ParamStore({"theta_E": encoder, "theta_2": decoder})
    rng = np.random.default_rng(cfg.seed)
    trace = TrainTrace(params=store)
    store.train()
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in batches(len(data), cfg.batch_size, rng):
            loss = reconstruction_loss(encoder, decoder, data.tensors(idx))
            total += _step(loss, store, cfg.lr, f"MAE epoch {epoch + 1}") * len(idx)
        trace.losses.append(total / len(data))
    store.eval()
    return store, trace


def order_inputs(h_a: torch.Tensor, h_c: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
    """Row-wise (h_a || h_c) where ``positive`` else (h_c || h_a)."""
    pos = positive[:, None].to(h_a.dtype)
    first = pos * h_a + (1 - pos) * h_c
    second = pos * h_c + (1 - pos) * h_a
    return torch.cat([first, second], dim=1)


def twrg_pretrain(h_a, h_c, z, nbtsf: Nbtsf, classifier: MlpClassifier, cfg: TrainConfig,
                  store: ParamStore | None = None) -> tuple[ParamStore, TrainTrace]:
    """Classify whether (h_a, h_c) arrive in true temporal order.

    Each epoch draws a fair seeded coin per item; heads means the true
    order (label 1), tails the swapped order (label 0).
    """
    h_a = torch.as_tensor(np.asarray(h_a), dtype=torch.float64)
    h_c = torch.as_tensor(np.asarray(h_c), dtype=torch.float64)
    z = torch.as_tensor(np.asarray(z), dtype=torch.float64)
    if not (h_a.shape == h_c.shape and h_a.shape[0] == z.shape[0]) or len(z) == 0:
        raise DataError("temporal embeddings and spectrogram latents are misaligned")
    store = store or ParamStore({"nbtsf": nbtsf, "mu": classifier})
    rng = np.random.default_rng(cfg.seed)
    coin_rng = np.random.default_rng([cfg.seed, 1])
    trace = TrainTrace(params=store)
    store.train()
    n = len(z)
    for epoch in range(cfg.epochs):
        labels = torch.as_tensor(coin_rng.random(n) < 0.5)
        total, correct = 0.0, 0
        for idx in batches(n, cfg.batch_size, rng):
            idx_t = torch.as_tensor(idx)
            y = labels[idx_t]
            logits = classifier(nbtsf(order_inputs(h_a[idx_t], h_c[idx_t], y), z[idx_t]))
            loss = torch.nn.functional.cross_entropy(logits, y.long())
            correct += int((logits.argmax(1) == y.long()).sum())
            total += _step(loss, store, cfg.lr, f"TWRG epoch {epoch + 1}") * len(idx)
        trace.losses.append(total / n)
        trace.accuracies.append(correct / n)
    store.eval()
    return store, trace


@torch.no_grad()
def twrg_evaluate(h_a, h_c, z, nbtsf: Nbtsf, classifier: MlpClassifier, seed: int = 0) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) in eval mode on freshly drawn order labels."""
    h_a = torch.as_tensor(np.asarray(h_a), dtype=torch.float64)
    h_c = torch.as_tensor(np.asarray(h_c), dtype=torch.float64)
    z = torch.as_tensor(np.asarray(z), dtype=torch.float64)
    nbtsf.eval()
    classifier.eval()
    y = torch.as_tensor(np.random.default_rng(seed).random(len(z)) < 0.5)
    logits = classifier(nbtsf(order_inputs(h_a, h_c, y), z))
    ce = float(torch.nn.functional.cross_entropy(logits, y.long()))
    acc = float((logits.argmax(1) == y.long()).double().mean())
    return ce, acc
