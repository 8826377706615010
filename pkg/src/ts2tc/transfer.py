"""Downstream adaptation: fine-tuning, linear probing and dual-process transfer."""
from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DataError
from .models import (
    AnchorDecoder,
    MlpClassifier,
    Nbtsf,
    RegressionHead,
    SpecDecoder,
    SpecEncoder,
    TemporalEncoder,
    UnlockedStage,
    zdl_stack_for,
)
from .nn import ParamStore, recalibrate_batchnorm, reseed_dropout
from .pretext import SpectrogramSet, TemporalWindows, TrainConfig, TrainTrace, _step, batches


@dataclass
class TransferResult:
    params: ParamStore
    model: nn.Module
    predictions: np.ndarray
    trace: TrainTrace


def _labels(data) -> torch.Tensor:
    if data.labels is None:
        raise DataError("transfer needs labelled data")
    return torch.as_tensor(data.labels, dtype=torch.float64)


def _fit(model: nn.Module, store: ParamStore, data, cfg: TrainConfig, what: str) -> TrainTrace:
    y = _labels(data)
    rng = np.random.default_rng(cfg.seed)
    reseed_dropout(model, cfg.seed)
    trace = TrainTrace(params=store)
    model.train()
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in batches(len(data), cfg.batch_size, rng):
            pred = model(data.tensors(idx))
            loss = (pred - y[torch.as_tensor(idx)]).abs().mean()
            total += _step(loss, store, cfg.lr, f"{what} epoch {epoch + 1}") * len(idx)
        trace.losses.append(total / len(data))
    recalibrate_batchnorm(model, lambda: model(data.tensors()))
    model.eval()
    return trace


@torch.no_grad()
def predict(model: nn.Module, data) -> np.ndarray:
    model.eval()
    return model(data.tensors()).numpy().copy()


def _embed_pair(encoder: TemporalEncoder, batch) -> torch.Tensor:
    return torch.cat(
        [encoder(batch["past"], batch["past_d"]), encoder(batch["future"], batch["future_d"])], dim=1
    )


class FineTuneModel(nn.Module):
    """y = W f_new(x) + b over the concatenated past/future embedding."""

    def __init__(self, encoder: TemporalEncoder):
        super().__init__()
        self.encoder = copy.deepcopy(encoder)
        self.head = RegressionHead(2 * encoder.spec.embed_dim)

    def forward(self, batch):
        return self.head(_embed_pair(self.encoder, batch))


class SpecFineTuneModel(nn.Module):
    """Head on the token-averaged latent of a spectrogram encoder copy."""

    def __init__(self, encoder: SpecEncoder):
        super().__init__()
        self.encoder = copy.deepcopy(encoder)
        self.head = RegressionHead(encoder.spec.embed_dim)

    def forward(self, batch):
        return self.head(self.encoder(batch["visible"], batch["vis_idx"]).mean(dim=1))


def fine_tune(encoder: TemporalEncoder | SpecEncoder, data, cfg: TrainConfig) -> TransferResult:
    """Copy the pretrained encoder and train it jointly with a new head."""
    model = SpecFineTuneModel(encoder) if isinstance(encoder, SpecEncoder) else FineTuneModel(encoder)
    store = ParamStore({"theta_new": model.encoder, "head": model.head})
    trace = _fit(model, store, data, cfg, "fine-tune")
    return TransferResult(store, model, predict(model, data), trace)


class _FeatureSet:
    def __init__(self, features: np.ndarray, labels):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.float64)

    def __len__(self):
        return self.features.shape[0]

    def tensors(self, idx=None):
        sel = slice(None) if idx is None else np.asarray(idx)
        return torch.as_tensor(self.features[sel])


class _HeadOnly(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.head = RegressionHead(dim)

    def forward(self, x):
        return self.head(x)


def fit_linear_head(features, labels, cfg: TrainConfig) -> TransferResult:
    """Train a zero-initialised linear head on fixed features under an L1 loss."""
    data = _FeatureSet(features, labels)
    if data.features.ndim != 2:
        raise DataError("features must be (samples, dims)")
    model = _HeadOnly(data.features.shape[1])
    store = ParamStore({"head": model.head})
    trace = _fit(model, store, data, cfg, "linear probe")
    return TransferResult(store, model, predict(model, data), trace)


class LinearProbeModel(nn.Module):
    def __init__(self, encoder: TemporalEncoder | SpecEncoder, head: RegressionHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, batch):
        self.encoder.eval()
        with torch.no_grad():
            if isinstance(self.encoder, SpecEncoder):
                h = self.encoder(batch["visible"], batch["vis_idx"]).mean(dim=1)
            else:
                h = _embed_pair(self.encoder, batch)
        return self.head(h)


@torch.no_grad()
def embed_windows(encoder: TemporalEncoder, data: TemporalWindows) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode (h_A, h_C) embeddings of every window."""
    encoder.eval()
    t = data.tensors()
    return (encoder(t["past"], t["past_d"]).numpy().copy(),
            encoder(t["future"], t["future_d"]).numpy().copy())


@torch.no_grad()
def probe_features(encoder: TemporalEncoder | SpecEncoder, data) -> np.ndarray:
    if isinstance(encoder, SpecEncoder):
        encoder.eval()
        t = data.tensors()
        return encoder(t["visible"], t["vis_idx"]).mean(dim=1).numpy().copy()
    return np.concatenate(embed_windows(encoder, data), axis=1)


def linear_probe(encoder: TemporalEncoder | SpecEncoder, data, cfg: TrainConfig) -> TransferResult:
    """Train only a head on frozen (eval-mode) encoder features."""
    res = fit_linear_head(probe_features(encoder, data), _labels(data).numpy(), cfg)
    model = LinearProbeModel(encoder, res.model.head)
    store = ParamStore({"theta": encoder, "head": res.model.head})
    store.set_trainable("theta", False)
    return TransferResult(store, model, res.predictions, res.trace)


class DptTemporalModel(nn.Module):
    """Autonomous branch (frozen encoder + frozen decoder) queues each decoder
    stage output; the reasoning branch (trainable encoder copy) replaces every
    decoder stage with a zero decoder layer that adds onto the queued output."""

    def __init__(self, encoder: TemporalEncoder, decoder: AnchorDecoder, seed: int = 0):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.encoder_new = copy.deepcopy(encoder)
        self.zdls = zdl_stack_for(decoder, seed)
        self.head = RegressionHead(decoder.spec.widths[-1])

    def traces(self, batch) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        # the autonomous branch is frozen inference: no dropout, running BN stats
        self.encoder.eval()
        self.decoder.eval()
        with torch.no_grad():
            h2 = _embed_pair(self.encoder, batch)
            ap = [h2]
            queue = deque()
            for j in range(self.decoder.depth):
                h2 = self.decoder.stage(j, h2)
                queue.append(h2)
                ap.append(h2)
        h1 = _embed_pair(self.encoder_new, batch)
        rp = [h1]
        if len(queue) != len(self.zdls):
            raise DataError(f"queue holds {len(queue)} stages but there are {len(self.zdls)} ZDLs")
        for zdl in self.zdls:
            h1 = zdl(h1, queue.popleft())
            rp.append(h1)
        return ap, rp

    def forward(self, batch):
        return self.head(self.traces(batch)[1][-1])


def dpt_finetune_temporal(encoder: TemporalEncoder, decoder: AnchorDecoder, data: TemporalWindows,
                          cfg: TrainConfig) -> TransferResult:
    model = DptTemporalModel(encoder, decoder, cfg.seed)
    store = ParamStore({
        "theta": encoder, "delta": decoder,
        "theta_new": model.encoder_new, "zdl": model.zdls, "head": model.head,
    })
    store.set_trainable("theta", False)
    store.set_trainable("delta", False)
    trace = _fit(model, store, data, cfg, "DPT temporal")
    return TransferResult(store, model, predict(model, data), trace)


class DptSpecModel(nn.Module):
    """Locked encoder feeds the locked decoder stages; the unlocked encoder copy
    feeds unlocked stage copies whose zero-initialised outputs add onto the
    locked trace."""

    def __init__(self, encoder: SpecEncoder, decoder: SpecDecoder):
        super().__init__()
        dim = encoder.spec.embed_dim
        self.encoder_lock = encoder
        self.encoder_unlock = copy.deepcopy(encoder)
        self.stages_lock = nn.ModuleList(decoder.stages())
        self.stages_unlock = nn.ModuleList(UnlockedStage(s, dim) for s in decoder.stages())
        self.head = RegressionHead(dim)

    def traces(self, batch):
        vis, idx = batch["visible"], batch["vis_idx"]
        self.encoder_lock.eval()
        self.stages_lock.eval()
        with torch.no_grad():
            z2 = self.encoder_lock(vis, idx)
            ap = [z2]
            queue = deque()
            for stage in self.stages_lock:
                z2 = stage(z2, idx)
                queue.append(z2)
                ap.append(z2)
        z1 = self.encoder_unlock(vis, idx)
        rp = [z1]
        if len(queue) != len(self.stages_unlock):
            raise DataError("locked and unlocked decoder depths disagree")
        for stage in self.stages_unlock:
            z1 = queue.popleft() + stage(z1, idx)
            rp.append(z1)
        return ap, rp

    def latent(self, batch) -> torch.Tensor:
        return self.traces(batch)[1][-1]

    def forward(self, batch):
        return self.head(self.latent(batch).mean(dim=1))


def dpt_finetune_spectrogram(encoder: SpecEncoder, decoder: SpecDecoder, data: SpectrogramSet,
                             cfg: TrainConfig) -> TransferResult:
    model = DptSpecModel(encoder, decoder)
    store = ParamStore({
        "theta_lock": model.encoder_lock, "theta_2": model.stages_lock,
        "theta_unlock": model.encoder_unlock, "theta_1": model.stages_unlock, "head": model.head,
    })
    store.set_trainable("theta_lock", False)
    store.set_trainable("theta_2", False)
    trace = _fit(model, store, data, cfg, "DPT spectrogram")
    return TransferResult(store, model, predict(model, data), trace)


@torch.no_grad()
def spectrogram_latents(model: DptSpecModel, data: SpectrogramSet) -> np.ndarray:
    """Flattened final reasoning-branch latents, (N, visible * embed)."""
    model.eval()
    return model.latent(data.tensors()).flatten(1).numpy().copy()


class MixedModel(nn.Module):
    """NBTSF + classifier trunk with the softmax layer swapped for a regression head."""

    def __init__(self, nbtsf: Nbtsf, classifier: MlpClassifier):
        super().__init__()
        self.nbtsf = nbtsf
        self.trunk = classifier.trunk
        self.head = RegressionHead(classifier.out.in_features)

    def forward(self, batch):
        h, z = batch
        return self.head(self.trunk(self.nbtsf(h, z).flatten(1)))


class _PairSet:
    def __init__(self, h, z, labels):
        self.h = np.asarray(h, dtype=np.float64)
        self.z = np.asarray(z, dtype=np.float64)
        self.labels = None if labels is None else np.asarray(labels, dtype=np.float64)

    def __len__(self):
        return self.h.shape[0]

    def tensors(self, idx=None):
        sel = slice(None) if idx is None else np.asarray(idx)
        return torch.as_tensor(self.h[sel]), torch.as_tensor(self.z[sel])


def mixed_finetune(nbtsf: Nbtsf, classifier: MlpClassifier, h_positive, z, labels,
                   cfg: TrainConfig) -> TransferResult:
    """Regress labels from NBTSF(z, h_positive) through the pretrained classifier trunk."""
    model = MixedModel(nbtsf, classifier)
    store = ParamStore({"nbtsf": model.nbtsf, "mu": model.trunk, "head": model.head})
    data = _PairSet(h_positive, z, labels)
    trace = _fit(model, store, data, cfg, "mixed-domain")
    return TransferResult(store, model, predict(model, data), trace)


def predict_mixed(result: TransferResult, h_positive, z) -> np.ndarray:
    return predict(result.model, _PairSet(h_positive, z, None))
