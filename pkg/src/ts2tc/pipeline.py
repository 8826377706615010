"""Five-phase orchestration (setup, pseudo-labels, pretraining, downstream
adaptation, inference) and the window-length / partition-ratio sweep."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, TS2TCError
from .fusion import MIN_ROWS, FusionReport, ols_fit, ternary_predict
from .metrics import MetricSummary, RegressionMetrics, regression_metrics
from .models import (
    MlpClassifier,
    Nbtsf,
    SpecDecoder,
    SpecEncoder,
    SpecModelSpec,
    TemporalEncoderSpec,
    TemporalModels,
    build_temporal,
)
from .nn import ParamStore
from .pretext import (
    SpectrogramSet,
    TemporalWindows,
    TrainConfig,
    build_spectrogram_set,
    build_temporal_windows,
    ctfga_pretrain,
    mae_pretrain,
    order_inputs,
    twrg_pretrain,
)
from .signal import PpgRecord, partition_sizes, resample, synth_ppg, window_slide, zscore
from .spectrogram import StftConfig
from .transfer import (
    TransferResult,
    dpt_finetune_spectrogram,
    dpt_finetune_temporal,
    embed_windows,
    mixed_finetune,
    predict,
    predict_mixed,
    spectrogram_latents,
)
from .vmd import VmdConfig

logger = logging.getLogger(__name__)

PHASES = ("setup", "pseudolabel", "pretrain", "downstream", "inference")
MIN_SEGMENT = 8


@dataclass(frozen=True)
class PipelineConfig:
    rate: float = 125.0
    window_s: float = 5.6
    step_s: float = 0.8
    gamma: float = 0.4
    vmd: VmdConfig = field(default_factory=VmdConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    patch: tuple[int, int] = (8, 8)
    mask_ratio: float = 0.75
    filters: int = 4
    embed_dim: int = 8
    decoder_hidden: tuple[int, int, int] = (32, 32, 32)
    spec_embed_dim: int = 16
    spec_enc_depth: int = 2
    spec_dec_depth: int = 1
    spec_heads: int = 2
    nbtsf_l: int = 8
    nbtsf_iterations: int = 2
    classifier_hidden: int = 32
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100))
    twrg: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100))
    downstream: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=300))
    train_fraction: float = 1.0
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not 0 < self.train_fraction <= 1:
            raise DataError(f"train fraction must lie in (0, 1], got {self.train_fraction}")
        if not 0 < self.gamma < 0.5:
            raise DataError(f"gamma must lie in (0, 0.5), got {self.gamma}")
        if len(self.split) != 3 or min(self.split) < 0 or not math.isclose(sum(self.split), 1.0):
            raise DataError(f"split fractions must be three non-negatives summing to 1, got {self.split}")
        if not self.seeds:
            raise DataError("at least one seed is required")
        if self.rate <= 0 or self.window_s <= 0 or self.step_s <= 0:
            raise DataError("rate, window and step must be positive")

    @property
    def window_len(self) -> int:
        return int(round(self.window_s * self.rate))

    def as_dict(self) -> dict:
        return asdict(self)


def phase_seed(seed: int, phase: int) -> int:
    """One independent integer seed per (run seed, phase)."""
    return int(np.random.SeedSequence([seed, phase]).generate_state(1)[0])


class _phase:
    """Tags errors with the phase name and records wall time."""

    def __init__(self, name: str, timings: dict):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = self.timings.get(self.name, 0.0) + time.perf_counter() - self.t0
        if isinstance(exc, TS2TCError) and not getattr(exc, "phase", None):
            exc.phase = self.name
            exc.args = (f"[{self.name}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        return False


# -- data --------------------------------------------------------------------


def synthetic_records(n: int, seed: int, labeled: bool = True, length_s: float = 5.6, rate: float = 125.0,
                      noise_std: float = 0.05, hr_range=(50.0, 120.0)) -> list[PpgRecord]:
    """Synthetic PPG records whose label is the heart rate."""
    rng = np.random.default_rng(seed)
    hrs = rng.uniform(*hr_range, size=n)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    out = []
    for hr, s in zip(hrs, seeds):
        r = synth_ppg(float(hr), noise_std=noise_std, length_s=length_s, rate=rate, seed=int(s))
        out.append(r if labeled else PpgRecord(r.samples, r.rate))
    return out


def prepare_windows(records: list[PpgRecord], cfg: PipelineConfig) -> tuple[list[PpgRecord], np.ndarray]:
    """Resample, z-score and window every record; returns windows and their record ids."""
    if not records:
        raise DataError("no records given")
    windows, ids = [], []
    for i, rec in enumerate(records):
        rec = zscore(resample(rec, cfg.rate))
        ws = window_slide(rec, cfg.window_s, cfg.step_s)
        windows.extend(ws)
        ids.extend([i] * len(ws))
    return windows, np.asarray(ids)


def split_records(n_records: int, fractions, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint train/val/test record index sets (record-level split)."""
    if n_records < 3:
        raise DataError(f"need at least 3 labelled records for a train/val/test split, got {n_records}")
    perm = np.random.default_rng(seed).permutation(n_records)
    n_train = max(1, int(round(fractions[0] * n_records)))
    n_val = max(1, int(round(fractions[1] * n_records))) if fractions[1] > 0 else 0
    n_train = min(n_train, n_records - n_val - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_val]), np.sort(perm[n_train + n_val :])


def train_subset(train_ids: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    n = math.ceil(fraction * len(train_ids) - 1e-9)
    return np.sort(np.random.default_rng(seed).permutation(train_ids)[:n])


@dataclass
class Datasets:
    temporal: TemporalWindows
    spectral: SpectrogramSet

    def __len__(self) -> int:
        return len(self.temporal)

    def subset(self, idx) -> "Datasets":
        return Datasets(self.temporal.subset(idx), self.spectral.subset(idx))

    def by_records(self, record_ids) -> "Datasets":
        mask = np.isin(self.temporal.record_ids, record_ids)
        return self.subset(np.flatnonzero(mask))


def build_datasets(records: list[PpgRecord], cfg: PipelineConfig, seed: int) -> Datasets:
    windows, ids = prepare_windows(records, cfg)
    check_segments(cfg.window_len, cfg.gamma)
    temporal = build_temporal_windows(windows, cfg.vmd, cfg.gamma, ids)
    spectral = build_spectrogram_set(windows, cfg.stft, cfg.patch, cfg.mask_ratio, seed, ids)
    return Datasets(temporal, spectral)


def check_segments(cols: int, gamma: float) -> None:
    side, anchor, _ = partition_sizes(cols, gamma)
    if min(side, anchor) < MIN_SEGMENT:
        raise DataError(
            f"window of {cols} samples with gamma {gamma} gives segments {side}/{anchor}/{side}; "
            f"each needs at least {MIN_SEGMENT}"
        )


# -- pretraining ---------------------------------------------------------------


@dataclass
class Pretrained:
    stores: dict[str, ParamStore]
    models: dict
    traces: dict = field(default_factory=dict)

    def merged(self) -> ParamStore:
        out = ParamStore()
        for prefix, store in self.stores.items():
            for g, module in store.groups.items():
                out.add(f"{prefix}_{g}", module)
        return out


def build_models(cfg: PipelineConfig, data: Datasets, seed: int) -> dict:
    enc_spec = TemporalEncoderSpec(filters=cfg.filters, embed_dim=cfg.embed_dim)
    temporal = build_temporal(enc_spec, data.temporal.anchor.shape[-1], cfg.decoder_hidden, seed)
    spec_spec = SpecModelSpec(
        patch=tuple(cfg.patch), n_patches=data.spectral.n_patches, embed_dim=cfg.spec_embed_dim,
        enc_depth=cfg.spec_enc_depth, dec_depth=cfg.spec_dec_depth, heads=cfg.spec_heads,
    )
    z_dim = data.spectral.n_visible * cfg.spec_embed_dim
    nbtsf = Nbtsf(2 * cfg.embed_dim, z_dim, cfg.nbtsf_l, cfg.nbtsf_iterations, seed=seed + 3)
    return {
        "encoder": temporal.encoder,
        "decoder": temporal.decoder,
        "spec_encoder": SpecEncoder(spec_spec, seed + 1),
        "spec_decoder": SpecDecoder(spec_spec, seed + 2),
        "nbtsf": nbtsf,
        "classifier": MlpClassifier(nbtsf.k * nbtsf.l, cfg.classifier_hidden, 2, seed + 4),
    }


def _stores(models: dict) -> dict[str, ParamStore]:
    return {
        "temporal": ParamStore({"theta": models["encoder"], "delta": models["decoder"]}),
        "spectral": ParamStore({"theta_E": models["spec_encoder"], "theta_2": models["spec_decoder"]}),
        "order": ParamStore({"nbtsf": models["nbtsf"], "mu": models["classifier"]}),
    }


@torch.no_grad()
def spec_embeddings(encoder: SpecEncoder, data: SpectrogramSet) -> np.ndarray:
    encoder.eval()
    t = data.tensors()
    return encoder(t["visible"], t["vis_idx"]).flatten(1).numpy().copy()


TASKS = ("ctfga", "mae", "twrg")


def toy_config(**overrides) -> PipelineConfig:
    """Desk-scale settings: 50 epochs everywhere; pretext loops at lr 0.01.

    Downstream keeps lr 0.001: the DPT head reads the full anchor-sized
    decoder output, and a first Adagrad step of 0.01 per weight on that many
    inputs overshoots badly.
    """
    short = TrainConfig(lr=0.01, batch_size=32, epochs=50)
    base = PipelineConfig(pretrain=short, twrg=short, downstream=replace(short, lr=0.001))
    return replace(base, **overrides)


def pretrain(cfg: PipelineConfig, data: Datasets, seed: int, tasks=TASKS,
             pre: "Pretrained | None" = None) -> "Pretrained":
    """CTFGA, masked spectrogram reconstruction, then order classification.

    ``tasks`` selects a subset; ``pre`` continues from earlier weights.
    """
    unknown = set(tasks) - set(TASKS)
    if unknown:
        raise DataError(f"unknown pretext tasks {sorted(unknown)}")
    if pre is None:
        models = build_models(cfg, data, seed)
        pre = Pretrained(_stores(models), models)
    models, stores = pre.models, pre.stores
    if "ctfga" in tasks:
        tm = TemporalModels(models["encoder"], models["decoder"])
        _, pre.traces["ctfga"] = ctfga_pretrain(data.temporal, tm, replace(cfg.pretrain, seed=seed),
                                                stores["temporal"])
    if "mae" in tasks:
        _, pre.traces["mae"] = mae_pretrain(data.spectral, models["spec_encoder"], models["spec_decoder"],
                                            replace(cfg.pretrain, seed=seed + 1), stores["spectral"])
    if "twrg" in tasks:
        h_a, h_c = embed_windows(models["encoder"], data.temporal)
        z = spec_embeddings(models["spec_encoder"], data.spectral)
        _, pre.traces["twrg"] = twrg_pretrain(h_a, h_c, z, models["nbtsf"], models["classifier"],
                                              replace(cfg.twrg, seed=seed + 2), stores["order"])
    return pre


def save_pretrained(pre: Pretrained, path, cfg: PipelineConfig, seed: int) -> Path:
    return save_checkpoint(pre.merged(), path, cfg.as_dict(), seed)


def load_pretrained(path, cfg: PipelineConfig, data: Datasets, seed: int) -> Pretrained:
    """Rebuild the pretrained models for ``data``'s shapes and load their weights."""
    models = build_models(cfg, data, seed)
    pre = Pretrained(_stores(models), models)
    load_checkpoint(path, pre.merged())
    for store in pre.stores.values():
        store.eval()
    return pre


# -- downstream --------------------------------------------------------------


@dataclass
class Downstream:
    temporal: TransferResult
    spectral: TransferResult
    mixed: TransferResult
    report: FusionReport
    label_mean: float
    label_scale: float
    train_predictions: np.ndarray  # (m, 3) in label units

    def to_labels(self, y):
        return np.asarray(y) * self.label_scale + self.label_mean

    def predict(self, data: Datasets) -> np.ndarray:
        """(m, 3) matrix of the three downstream predictions in label units."""
        y1 = predict(self.temporal.model, data.temporal)
        y2 = predict(self.spectral.model, data.spectral)
        h, z = _mixed_inputs(self.temporal.model, self.spectral.model, data)
        y3 = predict_mixed(self.mixed, h, z)
        return self.to_labels(np.stack([y1, y2, y3], axis=1))


@torch.no_grad()
def _mixed_inputs(temporal_model, spectral_model, data: Datasets):
    """Positive-order (h_A || h_C) from the adapted temporal encoder and the
    adapted spectrogram latent."""
    h_a, h_c = embed_windows(temporal_model.encoder_new, data.temporal)
    pos = torch.ones(len(h_a), dtype=torch.bool)
    h = order_inputs(torch.as_tensor(h_a), torch.as_tensor(h_c), pos).numpy()
    return h, spectrogram_latents(spectral_model, data.spectral)


def downstream(cfg: PipelineConfig, pre: Pretrained, train: Datasets, seed: int) -> Downstream:
    """Three dual-process heads on the training split, then the OLS combiner."""
    m = copy.deepcopy(pre.models)  # keep the pretrained artefacts untouched
    labels = train.temporal.labels
    if labels is None:
        raise DataError("downstream records carry no labels")
    if len(train) < MIN_ROWS:
        raise DataError(f"{len(train)} training windows; the combiner needs at least {MIN_ROWS}")
    mean = float(labels.mean())
    scale = float(labels.std()) or 1.0
    y = (labels - mean) / scale
    tcfg = replace(cfg.downstream, seed=seed)
    t_data = replace(train.temporal, labels=y)
    s_data = replace(train.spectral, labels=y)
    r1 = dpt_finetune_temporal(m["encoder"], m["decoder"], t_data, tcfg)
    r2 = dpt_finetune_spectrogram(m["spec_encoder"], m["spec_decoder"], s_data, replace(tcfg, seed=seed + 1))
    h, z = _mixed_inputs(r1.model, r2.model, train)
    r3 = mixed_finetune(m["nbtsf"], m["classifier"], h, z, y, replace(tcfg, seed=seed + 2))
    preds = np.stack([r1.predictions, r2.predictions, r3.predictions], axis=1) * scale + mean
    report = ols_fit(preds, labels)
    return Downstream(r1, r2, r3, report, mean, scale, preds)


# -- orchestration -----------------------------------------------------------


@dataclass
class RunResult:
    seed: int
    report: FusionReport
    test_metrics: RegressionMetrics
    val_mae: float | None
    predictions: dict[str, np.ndarray]
    manifest: dict


@dataclass
class PipelineResult:
    runs: list[RunResult]
    summary: MetricSummary

    @property
    def report(self) -> FusionReport:
        return self.runs[0].report


def _fused(ds: Downstream, data: Datasets) -> tuple[np.ndarray, np.ndarray]:
    preds = ds.predict(data)
    return preds, ternary_predict(preds, ds.report)


def run_once(cfg: PipelineConfig, unlabeled: list[PpgRecord], labeled: list[PpgRecord], seed: int,
             out_dir: Path | None = None) -> RunResult:
    timings: dict[str, float] = {}
    seeds = {name: phase_seed(seed, i + 1) for i, name in enumerate(PHASES)}
    if not unlabeled or not labeled:
        raise DataError("both the unlabelled and the labelled record sets must be non-empty")
    if any(r.label is None for r in labeled):
        raise DataError("every downstream record needs a label")
    with _phase("setup", timings):
        u_windows, u_ids = prepare_windows(unlabeled, cfg)
        l_windows, l_ids = prepare_windows(labeled, cfg)
        check_segments(cfg.window_len, cfg.gamma)
    with _phase("pseudolabel", timings):
        mask_seed = seeds["pseudolabel"] % (2**31)
        u_data = Datasets(
            build_temporal_windows(u_windows, cfg.vmd, cfg.gamma, u_ids),
            build_spectrogram_set(u_windows, cfg.stft, cfg.patch, cfg.mask_ratio, mask_seed, u_ids),
        )
        l_data = Datasets(
            build_temporal_windows(l_windows, cfg.vmd, cfg.gamma, l_ids),
            build_spectrogram_set(l_windows, cfg.stft, cfg.patch, cfg.mask_ratio, mask_seed + len(u_windows), l_ids),
        )
    ckpt_path = None
    with _phase("pretrain", timings):
        pre = pretrain(cfg, u_data, seeds["pretrain"] % (2**31))
        if out_dir is not None:
            ckpt_path = save_pretrained(pre, Path(out_dir) / f"pretrained_seed{seed}.ckpt", cfg, seed)
    with _phase("downstream", timings):
        tr, va, te = split_records(len(labeled), cfg.split, seeds["downstream"] % (2**31))
        tr = train_subset(tr, cfg.train_fraction, seeds["downstream"] % (2**31) + 1)
        train = l_data.by_records(tr)
        ds = downstream(cfg, pre, train, seeds["downstream"] % (2**31))
    with _phase("inference", timings):
        test = l_data.by_records(te)
        preds, fused = _fused(ds, test)
        metrics = regression_metrics(test.temporal.labels, fused)
        val_mae = None
        if len(va):
            val = l_data.by_records(va)
            val_mae = regression_metrics(val.temporal.labels, _fused(ds, val)[1]).mae
    manifest = {
        "config": cfg.as_dict(),
        "seed": seed,
        "phase_seeds": seeds,
        "checkpoints": {"pretrained": str(ckpt_path) if ckpt_path else None},
        "wall_time_s": timings,
        "records": {"train": tr.tolist(), "val": va.tolist(), "test": te.tolist()},
        "report": ds.report.as_dict(),
        "test_metrics": asdict(metrics),
        "val_mae": val_mae,
    }
    if out_dir is not None:
        (Path(out_dir) / f"manifest_seed{seed}.json").write_text(json.dumps(manifest, indent=2, default=str))
    logger.info("seed %d: R2 %.4f, test MAE %.4f", seed, ds.report.r_squared, metrics.mae)
    return RunResult(
        seed, ds.report, metrics, val_mae,
        {"y1": preds[:, 0], "y2": preds[:, 1], "y3": preds[:, 2], "fused": fused,
         "labels": test.temporal.labels, "record_ids": test.temporal.record_ids},
        manifest,
    )


def run_pipeline(cfg: PipelineConfig, unlabeled: list[PpgRecord], labeled: list[PpgRecord],
                 out_dir=None) -> PipelineResult:
    """Run all five phases once per configured seed and aggregate test metrics."""
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    runs = [run_once(cfg, unlabeled, labeled, s, out_dir) for s in cfg.seeds]
    return PipelineResult(runs, MetricSummary.from_runs([r.test_metrics for r in runs]))


# -- sweep ---------------------------------------------------------------------


@dataclass
class SweepResult:
    gammas: list[float]
    Ts: list[float]
    raw: np.ndarray
    normalized: np.ndarray
    row_means: np.ndarray  # per gamma
    col_means: np.ndarray  # per T
    best: tuple[float, float]


def minmax(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    span = g.max() - g.min()
    if span == 0:
        return np.zeros_like(g)
    return (g - g.min()) / span


def sweep_gamma_T(cfg: PipelineConfig, gammas, Ts, unlabeled=None, labeled=None,
                  metric_fn: Callable[[PipelineConfig], float] | None = None) -> SweepResult:
    """Evaluate every (gamma, T) cell; the default metric is validation MAE."""
    gammas, Ts = [float(g) for g in gammas], [float(t) for t in Ts]
    if not gammas or not Ts:
        raise DataError("sweep grid is empty")
    for g in gammas:
        if not 0 < g < 0.5:
            raise DataError(f"gamma {g} outside (0, 0.5)")
    for t in Ts:
        if t <= 0:
            raise DataError(f"window length {t} must be positive")
        for g in gammas:
            check_segments(int(round(t * cfg.rate)), g)
    if metric_fn is None:
        if unlabeled is None or labeled is None:
            raise DataError("the default sweep metric needs unlabelled and labelled records")

        def metric_fn(c: PipelineConfig) -> float:
            run = run_once(c, unlabeled, labeled, c.seeds[0])
            if run.val_mae is None:
                raise DataError("validation split is empty")
            return run.val_mae

    raw = np.empty((len(gammas), len(Ts)))
    for i, g in enumerate(gammas):
        for j, t in enumerate(Ts):
            raw[i, j] = metric_fn(replace(cfg, gamma=g, window_s=t))
    if not np.isfinite(raw).all():
        raise DataError("sweep produced non-finite metrics")
    norm = minmax(raw)
    i, j = np.unravel_index(int(np.argmin(raw)), raw.shape)
    return SweepResult(gammas, Ts, raw, norm, norm.mean(axis=1), norm.mean(axis=0), (gammas[i], Ts[j]))
