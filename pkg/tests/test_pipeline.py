import json
import math
from dataclasses import replace

import numpy as np
import pytest

from ts2tc.errors import DataError
from ts2tc.pipeline import (
    PipelineConfig,
    build_datasets,
    downstream,
    load_pretrained,
    minmax,
    phase_seed,
    pretrain,
    run_once,
    run_pipeline,
    save_pretrained,
    split_records,
    sweep_gamma_T,
    synthetic_records,
    toy_config,
    train_subset,
)
from ts2tc.pretext import TrainConfig

FAST = TrainConfig(lr=0.01, batch_size=8, epochs=3)


def _cfg(**kw):
    return toy_config(pretrain=FAST, twrg=FAST, downstream=replace(FAST, lr=0.001), **kw)


@pytest.fixture(scope="module")
def records():
    return synthetic_records(8, seed=1, labeled=False), synthetic_records(12, seed=2)


def test_config_validation():
    with pytest.raises(DataError):
        PipelineConfig(train_fraction=0)
    with pytest.raises(DataError):
        PipelineConfig(gamma=0.5)
    with pytest.raises(DataError):
        PipelineConfig(split=(0.5, 0.5, 0.5))
    with pytest.raises(DataError):
        PipelineConfig(seeds=())
    cfg = PipelineConfig()
    assert (cfg.window_len, cfg.gamma, cfg.pretrain.epochs, cfg.downstream.epochs) == (700, 0.4, 100, 300)


def test_phase_seeds_distinct_and_stable():
    seeds = [phase_seed(0, p) for p in range(1, 6)]
    assert len(set(seeds)) == 5
    assert seeds == [phase_seed(0, p) for p in range(1, 6)]


def test_split_disjoint_and_complete():
    tr, va, te = split_records(30, (0.7, 0.1, 0.2), seed=4)
    assert (len(tr), len(va), len(te)) == (21, 3, 6)
    assert not (set(tr) & set(va) or set(tr) & set(te) or set(va) & set(te))
    assert sorted([*tr, *va, *te]) == list(range(30))
    with pytest.raises(DataError):
        split_records(2, (0.7, 0.1, 0.2), 0)


@pytest.mark.parametrize("fraction,n", [(0.1, 21), (0.5, 21), (1.0, 21), (0.1, 7), (0.3, 10)])
def test_train_fraction_ceiling(fraction, n):
    keep = train_subset(np.arange(n), fraction, seed=0)
    assert len(keep) == math.ceil(fraction * n)
    assert len(set(keep)) == len(keep)


def test_windows_never_cross_splits():
    recs = synthetic_records(6, seed=3, length_s=8.0)
    data = build_datasets(recs, _cfg(), seed=0)
    assert len(data) > len(recs)  # several windows per record
    tr, va, te = split_records(6, (0.7, 0.1, 0.2), seed=1)
    parts = [set(data.by_records(ids).temporal.record_ids) for ids in (tr, va, te)]
    assert parts[0] == set(tr) and parts[2] == set(te)
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])


def test_short_segments_rejected():
    with pytest.raises(DataError):
        sweep_gamma_T(_cfg(), [0.4], [0.2], metric_fn=lambda c: 0.0)


def test_determinism_same_seed_same_report(records, tmp_path):
    unl, lab = records
    a = run_pipeline(_cfg(), unl, lab)
    b = run_pipeline(_cfg(), unl, lab)
    assert a.report == b.report
    np.testing.assert_array_equal(a.runs[0].predictions["fused"], b.runs[0].predictions["fused"])
    assert all(np.isfinite([a.report.r_squared, a.summary.mae[0], a.summary.rmse[0]]))


def test_manifest_contents(records, tmp_path):
    unl, lab = records
    run = run_once(_cfg(), unl, lab, seed=3, out_dir=tmp_path)
    manifest = json.loads((tmp_path / "manifest_seed3.json").read_text())
    assert set(manifest["wall_time_s"]) == {"setup", "pseudolabel", "pretrain", "downstream", "inference"}
    assert manifest["phase_seeds"]["pretrain"] == phase_seed(3, 3)
    assert manifest["checkpoints"]["pretrained"].endswith("pretrained_seed3.ckpt")
    assert manifest["config"]["gamma"] == 0.4
    splits = manifest["records"]
    assert not set(splits["train"]) & set(splits["test"])
    assert run.val_mae is not None


def test_train_fraction_applied(records, tmp_path):
    unl, _ = records
    lab = synthetic_records(12, seed=2, length_s=8.0)  # 4 windows per record
    run = run_once(_cfg(train_fraction=0.3), unl, lab, seed=0)
    n_train = len(split_records(len(lab), (0.7, 0.1, 0.2), phase_seed(0, 4) % 2**31)[0])
    assert len(run.manifest["records"]["train"]) == math.ceil(0.3 * n_train)


def test_phase_isolation_from_checkpoint(records, tmp_path):
    unl, lab = records
    cfg = _cfg()
    u = build_datasets(unl, cfg, seed=5)
    l = build_datasets(lab, cfg, seed=6)
    pre = pretrain(cfg, u, seed=7)
    path = save_pretrained(pre, tmp_path / "p3.ckpt", cfg, seed=7)
    direct = downstream(cfg, pre, l, seed=9)
    again = downstream(cfg, pre, l, seed=9)  # pretrained artefacts are not mutated
    reloaded = downstream(cfg, load_pretrained(path, cfg, u, seed=7), l, seed=9)
    for other in (again, reloaded):
        assert other.report == direct.report
        np.testing.assert_array_equal(other.train_predictions, direct.train_predictions)
        np.testing.assert_array_equal(other.predict(l), direct.predict(l))


def test_too_few_training_windows(records):
    unl, lab = records
    with pytest.raises(DataError, match="at least 4"):
        run_once(_cfg(train_fraction=0.1), unl, lab, seed=0)


def test_missing_labels_and_empty_inputs(records):
    unl, lab = records
    with pytest.raises(DataError):
        run_once(_cfg(), unl, unl, seed=0)
    with pytest.raises(DataError):
        run_once(_cfg(), [], lab, seed=0)


def test_phase_tag_on_errors(records):
    unl, lab = records
    with pytest.raises(DataError, match=r"\[downstream\]"):
        run_once(_cfg(), unl, lab[:2], seed=0)


# -- sweep -----------------------------------------------------------------------


def test_minmax_and_degenerate():
    g = minmax([[3.0, 1.0], [2.0, 5.0]])
    assert g.min() == 0 and g.max() == 1
    assert not minmax([[4.2]]).any()
    assert not minmax([[2.0, 2.0]]).any()


def test_sweep_grid_with_injected_metric():
    res = sweep_gamma_T(_cfg(), [0.3, 0.4], [4.8, 5.6], metric_fn=lambda c: c.gamma * 10 + c.window_s)
    assert res.raw.shape == (2, 2)
    assert res.normalized.min() == 0 and res.normalized.max() == 1
    assert res.best == (0.3, 4.8)
    np.testing.assert_allclose(res.row_means, res.normalized.mean(axis=1))
    single = sweep_gamma_T(_cfg(), [0.4], [5.6], metric_fn=lambda c: 1.0)
    assert single.normalized.tolist() == [[0.0]]


def test_sweep_invalid_grid():
    with pytest.raises(DataError):
        sweep_gamma_T(_cfg(), [0.6], [5.6], metric_fn=lambda c: 0.0)
    with pytest.raises(DataError):
        sweep_gamma_T(_cfg(), [], [5.6], metric_fn=lambda c: 0.0)
    with pytest.raises(DataError):
        sweep_gamma_T(_cfg(), [0.4], [5.6])


def test_sweep_default_metric_is_validation_mae(records):
    unl, lab = records
    res = sweep_gamma_T(_cfg(), [0.4], [5.6], unl, lab)
    run = run_once(_cfg(), unl, lab, seed=0)
    assert res.raw[0, 0] == run.val_mae
