import numpy as np
import pytest
import torch

from ts2tc.errors import DataError
from ts2tc.pipeline import Datasets, build_models, toy_config
from ts2tc.pretext import TrainConfig
from ts2tc.transfer import (
    DptSpecModel,
    DptTemporalModel,
    dpt_finetune_spectrogram,
    dpt_finetune_temporal,
    fine_tune,
    fit_linear_head,
    linear_probe,
    mixed_finetune,
    predict,
    predict_mixed,
    spectrogram_latents,
)

N = 24


@pytest.fixture(scope="module")
def labeled(temporal_set, spectral_set):
    t = temporal_set.subset(np.arange(N))
    s = spectral_set.subset(np.arange(N))
    y = t.labels
    t.labels = s.labels = (y - y.mean()) / y.std()
    return t, s


def _models(labeled, seed=0):
    t, s = labeled
    return build_models(toy_config(), Datasets(t, s), seed)


def _mae(pred, y):
    return float(np.abs(pred - y).mean())


SHORT = TrainConfig(lr=0.01, batch_size=8, epochs=2, seed=1)
TOY = TrainConfig(lr=0.01, batch_size=8, epochs=30, seed=1)
DPT = TrainConfig(lr=0.001, batch_size=8, epochs=30, seed=1)


def _frozen_equal(store, before, groups):
    after = store.state_dict()
    keys = [k for k in before if k.split(".", 1)[0] in groups]
    assert keys
    return all(torch.equal(before[k], after[k]) for k in keys)


# -- zero heads at step 0 ----------------------------------------------------


@pytest.mark.parametrize("kind", ["fine_tune", "dpt_temporal", "dpt_spec"])
def test_zero_head_initial_predictions(labeled, kind):
    t, s = labeled
    m = _models(labeled)
    cfg = TrainConfig(epochs=1)
    if kind == "fine_tune":
        from ts2tc.transfer import FineTuneModel

        model = FineTuneModel(m["encoder"])
        data = t
    elif kind == "dpt_temporal":
        model, data = DptTemporalModel(m["encoder"], m["decoder"]), t
    else:
        model, data = DptSpecModel(m["spec_encoder"], m["spec_decoder"]), s
    assert cfg.epochs == 1
    assert not predict(model, data).any()


def test_linear_probe_zero_epoch_equivalent(labeled):
    res = fit_linear_head(np.ones((4, 3)), np.zeros(4), TrainConfig(epochs=1))
    assert not res.predictions.any()  # zero labels and zero head: L1 subgradient 0


# -- fine-tuning ---------------------------------------------------------------


def test_fine_tune_reduces_mae_and_moves_encoder(labeled):
    t, _ = labeled
    m = _models(labeled)
    before = {k: v.clone() for k, v in m["encoder"].state_dict().items()}
    res = fine_tune(m["encoder"], t, TOY)
    initial = _mae(0.0, t.labels)
    assert _mae(res.predictions, t.labels) <= 0.3 * initial
    moved = res.model.encoder.state_dict()
    assert any(not torch.equal(before[k], moved[k]) for k in before)
    # the pretrained module itself is untouched (the copy is what trains)
    assert all(torch.equal(before[k], v) for k, v in m["encoder"].state_dict().items())


def test_fine_tune_spectrogram_runs(labeled):
    _, s = labeled
    m = _models(labeled)
    res = fine_tune(m["spec_encoder"], s, SHORT)
    assert res.predictions.shape == (N,) and np.isfinite(res.predictions).all()


# -- linear probing ----------------------------------------------------------


def test_linear_probe_solves_affine_task():
    h = np.linspace(-1, 1, 64)[:, None]
    y = 2 * h[:, 0] + 1
    res = fit_linear_head(h, y, TrainConfig(lr=0.05, batch_size=8, epochs=300, seed=0))
    assert _mae(res.predictions, y) <= 1e-3


def test_linear_probe_freezes_encoder(labeled):
    t, _ = labeled
    m = _models(labeled)
    before = {k: v.clone() for k, v in m["encoder"].state_dict().items()}
    res = linear_probe(m["encoder"], t, SHORT)
    assert all(torch.equal(before[k], v) for k, v in m["encoder"].state_dict().items())
    assert not res.params.trainable["theta"]


def test_mode_exclusivity(labeled):
    t, _ = labeled
    m = _models(labeled)
    ref = {k: v.clone() for k, v in m["encoder"].state_dict().items()}
    ft = fine_tune(m["encoder"], t, SHORT)
    lp = linear_probe(m["encoder"], t, SHORT)
    assert any(not torch.equal(ref[k], v) for k, v in ft.model.encoder.state_dict().items())
    assert all(torch.equal(ref[k], v) for k, v in lp.model.encoder.state_dict().items())


def test_unlabeled_data_rejected(labeled):
    t, _ = labeled
    bare = t.subset(np.arange(4))
    bare.labels = None
    with pytest.raises(DataError):
        fine_tune(_models(labeled)["encoder"], bare, SHORT)


# -- dual-process transfer, temporal --------------------------------------------


@pytest.mark.parametrize("mode", [True, False])
def test_dpt_temporal_step0_traces_match(labeled, mode):
    t, _ = labeled
    m = _models(labeled)
    model = DptTemporalModel(m["encoder"], m["decoder"]).train(mode)
    ap, rp = model.traces(t.tensors())
    assert len(ap) == len(rp) == m["decoder"].depth + 1
    for a, r in zip(ap[1:], rp[1:]):
        assert (a - r).abs().max().item() <= 1e-12


def test_dpt_temporal_step0_matches_linear_probe(labeled):
    t, _ = labeled
    m = _models(labeled)
    dpt = predict(DptTemporalModel(m["encoder"], m["decoder"]), t)
    probe = linear_probe(m["encoder"], t, TrainConfig(epochs=1))
    from ts2tc.transfer import LinearProbeModel
    from ts2tc.models import RegressionHead

    step0 = predict(LinearProbeModel(m["encoder"], RegressionHead(probe.model.head.linear.in_features)), t)
    np.testing.assert_array_equal(dpt, step0)
    assert not dpt.any()


def test_dpt_temporal_trains_and_freezes(labeled):
    t, _ = labeled
    m = _models(labeled)
    from ts2tc.nn import ParamStore

    before = ParamStore({"theta": m["encoder"], "delta": m["decoder"]}).state_dict()
    res = dpt_finetune_temporal(m["encoder"], m["decoder"], t, DPT)
    assert np.isfinite(res.predictions).all()
    assert _mae(res.predictions, t.labels) <= _mae(0.0, t.labels)
    assert _frozen_equal(res.params, before, {"theta", "delta"})
    assert any(p.abs().sum() > 0 for p in res.model.zdls.parameters() if p.dim() == 2)


def test_dpt_temporal_queue_mismatch(labeled):
    t, _ = labeled
    m = _models(labeled)
    model = DptTemporalModel(m["encoder"], m["decoder"])
    del model.zdls[-1]
    with pytest.raises(DataError):
        model.traces(t.tensors(np.arange(4)))


# -- dual-process transfer, spectrogram -----------------------------------------


@pytest.mark.parametrize("mode", [True, False])
def test_dpt_spec_step0_traces_match(labeled, mode):
    _, s = labeled
    m = _models(labeled)
    model = DptSpecModel(m["spec_encoder"], m["spec_decoder"]).train(mode)
    ap, rp = model.traces(s.tensors())
    for a, r in zip(ap, rp):
        assert (a - r).abs().max().item() <= 1e-12


def test_dpt_spec_trains_and_freezes(labeled):
    _, s = labeled
    m = _models(labeled)
    from ts2tc.nn import ParamStore

    dec_stages = torch.nn.ModuleList(m["spec_decoder"].stages())
    before = ParamStore({"theta_lock": m["spec_encoder"], "theta_2": dec_stages}).state_dict()
    res = dpt_finetune_spectrogram(m["spec_encoder"], m["spec_decoder"], s, DPT)
    assert _mae(res.predictions, s.labels) < _mae(0.0, s.labels)
    assert res.trace.losses[-1] < res.trace.losses[0]
    assert _frozen_equal(res.params, before, {"theta_lock", "theta_2"})
    z = spectrogram_latents(res.model, s)
    assert z.shape == (N, s.n_visible * m["spec_encoder"].spec.embed_dim)


def test_dpt_spec_depth_mismatch(labeled):
    _, s = labeled
    m = _models(labeled)
    model = DptSpecModel(m["spec_encoder"], m["spec_decoder"])
    del model.stages_unlock[-1]
    with pytest.raises(DataError):
        model.traces(s.tensors(np.arange(2)))


# -- mixed-domain head ---------------------------------------------------------


def test_mixed_head_zero_start_and_training(labeled):
    t, s = labeled
    m = _models(labeled)
    g = np.random.default_rng(0)
    h = g.normal(size=(N, 2 * m["encoder"].spec.embed_dim))
    z = g.normal(size=(N, s.n_visible * m["spec_encoder"].spec.embed_dim))
    res = mixed_finetune(m["nbtsf"], m["classifier"], h, z, t.labels, TOY)
    assert res.trace.losses[-1] < res.trace.losses[0]
    assert predict_mixed(res, h, z).shape == (N,)
