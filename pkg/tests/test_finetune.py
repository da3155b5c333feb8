import math

import numpy as np
import pytest

from duett.benchmarks import bench_run_config
from duett.binning import bin_dataset
from duett.data import LabelRule, Link, SynthConfig, generate_synthetic
from duett.finetune import (
    ClsHead,
    average_states,
    bce_weights,
    classify,
    finetune,
    reconstruct_masked,
    select_top_epochs,
    subsample_labelled,
    weighted_bce,
    weighted_bce_with_logits,
)
from duett.pipeline import build, finetune_config, run_finetune
from duett.rng import make_rng
from duett.tensor import Tensor, grad, precision


def test_zero_head_gives_half():
    head = ClsHead(8, 3, make_rng(0, "h"), linear=True)
    head.out.weight.data[:] = 0
    head.out.bias.data[:] = 0
    Z = Tensor(make_rng(1, "z").normal(size=(2, 2, 3, 4)))
    p = classify(Z, head).data
    assert p.shape == (2, 3)
    np.testing.assert_array_equal(p, 0.5)


def test_probabilities_strictly_inside_unit_interval():
    head = ClsHead(8, 2, make_rng(0, "h"))
    head.eval()
    Z = Tensor(make_rng(2, "z").normal(size=(5, 2, 3, 4)) * 10)
    p = classify(Z, head).data
    assert np.all((p > 0) & (p < 1))


def test_bce_weights():
    assert bce_weights(0.5) == (1.0, 1.0)
    w_pos, w_neg = bce_weights(0.1)
    assert w_pos == pytest.approx(5.0) and w_neg == pytest.approx(5 / 9)
    with pytest.raises(ValueError):
        bce_weights(0.0)


def test_weighted_bce_values():
    assert weighted_bce([1.0, 0.0], [1, 0], 0.5) == pytest.approx(0.0, abs=1e-9)
    assert weighted_bce([0.5], [1], 0.5) == pytest.approx(math.log(2))
    assert weighted_bce([0.5], [1], 0.1) == pytest.approx(5 * math.log(2))


def test_logit_loss_matches_probability_loss_and_gradient():
    rng = make_rng(0, "bce")
    with precision("float64"):
        z = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
        y = rng.integers(0, 2, size=(6, 2))
        rho = np.array([0.3, 0.6])
        loss = weighted_bce_with_logits(z, y, rho)
        probs = 1 / (1 + np.exp(-z.data))
        assert float(loss.data) == pytest.approx(weighted_bce(probs, y, rho), rel=1e-10)
        (g,) = grad(loss, [z])
        w_pos, w_neg = bce_weights(rho)
        expected = (probs - y) * (y * w_pos + (1 - y) * w_neg) / 6
        np.testing.assert_allclose(g, expected, rtol=1e-10)


def test_select_top_epochs():
    assert select_top_epochs([.60, .62, .61, .65, .64, .63, .60], 5) == [1, 2, 3, 4, 5]
    assert select_top_epochs([.5, .4, .3], 5) == [0, 1, 2]
    assert select_top_epochs([.5, .5, .5], 2) == [0, 1]


def test_average_states():
    out = average_states([{"w": np.array([1.0, 3.0], dtype=np.float32)}, {"w": np.array([3.0, 5.0], dtype=np.float32)}])
    np.testing.assert_array_equal(out["w"], [2.0, 4.0])
    assert out["w"].dtype == np.float32


def test_subsample_nested_and_stable():
    a = subsample_labelled(100, 0.1, 4)
    assert len(a) == 10 and np.array_equal(a, subsample_labelled(100, 0.1, 4))
    assert set(a) <= set(subsample_labelled(100, 0.3, 4))
    assert len(subsample_labelled(100, 1.0, 4)) == 100
    with pytest.raises(ValueError):
        subsample_labelled(100, 0.0, 4)


CFG = SynthConfig(n_events=4, n_static=2, n_stays=150, n_bins=6, sparsity=(0.5, 0.8, 0.8, 0.8),
                  links=(Link(1, 0, 0, 0.8), Link(2, 3, 1, 1.0)), noise=0.1, random_scales=False,
                  label_rules=(LabelRule("outcome", (0,), 3.0, -1.0),))


def _data():
    stays = generate_synthetic(CFG, 0)
    data = bin_dataset(stays, {n: i for i, n in enumerate(CFG.event_names())}, 6, 2.0, "last", ["outcome"])
    return data.subset(np.arange(110)), data.subset(np.arange(110, 150))


def _run(**kw):
    return bench_run_config(n_t=6, d=4, L=1, ffn_hidden=16, finetune_epochs=3, batch_size=16,
                            finetune_warmup_steps=5, **kw)


def test_three_epoch_run_averages_all_three():
    train, val = _data()
    run = _run()
    model, _ = build(run, 4, 2)
    res = run_finetune(train, val, run, model)
    assert res.top_epochs == [1, 2, 3] and len(res.history) == 3
    assert 0 <= res.report.macro_pr_auc <= 1


def test_probe_leaves_encoder_untouched():
    train, val = _data()
    run = _run()
    model, _ = build(run, 4, 2)
    before = model.state_dict()
    res = finetune(train, val, model, finetune_config(run, probe=True))
    assert res.head.linear
    for k, v in res.model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_finetune_deterministic():
    train, val = _data()
    run = _run()
    outs = []
    for _ in range(2):
        model, _ = build(run, 4, 2)
        res = run_finetune(train, val, run, model)
        outs.append((res.model.state_dict(), res.head.state_dict(), res.report.rows()))
    for a, b in zip(outs[0][:2], outs[1][:2]):
        for k in a:
            assert np.array_equal(a[k], b[k])
    assert outs[0][2] == outs[1][2]


def test_late_fusion_head_width():
    train, val = _data()
    run = _run(late_static_fusion=True)
    model, _ = build(run, 4, 2)
    res = run_finetune(train, val, run, model)
    assert res.head.hidden.weight.shape[0] == 4 * 4 + 4


def test_reconstruct_masked_empty_target():
    train, _ = _data()
    run = _run()
    model, heads = build(run, 4, 2)
    sub = train.subset(np.arange(5))
    sub.m[:, 2] = 0
    rec = reconstruct_masked(model, heads, sub, 2)
    assert rec.mse is None and np.all(np.isnan(rec.per_stay_mse))
    assert rec.predictions.shape == (5, 6)
