"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``python3 -m pytest -s tests/test_acceptance.py`` or
``python3 tests/test_acceptance.py``; the lines are also repeated in the
pytest terminal summary.
"""

import contextlib
import dataclasses
import math
import sys
import time

import numpy as np
import pytest

from duett.benchmarks import (
    CLASSIFICATION,
    SEEDS,
    bench_label_sweep,
    bench_reconstruction,
    bench_run_config,
    bench_ssl_gain,
    prepare_suite,
)
from duett.binning import AGGREGATIONS, bin_stay
from duett.data import EventTriplet, PatientStay, apply_norm, fit_norm, robust_type_stats
from duett.gradcheck import check_grad
from duett.metrics import pr_auc, roc_auc
from duett.model import DuETT, ModelConfig
from duett.pipeline import run_finetune, run_pretrain, save_finetuned, save_pretrained
from duett.rng import make_rng
from duett.ssl import MaskSpec, SslHeads, mask_grid, sample_mask, ssl_loss
from duett.tensor import Tensor, precision

sys.path.insert(0, __file__.rsplit("/", 1)[0])
from test_binning import VOCAB, naive_bin, random_stay  # noqa: E402
from test_metrics import ap_oracle, exhaustive_instances, roc_oracle  # noqa: E402
from test_ssl import fixed_heads  # noqa: E402
from test_tensor import CASES  # noqa: E402

RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(n, name, budget_s=None):
    t0 = time.time()
    detail = {}
    status = "FAIL"
    try:
        yield detail
        elapsed = time.time() - t0
        if budget_s is not None:
            detail["seconds"] = f"{elapsed:.0f}/{budget_s:.0f}"
            assert elapsed < budget_s, f"took {elapsed:.0f}s, budget {budget_s:.0f}s"
        status = "PASS"
    finally:
        extra = " ".join(f"{k}={v}" for k, v in detail.items())
        line = f"criterion {n:2d} {status} {name} {extra}".rstrip()
        RESULTS[n] = line
        print(line, flush=True)


# -- 1. gradients ------------------------------------------------------------------------


def test_c01_gradients():
    with criterion(1, "gradient correctness", budget_s=120) as d:
        with precision("float64"):
            worst = 0.0
            for i, case in enumerate(CASES):
                f, params = case(make_rng(7, "gradcheck", i))
                worst = max(worst, check_grad(f, params))
            cfg = ModelConfig(n_events=2, n_bins=3, n_static=2, d=4, n_layers=1, n_heads=2, ffn_hidden=16)
            model = DuETT(cfg, seed=0).eval()
            rng = make_rng(5, "e2e")
            m = rng.integers(0, 3, size=(2, 2, 3))
            x = rng.normal(size=(2, 2, 3)) * (m > 0)
            s = rng.normal(size=(2, 2))
            t = np.tile([2 / 3, 4 / 3, 2.0, 2.0], (2, 1))
            w = rng.normal(size=(2, 3, 4, 4))

            def loss():
                z, _ = model.encode(x, m, s, t)
                return (z * w).sum()

            e2e = check_grad(loss, model.parameters())
        d["primitives"] = f"{worst:.1e}"
        d["end_to_end"] = f"{e2e:.1e}"
        assert worst < 1e-4 and e2e < 1e-3


# -- 2. binning --------------------------------------------------------------------------


def test_c02_binning_oracle():
    with criterion(2, "binning oracle", budget_s=60) as d:
        rng = np.random.default_rng(2022)
        checked = 0
        for _ in range(1000):
            n_t = int(rng.integers(1, 12))
            window = float(rng.choice([1.0, 2.0, 0.75, 3.3]))
            s = random_stay(rng, n_t, window)
            for agg in AGGREGATIONS:
                b = bin_stay(s, VOCAB, n_t, window, agg)
                x, m = naive_bin(s, VOCAB, n_t, window, agg)
                assert np.array_equal(b.m, m) and np.array_equal(b.x, x)
                checked += 1
        d["pairs"] = checked


# -- 3. SSL loss -------------------------------------------------------------------------


def _one_cell(m, x, value_bias, presence_logit):
    Z = Tensor(np.ones((1, 2, 2, 3)))
    heads = fixed_heads(1, 1, 2, 3, value_bias, presence_logit)
    return ssl_loss(Z, MaskSpec((0,), ()), np.array([[[x]]]), np.array([[[m]]]), heads)


def test_c03_ssl_loss():
    with criterion(3, "ssl loss hand cases and decomposition") as d:
        a = _one_cell(0, 0.0, 0.3, 0.0)
        assert abs(a.value) <= 1e-6 and abs(a.presence - math.log(2)) <= 1e-6
        b = _one_cell(2, 1.5, 1.0, 60.0)
        assert abs(b.value - 0.25) <= 1e-6 and abs(b.total_value - 0.25) <= 1e-6
        x = np.full((2, 3, 4), 0.7)
        heads = fixed_heads(3, 4, 4, 2, 0.7, 60.0)
        Z = Tensor(make_rng(0, "z").normal(size=(2, 4, 5, 2)))
        c = ssl_loss(Z, MaskSpec((1,), (0, 2)), x, np.ones((2, 3, 4), dtype=int), heads)
        assert abs(c.total_value) <= 1e-6
        rng = make_rng(3, "acceptance-decomp")
        worst = 0.0
        for _ in range(100):
            n_e, n_t, B = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
            h = SslHeads(n_e, n_t, n_e + 1, 2, rng)
            Z = Tensor(rng.normal(size=(B, n_e + 1, n_t + 1, 2)))
            m = rng.integers(0, 3, size=(B, n_e, n_t))
            xs = rng.normal(size=(B, n_e, n_t)) * (m > 0)
            alpha = float(rng.uniform(0.1, 3))
            rep = ssl_loss(Z, sample_mask(n_e, n_t, int(rng.integers(0, n_e + 1)), 1, rng), xs, m, h, alpha)
            worst = max(worst, abs(rep.total_value - (rep.value + alpha * rep.presence)))
        d["decomposition_err"] = f"{worst:.1e}"
        assert worst <= 1e-6


# -- 4. anti-leakage ---------------------------------------------------------------------


def test_c04_anti_leakage():
    with criterion(4, "masked inputs do not leak", budget_s=60) as d:
        cfg = ModelConfig(n_events=5, n_bins=6, n_static=2, d=4, n_layers=2, n_heads=2, ffn_hidden=16)
        model = DuETT(cfg, seed=1).eval()
        rng = make_rng(44, "acceptance-leak")
        for _ in range(50):
            m = rng.integers(0, 4, size=(2, 5, 6))
            x = rng.normal(size=(2, 5, 6)) * (m > 0)
            s, t = rng.normal(size=(2, 2)), np.tile(np.append(np.arange(1, 7) / 3, 2.0), (2, 1))
            spec = sample_mask(5, 6, int(rng.integers(0, 3)), int(rng.integers(1, 3)), rng)
            g = mask_grid(spec, 5, 6, 5, 6)
            x2, m2 = x.copy(), m.copy()
            x2[:, g] = rng.uniform(-1e6, 1e6, size=x2[:, g].shape)
            m2[:, g] = rng.integers(0, 50, size=m2[:, g].shape)
            a, _ = model.encode(x, m, s, t, mask_spec=spec)
            b, _ = model.encode(x2, m2, s, t, mask_spec=spec)
            assert np.array_equal(a.data, b.data)
        d["pairs"] = 50


# -- 5. shapes ---------------------------------------------------------------------------


def test_c05_shapes_and_attention_dims():
    with criterion(5, "shapes and attention dims", budget_s=60) as d:
        rng = make_rng(5, "acceptance-shapes")
        for _ in range(20):
            n_e, n_t = int(rng.integers(1, 8)), int(rng.integers(1, 10))
            dim, L = int(rng.choice([2, 4, 8])), int(rng.integers(0, 4))
            cfg = ModelConfig(n_events=n_e, n_bins=n_t, n_static=3, d=dim, n_layers=L, n_heads=2, ffn_hidden=8)
            model = DuETT(cfg, seed=0).eval()
            m = rng.integers(0, 3, size=(2, n_e, n_t))
            x = rng.normal(size=(2, n_e, n_t)) * (m > 0)
            t = np.tile(np.append(np.arange(1, n_t + 1) / n_t, 1.0), (2, 1))
            z, _ = model.encode(x, m, rng.normal(size=(2, 3)), t)
            assert z.shape == (2, n_e + 1, n_t + 1, dim)
            assert model.last_counters.attention_dims == [(n_e + 1, n_e + 1), (n_t + 1, n_t + 1)] * L
        d["configs"] = 20


# -- 6. metrics --------------------------------------------------------------------------


def test_c06_metric_oracles():
    with criterion(6, "metric oracles", budget_s=120) as d:
        checked = 0
        for s, y in exhaustive_instances():
            if 0 < sum(y) < len(y):
                assert abs(roc_auc(s, y) - roc_oracle(s, y)) <= 1e-9
            if sum(y) > 0:
                assert abs(pr_auc(s, y) - ap_oracle(s, y)) <= 1e-9
                checked += 1
        rng = np.random.default_rng(6)
        for _ in range(1000):
            n = int(rng.integers(9, 60))
            y = rng.integers(0, 2, size=n)
            y[0], y[1] = 0, 1
            s = rng.normal(size=n) if rng.random() < 0.5 else rng.integers(0, 5, size=n).astype(float)
            assert abs(roc_auc(s, y) - roc_oracle(list(s), list(y))) <= 1e-9
            assert abs(pr_auc(s, y) - ap_oracle(list(s), list(y))) <= 1e-9
        d["small"] = checked
        d["large"] = 1000


# -- 7-9. benchmarks ---------------------------------------------------------------------


def test_c07_reconstruction_ordering():
    with criterion(7, "reconstruction ordering", budget_s=15 * 60) as d:
        res = [bench_reconstruction(s) for s in SEEDS]
        wins = sum(r.duett_best for r in res)
        for r in res:
            d[f"s{r.seed}"] = "/".join(f"{r.mse[k]:.4f}" for k in ("duett", "event_only", "time_only"))
        d["wins"] = f"{wins}/3"
        assert wins >= 2


def test_c08_ssl_gain():
    with criterion(8, "pre-training helps at 10% labels", budget_s=10 * 60) as d:
        res = [bench_ssl_gain(s) for s in SEEDS]
        pre = float(np.mean([r.pretrained for r in res]))
        scr = float(np.mean([r.scratch for r in res]))
        d["pretrained"] = f"{pre:.4f}"
        d["scratch"] = f"{scr:.4f}"
        assert pre >= scr


def test_c09_label_sweep():
    with criterion(9, "PR-AUC non-decreasing in label fraction", budget_s=15 * 60) as d:
        rows = [row for s in SEEDS for row in bench_label_sweep(s).rows]
        means = [float(np.mean([r["pr_auc"] for r in rows if r["fraction"] == f])) for f in (0.1, 0.3, 1.0)]
        d["means"] = "/".join(f"{m:.4f}" for m in means)
        assert means[0] <= means[1] <= means[2]


# -- 10. determinism ---------------------------------------------------------------------


def _full_run(run, data, tmp, tag):
    model, heads, res = run_pretrain(data.train, data.val, run)
    save_pretrained(tmp / f"{tag}_pre.bin", model, heads, run, data.train, res)
    ft = run_finetune(data.train, data.val, run, model)
    save_finetuned(tmp / f"{tag}_ft.bin", ft.model, ft.head, run, data.train, False, ft.top_epochs)
    return (tmp / f"{tag}_pre.bin").read_bytes(), (tmp / f"{tag}_ft.bin").read_bytes(), ft.report.rows()


def test_c10_determinism(tmp_path):
    with criterion(10, "byte-identical reruns") as d:
        run = bench_run_config(n_t=8, d=8, L=1, ffn_hidden=32, epochs=2, finetune_epochs=2, seed=7)
        synth = dataclasses.replace(CLASSIFICATION, n_stays=240)
        a = _full_run(run, prepare_suite(synth, run, 7), tmp_path, "a")
        b = _full_run(run, prepare_suite(synth, run, 7), tmp_path, "b")
        assert a[0] == b[0] and a[1] == b[1] and a[2] == b[2]
        d["bytes"] = f"{len(a[0])}+{len(a[1])}"


# -- 11. preprocessing -------------------------------------------------------------------


def test_c11_preprocessing():
    with criterion(11, "MAD clip and train moments") as d:
        ts = robust_type_stats(np.array([1, 2, 3, 4, 100.0]))
        assert ts.clip_bounds == (0.0, 6.0)
        rng = np.random.default_rng(11)
        worst_mean = worst_std = 0.0
        for _ in range(50):
            vals = np.concatenate([rng.normal(3, 2, size=200), rng.normal(0, 50, size=5)])
            stays = [PatientStay(str(i), [0.0], [EventTriplet("hr", float(j) / 100, float(v))
                                                  for j, v in enumerate(chunk)])
                     for i, chunk in enumerate(np.array_split(vals, 7))]
            stats = fit_norm(stays)
            z = np.array([e.value for s in stays for e in apply_norm(s, stats).events])
            worst_mean = max(worst_mean, abs(z.mean()))
            worst_std = max(worst_std, abs(z.std() - 1))
        d["mean_err"] = f"{worst_mean:.1e}"
        d["std_err"] = f"{worst_std:.1e}"
        assert worst_mean <= 1e-6 and worst_std <= 1e-3


if __name__ == "__main__":
    sys.exit(pytest.main(["-q", "-s", __file__]))
