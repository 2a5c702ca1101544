"""Acceptance gate: every criterion at its stated tolerance, one PASS/FAIL
line each (run with -s to watch them as they complete).

The directional criteria (5-7) train real models on the default synthetic
dataset and dominate the suite's runtime (tens of minutes on two cores).
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from kpiembed import hscore, models, ndiff, pipeline, preprocess as pp
from kpiembed import synthdata as sd
from kpiembed.models import (ExtractorConfig, Mlp, ReservoirConfig,
                             TransformerConfig, build_extractor, esn_init)
from kpiembed.ndiff import Tensor
from kpiembed.pipeline import TrainConfig, run_benchmark

# default-synthdata acceptance dataset (criteria 5-7 share it)
DATASET_SAMPLES = 60_000
DATASET_SEED = 0
LIMITED_SEEDS = [1, 2, 3, 4, 5]
FULL_SEEDS = [1, 2, 3]
SWEEP_SEEDS = [1, 2, 3]
SWEEP_DIMS = [2, 8, 32]
TARGETS = ("rsrq", "spectral_efficiency")


def _verdict(num, ok, detail):
    line = f"ACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    return ok


@pytest.fixture(scope="module")
def dataset():
    cfg = sd.LatentProcessConfig(seed=DATASET_SEED)
    return sd.generate_labeled_dataset(cfg, sd.KpiMarginalSpec.table_default(),
                                       DATASET_SAMPLES)


def _median_mse(ds, regime, seeds, conditions):
    report = run_benchmark(ds, TrainConfig(regime=regime), seeds=seeds,
                           conditions=conditions)
    return report.medians


def test_criterion_1_gradient_correctness():
    """grad_check on the complete -H(T-ESN, g) loss at downsized dimensions:
    max relative error < 1e-4 within 30 s."""
    cfg = ExtractorConfig(
        arch="tesn", n_seq=4, n_kpis=3, n_embed=4,
        transformer=TransformerConfig(d_model=8, n_heads=2, d_ff=16, n_layers=1),
        reservoir=ReservoirConfig(n_res=8, spectral_radius=0.9, input_scaling=0.5))
    ext = build_extractor(cfg, seed=3)
    g_net = Mlp([3, 16, 32, 4], np.random.default_rng(42))
    xb = Tensor(np.random.default_rng(7).normal(size=(4, 4, 3)))
    yb = Tensor(np.random.default_rng(8).normal(size=(4, 3)))
    point = np.concatenate([models.flatten_params(ext), models.flatten_params(g_net)])

    def loss_fn(vec):
        with models.bind_param_vector([ext, g_net], vec):
            return hscore.h_loss(ndiff.transpose(ext.embed_batch(xb)),
                                 ndiff.transpose(g_net(yb)))

    t0 = time.perf_counter()
    err = ndiff.grad_check(loss_fn, point)
    wall = time.perf_counter() - t0
    ok = err < 1e-4 and wall < 30.0
    assert _verdict(1, ok, f"full-loss grad check rel err {err:.2e} (<1e-4) in {wall:.1f}s (<30s)")


def test_criterion_2_h_score_oracle():
    """Vectorized H equals the double-loop form within 1e-12 on 100 random
    batches; hand cases 0.5 and -1.5 exact."""
    from tests.test_hscore import h_brute_force

    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng([1234, trial])
        n, b = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        f, g = 2 * rng.normal(size=(n, b)), 2 * rng.normal(size=(n, b))
        worst = max(worst, abs(hscore.h_score(Tensor(f), Tensor(g)).item() - h_brute_force(f, g)))
    f = np.array([[1.0, -1.0]])
    exact = (hscore.h_score(Tensor(f), Tensor(f)).item() == 0.5
             and hscore.h_score(Tensor(f), Tensor(-f)).item() == -1.5)
    ok = worst < 1e-12 and exact
    assert _verdict(2, ok, f"brute-force gap {worst:.2e} (<1e-12), hand cases exact={exact}")


def test_criterion_3_preprocessing_golden_suite():
    """Moving-average windows, -1 fill, row drop, IQR bounds at 10th/90th,
    and the 29-consecutive-rows => M=1 rule, all bit-exact."""
    checks = []

    # moving-average golden: t=0,20,40 values 1,2,3; window 40, step 20
    recs = [pp.KpiRecord(timestamp=t, rsrq=v) for t, v in [(0, 1.0), (20, 2.0), (40, 3.0)]]
    frame = pp.moving_average(recs, window_len=40, t_step=20)
    j = pp.KPI_NAMES.index("rsrq")
    checks.append(list(frame.values[:, j]) == [1.5, 2.5, 3.0])

    # -1 fill and row drop
    vals = np.ones((3, pp.N_KPIS))
    vals[0, pp.PACKET_DELAY_IDX] = np.nan   # fill
    vals[1, j] = np.nan                      # drop
    res = pp.fill_and_filter(pp.KpiFrame(steps=np.arange(3), values=vals,
                                         t_start=0.0, t_step=20.0, window_len=100.0))
    checks.append(res.frame.values[0, pp.PACKET_DELAY_IDX] == -1.0)
    checks.append(res.dropped_rows == 1 and len(res.frame) == 2)

    # IQR bounds at 10th/90th percentiles (independent sort-and-interpolate
    # oracle: Q1=1.9, Q3=18.1, upper bound 42.4; the 100 row is removed)
    col = np.array([1, 2, 3, 4, 5, 6, 7, 8, 9, 100.0])
    vals = np.full((10, pp.N_KPIS), 5.0)
    vals[:, j] = col
    iqr = pp.iqr_filter(pp.KpiFrame(steps=np.arange(10), values=vals,
                                    t_start=0.0, t_step=20.0, window_len=100.0))

    def pct(sorted_vals, p):
        pos = (len(sorted_vals) - 1) * p / 100.0
        lo, hi = math.floor(pos), math.ceil(pos)
        return sorted_vals[lo] + (pos - lo) * (sorted_vals[hi] - sorted_vals[lo])

    q1, q3 = pct(sorted(col), 10), pct(sorted(col), 90)
    checks.append((round(q1, 9), round(q3, 9)) == (1.9, 18.1))
    checks.append(abs(iqr.lower[j] - (q1 - 1.5 * (q3 - q1))) < 1e-9)
    checks.append(abs(iqr.upper[j] - (q3 + 1.5 * (q3 - q1))) < 1e-9)
    checks.append(iqr.removed_rows == 1)

    # sequence construction counting
    def m_of(n_rows):
        f = pp.KpiFrame(steps=np.arange(n_rows), values=np.ones((n_rows, pp.N_KPIS)),
                        t_start=0.0, t_step=20.0, window_len=100.0)
        return pp.build_sequences(f, n_seq=28).n_samples

    checks.append(m_of(29) == 1 and m_of(30) == 2 and m_of(28) == 0)

    ok = all(checks)
    assert _verdict(3, ok, f"golden fixtures {sum(checks)}/{len(checks)} bit-exact")


def test_criterion_4_esn_contracts():
    """Spectral radius within 1e-3 of 0.9; scalar-reservoir trace to 6
    decimals; reservoir weights bit-identical after training."""
    res = esn_init(seed=0, n_res=64, rho=0.9, gamma=0.5, n_in=32)
    radius = float(np.max(np.abs(np.linalg.eigvals(res.w_res.data))))
    radius_ok = abs(radius - 0.9) < 1e-3

    scalar = models.Reservoir(np.array([[0.5]]), np.array([[1.0]]))
    s, traces = 0.0, []
    for _ in range(3):
        s = math.tanh(0.5 * s + 1.0)
        traces.append(s)
    trace_ok = True
    for t, want in enumerate(traces):
        got = float(scalar.run(Tensor(np.ones((1, t + 1, 1)))).data[0, 0])
        trace_ok &= abs(got - want) < 5e-7

    ext = build_extractor(ExtractorConfig(
        arch="tesn", n_seq=4, n_kpis=3, n_embed=4,
        transformer=TransformerConfig(d_model=8, n_heads=2, d_ff=16, n_layers=1),
        reservoir=ReservoirConfig(n_res=8)), seed=1)
    before = (ext.reservoir.w_res.data.tobytes(), ext.reservoir.w_in.data.tobytes())
    opt = pipeline.Adam(ext.trainable_tensors())
    rng = np.random.default_rng(0)
    for _ in range(10):
        out = ext.embed_batch(Tensor(rng.normal(size=(4, 4, 3))))
        loss = ndiff.mean(ndiff.mul(out, out))
        opt.zero_grad()
        loss.backward()
        opt.step()
    frozen_ok = (ext.reservoir.w_res.data.tobytes(), ext.reservoir.w_in.data.tobytes()) == before

    ok = radius_ok and trace_ok and frozen_ok
    assert _verdict(4, ok, f"radius |{radius:.6f}-0.9|<1e-3={radius_ok}, "
                           f"scalar trace 6dp={trace_ok}, weights frozen={frozen_ok}")


def test_criterion_5_limited_regime_directional(dataset):
    """Limited regime (5% train, 5 epochs), medians over 5 seeds: T-ESN+MLP
    test MSE strictly below the full-KPI MLP for both targets, relative
    improvement >= 10%, in under 15 minutes."""
    t0 = time.perf_counter()
    medians = _median_mse(dataset, "limited", LIMITED_SEEDS,
                          ("full_kpi_mlp", "hscore_tesn_mlp"))
    wall = time.perf_counter() - t0
    details = []
    ok = wall < 900.0
    for target in TARGETS:
        base = medians["full_kpi_mlp"][target]["mse"]
        tesn = medians["hscore_tesn_mlp"][target]["mse"]
        imp = 1.0 - tesn / base
        details.append(f"{target}: {tesn:.4f} vs {base:.4f} ({imp:+.1%})")
        ok = ok and tesn < base and imp >= 0.10
    assert _verdict(5, ok, "; ".join(details) + f"; wall {wall:.0f}s (<900s)")


def test_criterion_6_full_regime_closeness(dataset):
    """Full regime on the same dataset: T-ESN+MLP median test MSE within 25%
    relative of the full-KPI MLP for both targets (3 seeds)."""
    medians = _median_mse(dataset, "full", FULL_SEEDS,
                          ("full_kpi_mlp", "hscore_tesn_mlp"))
    details = []
    ok = True
    for target in TARGETS:
        base = medians["full_kpi_mlp"][target]["mse"]
        tesn = medians["hscore_tesn_mlp"][target]["mse"]
        ratio = tesn / base
        details.append(f"{target}: ratio {ratio:.3f}")
        ok = ok and ratio <= 1.25
    assert _verdict(6, ok, "; ".join(details) + " (<=1.25)")


def test_criterion_7_dimension_sweep_shape(dataset):
    """mse(n=8) <= mse(n=2) for both targets, and mse(n=32) >= 0.8*mse(n=8)
    (diminishing returns), medians over 3 seeds."""
    rows = pipeline.dim_sweep(dataset, SWEEP_DIMS, TrainConfig(regime="limited"),
                              seeds=SWEEP_SEEDS)
    mse = {(r["n"], r["target"]): r["mse_median"] for r in rows}
    details = []
    ok = True
    for target in TARGETS:
        a, b, c = mse[(2, target)], mse[(8, target)], mse[(32, target)]
        details.append(f"{target}: n2={a:.4f} n8={b:.4f} n32={c:.4f}")
        ok = ok and (b <= a) and (c >= 0.8 * b)
    assert _verdict(7, ok, "; ".join(details))


def test_criterion_8_benchmark_determinism(tmp_path):
    """Two CLI benchmark runs with identical config and seed produce
    byte-identical reports."""
    cfg = {
        "data": {"source": "synth", "synth": {"n_samples": 600, "seed": 0}},
        "model": {"d_model": 8, "n_heads": 2, "d_ff": 16, "n_layers": 1, "n_res": 16},
        "train": {"regime": "limited", "batch_size": 32},
        "seeds": [7],
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    payloads = []
    for name in ("a", "b"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "kpiembed.cli", "benchmark", "--config",
             str(cfg_path), "--out", str(out)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        payloads.append((out / "report.json").read_bytes())
    ok = payloads[0] == payloads[1]
    assert _verdict(8, ok, f"report.json byte-identical across reruns "
                           f"({len(payloads[0])} bytes)")
