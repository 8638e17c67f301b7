"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line."""

import csv
import io
import json
import math
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from sensorcal import data
from sensorcal.binning import bin_layout
from sensorcal.cli import main, run_ablation
from sensorcal.metrics import count_flops, count_params, count_params_enumerated
from sensorcal.model import CalibrationModel, ModelConfig, param_shapes
from sensorcal.numerics import finite_diff_grad, layer_norm, softmax_rows
from sensorcal.training import TrainConfig, evaluate, train


def verdict(number, name, ok, detail, seconds, budget):
    ok = ok and seconds < budget
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail} ({seconds:.2f}s, budget {budget:g}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_01_bin_layout_fidelity():
    t0 = time.perf_counter()
    out = io.StringIO()
    with redirect_stdout(out):
        code = main(["bins", "--n", "12", "--out", "/tmp/sensorcal-acceptance-bins"])
    alpha = tuple(json.loads(out.getvalue().strip().splitlines()[-1])["alpha"])
    verdict(1, "bin layout n=12", code == 0 and alpha == (1, 6, 10, 12, 13), f"alpha={alpha}", time.perf_counter() - t0, 1)


def test_02_partition_sweep():
    t0 = time.perf_counter()
    bad = []
    for n in range(2, 4097):
        layout = bin_layout(n)
        tokens = [tok for a, b in zip(layout.alpha[:-1], layout.alpha[1:]) for tok in range(a, b)]
        if tokens != list(range(1, n + 1)) or (n >= 3 and layout.widths[-1] != 1):
            bad.append(n)
    verdict(2, "partition sweep n in [2, 4096]", not bad, f"{len(bad)} bad layouts", time.perf_counter() - t0, 5)


def _max_gradient_error(config, seed):
    """Worst ratio of |analytic - central difference| to the allowed error over every coordinate."""
    rng = np.random.default_rng(seed)
    params = {k: rng.normal(scale=0.5, size=s) for k, s in param_shapes(config).items()}
    model = CalibrationModel(config, params, None)
    s = rng.normal(size=(4, config.n))
    y = rng.normal(size=4)
    _, grads, _ = model.loss_and_grads(s, y)
    worst = 0.0
    for name, p in params.items():

        def f(t, name=name):
            saved = model.params[name]
            model.params[name] = t
            try:
                return model.loss_and_grads(s, y)[0]
            finally:
                model.params[name] = saved

        fd = finite_diff_grad(f, p.copy(), 1e-5)
        allowed = np.maximum(1e-4 * np.maximum(np.abs(fd), np.abs(grads[name])), 1e-8)
        worst = max(worst, float(np.max(np.abs(grads[name] - fd) / allowed)))
    return worst


def test_03_gradient_correctness():
    t0 = time.perf_counter()
    configs = [
        ModelConfig(n=12, d=8, heads=2, binning=b, embedding=e, aggregator=a, embedding_bias=bias)
        for b in ("log", "uniform")
        for e in ("local_global", "local")
        for a in ("linear", "ffn")
        for bias in (False, True)
    ]
    worst = max(_max_gradient_error(c, seed) for c in configs for seed in (0, 1, 2))
    verdict(
        3, "gradient check, 16 configurations x 3 seeds", worst <= 1.0,
        f"worst error / tolerance = {worst:.3f}", time.perf_counter() - t0, 60,
    )  # fmt: skip


def test_04_attention_complexity():
    t0 = time.perf_counter()

    def flops(variant, n):
        return count_flops(ModelConfig(variant=variant, n=n, d=64, heads=4))

    tesla = flops("tesla", 1440).attention_core / flops("tesla", 360).attention_core
    vanilla = flops("transformer", 1440).attention_scores / flops("transformer", 360).attention_scores
    verdict(
        4, "attention FLOPs n=1440 vs n=360", tesla <= 2.0 and vanilla == 16.0,
        f"tesla core ratio {tesla:.4f}, vanilla score ratio {vanilla:g}", time.perf_counter() - t0, 1,
    )  # fmt: skip


def test_05_parameter_accounting():
    t0 = time.perf_counter()
    configs = [ModelConfig(variant=v, n=12, d=8, heads=2) for v in ("linear", "nlinear", "dlinear", "transformer")]
    configs += [
        ModelConfig(n=12, d=8, heads=2, binning=b, embedding=e, aggregator=a, embedding_bias=bias)
        for b in ("log", "uniform")
        for e in ("local_global", "local")
        for a in ("linear", "ffn")
        for bias in (False, True)
    ]
    mismatched = [c for c in configs if count_params(c) != count_params_enumerated(c)]
    reference = count_params(ModelConfig(n=12, d=8, heads=2))
    verdict(
        5, "parameter accounting", not mismatched and reference == 336,
        f"{len(mismatched)} mismatches of {len(configs)}; TESLA n=12 d=8 -> {reference}", time.perf_counter() - t0, 1,
    )  # fmt: skip


@pytest.mark.slow
def test_06_desk_scale_calibration(tmp_path):
    t0 = time.perf_counter()
    csv_path = data.synth_generate(1, 4, 20000, tmp_path / "sensors.csv")
    splits, _, _ = data.load_splits(csv_path, "pm10", 60)
    tcfg = TrainConfig(seed=1)
    tesla, _ = train(ModelConfig(n=60, embedding_bias=True), tcfg, splits["train"], splits["validation"])
    linear, _ = train(ModelConfig(variant="linear", n=60), tcfg, splits["train"], splits["validation"])
    rep = evaluate(tesla, *splits["test"])
    lin = evaluate(linear, *splits["test"])
    seconds = time.perf_counter() - t0
    ok = rep.rmse <= 0.7 * rep.raw_rmse and rep.rmse < lin.rmse
    verdict(
        6, "desk-scale calibration", ok,
        f"tesla {rep.rmse:.3f}, linear {lin.rmse:.3f}, raw {rep.raw_rmse:.3f} "
        f"({1 - rep.rmse / rep.raw_rmse:.1%} below raw)", seconds, 300,
    )  # fmt: skip


@pytest.mark.slow
def test_06_info_without_embedding_bias(desk_splits):
    # informational, not gated: the bias-free model loses the window level
    tesla, _ = train(ModelConfig(n=60), TrainConfig(seed=1), desk_splits["train"], desk_splits["validation"])
    rmse = evaluate(tesla, *desk_splits["test"], with_profile=False).rmse
    line = f"criterion  6 INFO  same run without the embedding bias: tesla test rmse {rmse:.3f}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.mark.slow
def test_07_ablation_grid(desk_csv, tmp_path):
    t0 = time.perf_counter()
    rows = run_ablation(desk_csv, ModelConfig(n=60), TrainConfig(seed=1))
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (tmp_path / "ablation.csv").write_text(out.getvalue())
    cells = {(r["binning"], r["embedding"], r["aggregator"]) for r in rows}
    finite = all(math.isfinite(r[k]) for r in rows for k in ("val_rmse", "test_rmse", "test_mae"))
    summary = ", ".join(f"{r['binning']}/{r['embedding']}/{r['aggregator']}={r['test_rmse']:.3f}" for r in rows)
    verdict(7, "ablation grid", len(cells) == 8 and finite, summary, time.perf_counter() - t0, 1800)


@pytest.mark.slow
def test_08_determinism(tmp_path):
    t0 = time.perf_counter()
    with redirect_stdout(io.StringIO()):
        main(["generate", "--seed", "2", "--sensors", "3", "--len", "3000", "--out", str(tmp_path)])
        for run in ("a", "b"):
            argv = ["train", "--data", str(tmp_path / "sensors.csv"), "--epochs", "2", "--seed", "7", "--out", str(tmp_path / run)]
            assert main(argv) == 0

    def values(run):
        # every column except the wall-clock seconds
        rows = list(csv.reader((tmp_path / run / "trace.csv").open()))
        return [r[:4] for r in rows]

    def checkpoint(run):
        payload = json.loads((tmp_path / run / "checkpoint.json").read_text())
        del payload["run_config"]["out"]  # the only intended difference
        return payload

    same_trace = values("a") == values("b")
    same_ckpt = checkpoint("a") == checkpoint("b")
    verdict(
        8, "determinism of two train runs", same_trace and same_ckpt,
        f"trace values identical={same_trace}, checkpoints identical={same_ckpt}", time.perf_counter() - t0, 600,
    )  # fmt: skip


def test_09_numeric_hygiene():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_sum, worst_mean, worst_var = 0.0, 0.0, 0.0
    for _ in range(200):
        rows, cols = rng.integers(1, 65, size=2)
        logits = rng.normal(0, rng.uniform(0.1, 30), size=(rows, cols))
        worst_sum = max(worst_sum, float(np.max(np.abs(softmax_rows(logits).sum(axis=1) - 1))))
        d = int(rng.integers(32, 257))
        m = rng.normal(rng.uniform(-100, 100), rng.uniform(10, 1000), size=(rows, d))
        out = layer_norm(m, np.ones((1, d)), np.zeros((1, d)))
        worst_mean = max(worst_mean, float(np.max(np.abs(out.mean(axis=1)))))
        worst_var = max(worst_var, float(np.max(np.abs(out.var(axis=1) - 1))))
    ok = worst_sum <= 1e-12 and worst_mean <= 1e-6 and worst_var <= 1e-6
    verdict(
        9, "softmax and layer norm hygiene", ok,
        f"softmax row-sum err {worst_sum:.1e}, LN mean err {worst_mean:.1e}, LN var err {worst_var:.1e}",
        time.perf_counter() - t0, 60,
    )  # fmt: skip


@pytest.mark.skip(reason="needs the SensEURCity Oslo recordings, which are not available offline")
def test_10_field_dataset():
    pass
