"""Acceptance criteria, one test each; the terminal summary prints one PASS/FAIL line per criterion."""

import datetime as dt
import math
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topoformer.autograd import Tensor, grad_check
from topoformer.benchmarks import SMALL_CONFIGS, micro_overfit, synthetic_benchmark
from topoformer.cli import main
from topoformer.data import (
    NormStats,
    anchor_chainage,
    first_downward_crossing,
    make_example,
    normalize_split,
    preprocess,
    split,
    split_sizes,
)
from topoformer.layers import ConvLSTM1DCell, Dense, LayerNorm, MultiHeadAttention, TransformerBlock
from topoformer.metrics import (
    PUBLISHED_MAPE_Q75,
    PUBLISHED_TABLE,
    ReferencePredictor,
    average_reference_profile,
    box_stats,
    evaluate_ood,
    mae,
    mape,
    rmse,
)
from topoformer.models import VARIANTS, build_model, build_topoformer, count_params
from topoformer.synthetic import generate_synthetic
from topoformer.training import Adam, TrainConfig, fit, mae_loss

ROOT = Path(__file__).resolve().parents[1]


def rng(seed):
    return np.random.default_rng(seed)


def weighted(module, shape, seed):
    """Scalar loss sum(module(x) * w) with a fixed random w, plus the tensors to check."""
    x = Tensor(rng(seed).normal(size=shape), requires_grad=True)
    out_shape = module(x).shape
    w = Tensor(rng(seed + 1).normal(size=out_shape))
    return (lambda x, *p: (module(x) * w).sum()), [x] + module.parameters()


# ---------------------------------------------------------------- 1


def test_criterion_01_gradient_correctness(record_property):
    start = time.perf_counter()
    worst = {}
    norm = LayerNorm(6)
    norm.gamma.data = rng(1).normal(size=6)
    norm.beta.data = rng(2).normal(size=6)
    cell = ConvLSTM1DCell(2, 3, 3, rng(3))
    cases = {
        "dense": weighted(Dense(5, 4, rng(4)), (3, 5), 10),
        "layer_norm": weighted(norm, (3, 6), 12),
        "attention": weighted(MultiHeadAttention(8, 2, rng(5)), (4, 8), 14),
        "transformer_block": weighted(TransformerBlock(8, 2, 4, 3, 3, rng(6)), (4, 8), 16),
    }
    x = Tensor(rng(18).normal(size=(2, 3, 2, 5)), requires_grad=True)
    w = Tensor(rng(19).normal(size=(2, 3, 3, 5)))
    cases["convlstm_cell"] = (lambda x, *p: (cell.scan(x) * w).sum()), [x] + cell.parameters()
    for name, (f, inputs) in cases.items():
        worst[name] = grad_check(f, inputs, step=1e-6).max_relative_error
    micro = build_model("topoformer", dict(d_model=8, num_heads=2, num_blocks=1, convlstm_hidden_channels=2,
                                           mlp_hidden_1=8, mlp_hidden_2=8), seed=7)
    xb, yb = rng(20).normal(size=(2, 180)), rng(21).normal(size=(2, 20))
    report = grad_check(lambda *p: mae_loss(micro(xb), yb), micro.parameters(), step=1e-6, max_elements=4, seed=1)
    worst["micro_topoformer"] = report.max_relative_error
    elapsed = time.perf_counter() - start
    record_property("detail", f"max rel err {max(worst.values()):.2e}, {elapsed:.1f} s")
    assert all(err < 1e-4 for err in worst.values()), worst
    assert elapsed < 60.0


# ---------------------------------------------------------------- 2


def test_criterion_02_architecture_structure(record_property):
    model = build_topoformer()
    n = count_params(model)
    record_property("detail", f"{n:,} parameters")
    assert len(model.blocks) == 6
    assert all(len(block.convlstm.cells) == 4 for block in model.blocks)
    assert len(model.mlp) == 2
    assert 647_000 <= n <= 875_000


# ---------------------------------------------------------------- 3


def test_criterion_03_data_contract(record_property):
    survey = generate_synthetic(3, 40, seed=7)
    datums = survey.datums_by_site()
    worst_anchor = 0.0
    for raw in survey.profiles:
        anchored = anchor_chainage(raw)
        _, c0 = first_downward_crossing(anchored.chainage, anchored.elevation, 0.0)
        worst_anchor = max(worst_anchor, abs(c0))
    prepared = preprocess(survey.profiles, datums)
    assert len(prepared.complete) == 120
    worst_datum = 0.0
    for p in prepared.complete:
        d = datums[p.site_id]
        worst_datum = max(worst_datum, abs(p.elevation[79] - d.mlwn_m), abs(p.elevation[99] - d.mlws_m))
        ex = make_example(p)
        assert ex.input.shape == (180,) and ex.target.shape == (20,)
        assert np.all(np.isfinite(ex.input))
    record_property("detail", f"anchor {worst_anchor:.1e} m, datum {worst_datum:.1e} m")
    assert worst_anchor < 1e-9 and worst_datum < 1e-9


# ---------------------------------------------------------------- 4


def _keyed(n):
    day = dt.date(2000, 1, 1)
    return [type("Item", (), {"key": ("s", day + dt.timedelta(days=i)), "site_id": "s"})() for i in range(n)]


@settings(max_examples=100, deadline=None)
@given(st.integers(10, 5000), st.integers(0, 2**32 - 1))
def _partition_property(n, seed):
    items = _keyed(n)
    a, b = split(items, seed), split(items, seed)
    assert (len(a.train), len(a.val), len(a.test)) == split_sizes(n)
    keys = [x.key for x in a.train + a.val + a.test]
    assert len(set(keys)) == n and set(keys) == {x.key for x in items}
    assert [x.key for x in a.train + a.val + a.test] == [x.key for x in b.train + b.val + b.test]


def test_criterion_04_split(record_property):
    s = split(_keyed(1366), seed=7)
    sizes = (len(s.train), len(s.val), len(s.test))
    record_property("detail", f"1366 -> {sizes[0]}/{sizes[1]}/{sizes[2]}")
    assert sizes == (956, 273, 137)
    _partition_property()


# ---------------------------------------------------------------- 5


def test_criterion_05_optimizer_oracle(record_property):
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], learning_rate=0.1)
    trajectory = []
    for _ in range(2):
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step()
        trajectory.append(float(p.data[0]))
    assert abs(trajectory[0] - 0.9000000005) < 1e-12
    assert abs(trajectory[1] - 0.8004122286917927) < 1e-12
    worst = 0.0
    r = rng(0)
    for _ in range(1000):
        g = r.choice([-1, 1]) * 10 ** r.uniform(-1, 3)
        lr = 10 ** r.uniform(-5, -1)
        q = Tensor(np.array([0.0]), requires_grad=True)
        Adam([q], learning_rate=lr).step([np.array([g])])
        worst = max(worst, abs(abs(q.data[0]) - lr) / lr)
    record_property("detail", f"p2 = {trajectory[1]!r}, first-step rel gap {worst:.1e}")
    assert worst < 1e-6


# ---------------------------------------------------------------- 6


def test_criterion_06_micro_overfit(record_property):
    start = time.perf_counter()
    results = {}
    for variant in sorted(VARIANTS):
        report = micro_overfit(variant)
        results[variant] = (report.epochs_run, report.final_train_mae)
    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(f"{v} {e} ep" for v, (e, _) in results.items()) + f"; {elapsed:.0f} s")
    for variant, (epochs, final) in results.items():
        assert final < 0.01 and epochs <= 2000, (variant, epochs, final)
    assert elapsed < 300.0


# ---------------------------------------------------------------- 7


@pytest.fixture(scope="module")
def benchmark_runs():
    return [synthetic_benchmark() for _ in range(2)]


def test_criterion_07_end_to_end_benchmark(benchmark_runs, record_property):
    first, second = benchmark_runs
    report = first.report
    summary = ", ".join(f"{r.name} {r.mae_m:.4f}" for r in report.rows)
    record_property("detail", f"test MAE m: {summary}")
    assert [r.name for r in report.rows] == [r.name for r in second.report.rows]
    for a, b in zip(report.rows, second.report.rows):
        assert a.predictions_m.tobytes() == b.predictions_m.tobytes()
    for variant, training in first.training.items():
        assert training.epochs_run <= 200
        assert training.history == second.training[variant].history
    for r in report.rows:
        assert r.rmse_m >= r.mae_m
    assert report.row("topoformer").mae_m < report.row("average_reference").mae_m


# ---------------------------------------------------------------- 8


def test_criterion_08_ood_protocol(record_property):
    survey = generate_synthetic(3, 10, seed=7, truncate_fraction=0.2)
    datums = survey.datums_by_site()
    prepared = preprocess(survey.profiles, datums)
    raw = split([make_example(p) for p in prepared.complete], 7)
    data, stats = normalize_split(raw)
    models = {}
    for variant in ("topoformer", "lstm", "convlstm"):
        model = build_model(variant, SMALL_CONFIGS[variant], seed=1)
        fit(model, data, TrainConfig(batch_size=8, max_epochs=3, seed=2))
        models[variant] = model
    truth_mae = []
    rows = 0
    for site in sorted(datums):
        history = [p for p in prepared.complete if p.site_id == site]
        reference = average_reference_profile(history)
        targets = [p for p in prepared.truncated if p.site_id == site]
        candidates = dict(models, average_reference=ReferencePredictor({site: reference}))
        report = evaluate_ood(candidates, targets, reference, stats, survey.withheld)
        for name, pred in report.predictions_m.items():
            assert pred.shape == (len(targets), 20) and np.all(np.isfinite(pred))
        for row in report.rows:
            rows += 1
            if row.model == "average_reference":
                assert row.deviation_mae_m == 0.0
            if row.model == "topoformer":
                assert math.isfinite(row.truth_mae_m)
                truth_mae.append(row.truth_mae_m)
    record_property("detail", f"{len(truth_mae)} OOD surveys, TopoFormer truth MAE {np.mean(truth_mae):.3f} m")
    assert len(truth_mae) == 6 and rows == 6 * 4


# ---------------------------------------------------------------- 9


def test_criterion_09_metric_oracles(record_property):
    truth = np.array([0.5, -1.0, 2.0, 0.0])
    pred = truth + np.array([3.0, 4.0, 0.0, 0.0])
    assert abs(mae(pred, truth) - 1.75) < 1e-12 and abs(rmse(pred, truth) - 2.5) < 1e-12
    assert abs(mape([1.9], [2.0]) - 5.0) < 1e-12 and mape(truth, truth) == 0.0
    assert math.isfinite(mape([1.0], [0.0]))
    s = box_stats([1, 2, 3, 4])
    assert abs(s.q25 - 1.75) < 1e-12 and abs(s.median - 2.5) < 1e-12 and abs(s.q75 - 3.25) < 1e-12
    r = rng(9)
    for _ in range(10_000):
        n = int(r.integers(1, 25))
        p, t = r.normal(size=n) * 3, r.normal(size=n)
        assert rmse(p, t) >= mae(p, t) - 1e-15
    readme = (ROOT / "README.md").read_text()
    assert PUBLISHED_TABLE["TopoFormer"][:2] == (0.021, 0.026) and PUBLISHED_MAPE_Q75["TopoFormer"] == 1.6748
    for value in ("0.021", "0.026", "1.6748"):
        assert value in readme
    assert "context" in readme.lower()
    record_property("detail", "fixtures exact, 10^4 pairs, published values documented")


# ---------------------------------------------------------------- 10


def _csvs(directory: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(directory.glob("*.csv"))}


def test_criterion_10_reproducibility(tmp_path, record_property):
    tiny = ["--set", "model.d_model=8", "--set", "model.num_heads=2", "--set", "model.num_blocks=1",
            "--set", "model.convlstm_hidden_channels=2", "--set", "model.mlp_hidden_1=8",
            "--set", "model.mlp_hidden_2=8", "--set", "train.max_epochs=2", "--set", "train.batch_size=8"]
    first = {name: tmp_path / "a" / name for name in ("data", "train", "eval", "ood")}
    assert main(["generate", "--sites", "3", "--profiles-per-site", "10", "--seed", "11",
                 "--truncate-fraction", "0.2", "--out", str(first["data"])]) == 0
    assert main(["train", "--data", str(first["data"]), "--out", str(first["train"]), "--seed", "11", *tiny]) == 0
    ckpt = str(first["train"] / "model.ckpt")
    assert main(["evaluate", "--checkpoints", ckpt, "--data", str(first["data"]), "--include-reference",
                 "--out", str(first["eval"])]) == 0
    assert main(["predict-ood", "--checkpoint", ckpt, "--data", str(first["data"]), "--site", "site01",
                 "--out", str(first["ood"])]) == 0
    compared = 0
    for command, name in (("generate", "data"), ("train", "train"), ("evaluate", "eval"), ("predict-ood", "ood")):
        again = tmp_path / "b" / name
        assert main([command, "--config", str(first[name] / "config.json"), "--out", str(again)]) == 0
        original, rerun = _csvs(first[name]), _csvs(again)
        assert original and original == rerun, command
        compared += len(original)
    record_property("detail", f"{compared} CSV files bitwise identical across 4 commands")
