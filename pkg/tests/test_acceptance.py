"""One test per acceptance criterion; each records a PASS/FAIL line that the
terminal summary prints after the run."""
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from cxrnet import layers as L
from cxrnet.convlstm_se import ConvLSTM, ConvLSTMState, SqueezeExcite, convlstm_step, se_forward
from cxrnet.data import gen_synthetic, load_dataset
from cxrnet.metrics import confusion_matrix, metrics_from_confusion, roc_one_vs_rest
from cxrnet.model import FLOP_CONVENTION, PUBLISHED_FLOPS, PUBLISHED_PARAMS, assemble_proposed, count_flops
from cxrnet.modules import BatchNorm2d, Conv2d, Linear
from cxrnet.regnet import RegNetSpec, generate_widths
from cxrnet.tensor import Rng, Tensor, grad_check
from cxrnet.train import AdamState, TrainConfig, adam_step, fit, split_dataset
from conftest import ACCEPTANCE_LINES, t64, weighted_sum
from test_layers import conv_loop_oracle, random_conv_case
from test_metrics import pair_count_auc
from test_regnet import brute_force_widths


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def test_criterion_1_width_plan():
    t0 = time.perf_counter()
    plan = generate_widths(RegNetSpec(d=13, w0=24, wa=36.44, wm=2.49, b=1, g=8))
    w, widths, depths = brute_force_widths(13, 24, 36.44, 2.49, 8)
    elapsed = time.perf_counter() - t0
    ok = (plan.stage_widths == widths == [24, 56, 152, 368] and plan.stage_depths == depths == [1, 1, 4, 7]
          and plan.w == w and elapsed < 1.0)
    assert record(1, "width plan", ok, f"widths={plan.stage_widths} depths={plan.stage_depths} "
                                       f"brute_force_match={plan.w == w} time={elapsed:.3f}s")


def test_criterion_2_parameter_reconciliation():
    t0 = time.perf_counter()
    rep = count_flops(assemble_proposed((3, 224, 224), 3))
    elapsed = time.perf_counter() - t0
    expected = {"fc1": 102_768_640, "fc2": 16_781_312, "fc3": 16_781_312, "convlstm": 1_804_288, "se": 33_312}
    got = {k: rep.row(k).params for k in expected}
    dev = (rep.total_params - PUBLISHED_PARAMS) / PUBLISHED_PARAMS
    mismatches = [f"{k} expected {expected[k]:,} got {got[k]:,}" for k in expected if got[k] != expected[k]]
    ok = abs(dev) <= 0.01 and not mismatches and elapsed < 5.0
    detail = (f"total={rep.total_params:,} ({100 * dev:+.4f}% vs {PUBLISHED_PARAMS:,}) time={elapsed:.2f}s; "
              + ("; ".join(mismatches) if mismatches else "all sub-totals exact"))
    assert record(2, "parameter reconciliation", ok, detail)


def test_criterion_3_flop_oracle():
    t0 = time.perf_counter()
    cases = [
        (Conv2d(16, 32, 3, stride=2, padding=1, groups=2), (16, 9, 9), 2 * 25 * 32 * 8 * 9),
        (Conv2d(1, 1, 3), (1, 5, 5), 162),
        (BatchNorm2d(24), (24, 7, 5), 24 * 35),
        (Linear(4096, 4096), (4096,), 33_554_432),
        (ConvLSTM(368, 512), (368, 7, 7), 2 * 49 * 4 * 512 * 880 + 9 * 512 * 49),
    ]
    exact = [layer.flops(s, layer.out_shape(s)) == expect for layer, s, expect in cases]
    text = count_flops(assemble_proposed((3, 224, 224), 3)).to_csv()
    echoed = str(PUBLISHED_FLOPS) in text and FLOP_CONVENTION in text
    elapsed = time.perf_counter() - t0
    ok = all(exact) and echoed and elapsed < 1.0
    assert record(3, "FLOP counter oracle", ok, f"exact={sum(exact)}/5 reference_echoed={echoed} "
                                                f"time={elapsed:.3f}s")


def _grad_cases(rng):
    """Per-layer generators of (function, params) on randomised small shapes."""

    def conv():
        x, w, b, s, p, g = random_conv_case(rng)
        probe = rng.normal(size=conv_loop_oracle(x, w, b, s, p, g).shape)
        params = [t64(x), t64(w)] + ([] if b is None else [t64(b)])
        return (lambda x, w, b=None: weighted_sum(L.conv2d(x, w, b, s, p, g), probe)), params

    def batchnorm():
        c = int(rng.integers(1, 4))
        shape = (int(rng.integers(2, 4)), c, int(rng.integers(1, 4)), int(rng.integers(2, 4)))
        training = bool(rng.random() < 0.5)
        rm, rv = t64(rng.normal(size=c), False), t64(rng.random(c) + 0.5, False)
        probe = rng.normal(size=shape)
        f = lambda x, g, b: weighted_sum(L.batchnorm(x, g, b, rm, rv, training), probe)
        return f, [t64(rng.normal(size=shape)), t64(rng.normal(size=c)), t64(rng.normal(size=c))]

    def fc():
        n, i, o = (int(v) for v in rng.integers(1, 6, size=3))
        probe = rng.normal(size=(n, o))
        f = lambda x, w, b: weighted_sum(L.fc(x, w, b), probe)
        return f, [t64(rng.normal(size=(n, i))), t64(rng.normal(size=(o, i))), t64(rng.normal(size=o))]

    def activation(op):
        def make():
            shape = tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4))))
            probe = rng.normal(size=shape)
            return (lambda x: weighted_sum(op(x), probe)), [t64(rng.normal(size=shape) * 2)]
        return make

    def lstm():
        in_ch, hidden = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        k = int(rng.choice([1, 3]))
        hw = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        p = ConvLSTM(in_ch, hidden, k).initialize(Rng(int(rng.integers(0, 2**31))), dtype=np.float64)
        n = int(rng.integers(1, 3))
        ph, pc = rng.normal(size=(2, n, hidden) + hw)

        def f(x, h0, c0, *_):
            s = convlstm_step(x, ConvLSTMState(h0, c0), p)
            return weighted_sum(s.h, ph) + weighted_sum(s.c, pc)

        return f, [t64(rng.normal(size=(n, in_ch) + hw)), t64(rng.normal(size=(n, hidden) + hw)),
                   t64(rng.normal(size=(n, hidden) + hw))] + p.parameters()

    def se():
        r = int(rng.integers(1, 4))
        ch = r * int(rng.integers(1, 4))
        p = SqueezeExcite(ch, r).initialize(Rng(int(rng.integers(0, 2**31))), dtype=np.float64)
        shape = (int(rng.integers(1, 3)), ch, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        probe = rng.normal(size=shape)
        return (lambda x, *_: weighted_sum(se_forward(x, p), probe)), [t64(rng.normal(size=shape))] + p.parameters()

    def xent():
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        y = np.eye(k)[rng.integers(0, k, size=n)]
        return (lambda z: L.softmax_xent(z, y)[0]), [t64(rng.normal(size=(n, k)) * 3)]

    return {"grouped_conv": conv, "batchnorm": batchnorm, "fc": fc, "relu": activation(L.relu),
            "sigmoid": activation(L.sigmoid), "tanh": activation(L.tanh_act), "convlstm_step": lstm,
            "se_block": se, "softmax_xent": xent}


def test_criterion_4_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = {}
    for name, make in _grad_cases(rng).items():
        worst[name] = max(grad_check(f, params) for f, params in (make() for _ in range(20)))
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-4 for e in worst.values()) and elapsed < 120
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    assert record(4, "gradient suite (20 shapes per layer)", ok, f"max rel err: {detail} time={elapsed:.1f}s")


def test_criterion_5_brute_force_equivalences():
    rng = np.random.default_rng(5)
    conv_err = 0.0
    for _ in range(50):
        x, w, b, s, p, g = random_conv_case(rng)
        got = L.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), s, p, g).data
        ref = conv_loop_oracle(x, w, b, s, p, g)
        conv_err = max(conv_err, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12))))
    auc_err = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 201))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        pos = rng.random(n) < rng.uniform(0.1, 0.9)
        pos[0], pos[1] = True, False
        auc_err = max(auc_err, abs(roc_one_vs_rest(scores, pos).auc - pair_count_auc(scores, pos)))
    m = metrics_from_confusion(np.array([[8, 2], [3, 7]]))
    conf = confusion_matrix([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 2, 0], 3)
    metrics_exact = (m.precision[0] == 8 / 11 and m.recall[0] == 8 / 10 and m.f1[0] == 2 * (8 / 11) * 0.8 / (8 / 11 + 0.8)
                     and conf.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 2]])
    ok = conv_err <= 1e-5 and auc_err <= 1e-12 and metrics_exact
    assert record(5, "brute-force equivalences", ok, f"conv max rel err={conv_err:.1e} (50 cases) "
                                                     f"auc max err={auc_err:.1e} (50 cases) metrics_exact={metrics_exact}")


def test_criterion_6_analytic_fixed_points():
    loss, _ = L.softmax_xent(Tensor(np.zeros((5, 3))), np.eye(3)[[0, 1, 2, 1, 0]])
    xent_ok = abs(float(loss.data) - math.log(3)) <= 1e-6

    se = SqueezeExcite(32, 16).initialize(Rng(1), dtype=np.float64)
    for _, t in se.named_parameters():
        t.data[:] = 0
    x = np.random.default_rng(6).normal(size=(2, 32, 3, 3))
    se_ok = np.array_equal(se_forward(Tensor(x), se).data, 0.5 * x)

    lstm = ConvLSTM(4, 6).initialize(Rng(2), dtype=np.float64)
    for _, t in lstm.named_parameters():
        t.data[:] = 0
    xt = Tensor(x[:, :4])
    lstm_ok = not np.any(convlstm_step(xt, lstm.zero_state(xt), lstm).h.data)

    p = np.random.default_rng(7).normal(size=10)
    new, _ = adam_step(p, np.zeros(10), AdamState.zeros_like(p), TrainConfig())
    adam_ok = np.array_equal(new, p)
    ok = xent_ok and se_ok and lstm_ok and adam_ok
    assert record(6, "analytic fixed points", ok, f"xent=ln3:{xent_ok} se_half:{se_ok} "
                                                  f"convlstm_zero:{lstm_ok} adam_identity:{adam_ok}")


def test_criterion_7_split_arithmetic():
    a = tuple(len(s) for s in split_dataset(4575, (0.68, 0.16, 0.16)))
    b = tuple(len(s) for s in split_dataset(6140, (0.72, 0.08, 0.20)))
    ok = a == (3111, 732, 732) and b == (4420, 491, 1229)
    assert record(7, "split arithmetic", ok, f"4575 -> {a}, 6140 -> {b}")


@pytest.mark.slow
def test_criterion_8_end_to_end_overfit(tmp_path):
    t0 = time.perf_counter()
    gen_synthetic(tmp_path, classes=3, per_class=10, size=64, seed=3)
    x, y, _ = load_dataset(tmp_path / "manifest.csv", size=64)
    cfg = TrainConfig(learning_rate=4e-4, epochs=30, seed=3)
    logs = []
    for _ in range(2):
        g = assemble_proposed(scale="desk", classes=3)
        logs.append(fit(g, (x, y), cfg))
    elapsed = time.perf_counter() - t0
    acc = logs[0].accuracies
    first = next((i + 1 for i, a in enumerate(acc) if a == 1.0), None)
    identical = logs[0].to_csv() == logs[1].to_csv()
    ok = first is not None and identical and elapsed < 600
    assert record(8, "end-to-end overfit", ok, f"first epoch at 100% train accuracy={first} "
                                               f"final loss={logs[0].losses[-1]:.3g} bit_identical_logs={identical} "
                                               f"time={elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_9_cli_reproducibility(tmp_path):
    data = tmp_path / "data"
    gen_synthetic(data, classes=3, per_class=4, size=64, seed=3)
    outputs = []
    for run in ("a", "b"):
        argv = [sys.executable, "-m", "cxrnet", "train", "--manifest", str(data / "manifest.csv"),
                "--out", str(tmp_path / run), "--input-size", "64", "--epochs", "2", "--batch-size", "4",
                "--seed", "3"]
        subprocess.run(argv, check=True, capture_output=True)
        outputs.append({f: (tmp_path / run / f).read_bytes() for f in ("weights.bin", "train_log.csv")})
    same = {f: outputs[0][f] == outputs[1][f] for f in outputs[0]}
    ok = all(same.values())
    assert record(9, "CLI reproducibility", ok, " ".join(f"{f} identical={v}" for f, v in same.items()))
