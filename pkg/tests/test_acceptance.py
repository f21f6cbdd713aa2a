"""Acceptance criteria, one test per criterion.

Each test carries a ``criterion`` marker; ``conftest.py`` prints a PASS/FAIL
line per criterion at the end of the run. Criteria 5 and 6 train the full
network and are marked ``slow``.
"""

import struct
import time

import numpy as np
import pytest

from demnet import metrics
from demnet import model as M
from demnet import tensor_ops as ops
from demnet.checkpoint import Checkpoint, CheckpointError, config_digest, load_checkpoint, save_checkpoint
from demnet.data import FormatError, WindowSpec, downsample, read_tile, sliding_windows, split, write_tile
from demnet.experiments import synthetic_split
from demnet.optimizer import AdamState, adam_step
from demnet.tensor_ops import SAME, VALID, ConvSpec
from demnet.trainer import TrainConfig, fit, train
from oracles import naive_conv2d, numeric_grad, rel_error


@pytest.fixture
def report(record_property):
    """Record a measured value; conftest prints it under the criterion line."""

    def _report(name, value, bound):
        line = f"{name}: {value:.6g} (bound {bound:.6g})"
        print("  " + line)
        record_property("measure", line)

    return _report


# ---------------------------------------------------------------------- 1


@pytest.mark.criterion(1, "shape conformance")
def test_criterion_1_shapes(report):
    t0 = time.perf_counter()
    arch = M.build_demnet()
    params = M.init_params(arch, 0, np.float32)
    x = np.random.default_rng(0).standard_normal((140, 140, 2)).astype(np.float32)
    out, cache = M.forward(params, x, arch)
    observed = {}
    for i, (layer, entry) in enumerate(zip(arch, cache)):
        if layer.kind == M.MAXPOOL:
            observed[layer.name] = cache[i + 1]["input"].shape
        else:
            observed[layer.name] = entry["pre"].shape
    assert out.shape == (140, 140, 1)
    assert len([l for l in arch if l.has_weights]) == 12
    assert observed == M.EXPECTED_OUTPUT_SHAPES
    elapsed = time.perf_counter() - t0
    report("seconds", elapsed, 5)
    assert elapsed < 5


# ---------------------------------------------------------------------- 2


def _layer_error(forward, backward, x, params, rng):
    out = forward(x, *params)
    r = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(forward(x, *params) * r))

    grads = backward(r, x, *params)
    errs = [rel_error(grads[0], numeric_grad(loss, x))]
    errs += [rel_error(g, numeric_grad(loss, p)) for p, g in zip(params, grads[1:])]
    return max(errs)


def _away_from_kinks(a):
    a[np.abs(a) < 1e-3] = 0.5
    return a


@pytest.mark.criterion(2, "gradient suite")
def test_criterion_2_gradients(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    errors = {}
    for padding in (SAME, VALID):
        spec = ConvSpec(3, 3, 2, 3, padding=padding)
        errors[f"conv {padding}"] = _layer_error(
            lambda x, w, b: ops.conv2d_forward(x, w, b, spec),
            lambda g, x, w, b: ops.conv2d_backward(g, x, w, spec),
            rng.standard_normal((6, 5, 2)), [rng.standard_normal(spec.conv_weight_shape), rng.standard_normal(3)], rng)
    for stride, op in ((1, 0), (4, 1)):
        spec = ConvSpec(3, 3, 2, 3, stride, stride, VALID, op)
        errors[f"tconv stride {stride}"] = _layer_error(
            lambda x, w, b: ops.tconv2d_forward(x, w, b, spec),
            lambda g, x, w, b: ops.tconv2d_backward(g, x, w, spec),
            rng.standard_normal((3, 4, 2)), [rng.standard_normal(spec.tconv_weight_shape), rng.standard_normal(3)], rng)
    xp = rng.permutation(8 * 8 * 3).reshape(8, 8, 3) / 7.0
    errors["maxpool"] = _layer_error(
        lambda x: ops.maxpool_forward(x)[0],
        lambda g, x: (ops.maxpool_backward(g, ops.maxpool_forward(x)[1], x.shape),), xp, [], rng)
    errors["relu"] = _layer_error(ops.relu, lambda g, x: (ops.relu_backward(g, x),),
                                  _away_from_kinks(rng.standard_normal((5, 5, 2))), [], rng)
    errors["prelu"] = _layer_error(ops.prelu, ops.prelu_backward, _away_from_kinks(rng.standard_normal((5, 5, 3))),
                                   [rng.uniform(0.1, 0.4, 3)], rng)

    pred, gt = rng.standard_normal((2, 6, 6, 1)), rng.standard_normal((2, 6, 6, 1))
    weights = {"Conv1/weight": rng.standard_normal((3, 3, 2, 2)), "Conv1/bias": rng.standard_normal(2)}

    def objective():
        return metrics.mse(pred, gt) + M.l2_penalty(weights, 0.01)

    g_l2 = M.l2_grad(weights, 0.01)
    errors["mse+l2 (prediction)"] = rel_error(metrics.mse_grad(pred, gt), numeric_grad(objective, pred))
    errors["mse+l2 (weights)"] = max(rel_error(g_l2[k], numeric_grad(objective, v)) for k, v in weights.items())

    for name, err in errors.items():
        report(name, err, 1e-6)
    elapsed = time.perf_counter() - t0
    report("seconds", elapsed, 60)
    assert max(errors.values()) < 1e-6
    assert elapsed < 60


# ---------------------------------------------------------------------- 3


@pytest.mark.criterion(3, "oracle equivalence")
def test_criterion_3_oracles(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_conv = 0.0
    for _ in range(200):
        h, w = rng.integers(1, 8, size=2)
        cin, cout = rng.integers(1, 4, size=2)
        kh, kw = rng.integers(1, h + 1), rng.integers(1, w + 1)
        stride = int(rng.integers(1, 3))
        padding = SAME if rng.random() < 0.5 else VALID
        spec = ConvSpec(int(kh), int(kw), int(cin), int(cout), stride, stride, padding)
        x = rng.standard_normal((h, w, cin))
        wt, b = rng.standard_normal(spec.conv_weight_shape), rng.standard_normal(cout)
        worst_conv = max(worst_conv, rel_error(ops.conv2d_forward(x, wt, b, spec),
                                               naive_conv2d(x, wt, b, stride, padding)))
    worst_adjoint = 0.0
    for _ in range(200):
        cin, cout = rng.integers(1, 4, size=2)
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 5))
        op = int(rng.integers(0, stride))
        tspec = ConvSpec(k, k, int(cout), int(cin), stride, stride, VALID, op)
        n = int(rng.integers(1, 6))
        y = rng.standard_normal((n, n, cout))
        wt = rng.standard_normal(tspec.tconv_weight_shape)
        big = tspec.tconv_output_hw(n, n)
        x = rng.standard_normal((*big, cin))
        cspec = ConvSpec(k, k, int(cin), int(cout), stride, stride, VALID)
        lhs = float(np.sum(ops.conv2d_forward(x, wt, np.zeros(cout), cspec) * y))
        rhs = float(np.sum(x * ops.tconv2d_forward(y, wt, np.zeros(cin), tspec)))
        worst_adjoint = max(worst_adjoint, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    elapsed = time.perf_counter() - t0
    report("conv vs naive loop", worst_conv, 1e-10)
    report("adjoint identity", worst_adjoint, 1e-10)
    report("seconds", elapsed, 30)
    assert worst_conv < 1e-10
    assert worst_adjoint < 1e-10
    assert elapsed < 30


# ---------------------------------------------------------------------- 4


@pytest.mark.criterion(4, "Adam unit")
def test_criterion_4_adam(report):
    p, _ = adam_step({"w": np.zeros(1)}, {"w": np.ones(1)}, AdamState.fresh({"w": np.zeros(1)}))
    err = abs(p["w"][0] - (-0.001 / (1 + 1e-8)))
    report("step-1 error", err, 1e-12)
    assert err < 1e-12
    w = np.array([0.3, -1.2])
    p, state = adam_step({"w": w}, {"w": np.zeros(2)}, AdamState.fresh({"w": w}))
    np.testing.assert_array_equal(p["w"], w)
    assert not state.m["w"].any() and not state.v["w"].any()


# ---------------------------------------------------------------------- 5


@pytest.mark.slow
@pytest.mark.criterion(5, "overfit 8 samples")
def test_criterion_5_overfit(report):
    train_set, _, _ = synthetic_split(range(100, 108))
    arch = M.build_demnet()
    params = M.init_params(arch, 0, np.float32)
    first = []

    def stop(entry, _p, _s):
        if not first:
            first.append(entry.train_rmse)
        if entry.epoch % 25 == 0:
            print(f"  epoch {entry.epoch}: train RMSE {entry.train_rmse:.2f} m")
        return entry.train_rmse < 0.05 * first[0]

    t0 = time.perf_counter()
    _, _, history = fit(params, train_set, TrainConfig(epochs=500), arch, on_epoch=stop)
    elapsed = time.perf_counter() - t0
    final = history[-1].train_rmse
    report("epoch-1 train RMSE [m]", first[0], first[0])
    report(f"train RMSE at epoch {history[-1].epoch} [m]", final, 0.05 * first[0])
    report("minutes (desktop budget)", elapsed / 60, 20)
    assert final < 0.05 * first[0]


# ---------------------------------------------------------------------- 6


@pytest.mark.slow
@pytest.mark.criterion(6, "generalization sanity")
def test_criterion_6_generalization(report):
    train_set, test_set, _ = synthetic_split(range(0, 200), range(10_000, 10_100))
    arch = M.build_demnet()
    params = M.init_params(arch, 0, np.float32)

    def progress(entry, _p, _s):
        if entry.epoch % 10 == 0:
            print(f"  epoch {entry.epoch}: train RMSE {entry.train_rmse:.2f} m, test RMSE {entry.test_rmse:.2f} m")

    t0 = time.perf_counter()
    _, _, history = fit(params, train_set, TrainConfig(epochs=100, eval_every=10), arch, test_set, on_epoch=progress)
    elapsed = time.perf_counter() - t0
    baseline = float(metrics.per_image_mean_baseline(test_set.targets).mean())
    test_rmse = history[-1].test_rmse
    report("test RMSE [m]", test_rmse, 0.8 * baseline)
    report("per-image mean baseline [m]", baseline, baseline)
    report("hours (desktop budget)", elapsed / 3600, 2)
    assert test_rmse <= 0.8 * baseline


# ---------------------------------------------------------------------- 7


@pytest.mark.criterion(7, "pipeline arithmetic")
def test_criterion_7_pipeline(report):
    assert len(sliding_windows(12000, 20000, WindowSpec(4000, 100))) == 13041
    tr, te = split(100, 0.65, seed=0)
    assert (len(tr), len(te)) == (65, 35)
    x = np.random.default_rng(7).gamma(2.0, 500.0, (4000, 4000))
    rel = abs(downsample(x, 140).mean() - x.mean()) / abs(x.mean())
    report("downsample mean drift", rel, 1e-9)
    assert rel < 1e-9


# ---------------------------------------------------------------------- 8


@pytest.mark.criterion(8, "determinism and resumability")
def test_criterion_8_determinism(small_dataset, tmp_path):
    from conftest import SMALL_ARCH

    def cfg(out, epochs, resume=None):
        return TrainConfig(manifest=str(small_dataset), out_dir=str(out), batch_size=5, epochs=epochs,
                           checkpoint_every=2, micro_batch=4, resume=resume)

    _, a = train(cfg(tmp_path / "a", 1), SMALL_ARCH)
    _, b = train(cfg(tmp_path / "b", 1), SMALL_ARCH)
    assert a[0].train_loss == b[0].train_loss and a[0].train_rmse == b[0].train_rmse
    _, full = train(cfg(tmp_path / "full", 4), SMALL_ARCH)
    _, resumed = train(cfg(tmp_path / "resumed", 4, str(tmp_path / "full" / "checkpoint_0002.demn")), SMALL_ARCH)
    assert [e.epoch for e in resumed] == [3, 4]
    assert [e.train_loss for e in resumed] == [e.train_loss for e in full[2:]]


# ---------------------------------------------------------------------- 9


@pytest.mark.criterion(9, "format round-trips")
def test_criterion_9_formats(tmp_path):
    rng = np.random.default_rng(9)
    for arr in (rng.standard_normal((7, 5)).astype(np.float32),
                (rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6))).astype(np.complex64)):
        write_tile(tmp_path / "t", arr)
        assert read_tile(tmp_path / "t").tobytes() == arr.tobytes()
    raw = bytearray((tmp_path / "t").read_bytes())
    (tmp_path / "m").write_bytes(b"XART" + bytes(raw[4:]))
    with pytest.raises(FormatError, match="bad magic"):
        read_tile(tmp_path / "m")
    (tmp_path / "v").write_bytes(bytes(raw[:4]) + struct.pack("<I", 7) + bytes(raw[8:]))
    with pytest.raises(FormatError, match="unsupported tile version 7"):
        read_tile(tmp_path / "v")

    arch_args = {"input_size": 36, "channel_scale": 1 / 16}
    params = M.init_params(M.build_demnet(**arch_args), 1)
    state = AdamState.fresh(params.arrays)
    ckpt = Checkpoint(params, state, None, config_digest({"x": 1}), 3, arch_args)
    save_checkpoint(ckpt, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    assert all(back.params[k].tobytes() == params[k].tobytes() for k in params.keys())
    raw = bytearray((tmp_path / "c").read_bytes())
    (tmp_path / "cm").write_bytes(b"XEMN" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(tmp_path / "cm")
    (tmp_path / "cv").write_bytes(bytes(raw[:4]) + struct.pack("<I", 2) + bytes(raw[8:]))
    with pytest.raises(CheckpointError, match=r"format_version 2 is not supported \(this build reads version 1\)"):
        load_checkpoint(tmp_path / "cv")
