"""Acceptance suite: one test per criterion, each recording a pass/fail line
in the terminal summary (see conftest.py).

Criterion 5 trains two networks on 500 synthetic volumes and takes roughly
half an hour on one CPU core; set GPUNET_SKIP_E2E=1 to skip criteria 5 and 6
during development.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import flood_fill, record, sweep_oracle
from gpunet import checkpoint
from gpunet.cli import main
from gpunet.detection import connected_components, select_threshold, target_count
from gpunet.evaluation import TABLE_LABELS, froc, make_source, prepare, score, write_froc, write_metrics
from gpunet.gradcheck import grad_check
from gpunet.io import decode_volume, encode_volume, read_manifest
from gpunet.io import FormatError
from gpunet.model import NetworkConfig, build
from gpunet.tensor import (
    ConvParams,
    Tensor,
    concat_channels,
    conv3d,
    global_pool,
    linear,
    maxpool3d,
    mse_loss,
    relu,
    upsample3d,
)
from gpunet.training import AdadeltaState, predict_counts

# epochs for the end-to-end run, fixed from a pilot run (see README)
E2E_EPOCHS = 30
E2E_BUDGET_S = 30 * 60
FROC_FACTORS = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0]
skip_e2e = pytest.mark.skipif(os.environ.get("GPUNET_SKIP_E2E") == "1", reason="GPUNET_SKIP_E2E=1")


# 1. gradient correctness

def _proj(t, w):
    """sum(t * w) for a fixed random w, as a graph node."""
    out = Tensor(np.float32((t.data.astype(np.float64) * w).sum()), _parents=(t,))
    out._backward = lambda: t._accumulate(out.grad * w)
    return out


def _conv(r, cout, cin, k=3, scale=0.4):
    return ConvParams(Tensor(r.normal(0, scale, (cout, cin, k, k, k)).astype(np.float32), requires_grad=True),
                      Tensor(r.normal(0, 0.1, cout).astype(np.float32), requires_grad=True))


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    r = np.random.default_rng(101)
    x2 = r.normal(size=(1, 2, 8, 8, 8)).astype(np.float32)
    w2 = r.normal(size=(1, 3, 8, 8, 8)).astype(np.float32)
    p = _conv(r, 3, 2)
    head = ConvParams(Tensor(r.uniform(0.5, 1.5, (1, 3, 1, 1, 1)).astype(np.float32)),
                      Tensor(np.float32([0.2])))
    other = r.normal(size=(1, 1, 8, 8, 8)).astype(np.float32)
    w_up = r.normal(size=(1, 2, 16, 16, 16))
    x_pool = r.normal(size=(2, 3, 2, 2, 2)).astype(np.float32)
    # linear fragments: step 1e-2 (no truncation error, lower rounding floor)
    linear_cases = {
        "conv3d": (lambda t: _proj(conv3d(t, p), w2), x2),
        "upsample3d": (lambda t: _proj(upsample3d(t), w_up), x2),
        "concat_channels": (lambda t: _proj(concat_channels(t, Tensor(other)), w2), x2),
        "global_pool avg": (lambda t: linear(global_pool(t, "avg"), head).sum(), x_pool),
        "linear head": (lambda t: linear(t, head).sum(), r.normal(size=(2, 3)).astype(np.float32)),
    }
    # nonlinear fragments: default step 1e-3
    nonlinear_cases = {
        "relu": (lambda t: _proj(relu(t), w2[:, :2]), x2),
        "maxpool3d": (lambda t: _proj(maxpool3d(t), w2[:, :2, :4, :4, :4]), x2),
        "global_pool max": (lambda t: linear(global_pool(relu(conv3d(t, p)), "max"), head).sum(), x2),
        "mse_loss": (lambda t: mse_loss(linear(t, head), [1.0, -2.0]), r.normal(size=(2, 3)).astype(np.float32)),
    }
    worst = {}
    for name, (frag, x) in linear_cases.items():
        worst[name] = (grad_check(frag, x, epsilon=1e-2), 1e-4)
    for name, (frag, x) in nonlinear_cases.items():
        worst[name] = (grad_check(frag, x), 1e-2)
    for mode in ("max", "avg"):
        cfg = NetworkConfig(pooling_mode=mode, input_dims=(8, 8, 8))
        model = build(cfg, 7)
        model.head.bias.data[:] = 0.3
        vol = r.random((1, 1, 8, 8, 8)).astype(np.float32)
        worst[f"full GP-Unet ({mode})"] = (grad_check(lambda t: model.forward_train(t).sum(), vol), 1e-2)
    elapsed = time.perf_counter() - t0
    for name, (err, tol) in worst.items():
        record(1, f"{name}: max rel error {err:.2e} (tol {tol:g})")
    record(1, f"runtime {elapsed:.1f} s (limit 60 s)")
    assert all(err <= tol for err, tol in worst.values())
    assert elapsed < 60


# 2. train/test identity

def test_criterion_2_train_test_identity():
    r = np.random.default_rng(202)
    worst_avg = 0.0
    for i in range(50):
        levels = int(r.integers(1, 3))
        step = 2 ** levels
        dims = tuple(int(step * r.integers(1, 4)) for _ in range(3))
        mode = "max" if i % 2 else "avg"
        cfg = NetworkConfig(levels=levels, base_features=int(r.integers(1, 5)), final_maps=int(r.integers(1, 5)),
                            pooling_mode=mode, input_dims=dims)
        model = build(cfg, int(r.integers(2**31)))
        model.head.bias.data[:] = r.normal()
        x = r.random((2, 1, *dims)).astype(np.float32)
        y = model.forward_train(Tensor(x)).data
        f = model.forward_features(Tensor(x))
        w, b = model.head.kernel.data[:, :, 0, 0, 0], model.head.bias.data
        assert np.array_equal(y, global_pool(f, mode).data @ w.T + b)
        if mode == "avg":
            m = model.forward_test(Tensor(x)).data
            gap = np.abs(y[:, 0] - (m.mean(axis=(1, 2, 3, 4), dtype=np.float64) + b[0])).max()
            worst_avg = max(worst_avg, float(gap))
    record(2, "50/50 parameter sets bit-identical to w.G(f)+b")
    record(2, f"avg pooling |y - (mean(M)+b)| max {worst_avg:.2e} (tol 1e-5)")
    assert worst_avg <= 1e-5


# 3. heatmap resolution

_resolution_cases = []


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(1, 3), st.data())
def _resolution_property(levels, data):
    step = 2 ** levels
    dims = tuple(data.draw(st.sampled_from(range(max(16, step), 65, step))) for _ in range(3))
    cfg = NetworkConfig(levels=levels, base_features=1, final_maps=2, input_dims=dims)
    _, m = build(cfg, 0).predict(np.zeros(dims, np.float32))
    _resolution_cases.append((levels, dims, m.shape))
    assert m.shape == dims


def test_criterion_3_heatmap_resolution():
    _resolution_property()
    record(3, f"{len(_resolution_cases)} configs, levels "
              f"{sorted({c[0] for c in _resolution_cases})}, extents "
              f"{min(min(c[1]) for c in _resolution_cases)}..{max(max(c[1]) for c in _resolution_cases)}: "
              "heatmap dims == input dims")


# 4. threshold / component oracles

def test_criterion_4_threshold_and_components():
    from scipy import ndimage  # only to build smooth test maps
    r = np.random.default_rng(404)
    agree = 0
    for i in range(100):
        dims = tuple(int(v) for v in r.integers(2, 17, 3))
        m = r.normal(size=dims)
        if i % 3 == 1:
            m = ndimage.gaussian_filter(m, 1.0)
        elif i % 3 == 2:
            m = np.round(m * 2) / 2  # many ties
        target = int(r.integers(0, 9))
        t = select_threshold(m, target)
        assert t == sweep_oracle(m, target), f"instance {i}"
        mask = m >= t
        labels, n = connected_components(mask)
        ref_labels, ref_n = flood_fill(mask)
        assert n == ref_n and np.array_equal(labels, ref_labels), f"instance {i}"
        agree += 1
    record(4, f"{agree}/100 random heatmaps (up to 16^3): thresholds and labels identical to oracles")


# 5 and 6. end-to-end synthetic run

@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--seed", "42"]) == 0
    t0 = time.perf_counter()
    assert main(["train", "--train", str(data / "train.jsonl"), "--val", str(data / "val.jsonl"),
                 "--epochs", str(E2E_EPOCHS), "--out", str(root / "gpunet")]) == 0
    train_s = time.perf_counter() - t0
    assert main(["train", "--train", str(data / "train.jsonl"), "--val", str(data / "val.jsonl"),
                 "--epochs", str(E2E_EPOCHS), "--no-upsampling", "--out", str(root / "coarse")]) == 0
    model = checkpoint.load_model(root / "gpunet/model.gpuc")
    coarse = checkpoint.load_model(root / "coarse/model.gpuc")
    test = read_manifest(data / "test.jsonl")
    volumes = {str(s.path): s.load() for s in test}
    curves = {}
    for method in TABLE_LABELS:
        prepared = prepare(make_source(method, model, coarse), test, volumes)
        curves[method] = froc(prepared, None, FROC_FACTORS)
    out = Path(os.environ.get("GPUNET_E2E_OUT", root / "results"))
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.csv", [curves[m].points[FROC_FACTORS.index(1.0)].report.row(m) for m in curves])
    for m, c in curves.items():
        write_froc(out / f"froc_{m}.csv", c)
    return dict(root=root, model=model, coarse=coarse, test=test, volumes=volumes,
                curves=curves, train_s=train_s)


@skip_e2e
def test_criterion_5_end_to_end(e2e):
    model, test, curves = e2e["model"], e2e["test"], e2e["curves"]
    pred = predict_counts(model, [e2e["volumes"][str(s.path)] for s in test])
    mae = float(np.mean(np.abs(pred - np.array([s.count for s in test]))))
    record(5, f"training {E2E_EPOCHS} epochs took {e2e['train_s'] / 60:.1f} min (limit 30)")
    record(5, f"(i) held-out count MAE {mae:.3f} (need < 1.0)")

    best = curves["gpunet"].best_tpr_within(2.0)
    best_tpr = best.tpr if best else 0.0
    record(5, f"(ii) GP-Unet best TPR at FPav <= 2.0: {best_tpr:.3f}"
              + (f" (k={best.factor}, FPav {best.fpav:.2f})" if best else "") + " (need >= 0.70)")

    k1 = FROC_FACTORS.index(1.0)
    ref = curves["gpunet"].points[k1]
    for m, c in curves.items():
        p = c.points[k1]
        record(5, f"    {TABLE_LABELS[m]:<28} k=1: TPR {p.tpr:.3f} FPav {p.fpav:.2f} FDR {p.report.fdr:.3f}; "
                  f"TPR at FPav {ref.fpav:.2f}: {c.tpr_at_fpav(ref.fpav):.3f}")
    e_tpr = curves["gpunet"].tpr_at_fpav(ref.fpav)
    ordering = {m: e_tpr > curves[m].tpr_at_fpav(ref.fpav) for m in ("regression-coarse", "saliency", "saliency-fcn")}
    record(5, "(iii) (e) beats " + ", ".join(f"{TABLE_LABELS[m][:3]}: {ok}" for m, ok in ordering.items()))
    assert e2e["train_s"] <= E2E_BUDGET_S
    assert mae < 1.0
    assert best_tpr >= 0.70
    assert all(ordering.values())


@skip_e2e
def test_criterion_6_froc_monotone(e2e):
    curve = e2e["curves"]["gpunet"]
    per_image = [[r.target for r in p.report.per_image] for p in curve.points]
    for a, b in zip(per_image, per_image[1:]):
        assert all(x <= y for x, y in zip(a, b))
    for p in curve.points:
        assert [target_count(r.count_estimate, p.factor) for r in p.report.per_image] == [r.target for r in p.report.per_image]
    record(6, f"targets non-decreasing per image over k = {FROC_FACTORS[0]}..{FROC_FACTORS[-1]}")
    justified = True
    for prev, cur in zip(curve.points, curve.points[1:]):
        if cur.fpav > prev.fpav:
            continue
        raised = sum(b.target > a.target for a, b in zip(prev.report.per_image, cur.report.per_image))
        more = sum(b.n_detections > a.n_detections for a, b in zip(prev.report.per_image, cur.report.per_image))
        new_tp = cur.report.tp - prev.report.tp
        if raised == 0:
            why = "no image's rounded target changed"
        elif more == 0:
            why = f"{raised} targets rose but no heatmap yields more components"
        elif new_tp >= more:
            why = f"all {more} extra detections were true positives"
        else:
            why = None
            justified = False
        record(6, f"FPav not increasing from k={prev.factor} to k={cur.factor} "
                  f"({prev.fpav:.2f} -> {cur.fpav:.2f}): {why or 'UNEXPLAINED'}")
    record(6, "FPav: " + ", ".join(f"{p.factor}:{p.fpav:.2f}" for p in curve.points))
    assert justified


# 7. persistence

@settings(max_examples=60, deadline=None)
@given(st.data())
def _truncation_property(data):
    which = data.draw(st.sampled_from(["volume", "checkpoint"]))
    raw = _VOLUME_BYTES if which == "volume" else _CKPT_BYTES
    cut = data.draw(st.integers(0, len(raw) - 1))
    decode = decode_volume if which == "volume" else checkpoint.decode
    with pytest.raises(FormatError):
        decode(raw[:cut])


_VOLUME = np.random.default_rng(7).normal(size=(8, 12, 4)).astype(np.float32)
_VOLUME_BYTES = encode_volume(_VOLUME)
_MODEL = build(NetworkConfig(levels=1, base_features=2, final_maps=2, input_dims=(8, 8, 8)), 3)
_STATE = AdadeltaState.for_params(_MODEL.parameters())
_CKPT_BYTES = checkpoint.encode(_MODEL, _STATE)


def test_criterion_7_persistence():
    back = decode_volume(_VOLUME_BYTES)
    assert back.tobytes() == _VOLUME.tobytes() and back.shape == _VOLUME.shape
    ck = checkpoint.decode(_CKPT_BYTES)
    assert all(a.data.tobytes() == b.data.tobytes()
               for (_, a), (_, b) in zip(_MODEL.named_tensors(), ck.model.named_tensors()))
    assert checkpoint.encode(ck.model, ck.optimizer) == _CKPT_BYTES
    _truncation_property()
    record(7, "volume and checkpoint round trips bit-exact; 60 random truncations rejected")


# 8. determinism

def test_criterion_8_determinism(tmp_path):
    def pipeline(root):
        data = root / "data"
        assert main(["gen-data", "--out", str(data), "--n-train", "12", "--n-val", "4", "--n-test", "4",
                     "--dims", "24,24,16", "--max-count", "2", "--seed", "9"]) == 0
        (root / "cfg.json").write_text('{"network": {"base_features": 4, "final_maps": 4}}')
        assert main(["train", "--train", str(data / "train.jsonl"), "--val", str(data / "val.jsonl"),
                     "--config", str(root / "cfg.json"), "--epochs", "2", "--seed", "1",
                     "--out", str(root / "run")]) == 0
        assert main(["evaluate", "--model", str(root / "run/model.gpuc"), "--manifest", str(data / "test.jsonl"),
                     "--method", "gpunet", "--method", "gpunet+intensity", "--out", str(root / "metrics.csv")]) == 0
        assert main(["froc", "--model", str(root / "run/model.gpuc"), "--manifest", str(data / "test.jsonl"),
                     "--out", str(root / "froc.csv")]) == 0
        return root

    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    files = [p.relative_to(a) for p in sorted(a.rglob("*")) if p.is_file()]
    same = [f for f in files if (a / f).read_bytes() == (b / f).read_bytes()]
    record(8, f"{len(same)}/{len(files)} artifacts byte-identical "
              "(manifests, volumes, history, checkpoint, metrics, FROC)")
    assert len(same) == len(files)
