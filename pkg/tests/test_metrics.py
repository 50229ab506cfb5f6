import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatspark.data import (Container, DataError, ScalingParams,
                            build_sequences, inverse_minmax)
from spatspark.metrics import (Confusion, confusion_update, count_params,
                               estimate_flops, evaluate, flop_breakdown, pmse,
                               read_report, report_csv, scores, write_report)
from spatspark.model import Conv, ModelConfig, init_model
from spatspark.numcore import DimensionError, Tensor, conv2d, count_flops

from conftest import shape_walk_params

T5 = 0.5 / 12
counts = st.integers(0, 10**6)


def oracle_scores(tp, fp, fn, tn):
    div = lambda a, b: None if b == 0 else a / b
    p, r = div(tp, tp + fp), div(tp, tp + fn)
    if p is None or r is None:
        f1 = None if tp + fp + fn == 0 else div(2 * tp, 2 * tp + fp + fn)
    else:
        f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return {
        "accuracy": (tp + tn) / (tp + fp + fn + tn),
        "precision": p, "recall": r, "f1": f1,
        "csi": div(tp, tp + fp + fn), "far": div(fp, tp + fp),
        "hss": div(tp * tn - fp * fn, (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)),
    }


def test_confusion_examples(rng):
    field = rng.random((16, 16)) * 0.1
    c = confusion_update(Confusion(), field, field)
    assert c.fp == c.fn == 0 and c.total == 256
    c = confusion_update(Confusion(), np.ones((4, 4)), np.zeros((4, 4)))
    assert c == Confusion(0, 16, 0, 0)
    with pytest.raises(DimensionError):
        confusion_update(Confusion(), np.zeros((4, 4)), np.zeros((4, 5)))


def test_confusion_counting_oracle(rng):
    a, b = rng.random((3, 20, 20)) * 0.08, rng.random((3, 20, 20)) * 0.08
    a.flat[0] = T5  # boundary pixel counts as positive
    tp = fp = fn = tn = 0
    for x, y in zip(a.ravel(), b.ravel()):
        px, py = x >= T5, y >= T5
        tp += px and py
        fp += px and not py
        fn += py and not px
        tn += not px and not py
    assert confusion_update(Confusion(), a, b) == Confusion(tp, fp, fn, tn)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 2), st.floats(0.1, 2), st.integers(0, 1000))
def test_threshold_monotonicity(t1, t2, seed):
    r = np.random.default_rng(seed)
    a, b = r.random((10, 10)) * 0.2, r.random((10, 10)) * 0.2
    lo, hi = sorted((t1, t2))
    c_lo, c_hi = confusion_update(Confusion(), a, b, lo), confusion_update(Confusion(), a, b, hi)
    assert c_hi.tp + c_hi.fp <= c_lo.tp + c_lo.fp


def test_pmse_examples(rng):
    x = rng.random((4, 8, 8))
    assert pmse(x, x) == 0
    assert abs(pmse(x + 0.3, x) - 0.09) < 1e-12
    y = rng.random((4, 8, 8))
    oracle = np.mean([sum((x[t, i, j] - y[t, i, j]) ** 2 for i in range(8) for j in range(8)) / 64
                      for t in range(4)])
    assert abs(pmse(x, y) - oracle) < 1e-12
    assert pmse(x, y) == pmse(y, x)
    with pytest.raises(DimensionError):
        pmse(x, y[:2])


def test_scores_examples():
    s = scores(Confusion(5, 0, 0, 7))
    assert s["csi"] == 1 and s["far"] == 0 and s["hss"] == 0.5
    s = scores(Confusion(3, 1, 2, 4))
    assert s["csi"] == 0.5 and s["far"] == 0.25
    assert scores(Confusion(5, 0, 0, 7), standard_hss=True)["hss_standard"] == 1.0
    with pytest.raises(ValueError):
        scores(Confusion())


def test_scores_oracle_random_tables():
    r = np.random.default_rng(0)
    for _ in range(1000):
        tp, fp, fn, tn = (int(v) for v in r.integers(0, 50, 4) * r.integers(0, 2, 4))
        if tp + fp + fn + tn == 0:
            tn = 1
        got, ref = scores(Confusion(tp, fp, fn, tn)), oracle_scores(tp, fp, fn, tn)
        for k in ref:
            assert (got[k] is None) == (ref[k] is None), k
            if ref[k] is not None:
                assert abs(got[k] - ref[k]) < 1e-12, k


@settings(max_examples=300, deadline=None)
@given(counts, counts, counts, counts)
def test_hss_bound(tp, fp, fn, tn):
    if tp + fp + fn + tn == 0:
        return
    h = scores(Confusion(tp, fp, fn, tn))["hss"]
    if h is None:
        return
    assert -0.5 <= h <= 0.5
    assert (h == 0.5) == (fp == 0 and fn == 0 and tp > 0 and tn > 0)


def _rates_in_range(row):
    for k in ("accuracy", "precision", "recall", "f1", "csi", "far"):
        if row[k] is not None:
            assert 0 <= row[k] <= 1


@pytest.fixture(scope="module")
def test_samples(small_container, small_split):
    _, te = small_split
    return build_sequences(te, 4, 1, small_container), te.scaling


def test_evaluate_oracle_model(test_samples):
    samples, scaling = test_samples
    lookup = {s.input.tobytes(): s.target for s in samples}
    oracle = lambda x: np.stack([lookup[xi.tobytes()] for xi in x])
    rep = evaluate(oracle, samples, scaling, batch_size=3)
    assert rep.overall["pmse"] == 0 and rep.overall["csi"] == 1 and rep.overall["far"] == 0
    assert rep.overall["hss"] in (0.5, None)
    assert len(rep.per_timestep) == 4 and rep.n_samples == len(samples)


def test_evaluate_constant_zero_model():
    frames = np.zeros((16, 32, 32), np.float32)
    frames[:, :20] = 0.2  # 62.5 % wet, every frame qualifies
    c = Container(frames)
    from spatspark.data import split_manifests
    tr, _ = split_manifests("mem", c, train_fraction=1.0)
    samples = build_sequences(tr, 4, 1, c)
    rep = evaluate(lambda x: np.zeros_like(x), samples, tr.scaling)
    assert rep.confusion.tp == rep.confusion.fp == 0
    assert rep.overall["precision"] is None and rep.overall["far"] is None
    assert "NA" in report_csv(rep)


def test_evaluate_accumulation_audit(test_samples):
    samples, scaling = test_samples
    noisy = lambda x: np.clip(x[:, ::-1] + 0.05 * np.sin(np.arange(x[0].size)).reshape(x.shape[1:]), 0, None)
    rep = evaluate(noisy, samples, scaling, batch_size=5)
    assert sum(rep.per_timestep_confusion, Confusion()) == rep.confusion
    assert rep.confusion.total == len(samples) * 4 * 64 * 64
    for _, row in rep.rows():
        _rates_in_range(row)
    # per-sample recomputation of overall pMSE
    per = [pmse(inverse_minmax(noisy(s.input[None])[0], scaling), inverse_minmax(s.target, scaling))
           for s in samples]
    assert abs(rep.overall["pmse"] - np.mean(per)) < 1e-12
    with pytest.raises(DataError):
        evaluate(noisy, [], scaling)


def test_evaluate_real_model(test_samples):
    samples, scaling = test_samples
    m = init_model(ModelConfig.from_preset("nano", 4, 64, 64), 0)
    rep = evaluate(m, samples[:3], scaling)
    assert np.isfinite(rep.overall["pmse"])


def test_report_csv_round_trip(tmp_path, test_samples):
    samples, scaling = test_samples
    rep = evaluate(lambda x: x * 0.9, samples, scaling)
    p = tmp_path / "report.csv"
    write_report(rep, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "row,pmse,accuracy,precision,recall,f1,csi,far,hss"
    assert [l.split(",")[0] for l in lines[1:]] == ["overall", "t=1", "t=2", "t=3", "t=4"]
    back = read_report(p)
    assert back["overall"]["pmse"] == rep.overall["pmse"]
    assert back["t=2"]["csi"] == rep.per_timestep[1]["csi"]


# -- efficiency accounting


class _Single:
    def __init__(self):
        self.conv = Conv("c", np.random.default_rng(0), 1, 1, 1)

    def params(self):
        return self.conv.params()


def test_count_params_single_conv():
    assert count_params(_Single()) == 2


def test_flop_fixture():
    rng = np.random.default_rng(0)
    conv = Conv("c", rng, 2, 4, 3, 1, 1, bias=False)
    with count_flops() as rec:
        conv(Tensor(rng.random((1, 2, 8, 8))))
    assert sum(f for kind, f in rec if kind == "conv") == 2 * 9 * 2 * 4 * 64 == 9216


@pytest.mark.parametrize("preset", ["nano", "resnet18-like"])
def test_param_count_shape_walk(preset):
    cfg = ModelConfig.from_preset(preset, 12, 128, 128)
    m = init_model(cfg, 0)
    assert count_params(m) == shape_walk_params(cfg.stem_channels, cfg.stage_channels,
                                                cfg.blocks_per_stage, 12)


def test_estimate_flops_conv_terms():
    cfg = ModelConfig.from_preset("nano", 4, 64, 64)
    m = init_model(cfg, 0)
    recs = flop_breakdown(m, 64, 64, 4)
    assert ("conv", 2 * 9 * 4 * 8 * 32 * 32) == recs[0]  # stem: 3x3, 4->8, output 32x32
    conv_only = estimate_flops(m, 64, 64, 4, include_elementwise=False)
    total = estimate_flops(m, 64, 64, 4)
    assert 0 < conv_only < total
    assert conv_only == sum(f for k, f in recs if k in ("conv", "tconv"))
