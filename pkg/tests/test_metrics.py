import json
import math

import numpy as np
import pytest

from plab import metrics as mx
from plab.errors import ContractError, UnknownComponentError
from plab.metrics import MetricRecord, PlasticityReport
from plab.model import ActivationProbe


def entropy_erank_oracle(sigmas):
    """Direct entropy formula over the normalized nonzero spectrum."""
    s = [x for x in sigmas if x > 0]
    total = sum(s)
    h = -sum((x / total) * math.log(x / total) for x in s)
    return math.exp(h)


def test_erank_fixtures():
    assert abs(mx.erank([1.0, 1.0, 1.0, 1.0]) - 4.0) <= 1e-12
    assert abs(mx.erank([3.0, 1.0]) - 1.7548) <= 1e-4
    assert abs(mx.erank([3.0, 1.0]) - entropy_erank_oracle([3.0, 1.0])) <= 1e-12
    assert abs(mx.erank([1.0, 0.0, 0.0]) - 1.0) <= 1e-12


def test_srank_fixtures():
    assert abs(mx.srank([1.0, 1.0, 1.0, 1.0]) - 4.0) <= 1e-12
    assert abs(mx.srank([2.0, 1.0]) - 1.25) <= 1e-12
    assert abs(mx.srank([3.0, 1.0]) - 10.0 / 9.0) <= 1e-12


def test_rank_metrics_degenerate_zero_matrix():
    rm = mx.rank_metrics([0.0, 0.0])
    assert rm.degenerate and rm.erank == 0.0 and rm.srank == 0.0 and rm.rank_r == 0
    assert not mx.rank_metrics([1.0, 0.5]).degenerate


def test_spectrum_contract_errors():
    with pytest.raises(ContractError):
        mx.erank([])
    with pytest.raises(ContractError):
        mx.erank([-1.0, 0.5])
    with pytest.raises(ContractError):
        mx.srank([1.0, 2.0])  # not descending


def test_rank_bounds_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.normal(size=(rng.integers(2, 10), rng.integers(2, 10)))
        rm = mx.rank_of_matrix(a)
        assert 1.0 <= rm.erank <= rm.rank_r + 1e-9
        assert 1.0 <= rm.srank <= rm.rank_r + 1e-9


def test_rank_of_features_orthonormal_rows():
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.normal(size=(12, 5)))
    rm = mx.rank_of_features(q)
    assert abs(rm.erank - 5.0) <= 1e-9


def test_weight_scale_invariance():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(8, 6))
    a, b = mx.rank_of_weights(w), mx.rank_of_weights(2.0 * w)
    assert abs(a.erank - b.erank) <= 1e-10
    assert abs(a.srank - b.srank) <= 1e-10


def test_constructed_low_rank():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(100, 3)) @ rng.normal(size=(3, 50))
    rm = mx.rank_of_matrix(a)
    assert rm.rank_r == 3
    assert rm.erank <= 3.0 + 1e-9


def test_head_slices():
    w = np.arange(32.0).reshape(4, 8)
    slices = mx.head_slices(w, 4)
    assert len(slices) == 4 and slices[0].shape == (4, 2)
    assert np.array_equal(slices[1], w[:, 2:4])
    with pytest.raises(ContractError):
        mx.head_slices(w, 3)


def _probe(act: np.ndarray, layer: str = "fc1", batch: int = 64) -> ActivationProbe:
    return ActivationProbe(batch_size=batch, features={layer: act})


def test_fau_all_positive():
    ua = mx.fau(_probe(np.ones((40, 8))), "fc1")
    assert ua.fau == 1.0 and ua.fdu == 0.0


def test_fau_dead_unit_contributes_zero():
    act = np.ones((50, 4))
    act[:, 2] = -1.0  # constantly non-positive unit
    ua = mx.fau(_probe(act), "fc1")
    assert abs(ua.fau - 0.75) <= 1e-15


def test_fau_random_relu_binomial():
    rng = np.random.default_rng(4)
    pre = rng.choice([-1.0, 1.0], size=(256, 64))
    act = np.maximum(pre, 0.0)
    ua = mx.fau(_probe(act, batch=256), "fc1")
    sigma = 0.5 / np.sqrt(256 * 64)
    assert abs(ua.fau - 0.5) <= 3 * sigma + 1e-12


def test_fau_fdu_sum_exactly_one():
    rng = np.random.default_rng(5)
    for _ in range(50):
        act = rng.normal(size=(64, 33))
        ua = mx.fau(_probe(act, batch=64), "fc1")
        assert ua.fau + ua.fdu == 1.0


def test_fau_errors():
    with pytest.raises(UnknownComponentError):
        mx.fau(_probe(np.ones((40, 2))), "nope")
    with pytest.raises(ContractError):
        mx.fau(_probe(np.ones((8, 2)), batch=8), "fc1")


BASELINE_ACCS = [0.632, 0.652, 0.606, 0.617, 0.575, 0.542, 0.463, 0.493, 0.630, 0.511]
TUNED_ACCS = [0.611, 0.665, 0.669, 0.672, 0.654, 0.649, 0.587, 0.588, 0.688, 0.613]


def test_aat_reference_columns():
    assert abs(mx.aat(BASELINE_ACCS) - 0.5721) <= 5e-5
    assert abs(mx.aat(TUNED_ACCS) - 0.6396) <= 5e-5


def test_aat_constant_and_permutation():
    assert mx.aat([0.3] * 7) == pytest.approx(0.3, abs=1e-15)
    rng = np.random.default_rng(6)
    vals = list(rng.uniform(0, 1, size=31))
    base = mx.aat(vals)
    for _ in range(10):
        rng.shuffle(vals)
        assert mx.aat(vals) == base  # fsum makes this exact


def test_aat_contract_errors():
    with pytest.raises(ContractError):
        mx.aat([])
    with pytest.raises(ContractError):
        mx.aat([0.5, 1.2])


def _report_with_feature_series(blocks=(0, 1), tasks=(1, 2, 3)) -> PlasticityReport:
    rep = PlasticityReport(seed=0)
    rng = np.random.default_rng(7)
    for t in tasks:
        for b in blocks:
            for comp in mx.FEATURE_COMPONENTS:
                rep.add(t, t * 10, "features", f"block{b}.{comp}", "erank", float(rng.uniform(1, 8)))
    return rep


def test_delta_heatmap_zero_on_same_block():
    rep = _report_with_feature_series()
    comps, tasks, grid = mx.delta_heatmap(rep, 0, 0)
    assert grid.shape == (len(mx.FEATURE_COMPONENTS), 3)
    assert np.array_equal(grid, np.zeros_like(grid))
    assert tasks == [1, 2, 3]
    assert comps == list(mx.FEATURE_COMPONENTS)


def test_delta_heatmap_antisymmetry_and_lookup():
    rep = _report_with_feature_series()
    _, _, ab = mx.delta_heatmap(rep, 0, 1)
    _, _, ba = mx.delta_heatmap(rep, 1, 0)
    assert np.allclose(ab, -ba, atol=0)
    with pytest.raises(UnknownComponentError):
        mx.delta_heatmap(rep, 0, 5)


def test_report_accuracy_contiguity_and_aat():
    rep = PlasticityReport(seed=1)
    rep.record_accuracy(1, 10, 0.5)
    rep.record_accuracy(2, 20, 0.7)
    assert rep.aat == mx.aat([0.5, 0.7])
    with pytest.raises(ContractError):
        rep.record_accuracy(4, 30, 0.9)


def test_report_csv_and_series():
    rep = PlasticityReport(seed=2)
    rep.record_accuracy(1, 5, 0.25)
    rep.add(1, 5, "features", "block0.norm1", "erank", 3.5)
    csv_text = rep.to_csv()
    lines = csv_text.strip().split("\n")
    assert lines[0] == "task,step,scope,component,metric,value"
    assert len(lines) == 3
    assert rep.series("task", "", "acc") == [(1, 0.25)]
    series_csv = mx.write_series_csv(rep, "features", "block0.norm1", "erank")
    assert series_csv.startswith("task,value\n1,3.5")
    with pytest.raises(UnknownComponentError):
        rep.series("features", "missing", "erank")


def test_report_json_roundtrip():
    rep = PlasticityReport(seed=3)
    rep.record_accuracy(1, 7, 1.0 / 3.0)
    rep.add(1, 7, "weights", "block0.attn.q", "frob", 0.1234567890123)
    text = rep.to_json()
    back = PlasticityReport.from_json_obj(json.loads(text))
    assert back.to_json() == text
    assert back.records == rep.records
    assert back.task_acc == rep.task_acc
