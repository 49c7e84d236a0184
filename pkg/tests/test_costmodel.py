import math
from dataclasses import replace

import pytest

from loraserve import costmodel as cm
from loraserve.costmodel import SgmvShape, StepRow


@pytest.fixture
def params():
    return cm.default_cost_params()


def test_flop_and_io_small_by_hand():
    # 2 segments, 3 rows, 4 -> 5: flop 3*4*5*2, io (3*(4+5) + 2*4*5) * 2
    s = SgmvShape(2, 3, 4, 5)
    assert cm.sgmv_flop(s) == 120
    assert cm.sgmv_io_bytes(s) == (27 + 40) * 2
    assert cm.sgmv_io_bytes(s, elem_bytes=4) == (27 + 40) * 4
    assert cm.arithmetic_intensity(s) == pytest.approx(120 / 134)
    assert cm.gather_bmm_extra_elements(s) == 120
    assert cm.gather_bmm_extra_io(s) == 240


def test_distinct_intensity_constant_identical_increasing():
    dist = [cm.arithmetic_intensity(SgmvShape(b, b, 16, 4096)) for b in range(1, 65)]
    ident = [cm.arithmetic_intensity(SgmvShape(1, b, 16, 4096)) for b in range(1, 65)]
    assert max(dist) - min(dist) <= 1e-12 * dist[0]
    assert all(b > a for a, b in zip(ident, ident[1:]))


def test_shape_validation():
    with pytest.raises(ValueError):
        SgmvShape(3, 2, 4, 4)
    with pytest.raises(ValueError):
        SgmvShape(0, 2, 4, 4)
    assert cm.sgmv_flop(SgmvShape(0, 0, 4, 4)) == 0
    with pytest.raises(ValueError):
        cm.arithmetic_intensity(SgmvShape(0, 0, 4, 4))


def test_latency_takes_the_binding_term(params):
    tiny = SgmvShape(1, 1, 16, 16)
    assert cm.sgmv_latency(tiny, params) == params.kernel_overhead
    assert cm.sgmv_latency(tiny, params, overhead=0.0) == pytest.approx(
        cm.sgmv_io_bytes(tiny) / params.mem_bw)
    big = SgmvShape(1, 1 << 20, 4096, 4096)
    assert cm.sgmv_latency(big, params) == pytest.approx(cm.sgmv_flop(big) / params.peak_flops)


def test_projection_sizes(params):
    h, f = 4096, 11008
    assert params.layer_weight_params == 4 * h * h + 3 * h * f
    assert params.adapter_layer_bytes == 16 * (4 * 2 * h + 3 * (h + f)) * 2


def test_decode_step_grows_with_batch_and_context(params):
    b1 = cm.decode_step_latency(cm.uniform_decode_batch(1, 128), params)
    b32 = cm.decode_step_latency(cm.uniform_decode_batch(32, 128), params)
    long = cm.decode_step_latency(cm.uniform_decode_batch(32, 1600), params)
    assert b1 < b32 < long
    with pytest.raises(ValueError):
        cm.decode_step_latency([], params)


def test_fewer_adapters_is_not_slower(params):
    batch = cm.uniform_decode_batch(32, 128)
    assert cm.decode_step_latency(batch, params, num_models=1) <= cm.decode_step_latency(batch, params)


def test_prefill_costs_more_than_decode(params):
    pre = cm.decode_step_latency([StepRow(0, True, 200)], params)
    dec = cm.decode_step_latency([StepRow(200, False, 0)], params)
    assert pre > dec


def test_fit_recovers_known_coefficients(params):
    truth = replace(params, layer_overhead=2.0e-4, attn_coeff=3.0e-8)
    pts = [(bs, seq, cm.decode_step_latency(cm.uniform_decode_batch(bs, seq), truth))
           for bs, seq in [(1, 128), (8, 512), (32, 128), (32, 1600)]]
    fit = cm.fit_step_anchors(params, pts)
    assert fit.layer_overhead == pytest.approx(2.0e-4, rel=1e-9)
    assert fit.attn_coeff == pytest.approx(3.0e-8, rel=1e-9)


def test_fit_rejects_nonphysical(params):
    with pytest.raises(ValueError):
        cm.fit_step_anchors(params, [(1, 128, 1e-6), (32, 1600, 2e-6)])


def test_shipped_defaults_match_anchor_fit(params):
    from loraserve.config import default_config
    fit = cm.fit_step_anchors(params, default_config()["cost_model"]["anchors"])
    assert fit.layer_overhead == pytest.approx(params.layer_overhead, rel=0.01)
    assert fit.attn_coeff == pytest.approx(params.attn_coeff, rel=0.01)


def test_adapter_load(params):
    per_layer = cm.adapter_load_latency(1, params)
    assert per_layer == pytest.approx(params.adapter_layer_bytes / params.pcie_bw)
    assert cm.adapter_load_latency(32, params) == pytest.approx(32 * per_layer)
    assert 2e-5 < per_layer < 1e-4                      # tens of microseconds per layer
    assert 1e-3 < cm.adapter_load_latency(32, params) < 3e-3
    with pytest.raises(ValueError):
        cm.adapter_load_latency(-1, params)


def test_params_validation(params):
    with pytest.raises(ValueError):
        replace(params, mem_bw=0.0)
    with pytest.raises(ValueError):
        replace(params, elem_bytes=3)


@pytest.mark.parametrize("dist,s_n,expect", [
    ("distinct", 10, 10), ("identical", 10, 1), ("uniform", 10, 4), ("uniform", 64, 8), ("distinct", 0, 0),
])
def test_models_for_distribution(dist, s_n, expect):
    assert cm.models_for_distribution(dist, s_n) == expect


def test_models_for_skewed_bounded():
    for s in range(1, 65):
        assert 1 <= cm.models_for_distribution("skewed", s) <= s
    with pytest.raises(ValueError):
        cm.models_for_distribution("bimodal", 4)


def test_batching_adds_few_ms_per_token(params):
    # at the calibration context, 32 distinct adapters vs a lone request
    d = (cm.decode_step_latency(cm.uniform_decode_batch(32, 128), params)
         - cm.decode_step_latency(cm.uniform_decode_batch(1, 128), params))
    assert 0 < d <= 3e-3
