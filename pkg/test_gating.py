import numpy as np
import pytest

from config import GateConfig
from error_handler import ShapeError, UsageError
from gating import (
    gru_cell, inactive_parameters, init_gru, init_mo_infog, init_reducer, init_spag, memog_forward,
    mo_infog_forward, mu_infog_forward, neutral_mask_value, spag_attention, spag_forward,
)
from param_store import ParamStore
from tensor_core import Tensor


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _elu(x):
    return np.where(x < 0, np.expm1(np.minimum(x, 0.0)), x)


def _gru_oracle(h, x, store, prefix):
    joint = np.concatenate([h, x])
    z = _sigmoid(joint @ store[f"{prefix}.wz"].data + store[f"{prefix}.bz"].data)
    r = _sigmoid(joint @ store[f"{prefix}.wr"].data + store[f"{prefix}.br"].data)
    cand = np.tanh(np.concatenate([r * h, x]) @ store[f"{prefix}.wh"].data + store[f"{prefix}.bh"].data)
    return (1.0 - z) * h + z * cand


def _randomize(store, rng, scale=0.5):
    for name, tensor in store.items():
        store[name] = rng.standard_normal(tensor.shape) * scale


# =============================================================================
# SpaG
# =============================================================================

def test_spag_with_zero_weights_halves_features(rng):
    store = ParamStore()
    init_spag(store, "spag", 3)
    store["spag.weight"] = np.zeros((1, 2, 3, 3))
    S = rng.standard_normal((4, 5, 5))
    out = spag_forward(Tensor(S), store)
    np.testing.assert_allclose(out.data, 0.5 * S)


def test_spag_average_branch_only():
    store = ParamStore()
    init_spag(store, "spag", 1)
    store["spag.weight"] = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    S = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = spag_forward(Tensor(S), store).data
    np.testing.assert_allclose(out, _sigmoid(S) * S)
    assert out[0, 0, 0] == pytest.approx(0.7311, abs=1e-4)


def test_spag_closed_is_identity_and_attention_in_unit_interval(rng):
    store = ParamStore(seed=1)
    init_spag(store, "spag", 3)
    S = Tensor(rng.standard_normal((3, 4, 4)))
    assert spag_forward(S, store, enabled=False) is S
    attention = spag_attention(S, store).data
    assert attention.shape == (1, 4, 4)
    assert np.all((attention > 0) & (attention < 1))
    with pytest.raises(ShapeError):
        spag_attention(Tensor(np.ones((4, 4))), store)


def test_spag_trace_records_maps(rng):
    store = ParamStore(seed=1)
    init_spag(store, "spag", 3)
    trace = {}
    spag_forward(Tensor(rng.standard_normal((2, 3, 3))), store, trace=trace, trace_key="spag.rgb")
    assert trace["spag.rgb"][0].shape == (3, 3)


# =============================================================================
# MO-InfoG / MU-InfoG
# =============================================================================

def test_mo_infog_identity_features_half_gate(rng):
    store = ParamStore()
    init_mo_infog(store, "mo", 3)
    store["mo.wf.weight"] = np.eye(3).reshape(3, 3, 1, 1)
    store["mo.wg.weight"] = np.zeros((3, 3, 1, 1))
    M = rng.standard_normal((3, 2, 2))
    np.testing.assert_allclose(mo_infog_forward(Tensor(M), store).data, 0.5 * _elu(M))


def test_mo_infog_zero_input_stays_zero():
    store = ParamStore(seed=4)
    init_mo_infog(store, "mo", 2)
    assert np.array_equal(mo_infog_forward(Tensor(np.zeros((2, 3, 3))), store).data, np.zeros((2, 3, 3)))


def test_mo_infog_matches_loop_oracle(rng):
    store = ParamStore()
    init_mo_infog(store, "mo", 2)
    _randomize(store, rng)
    M = rng.standard_normal((2, 2, 2))
    wf, bf = store["mo.wf.weight"].data[:, :, 0, 0], store["mo.wf.bias"].data
    wg, bg = store["mo.wg.weight"].data[:, :, 0, 0], store["mo.wg.bias"].data
    expected = np.zeros_like(M)
    for o in range(2):
        for i in range(2):
            for j in range(2):
                f = sum(wf[o, c] * M[c, i, j] for c in range(2)) + bf[o]
                g = sum(wg[o, c] * M[c, i, j] for c in range(2)) + bg[o]
                expected[o, i, j] = _elu(np.array(f)) * _sigmoid(g)
    np.testing.assert_allclose(mo_infog_forward(Tensor(M), store).data, expected, atol=1e-12)


def test_mu_infog_symmetric_inputs_split_evenly(rng):
    store = ParamStore(seed=2)
    init_reducer(store, "mu", 3)
    M = Tensor(rng.standard_normal((3, 2, 2)))
    outputs, masks = mu_infog_forward([M, M], store, ["mu"])
    for mask in masks:
        np.testing.assert_allclose(mask.data, 0.5)
    np.testing.assert_allclose(outputs[0].data, 0.5 * M.data)


def test_mu_infog_single_input_passes_through(rng):
    store = ParamStore(seed=2)
    init_reducer(store, "mu", 2)
    M = Tensor(rng.standard_normal((2, 3, 3)))
    outputs, masks = mu_infog_forward([M], store, ["mu"])
    np.testing.assert_allclose(masks[0].data, 1.0)
    np.testing.assert_allclose(outputs[0].data, M.data)


def test_mu_infog_softmax_of_reduced_values():
    store = ParamStore()
    init_reducer(store, "mu", 1)
    store["mu.weight"] = np.ones((1, 1, 1, 1))
    _, masks = mu_infog_forward([Tensor(np.ones((1, 1, 1))), Tensor(np.zeros((1, 1, 1)))], store, ["mu"])
    assert masks[0].item() == pytest.approx(0.7311, abs=1e-4)
    assert masks[1].item() == pytest.approx(0.2689, abs=1e-4)


def test_mu_infog_masks_partition_unity(rng):
    for _ in range(100):
        n, c, size = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        store = ParamStore(seed=int(rng.integers(1 << 30)))
        prefixes = [f"mu.{i}" for i in range(n)]
        for prefix in prefixes:
            init_reducer(store, prefix, c)
        _randomize(store, rng, scale=2.0)
        inputs = [Tensor(rng.standard_normal((c, size, size)) * 3.0) for _ in range(n)]
        _, masks = mu_infog_forward(inputs, store, prefixes)
        assert np.abs(sum(m.data for m in masks) - 1.0).max() < 1e-9
        assert all(np.all(m.data >= 0) for m in masks)


def test_mu_infog_forced_masks_renormalize_the_rest(rng):
    store = ParamStore(seed=5)
    prefixes = [f"mu.{i}" for i in range(3)]
    for prefix in prefixes:
        init_reducer(store, prefix, 2)
    inputs = [Tensor(rng.standard_normal((2, 2, 2))) for _ in range(3)]
    outputs, masks = mu_infog_forward(inputs, store, prefixes, forced={1: 0.0})
    np.testing.assert_allclose(masks[1].data, 0.0)
    np.testing.assert_allclose(masks[0].data + masks[2].data, 1.0)
    assert np.array_equal(outputs[1].data, np.zeros((2, 2, 2)))

    _, masks = mu_infog_forward(inputs, store, prefixes, forced={0: 0.2})
    np.testing.assert_allclose(masks[0].data, 0.2)
    np.testing.assert_allclose(masks[1].data + masks[2].data, 0.8)


def test_mu_infog_closed_is_uniform_and_validates(rng):
    store = ParamStore(seed=5)
    init_reducer(store, "mu", 2)
    inputs = [Tensor(rng.standard_normal((2, 2, 2))) for _ in range(4)]
    _, masks = mu_infog_forward(inputs, store, ["mu"], enabled=False)
    for mask in masks:
        np.testing.assert_allclose(mask.data, neutral_mask_value("mu", 4))

    with pytest.raises(ShapeError):
        mu_infog_forward([inputs[0], Tensor(np.ones((2, 3, 3)))], store, ["mu"])
    with pytest.raises(UsageError):
        mu_infog_forward(inputs, store, ["mu"], forced={0: 0.7, 1: 0.6})
    with pytest.raises(UsageError):
        mu_infog_forward(inputs, store, ["mu"], forced={7: 0.1})
    with pytest.raises(UsageError):
        mu_infog_forward([], store, ["mu"])


# =============================================================================
# GRU and MemoG
# =============================================================================

def test_gru_with_zero_weights_halves_state(rng):
    store = ParamStore()
    init_gru(store, "gru", 3, 4)
    for name in store.names():
        store[name] = np.zeros(store[name].shape)
    h = rng.standard_normal(4)
    out = gru_cell(Tensor(h), Tensor(rng.standard_normal(3)), store)
    np.testing.assert_allclose(out.data, 0.5 * h)
    assert np.array_equal(gru_cell(Tensor(np.zeros(4)), Tensor(np.ones(3)), store).data, np.zeros(4))


def test_gru_matches_oracle(rng):
    store = ParamStore(seed=9)
    init_gru(store, "gru", 3, 4)
    _randomize(store, rng)
    h, x = rng.standard_normal(4), rng.standard_normal(3)
    np.testing.assert_allclose(gru_cell(Tensor(h), Tensor(x), store).data, _gru_oracle(h, x, store, "gru"),
                               atol=1e-12)
    with pytest.raises(ShapeError):
        gru_cell(Tensor(h), Tensor(np.ones(5)), store)


def _memog_store(rng, d_x=3, d_h=4):
    store = ParamStore(seed=11)
    init_mo_infog(store, "memog.mo", d_h)
    init_reducer(store, "memog.tu", d_x)
    init_gru(store, "memog.gru", d_x, d_h)
    _randomize(store, rng)
    return store


def test_memog_single_frame_window_matches_tu_off(rng):
    store = _memog_store(rng)
    h, x = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(3))
    with_tu = memog_forward(h, [x], GateConfig(), store)
    without_tu = memog_forward(h, [x], GateConfig(temporal_uncertainty=False), store)
    assert np.array_equal(with_tu.data, without_tu.data)


@pytest.mark.parametrize("temporal_uncertainty", [True, False])
def test_memog_closed_is_plain_gru_step(rng, temporal_uncertainty):
    store = _memog_store(rng)
    h = rng.standard_normal(4)
    window = [rng.standard_normal(3) for _ in range(3)]
    gate = GateConfig(memog=False, temporal_uncertainty=temporal_uncertainty)
    trace = {}
    out = memog_forward(Tensor(h), [Tensor(x) for x in window], gate, store, trace=trace)
    plain = gru_cell(Tensor(h), Tensor(window[-1]), store, "memog.gru")
    assert np.array_equal(out.data, plain.data)
    np.testing.assert_allclose(out.data, _gru_oracle(h, window[-1], store, "memog.gru"), atol=1e-12)
    if temporal_uncertainty:
        np.testing.assert_allclose(trace["tu"][0], 1.0 / 3)
    else:
        assert "tu" not in trace


def test_memog_matches_composed_oracle(rng):
    store = _memog_store(rng)
    h = rng.standard_normal(4)
    window = [rng.standard_normal(3) for _ in range(3)]

    wf, bf = store["memog.mo.wf.weight"].data[:, :, 0, 0], store["memog.mo.wf.bias"].data
    wg, bg = store["memog.mo.wg.weight"].data[:, :, 0, 0], store["memog.mo.wg.bias"].data
    gated_h = _elu(wf @ h + bf) * _sigmoid(wg @ h + bg)
    w_tu, b_tu = store["memog.tu.weight"].data[0, :, 0, 0], store["memog.tu.bias"].data[0]
    logits = np.array([w_tu @ x + b_tu for x in window])
    weights = np.exp(logits - logits.max())
    weights /= weights.sum()
    expected = _gru_oracle(gated_h, weights[-1] * window[-1], store, "memog.gru")

    out = memog_forward(Tensor(h), [Tensor(x) for x in window], GateConfig(), store)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_memog_needs_a_window(rng):
    store = _memog_store(rng)
    with pytest.raises(UsageError):
        memog_forward(Tensor(np.zeros(4)), [], GateConfig(), store)


# =============================================================================
# Gate closing
# =============================================================================

def test_neutral_mask_values():
    assert neutral_mask_value("spag") == 1.0
    assert neutral_mask_value("mo") == 1.0
    assert neutral_mask_value("mu", 4) == 0.25
    with pytest.raises(UsageError):
        neutral_mask_value("attention")


def test_inactive_parameters_follow_closed_gates():
    names = ["stream.rgb.spag.weight", "memog.rgb.mo.wf.weight", "memog.rgb.tu.weight",
             "memog.rgb.gru.wz", "mu.rgb.weight", "mu.flow.weight", "encoder.pos"]
    assert inactive_parameters(GateConfig(), names) == set()
    assert inactive_parameters(GateConfig(spag=False), names) == {"stream.rgb.spag.weight"}
    assert inactive_parameters(GateConfig(memog=False), names) == {"memog.rgb.mo.wf.weight", "memog.rgb.tu.weight"}
    assert inactive_parameters(GateConfig(mu_infog=False), names) == {"mu.rgb.weight", "mu.flow.weight"}
    assert inactive_parameters(GateConfig(), names, forced_streams=["flow"]) == {"mu.flow.weight"}
