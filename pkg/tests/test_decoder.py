import numpy as np
import pytest

from memstream.decoder import (
    StreamWeights,
    LayerWeights,
    decode,
    frozen_replay,
    image_stream_layer,
    init_weights,
    layer_mean_logits,
    mean_state_logits,
    state_stream_layer,
)
from memstream.errors import ConfigError, ShapeError, TraceError
from memstream.tensor import Prng

from oracles import beta_ref, decode_ref, weights_ref

# seed-42, L=1, H=1, d=2 layer decoded on all-ones 2x2 inputs; values from
# the straight-line oracle
GOLDEN_WQ = [
    [0.34162432775212503, -0.4809593348155971],
    [-0.3131052842872572, -0.22034760183590596],
]
GOLDEN_CANDIDATE = [
    [0.356296472619851, 1.1576441566064108],
    [0.356296472619851, 1.1576441566064108],
]
GOLDEN_DECODED = [
    [1.7879171242855856, 0.5656565540468041],
    [1.7879171242855856, 0.5656565540468041],
]
GOLDEN_BETA = [0.37982716686576073, 0.37982716686576073]

# recorded once: ||inside-layer gating - frozen replay|| for G=0.5 on the
# seed-42 L=2 d=4 instance below; the two placements genuinely differ
GATED_VS_REPLAY_NORM = 0.021869580241594723


def _ones_fixture():
    w = init_weights(42, 1, 1, 2)
    s = np.ones((2, 2))
    x = np.ones((2, 2))
    return w, s, x


class TestInitWeights:
    def test_deterministic(self):
        a = init_weights(7, 2, 2, 4)
        b = init_weights(7, 2, 2, 4)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.state.wq, lb.state.wq)
            assert np.array_equal(la.image.wv, lb.image.wv)

    def test_golden_first_projection(self):
        w = init_weights(42, 1, 1, 2)
        assert np.array_equal(w.layers[0].state.wq, np.array(GOLDEN_WQ))

    def test_matches_oracle_order(self):
        w = init_weights(31, 2, 1, 3)
        ref = weights_ref(31, 2, 1, 3)
        assert np.array_equal(w.layers[1].image.wk, np.array(ref[1]["image"]["wk"]))

    def test_entries_bounded(self):
        d = 16
        w = init_weights(5, 2, 2, d)
        bound = 1.0 / np.sqrt(d)
        for lw in w.layers:
            for sw in (lw.state, lw.image):
                for mat in (sw.wq, sw.wk, sw.wv):
                    assert np.all(np.abs(mat) <= bound)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            init_weights(1, 1, 3, 4)

    def test_needs_a_layer(self):
        with pytest.raises(ConfigError):
            init_weights(1, 0, 1, 4)


class TestStateStreamLayer:
    def test_ones_gate_matches_ungated(self):
        w, s, x = _ones_fixture()
        ungated, _ = state_stream_layer(s, x, w.layers[0], 1)
        gated, _ = state_stream_layer(s, x, w.layers[0], 1, gate=np.ones(2))
        assert np.array_equal(ungated, gated)

    def test_zero_gate_freezes(self):
        w, s, x = _ones_fixture()
        out, _ = state_stream_layer(s, x, w.layers[0], 1, gate=np.zeros(2))
        assert np.array_equal(out, s)

    def test_width_mismatch(self):
        w, s, _ = _ones_fixture()
        with pytest.raises(ShapeError):
            state_stream_layer(s, np.ones((2, 3)), w.layers[0], 1)


class TestImageStreamLayer:
    def test_zero_value_weights_keep_tokens(self):
        d = 2
        rng = Prng(3)
        zero = np.zeros((d, d))
        some = rng.gaussian_matrix(d, d)
        layer = LayerWeights(
            state=StreamWeights(some, some, some),
            image=StreamWeights(some, some, zero),
        )
        x = rng.gaussian_matrix(3, d)
        s = rng.gaussian_matrix(2, d)
        out, tr = image_stream_layer(x, s, layer, 1)
        assert np.array_equal(out, x)
        for attn in tr.attention:
            assert np.abs(attn.sum(axis=1) - 1.0).max() < 1e-12


class TestDecode:
    def test_golden_fixture_against_oracle(self):
        w, s, x = _ones_fixture()
        res = decode(s, x, w)
        assert np.abs(res.candidate_state - np.array(GOLDEN_CANDIDATE)).max() < 1e-12
        assert np.abs(res.decoded_tokens - np.array(GOLDEN_DECODED)).max() < 1e-12
        # recompute through the oracle as well
        cand, dec, _ = decode_ref([[1.0, 1.0]] * 2, [[1.0, 1.0]] * 2, weights_ref(42, 1, 1, 2), 1)
        assert np.abs(res.candidate_state - np.array(cand)).max() < 1e-12
        assert np.abs(res.decoded_tokens - np.array(dec)).max() < 1e-12

    def test_oracle_agreement_multilayer_multihead(self):
        rng = Prng(17)
        w = init_weights(1234, 3, 2, 4)
        s = rng.gaussian_matrix(5, 4)
        x = rng.gaussian_matrix(6, 4)
        res = decode(s, x, w)
        cand, dec, slog = decode_ref(s.tolist(), x.tolist(), weights_ref(1234, 3, 2, 4), 2)
        assert np.abs(res.candidate_state - np.array(cand)).max() < 1e-12
        assert np.abs(res.decoded_tokens - np.array(dec)).max() < 1e-12
        beta = np.array(beta_ref(slog, 6))
        got = mean_state_logits(res.trace)
        from memstream.tensor import sigmoid

        assert np.abs(sigmoid(got) - beta).max() < 1e-12

    def test_attention_rows_sum_to_one(self):
        rng = Prng(21)
        w = init_weights(9, 2, 2, 6)
        res = decode(rng.gaussian_matrix(4, 6), rng.gaussian_matrix(7, 6), w)
        for layers in (res.trace.state_layers, res.trace.image_layers):
            for layer in layers:
                for attn in layer.attention:
                    assert np.abs(attn.sum(axis=1) - 1.0).max() < 1e-12

    def test_residual_decomposition(self):
        rng = Prng(22)
        w = init_weights(10, 3, 1, 4)
        s = rng.gaussian_matrix(5, 4)
        res = decode(s, rng.gaussian_matrix(5, 4), w)
        recon = s + res.trace.state_residual_sum()
        scale = max(1.0, np.abs(res.candidate_state).max())
        assert np.abs(recon - res.candidate_state).max() / scale < 1e-9

    def test_deterministic_bitwise(self):
        rng = Prng(23)
        w = init_weights(11, 2, 2, 4)
        s = rng.gaussian_matrix(3, 4)
        x = rng.gaussian_matrix(3, 4)
        r1 = decode(s, x, w)
        r2 = decode(s, x, w)
        assert np.array_equal(r1.candidate_state, r2.candidate_state)
        assert np.array_equal(r1.decoded_tokens, r2.decoded_tokens)

    def test_head_count_changes_result(self):
        rng = Prng(24)
        s = rng.gaussian_matrix(3, 4)
        x = rng.gaussian_matrix(3, 4)
        r1 = decode(s, x, init_weights(12, 1, 1, 4))
        r2 = decode(s, x, init_weights(12, 1, 2, 4))
        assert not np.allclose(r1.candidate_state, r2.candidate_state)
        assert r1.candidate_state.shape == r2.candidate_state.shape == (3, 4)

    def test_raw_logits_flag(self):
        rng = Prng(25)
        w = init_weights(42, 1, 1, 2)
        s = rng.gaussian_matrix(2, 2)
        x = rng.gaussian_matrix(2, 2)
        scaled = decode(s, x, w)
        raw = decode(s, x, w, raw_logits=True)
        lo_s = scaled.trace.state_layers[0].logits[0]
        lo_r = raw.trace.state_layers[0].logits[0]
        assert np.allclose(lo_r * (1.0 / np.sqrt(2.0)), lo_s)
        assert not np.array_equal(scaled.candidate_state, raw.candidate_state)

    def test_shape_validation(self):
        w, s, _ = _ones_fixture()
        with pytest.raises(ShapeError):
            decode(s, np.ones((2, 3)), w)


class TestFrozenReplay:
    def test_ones_gate_matches_ungated(self):
        rng = Prng(30)
        w = init_weights(13, 2, 1, 4)
        s = rng.gaussian_matrix(4, 4)
        res = decode(s, rng.gaussian_matrix(4, 4), w)
        replay = frozen_replay(s, res.trace, np.ones(4))
        scale = max(1.0, np.abs(res.candidate_state).max())
        assert np.abs(replay.candidate_state - res.candidate_state).max() / scale < 1e-12

    def test_zero_gate_freezes(self):
        rng = Prng(31)
        w = init_weights(14, 2, 1, 4)
        s = rng.gaussian_matrix(4, 4)
        res = decode(s, rng.gaussian_matrix(4, 4), w)
        replay = frozen_replay(s, res.trace, np.zeros(4))
        assert np.array_equal(replay.candidate_state, s)

    def test_gated_inside_differs_from_replay(self):
        w = init_weights(42, 2, 1, 4)
        rng = Prng(8)
        s = rng.gaussian_matrix(3, 4)
        x = rng.gaussian_matrix(3, 4)
        g = np.full(3, 0.5)
        inside = decode(s, x, w, gate=g)
        replay = frozen_replay(s, decode(s, x, w).trace, g)
        diff = float(np.linalg.norm(inside.candidate_state - replay.candidate_state))
        assert diff == pytest.approx(GATED_VS_REPLAY_NORM, rel=1e-9)
        assert diff > 1e-3

    def test_trace_shape_mismatch(self):
        rng = Prng(32)
        w = init_weights(15, 1, 1, 4)
        s = rng.gaussian_matrix(4, 4)
        res = decode(s, rng.gaussian_matrix(4, 4), w)
        with pytest.raises(TraceError):
            frozen_replay(rng.gaussian_matrix(5, 4), res.trace, np.ones(5))
        with pytest.raises(TraceError):
            frozen_replay(s, res.trace, np.ones(3))


class TestLogitAggregates:
    def test_zero_logits_average_to_zero(self):
        w, s, x = _ones_fixture()
        res = decode(s, x, w)
        # identical rows make logits constant per row; subtract to get zeros
        tr = res.trace
        tr.state_layers[0].logits[0] = np.zeros((2, 2))
        assert np.array_equal(mean_state_logits(tr), np.zeros(2))

    def test_layer_aggregate_matches_full_aggregate_single_layer(self):
        rng = Prng(40)
        w = init_weights(16, 1, 2, 4)
        res = decode(rng.gaussian_matrix(3, 4), rng.gaussian_matrix(5, 4), w)
        full = mean_state_logits(res.trace)
        per_layer = layer_mean_logits(res.trace.state_layers[0], 5)
        assert np.allclose(full, per_layer, atol=1e-15)
