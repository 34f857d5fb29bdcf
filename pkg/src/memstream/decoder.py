"""Dual-stream cross-attention decoder.

Each of the L layers runs two symmetric streams: state tokens attend to
image tokens (the update path) and image tokens attend to state tokens
(the readout path). Both streams of layer l read the other stream's
layer l-1 output. The decoder is residual-only: no FFNs, no layer norm,
no positional encodings — the whole mechanism lives in the attention
residual path, which is what the gate laws factor over.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, TraceError
from .tensor import Matrix, Prng, matmul, scale_rows, softmax_rows


@dataclass(frozen=True)
class StreamWeights:
    """Query/key/value projections of one stream in one layer (each d x d)."""

    wq: Matrix
    wk: Matrix
    wv: Matrix


@dataclass(frozen=True)
class LayerWeights:
    state: StreamWeights
    image: StreamWeights


@dataclass(frozen=True)
class DecoderWeights:
    layers_count: int
    heads: int
    width: int
    layers: tuple[LayerWeights, ...]

    def __post_init__(self):
        if len(self.layers) != self.layers_count:
            raise ConfigError("layer count does not match weight stack")
        for lw in self.layers:
            for sw in (lw.state, lw.image):
                for w in (sw.wq, sw.wk, sw.wv):
                    if w.shape != (self.width, self.width):
                        raise ConfigError("projection is not width x width")
                    if not np.isfinite(w).all():
                        raise ConfigError("non-finite projection weight")


def draw_weights(rng: Prng, layers: int, heads: int, width: int) -> DecoderWeights:
    """Draw all projections from an already-positioned generator.

    Order is pinned for reproducibility: layer-major, stream state then
    image, projections Q/K/V, entries row-major. Every entry is uniform in
    [-1/sqrt(d), +1/sqrt(d)).
    """
    if layers < 1:
        raise ConfigError("need at least one layer")
    if width < 1 or width % heads != 0:
        raise ConfigError(f"width {width} not divisible by heads {heads}")
    scale = 1.0 / math.sqrt(width)

    def draw_mat() -> Matrix:
        vals = [(2.0 * rng.uniform() - 1.0) * scale for _ in range(width * width)]
        w = np.array(vals, dtype=np.float64).reshape(width, width)
        w.setflags(write=False)
        return w

    stack = []
    for _ in range(layers):
        state = StreamWeights(draw_mat(), draw_mat(), draw_mat())
        image = StreamWeights(draw_mat(), draw_mat(), draw_mat())
        stack.append(LayerWeights(state, image))
    return DecoderWeights(layers, heads, width, tuple(stack))


def init_weights(seed: int, layers: int, heads: int, width: int) -> DecoderWeights:
    """Seeded decoder weights; identical (seed, L, H, d) give identical stacks."""
    return draw_weights(Prng(seed), layers, heads, width)


@dataclass
class StreamLayerTrace:
    """One stream's record for one layer: per-head pre-softmax logits and
    attention, plus the head-concatenated residual A@V before any gating."""

    logits: list[Matrix]
    attention: list[Matrix]
    residual: Matrix


@dataclass
class AttentionTrace:
    """Complete decode record: both streams, all layers, all heads.

    `state_layers[l].residual` sums to candidate - previous state in
    ungated mode. Logits are the values the softmax saw, i.e. they include
    the temperature when it is enabled.
    """

    n: int
    m: int
    width: int
    heads: int
    state_layers: list[StreamLayerTrace] = field(default_factory=list)
    image_layers: list[StreamLayerTrace] = field(default_factory=list)
    decoded_tokens: Matrix | None = None

    @property
    def layers_count(self) -> int:
        return len(self.state_layers)

    def state_residual_sum(self) -> Matrix:
        if not self.state_layers:
            raise TraceError("empty trace")
        total = np.zeros((self.n, self.width), dtype=np.float64)
        for layer in self.state_layers:
            total += layer.residual
        return total


@dataclass
class DecodeResult:
    candidate_state: Matrix
    decoded_tokens: Matrix
    trace: AttentionTrace


def _attend(
    queries_from: Matrix,
    keys_values_from: Matrix,
    weights: StreamWeights,
    heads: int,
    raw_logits: bool,
) -> StreamLayerTrace:
    """One cross-attention pass; returns the ungated residual and its trace."""
    q = matmul(queries_from, weights.wq)
    k = matmul(keys_values_from, weights.wk)
    v = matmul(keys_values_from, weights.wv)
    dh = q.shape[1] // heads
    temp = 1.0 if raw_logits else 1.0 / math.sqrt(dh)

    logits_h, attn_h, out_h = [], [], []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = matmul(q[:, sl], k[:, sl].T)
        if temp != 1.0:
            logits = logits * temp
        attn = softmax_rows(logits)
        logits_h.append(logits)
        attn_h.append(attn)
        out_h.append(matmul(attn, v[:, sl]))
    residual = out_h[0] if heads == 1 else np.concatenate(out_h, axis=1)
    return StreamLayerTrace(logits_h, attn_h, residual)


def state_stream_layer(
    s_prev: Matrix,
    x_layer: Matrix,
    layer: LayerWeights,
    heads: int,
    gate: np.ndarray | None = None,
    raw_logits: bool = False,
) -> tuple[Matrix, StreamLayerTrace]:
    """State tokens attend to image tokens; optional per-token gate scales
    the residual rows before the residual add."""
    if s_prev.shape[1] != x_layer.shape[1]:
        raise ShapeError("state and image widths differ")
    tr = _attend(s_prev, x_layer, layer.state, heads, raw_logits)
    applied = tr.residual if gate is None else scale_rows(tr.residual, gate)
    return s_prev + applied, tr


def image_stream_layer(
    x_prev: Matrix,
    s_layer: Matrix,
    layer: LayerWeights,
    heads: int,
    raw_logits: bool = False,
) -> tuple[Matrix, StreamLayerTrace]:
    """Image tokens attend to state tokens; the readout path is never gated."""
    if x_prev.shape[1] != s_layer.shape[1]:
        raise ShapeError("state and image widths differ")
    tr = _attend(x_prev, s_layer, layer.image, heads, raw_logits)
    return x_prev + tr.residual, tr


def decode(
    s_prev: Matrix,
    x_t: Matrix,
    weights: DecoderWeights,
    gate: np.ndarray | None = None,
    raw_logits: bool = False,
) -> DecodeResult:
    """Run all L layers of both streams.

    With `gate` set, the state stream's residual rows are scaled inside
    every layer (attention is recomputed from the gated state, so this is
    not the same as gating the final residual sum — see frozen_replay).
    """
    _check_decode_shapes(s_prev, x_t, weights)
    n, m = s_prev.shape[0], x_t.shape[0]
    trace = AttentionTrace(n=n, m=m, width=weights.width, heads=weights.heads)
    s_cur, x_cur = s_prev, x_t
    for layer in weights.layers:
        # synchronous interleave: both streams read the other's previous output
        s_next, s_tr = state_stream_layer(s_cur, x_cur, layer, weights.heads, gate, raw_logits)
        x_next, x_tr = image_stream_layer(x_cur, s_cur, layer, weights.heads, raw_logits)
        trace.state_layers.append(s_tr)
        trace.image_layers.append(x_tr)
        s_cur, x_cur = s_next, x_next
    trace.decoded_tokens = x_cur
    return DecodeResult(candidate_state=s_cur, decoded_tokens=x_cur, trace=trace)


def frozen_replay(
    s_prev: Matrix, trace: AttentionTrace, gate: np.ndarray
) -> DecodeResult:
    """Gate a finished ungated decode without recomputing attention.

    Candidate = s_prev + gate (x) sum of per-layer residuals. This is the
    factored form under which the after-the-fact gate laws are exact.
    """
    if not trace.state_layers:
        raise TraceError("empty trace")
    if s_prev.shape != (trace.n, trace.width):
        raise TraceError(
            f"trace recorded for {(trace.n, trace.width)}, state is {s_prev.shape}"
        )
    gate = np.asarray(gate, dtype=np.float64)
    if gate.shape != (trace.n,):
        raise TraceError(f"gate length {gate.shape} vs {trace.n} state tokens")
    candidate = s_prev + scale_rows(trace.state_residual_sum(), gate)
    if trace.decoded_tokens is None:
        raise TraceError("trace has no decoded tokens")
    return DecodeResult(candidate_state=candidate, decoded_tokens=trace.decoded_tokens, trace=trace)


def layer_mean_logits(
    layer: StreamLayerTrace, m: int, on_attention: bool = False
) -> np.ndarray:
    """Single-layer aggregate: per-token mean over this layer's heads and
    image tokens."""
    mats = layer.attention if on_attention else layer.logits
    total = np.zeros(mats[0].shape[0], dtype=np.float64)
    for mat in mats:
        total += mat.sum(axis=1)
    return total / (len(mats) * m)


def mean_state_logits(trace: AttentionTrace, on_attention: bool = False) -> np.ndarray:
    """Per-state-token mean of pre-softmax logits over layers, heads and
    image tokens: (1/(L*H*m)) * sum logits[l,h][i,j].

    `on_attention` switches the aggregate to post-softmax attention rows
    (a sensitivity-study variant; row-stochasticity makes it near-constant).
    """
    if not trace.state_layers:
        raise TraceError("empty trace")
    total = np.zeros(trace.n, dtype=np.float64)
    count = 0
    for layer in trace.state_layers:
        mats = layer.attention if on_attention else layer.logits
        for mat in mats:
            total += mat.sum(axis=1)
            count += mat.shape[1]
    return total / count


def _check_decode_shapes(s_prev: Matrix, x_t: Matrix, weights: DecoderWeights) -> None:
    if s_prev.ndim != 2 or x_t.ndim != 2:
        raise ShapeError("state and tokens must be 2-D")
    if s_prev.shape[1] != weights.width or x_t.shape[1] != weights.width:
        raise ShapeError(
            f"feature width mismatch: state {s_prev.shape}, tokens {x_t.shape}, "
            f"weights width {weights.width}"
        )
