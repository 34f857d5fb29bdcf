"""State-update rules expressed as one gate law.

Every rule interpolates, per state token, between keeping the previous
state row and accepting the candidate row: full overwrite is gate 1,
freeze is gate 0, the dense attention-derived gate is strictly interior,
and routing masks are binary. Rows whose gate is exactly 0 are copied
from the previous state, never recomputed, so preservation is bitwise.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .decoder import AttentionTrace, mean_state_logits
from .errors import ContractError, ShapeError
from .tensor import Matrix, sigmoid


class GateKind(enum.Enum):
    ONES = "ones"
    DENSE = "dense"
    BINARY = "binary"
    MASKED_DENSE = "masked_dense"
    ZEROS = "zeros"


@dataclass(frozen=True)
class Gate:
    """Per-state-token write intensity in [0,1], broadcast over features."""

    values: np.ndarray
    kind: GateKind

    def __post_init__(self):
        v = self.values
        if v.ndim != 1:
            raise ContractError("gate must be a 1-D per-token vector")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise ContractError("gate values outside [0,1]")
        if self.kind is GateKind.BINARY and not np.all((v == 0.0) | (v == 1.0)):
            raise ContractError("binary gate contains non-{0,1} values")
        if self.kind is GateKind.DENSE and (np.any(v <= 0.0) or np.any(v >= 1.0)):
            raise ContractError("dense gate must be strictly inside (0,1)")


class Variant(str, enum.Enum):
    """Which gate a rule realizes."""

    CONTINUOUS = "continuous"  # gate 1: candidate overwrites everything
    DENSE = "dense"  # attention-derived soft gate, every token written
    MASKED = "masked"  # binary routing mask, unselected rows preserved
    MASKED_DENSE = "masked_dense"  # mask (x) dense gate
    FREEZE = "freeze"  # gate 0: state never changes


class Writeback(str, enum.Enum):
    SINGLE = "single"  # once, after the decoder
    PER_LAYER = "per_layer"  # re-routed and applied inside every layer
    NONE = "none"  # never (freeze only)


@dataclass(frozen=True)
class UpdateRule:
    variant: Variant
    writeback: Writeback = Writeback.SINGLE

    def __post_init__(self):
        if self.variant is Variant.FREEZE and self.writeback is not Writeback.NONE:
            raise ContractError("freeze requires writeback 'none'")
        if self.writeback is Writeback.NONE and self.variant is not Variant.FREEZE:
            raise ContractError("writeback 'none' is only valid for freeze")

    @property
    def uses_mask(self) -> bool:
        return self.variant in (Variant.MASKED, Variant.MASKED_DENSE)

    @property
    def uses_dense_gate(self) -> bool:
        return self.variant in (Variant.DENSE, Variant.MASKED_DENSE)


def continuous_update(s_prev: Matrix, delta_s: Matrix) -> Matrix:
    """Unconditional full-step write: previous state plus the whole residual."""
    if s_prev.shape != delta_s.shape:
        raise ShapeError(f"shapes differ: {s_prev.shape} vs {delta_s.shape}")
    return s_prev + delta_s


def attention_gate(trace: AttentionTrace, on_attention: bool = False) -> Gate:
    """Dense per-token gate: sigmoid of the mean pre-softmax logit.

    Tokens whose queries align with the incoming keys get gates near 1 and
    absorb most of the residual; cold tokens keep most of their history.
    """
    return Gate(sigmoid(mean_state_logits(trace, on_attention)), GateKind.DENSE)


def convex_update(s_prev: Matrix, s_hat: Matrix, gate: np.ndarray) -> Matrix:
    """Row i becomes g_i * candidate_i + (1 - g_i) * previous_i."""
    g = _check_gate_vector(gate, s_prev, s_hat)
    return g[:, None] * s_hat + (1.0 - g)[:, None] * s_prev


def residual_update(s_prev: Matrix, delta_s: Matrix, gate: np.ndarray) -> Matrix:
    """Row i becomes previous_i + g_i * delta_i (equal to the convex form
    when candidate = previous + delta)."""
    g = _check_gate_vector(gate, s_prev, delta_s)
    return s_prev + g[:, None] * delta_s


def dense_gate_update(s_prev: Matrix, trace: AttentionTrace) -> Matrix:
    """Residual update scaled by the attention-derived dense gate."""
    delta = trace.state_residual_sum()
    if delta.shape != s_prev.shape:
        raise ShapeError(f"trace delta {delta.shape} vs state {s_prev.shape}")
    return residual_update(s_prev, delta, attention_gate(trace).values)


def masked_update(s_prev: Matrix, s_hat: Matrix, mask: Gate) -> Matrix:
    """Selected rows are replaced by candidate rows; the rest are copied
    from the previous state bit-for-bit."""
    if mask.kind is not GateKind.BINARY:
        raise ContractError("masked_update requires a binary gate")
    _check_gate_vector(mask.values, s_prev, s_hat)
    out = s_prev.copy()
    sel = mask.values == 1.0
    out[sel] = s_hat[sel]
    return out


def masked_dense_update(
    s_prev: Matrix, s_hat: Matrix, mask: Gate, beta: Gate
) -> Matrix:
    """Mask decides where to write, the dense gate decides how much;
    rows with mask 0 are bit-identical to the previous state for any beta."""
    if mask.kind is not GateKind.BINARY:
        raise ContractError("masked_dense_update requires a binary mask")
    _check_gate_vector(mask.values, s_prev, s_hat)
    b = _check_gate_vector(beta.values, s_prev, s_hat)
    out = s_prev.copy()
    sel = mask.values == 1.0
    g = b[sel, None]
    out[sel] = g * s_hat[sel] + (1.0 - g) * s_prev[sel]
    return out


def combined_gate(mask: Gate, beta: Gate) -> Gate:
    return Gate(mask.values * beta.values, GateKind.MASKED_DENSE)


def gated_rows(s_prev: Matrix, s_hat: Matrix, gate_values: np.ndarray) -> Matrix:
    """The unified row law for an arbitrary [0,1] gate vector: rows at 0 are
    copied from the previous state, rows at 1 from the candidate, interior
    rows take the convex combination."""
    g = _check_gate_vector(gate_values, s_prev, s_hat)
    out = s_prev.copy()
    one = g == 1.0
    mid = (g > 0.0) & (g < 1.0)
    out[one] = s_hat[one]
    gm = g[mid, None]
    out[mid] = gm * s_hat[mid] + (1.0 - gm) * s_prev[mid]
    return out


def apply_rule(
    s_prev: Matrix,
    s_hat: Matrix,
    rule_variant: Variant,
    trace: AttentionTrace | None = None,
    mask: Gate | None = None,
    on_attention: bool = False,
) -> tuple[Matrix, Gate]:
    """The shared gate law: pick the variant's gate and apply it.

    Returns the new state and the realized gate for logging. Binary and
    degenerate gates go through the row-copy paths so preservation and
    overwrite are exact, not just within rounding.
    """
    n = s_prev.shape[0]
    if rule_variant is Variant.CONTINUOUS:
        return s_hat.copy(), Gate(np.ones(n), GateKind.ONES)
    if rule_variant is Variant.FREEZE:
        return s_prev.copy(), Gate(np.zeros(n), GateKind.ZEROS)
    if rule_variant is Variant.DENSE:
        if trace is None:
            raise ContractError("dense rule needs an attention trace")
        beta = attention_gate(trace, on_attention)
        return convex_update(s_prev, s_hat, beta.values), beta
    if rule_variant is Variant.MASKED:
        if mask is None:
            raise ContractError("masked rule needs a routing mask")
        return masked_update(s_prev, s_hat, mask), mask
    if rule_variant is Variant.MASKED_DENSE:
        if mask is None:
            raise ContractError("masked_dense rule needs a routing mask")
        if trace is None:
            raise ContractError("masked_dense rule needs an attention trace")
        beta = attention_gate(trace, on_attention)
        out = masked_dense_update(s_prev, s_hat, mask, beta)
        return out, combined_gate(mask, beta)
    raise ContractError(f"unknown rule variant {rule_variant!r}")


def _check_gate_vector(gate: np.ndarray, a: Matrix, b: Matrix) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    g = np.asarray(gate, dtype=np.float64)
    if g.ndim != 1 or g.shape[0] != a.shape[0]:
        raise ShapeError(f"gate length {g.shape} vs {a.shape[0]} rows")
    return g
