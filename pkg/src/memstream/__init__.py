"""Streaming recurrent-memory engine.

A fixed-size token-matrix state is carried across a frame stream by a
dual-stream cross-attention decoder. Each step, a state-update rule
decides where and how much of the decoder's candidate state is written:
everything (continuous), a dense attention-derived amount per token, or
only a sparsely routed subset of patches while the rest is preserved
bit-for-bit. A deterministic harness measures forgetting, drift, and
per-token update balance under any rule/routing combination.
"""

from .decoder import (
    AttentionTrace,
    DecodeResult,
    DecoderWeights,
    decode,
    frozen_replay,
    init_weights,
    mean_state_logits,
)
from .errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    EngineError,
    ShapeError,
    TraceError,
)
from .gates import (
    Gate,
    GateKind,
    UpdateRule,
    Variant,
    Writeback,
    apply_rule,
    attention_gate,
    continuous_update,
    convex_update,
    dense_gate_update,
    masked_dense_update,
    masked_update,
    residual_update,
)
from .harness import (
    GatePlacement,
    GaussianSource,
    KeyRecallSource,
    RetentionReport,
    RevisitSource,
    RunSummary,
    StepTrace,
    StreamConfig,
    TraceLevel,
    coverage_stats,
    equivalence_suite,
    iterate_stream,
    retention_probe,
    run_stream,
    sweep_k,
)
from .routing import (
    Features,
    PatchPartition,
    Policy,
    RoutingMask,
    RoutingPlan,
    Score,
    default_plan,
    patch_scores,
    route,
    select,
    token_scores,
)
from .tensor import Matrix, Prng

__version__ = "0.1.0"
