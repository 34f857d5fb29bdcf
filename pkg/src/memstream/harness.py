"""Deterministic stream simulator and metrics engine.

A run is fully determined by (weights_seed, stream_seed, config): frames
are synthesized, decoded against the recurrent state, routed, and written
back under the configured rule, while per-token update counters, drift,
and retention are tracked. State size is constant in stream length, so a
run holds O(1) memory with traces off.

Wall-clock fields (steps/sec, per-step nanoseconds) are measurements and
are the one thing excluded from the determinism contract; every derived
quantity is bit-stable across reruns.
"""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .decoder import (
    AttentionTrace,
    DecodeResult,
    DecoderWeights,
    decode,
    draw_weights,
    frozen_replay,
    image_stream_layer,
    layer_mean_logits,
    state_stream_layer,
)
from .errors import ConfigError, ContractError, DivergenceError
from .gates import (
    Gate,
    GateKind,
    UpdateRule,
    Variant,
    Writeback,
    apply_rule,
    attention_gate,
    combined_gate,
    continuous_update,
    convex_update,
    dense_gate_update,
    gated_rows,
    masked_dense_update,
    masked_update,
    residual_update,
)
from .routing import (
    Features,
    RoutingMask,
    RoutingPlan,
    Score,
    patch_scores,
    route,
    select,
    token_scores,
)
from .tensor import Matrix, Prng, sigmoid

# independent sub-streams derived from the stream seed
_ROUTE_SEED_TAG = 0x726F757465  # "route"
_KEY_SEED_TAG = 0x6B6579  # "key"

_DRIFT_SAMPLES = 128  # cap on recorded drift/retention curve points per run


class TraceLevel(str, enum.Enum):
    OFF = "off"
    SUMMARY = "summary"
    FULL = "full"


class GatePlacement(str, enum.Enum):
    AFTER_DECODER = "after_decoder"  # gate law applied to the final candidate
    FROZEN_REPLAY = "frozen_replay"  # gate applied to the replayed residual sum
    INSIDE_LAYERS = "inside_layers"  # residuals gated inside every layer


@dataclass(frozen=True)
class GaussianSource:
    """I.i.d. unit-normal frame tokens."""


@dataclass(frozen=True)
class RevisitSource:
    """Frames drawn from a fixed dictionary of scenes, revisited on a schedule.

    Without an explicit schedule the scenes cycle round-robin.
    """

    scenes: int
    schedule: tuple[int, ...] | None = None


@dataclass(frozen=True)
class KeyRecallSource:
    """Gaussian stream that injects a fixed key frame once.

    The key is written at `write_step`; retention of the post-write state
    is measured at every step after `probe_after`.
    """

    write_step: int
    probe_after: int


StreamSource = GaussianSource | RevisitSource | KeyRecallSource


@dataclass(frozen=True)
class StreamConfig:
    n: int
    d: int
    m: int
    layers: int
    heads: int
    steps: int
    weights_seed: int
    stream_seed: int
    rule: UpdateRule
    plan: RoutingPlan
    gate_placement: GatePlacement = GatePlacement.AFTER_DECODER
    source: StreamSource = GaussianSource()
    trace_level: TraceLevel = TraceLevel.OFF
    raw_logits: bool = False
    beta_on_attention: bool = False

    def __post_init__(self):
        for name in ("n", "d", "m", "layers", "heads", "steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.plan.partition.n != self.n:
            raise ConfigError(
                f"plan partitions {self.plan.partition.n} tokens, state has {self.n}"
            )
        if (
            self.rule.uses_mask
            and self.plan.score is not Score.ATTENTION
            and self.m != self.n
        ):
            raise ConfigError(
                f"score '{self.plan.score.value}' is token-aligned: needs m == n, "
                f"got m={self.m}, n={self.n}"
            )
        if isinstance(self.source, KeyRecallSource):
            if not 1 <= self.source.write_step < self.source.probe_after <= self.steps:
                raise ConfigError(
                    "key-recall needs 1 <= write_step < probe_after <= steps"
                )
        if isinstance(self.source, RevisitSource):
            if self.source.scenes < 1:
                raise ConfigError("revisit needs at least one scene")
            sched = self.source.schedule
            if sched is not None:
                if len(sched) != self.steps:
                    raise ConfigError("revisit schedule length must equal steps")
                if any(not 0 <= i < self.source.scenes for i in sched):
                    raise ConfigError("revisit schedule index out of range")


@dataclass
class StepTrace:
    """Per-step record kept when tracing is on.

    `update_counts` is the cumulative per-token counter after this step;
    `wall_time_ns` is a measurement and not part of the deterministic
    contract.
    """

    t: int
    scores: np.ndarray | None
    selected_patches: tuple[int, ...] | None
    realized_gate: np.ndarray | None
    state_delta_norm: float
    update_counts: np.ndarray | None
    retention_error: float | None
    retention_error_full: float | None
    wall_time_ns: int
    peak_state_bytes: int


@dataclass
class StepState:
    """Everything one step produced; valid only until the next step is taken."""

    t: int
    prev_state: Matrix
    state: Matrix
    candidate: Matrix | None
    decoded: Matrix
    trace: AttentionTrace | None
    scores: np.ndarray | None
    mask: RoutingMask | None
    selected_patches: tuple[int, ...] | None
    gate: Gate
    changed: np.ndarray
    update_counts: np.ndarray
    wall_time_ns: int
    peak_state_bytes: int
    retention_error: float | None = None
    retention_error_full: float | None = None
    preserved_tokens: int | None = None


@dataclass
class RunSummary:
    config: StreamConfig
    coverage: float
    update_count_cv: float
    update_count_entropy: float
    update_counts: np.ndarray
    drift_curve: tuple[tuple[int, float], ...]
    final_drift: float
    retention_curve: tuple[tuple[int, float, float, int], ...]
    steps_per_sec: float
    peak_state_bytes: int


class _FrameStream:
    """Sequential frame synthesizer; frames must be taken in step order."""

    def __init__(self, cfg: StreamConfig):
        self._cfg = cfg
        self._prng = Prng(cfg.stream_seed)
        src = cfg.source
        if isinstance(src, RevisitSource):
            self._scenes = [
                self._prng.gaussian_matrix(cfg.m, cfg.d) for _ in range(src.scenes)
            ]
        elif isinstance(src, KeyRecallSource):
            self._key = Prng(cfg.stream_seed ^ _KEY_SEED_TAG).gaussian_matrix(
                cfg.m, cfg.d
            )

    def frame(self, t: int) -> Matrix:
        src = self._cfg.source
        if isinstance(src, RevisitSource):
            idx = src.schedule[t - 1] if src.schedule else (t - 1) % src.scenes
            return self._scenes[idx]
        if isinstance(src, KeyRecallSource) and t == src.write_step:
            return self._key
        return self._prng.gaussian_matrix(self._cfg.m, self._cfg.d)


def initial_state(cfg: StreamConfig) -> tuple[DecoderWeights, Matrix]:
    """Weights and the seeded initial state, drawn from one generator in a
    pinned order: all projections first, then the state embedding."""
    rng = Prng(cfg.weights_seed)
    weights = draw_weights(rng, cfg.layers, cfg.heads, cfg.d)
    s0 = rng.gaussian_matrix(cfg.n, cfg.d)
    return weights, s0


def _realize_gate(
    variant: Variant,
    n: int,
    trace: AttentionTrace | None,
    mask: RoutingMask | None,
    on_attention: bool,
) -> Gate:
    if variant is Variant.CONTINUOUS:
        return Gate(np.ones(n), GateKind.ONES)
    if variant is Variant.FREEZE:
        return Gate(np.zeros(n), GateKind.ZEROS)
    if variant is Variant.DENSE:
        if trace is None:
            raise ContractError("dense rule needs an attention trace")
        return attention_gate(trace, on_attention)
    if mask is None:
        raise ContractError("masked rules need a routing mask")
    if variant is Variant.MASKED:
        return mask.gate()
    if trace is None:
        raise ContractError("masked_dense rule needs an attention trace")
    return combined_gate(mask.gate(), attention_gate(trace, on_attention))


def _trace_nbytes(trace: AttentionTrace) -> int:
    total = 0
    for layers in (trace.state_layers, trace.image_layers):
        for layer in layers:
            total += sum(m.nbytes for m in layer.logits)
            total += sum(m.nbytes for m in layer.attention)
            total += layer.residual.nbytes
    if trace.decoded_tokens is not None:
        total += trace.decoded_tokens.nbytes
    return total


def _loggable_scores(
    res: DecodeResult, s_prev: Matrix, x_t: Matrix, plan: RoutingPlan
) -> np.ndarray | None:
    """Best-effort token scores for dense/freeze runs (no selection, no prng)."""
    state_feat = (
        s_prev
        if plan.features in (Features.PREV_RAW, Features.PREV_DECODED)
        else res.candidate_state
    )
    obs_feat = (
        x_t
        if plan.features in (Features.PREV_RAW, Features.CANDIDATE_RAW)
        else res.decoded_tokens
    )
    if plan.score is not Score.ATTENTION and obs_feat.shape != state_feat.shape:
        return None
    return token_scores(state_feat, obs_feat, plan.score, trace=res.trace)


def _per_layer_step(
    s_prev: Matrix,
    x_t: Matrix,
    weights: DecoderWeights,
    cfg: StreamConfig,
    route_prng: Prng,
):
    """Write-back inside every layer: each layer routes a fresh gate from its
    own inputs and applies it before the next layer sees the state."""
    rule = cfg.rule
    plan = cfg.plan
    n = cfg.n
    s_cur, x_cur = s_prev, x_t
    gate_max = np.zeros(n)
    selected: set[int] = set()
    last_scores: np.ndarray | None = None
    for layer in weights.layers:
        s_hat, s_tr = state_stream_layer(
            s_cur, x_cur, layer, weights.heads, None, cfg.raw_logits
        )
        x_next, _ = image_stream_layer(x_cur, s_cur, layer, weights.heads, cfg.raw_logits)

        mask = None
        if rule.uses_mask:
            if plan.score is Score.ATTENTION:
                scores = layer_mean_logits(s_tr, cfg.m)
            else:
                state_feat = (
                    s_cur
                    if plan.features in (Features.PREV_RAW, Features.PREV_DECODED)
                    else s_hat
                )
                obs_feat = (
                    x_cur
                    if plan.features in (Features.PREV_RAW, Features.CANDIDATE_RAW)
                    else x_next
                )
                scores = token_scores(state_feat, obs_feat, plan.score)
            mask = select(
                patch_scores(scores, plan.partition),
                plan.policy,
                plan.k,
                plan.partition,
                route_prng,
            )
            last_scores = scores
            selected.update(mask.selected_patches)

        if rule.variant is Variant.CONTINUOUS:
            gate = Gate(np.ones(n), GateKind.ONES)
        elif rule.variant is Variant.DENSE:
            gate = Gate(
                sigmoid(layer_mean_logits(s_tr, cfg.m, cfg.beta_on_attention)),
                GateKind.DENSE,
            )
        elif rule.variant is Variant.MASKED:
            gate = mask.gate()
        else:  # MASKED_DENSE: this layer's mask (x) this layer's dense gate
            beta = Gate(
                sigmoid(layer_mean_logits(s_tr, cfg.m, cfg.beta_on_attention)),
                GateKind.DENSE,
            )
            gate = combined_gate(mask.gate(), beta)

        s_cur = gated_rows(s_cur, s_hat, gate.values)
        x_cur = x_next
        gate_max = np.maximum(gate_max, gate.values)

    sel = tuple(sorted(selected)) if rule.uses_mask else None
    return s_cur, x_cur, Gate(gate_max, GateKind.MASKED_DENSE), last_scores, sel


def iterate_stream(cfg: StreamConfig):
    """Yield one StepState per step; the caller must not hold references
    across iterations if it wants the O(1)-memory behaviour."""
    weights, s0 = initial_state(cfg)
    frames = _FrameStream(cfg)
    route_prng = Prng(cfg.stream_seed ^ _ROUTE_SEED_TAG)
    counters = np.zeros(cfg.n, dtype=np.int64)
    weight_bytes = sum(
        w.nbytes
        for lw in weights.layers
        for sw in (lw.state, lw.image)
        for w in (sw.wq, sw.wk, sw.wv)
    )
    peak_bytes = 0
    s = s0
    retention = _RetentionTracker(cfg)

    for t in range(1, cfg.steps + 1):
        t0 = time.perf_counter_ns()
        x = frames.frame(t)
        extra_bytes = 0

        if cfg.rule.writeback is Writeback.PER_LAYER:
            s_new, decoded, gate, scores, sel = _per_layer_step(
                s, x, weights, cfg, route_prng
            )
            candidate, trace, mask = None, None, None
            selected = sel
            # one layer's buffers are alive at a time
            extra_bytes = decoded.nbytes + s_new.nbytes * 2 + 2 * (
                cfg.heads * (cfg.n * cfg.m * 8) * 2 + cfg.n * cfg.d * 8
            )
        else:
            res = decode(s, x, weights, raw_logits=cfg.raw_logits)
            candidate, trace = res.candidate_state, res.trace
            mask = None
            scores = None
            if cfg.rule.uses_mask:
                mask, scores = route(res, s, x, cfg.plan, route_prng)
            elif cfg.trace_level is not TraceLevel.OFF:
                scores = _loggable_scores(res, s, x, cfg.plan)
            selected = mask.selected_patches if mask is not None else None

            if cfg.gate_placement is GatePlacement.AFTER_DECODER:
                s_new, gate = apply_rule(
                    s,
                    res.candidate_state,
                    cfg.rule.variant,
                    trace=res.trace,
                    mask=mask.gate() if mask is not None else None,
                    on_attention=cfg.beta_on_attention,
                )
            elif cfg.gate_placement is GatePlacement.FROZEN_REPLAY:
                gate = _realize_gate(
                    cfg.rule.variant, cfg.n, res.trace, mask, cfg.beta_on_attention
                )
                s_new = frozen_replay(s, res.trace, gate.values).candidate_state
                s_new = _restore_zero_rows(s_new, s, gate.values)
            else:  # INSIDE_LAYERS: second pass with the residuals gated in place
                gate = _realize_gate(
                    cfg.rule.variant, cfg.n, res.trace, mask, cfg.beta_on_attention
                )
                if cfg.rule.variant is Variant.CONTINUOUS:
                    s_new = res.candidate_state.copy()
                elif cfg.rule.variant is Variant.FREEZE:
                    s_new = s.copy()
                else:
                    gated = decode(
                        s, x, weights, gate=gate.values, raw_logits=cfg.raw_logits
                    )
                    s_new = _restore_zero_rows(gated.candidate_state, s, gate.values)
                    decoded_gated = gated.decoded_tokens
                    extra_bytes = _trace_nbytes(gated.trace) + s_new.nbytes
            decoded = res.decoded_tokens
            if (
                cfg.gate_placement is GatePlacement.INSIDE_LAYERS
                and cfg.rule.variant
                not in (Variant.CONTINUOUS, Variant.FREEZE)
            ):
                decoded = decoded_gated
            extra_bytes += _trace_nbytes(res.trace) + (candidate.nbytes if candidate is not None else 0)

        if not np.isfinite(s_new).all():
            raise DivergenceError(t)

        changed = np.any(
            s_new.view(np.uint64) != s.view(np.uint64), axis=1
        )
        counters[changed] += 1

        if t == 1:
            persistent = s0.nbytes + s.nbytes + counters.nbytes + weight_bytes
            peak_bytes = persistent + x.nbytes + s_new.nbytes + extra_bytes

        step = StepState(
            t=t,
            prev_state=s,
            state=s_new,
            candidate=candidate,
            decoded=decoded,
            trace=trace,
            scores=scores,
            mask=mask,
            selected_patches=selected,
            gate=gate,
            changed=changed,
            update_counts=counters.copy(),
            wall_time_ns=time.perf_counter_ns() - t0,
            peak_state_bytes=peak_bytes,
        )
        retention.after_step(t, s_new, step.gate.values, step)
        s = s_new
        yield step


class _RetentionTracker:
    """Tracks which tokens were written since the key step and measures how
    far the preserved remainder has moved."""

    def __init__(self, cfg: StreamConfig):
        self._src = cfg.source if isinstance(cfg.source, KeyRecallSource) else None
        self._key_state: Matrix | None = None
        self._written: np.ndarray | None = None

    def after_step(self, t: int, s_new: Matrix, gate_values: np.ndarray, step: StepState):
        if self._src is None:
            return
        if t == self._src.write_step:
            self._key_state = s_new.copy()
            self._written = np.zeros(s_new.shape[0], dtype=bool)
            return
        if self._key_state is None:
            return
        self._written |= gate_values > 0.0
        if t > self._src.probe_after:
            preserved = ~self._written
            diff = s_new - self._key_state
            step.retention_error = float(np.linalg.norm(diff[preserved]))
            step.retention_error_full = float(np.linalg.norm(diff))
            step.preserved_tokens = int(preserved.sum())


def coverage_stats(update_counts: np.ndarray):
    """Coverage, dispersion and entropy of the per-token update counts."""
    counts = np.asarray(update_counts, dtype=np.int64)
    if counts.size == 0:
        raise ContractError("no update counters recorded")
    coverage = float(np.count_nonzero(counts) / counts.size)
    mean = counts.mean()
    cv = float(counts.std() / mean) if mean > 0 else 0.0
    total = counts.sum()
    if total > 0:
        p = counts[counts > 0] / total
        entropy = float(-(p * np.log(p)).sum())
    else:
        entropy = 0.0
    histogram = np.bincount(counts)
    return CoverageStats(coverage, cv, entropy, histogram)


@dataclass(frozen=True)
class CoverageStats:
    coverage: float
    cv: float
    entropy: float
    histogram: np.ndarray


def run_stream(cfg: StreamConfig) -> tuple[RunSummary, list[StepTrace] | None]:
    """Run the whole stream and aggregate metrics.

    Returns the summary and, unless tracing is off, one StepTrace per step
    (summary level keeps scalars, full level also keeps the vectors).
    """
    stride = max(1, math.ceil(cfg.steps / _DRIFT_SAMPLES))
    drift: list[tuple[int, float]] = []
    retention: list[tuple[int, float, float, int]] = []
    traces: list[StepTrace] | None = (
        None if cfg.trace_level is TraceLevel.OFF else []
    )
    final_drift = 0.0
    counts = np.zeros(cfg.n, dtype=np.int64)
    peak = 0
    s0: Matrix | None = None
    s0_norm = 0.0
    started = time.perf_counter()

    for step in iterate_stream(cfg):
        if step.t == 1:
            s0 = step.prev_state
            s0_norm = float(np.linalg.norm(s0))
        counts = step.update_counts
        peak = step.peak_state_bytes
        if step.t % stride == 0 or step.t == cfg.steps:
            d = float(np.linalg.norm(step.state - s0)) / s0_norm
            drift.append((step.t, d))
            if step.t == cfg.steps:
                final_drift = d
        if step.retention_error is not None and (
            step.t % stride == 0 or step.t == cfg.steps
        ):
            retention.append(
                (
                    step.t,
                    step.retention_error,
                    step.retention_error_full,
                    step.preserved_tokens,
                )
            )
        if traces is not None:
            full = cfg.trace_level is TraceLevel.FULL
            traces.append(
                StepTrace(
                    t=step.t,
                    scores=step.scores.copy() if full and step.scores is not None else None,
                    selected_patches=step.selected_patches,
                    realized_gate=step.gate.values.copy() if full else None,
                    state_delta_norm=float(
                        np.linalg.norm(step.state - step.prev_state)
                    ),
                    update_counts=counts.copy() if full else None,
                    retention_error=step.retention_error,
                    retention_error_full=step.retention_error_full,
                    wall_time_ns=step.wall_time_ns,
                    peak_state_bytes=step.peak_state_bytes,
                )
            )
    elapsed = time.perf_counter() - started
    stats = coverage_stats(counts)
    summary = RunSummary(
        config=cfg,
        coverage=stats.coverage,
        update_count_cv=stats.cv,
        update_count_entropy=stats.entropy,
        update_counts=counts,
        drift_curve=tuple(drift),
        final_drift=final_drift,
        retention_curve=tuple(retention),
        steps_per_sec=cfg.steps / elapsed if elapsed > 0 else float("inf"),
        peak_state_bytes=peak,
    )
    return summary, traces


@dataclass(frozen=True)
class RetentionReport:
    write_step: int
    probe_after: int
    curve: tuple[tuple[int, float, float, int], ...]
    summary: RunSummary


def retention_probe(cfg: StreamConfig) -> RetentionReport:
    """Key-recall run with the full (unsubsampled) retention curve."""
    if not isinstance(cfg.source, KeyRecallSource):
        raise ConfigError("retention probe needs a key-recall source")
    curve: list[tuple[int, float, float, int]] = []
    counts = np.zeros(cfg.n, dtype=np.int64)
    peak = 0
    s0: Matrix | None = None
    s0_norm = 0.0
    final_drift = 0.0
    started = time.perf_counter()
    for step in iterate_stream(cfg):
        if step.t == 1:
            s0 = step.prev_state
            s0_norm = float(np.linalg.norm(s0))
        counts = step.update_counts
        peak = step.peak_state_bytes
        if step.retention_error is not None:
            curve.append(
                (
                    step.t,
                    step.retention_error,
                    step.retention_error_full,
                    step.preserved_tokens,
                )
            )
        if step.t == cfg.steps:
            final_drift = float(np.linalg.norm(step.state - s0)) / s0_norm
    elapsed = time.perf_counter() - started
    stats = coverage_stats(counts)
    summary = RunSummary(
        config=cfg,
        coverage=stats.coverage,
        update_count_cv=stats.cv,
        update_count_entropy=stats.entropy,
        update_counts=counts,
        drift_curve=(),
        final_drift=final_drift,
        retention_curve=tuple(curve),
        steps_per_sec=cfg.steps / elapsed if elapsed > 0 else float("inf"),
        peak_state_bytes=peak,
    )
    return RetentionReport(
        cfg.source.write_step, cfg.source.probe_after, tuple(curve), summary
    )


def sweep_k(cfg: StreamConfig, k_list) -> list[RunSummary]:
    """One run per k, shared seeds; summaries in the order given."""
    out = []
    for k in k_list:
        plan = replace(cfg.plan, k=int(k))
        summary, _ = run_stream(replace(cfg, plan=plan))
        out.append(summary)
    return out


def _restore_zero_rows(s_new: Matrix, s_prev: Matrix, gate_values: np.ndarray) -> Matrix:
    """Bitwise-restore rows whose gate is exactly zero (preservation is a
    copy, never an arithmetic identity)."""
    zero = gate_values == 0.0
    if zero.any():
        s_new = s_new.copy()
        s_new[zero] = s_prev[zero]
    return s_new


# ----------------------------------------------------------------------------
# equivalence suite: randomized cross-checks of the update-law algebra
# ----------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    trials: int = 0
    failures: int = 0
    max_deviation: float = 0.0
    first_failure_seed: int | None = None

    def record(self, ok: bool, dev: float, seed: int):
        self.trials += 1
        self.max_deviation = max(self.max_deviation, dev)
        if not ok:
            self.failures += 1
            if self.first_failure_seed is None:
                self.first_failure_seed = seed


@dataclass
class EquivalenceReport:
    trials: int
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.failures == 0 for c in self.checks)

    @property
    def total_failures(self) -> int:
        return sum(c.failures for c in self.checks)


def _rel_dev(a: Matrix, b: Matrix) -> float:
    scale = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale


def equivalence_suite(
    seed: int, trials: int, inject_fault: bool = False
) -> EquivalenceReport:
    """Randomized verification of the gate-law identities.

    Per trial, on random shapes: (a) convex and residual forms agree to
    1e-12; (b) an all-ones gate reproduces the full overwrite and the
    residual decomposition; (c) the dense gate applied by frozen replay,
    by the residual law, and by the convex law agree to 1e-12; (d) binary
    masks preserve unselected rows bitwise; (e) mask (x) dense gate stays
    in [0,1]; (f) every attention row sums to 1. Failures are reported,
    not raised; `inject_fault` corrupts trial 0 as a negative control.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    rng = Prng(seed)
    checks = {
        name: CheckResult(name)
        for name in (
            "convex_residual_identity",
            "ones_gate_is_continuous",
            "dense_gate_three_ways",
            "binary_mask_preservation",
            "combined_gate_range",
            "attention_rows_sum_to_one",
        )
    }

    for trial in range(trials):
        trial_seed = rng.next_u64()
        trng = Prng(trial_seed)
        heads = 1 + trng.uniform_index(2)
        d_choices = [d for d in range(2, 9) if d % heads == 0]
        d = d_choices[trng.uniform_index(len(d_choices))]
        n = 2 + trng.uniform_index(15)
        m = 2 + trng.uniform_index(15)
        layers = 1 + trng.uniform_index(3)
        weights = draw_weights(trng, layers, heads, d)
        s = trng.gaussian_matrix(n, d)
        x = trng.gaussian_matrix(m, d)

        res = decode(s, x, weights)
        tol = 1e-12

        # (f) softmax rows are stochastic
        worst_row = 0.0
        for layer_list in (res.trace.state_layers, res.trace.image_layers):
            for layer in layer_list:
                for attn in layer.attention:
                    worst_row = max(
                        worst_row, float(np.abs(attn.sum(axis=1) - 1.0).max())
                    )
        checks["attention_rows_sum_to_one"].record(worst_row <= tol, worst_row, trial_seed)

        delta = res.trace.state_residual_sum()
        s_hat = s + delta

        # (a) convex vs residual under a random interior gate
        g = np.array([trng.uniform() for _ in range(n)])
        g = np.clip(g, 1e-6, 1.0 - 1e-6)
        dev = _rel_dev(convex_update(s, s_hat, g), residual_update(s, delta, g))
        checks["convex_residual_identity"].record(dev <= tol, dev, trial_seed)

        # (b) gate of ones == unconditional overwrite; residual decomposition
        full, _ = apply_rule(s, res.candidate_state, Variant.CONTINUOUS)
        exact = bool(np.array_equal(full, res.candidate_state))
        dev_b = _rel_dev(continuous_update(s, delta), res.candidate_state)
        checks["ones_gate_is_continuous"].record(exact and dev_b <= 1e-9, dev_b, trial_seed)

        # (c) dense gate: frozen replay vs residual law vs convex law
        beta = attention_gate(res.trace)
        via_replay = frozen_replay(s, res.trace, beta.values).candidate_state
        via_residual = dense_gate_update(s, res.trace)
        via_convex, _ = apply_rule(s, res.candidate_state, Variant.DENSE, trace=res.trace)
        dev_c = max(
            _rel_dev(via_replay, via_residual), _rel_dev(via_residual, via_convex)
        )
        checks["dense_gate_three_ways"].record(dev_c <= tol, dev_c, trial_seed)

        # (d) binary masks preserve unselected rows bit-for-bit
        mask_vals = np.array([float(trng.uniform_index(2)) for _ in range(n)])
        mask = Gate(mask_vals, GateKind.BINARY)
        kept = mask_vals == 0.0
        hard = masked_update(s, s_hat, mask)
        soft = masked_dense_update(s, s_hat, mask, beta)
        bitwise = bool(
            np.array_equal(hard[kept].view(np.uint64), s[kept].view(np.uint64))
            and np.array_equal(soft[kept].view(np.uint64), s[kept].view(np.uint64))
        )
        checks["binary_mask_preservation"].record(bitwise, 0.0 if bitwise else 1.0, trial_seed)

        # (e) combined gate range
        combined = mask_vals * beta.values
        if inject_fault and trial == 0:
            combined = combined + 1.5  # negative control
        in_range = bool(np.all(combined >= 0.0) and np.all(combined <= 1.0))
        out_by = float(max(np.max(combined - 1.0, initial=0.0), np.max(-combined, initial=0.0)))
        checks["combined_gate_range"].record(in_range, out_by, trial_seed)

    return EquivalenceReport(trials=trials, checks=tuple(checks.values()))
