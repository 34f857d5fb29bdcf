"""Routing: score state tokens against the observation, pick patches to write.

The state is partitioned into contiguous patches. Each step, token scores
measure how aligned each state token already is with the incoming frame;
patch scores are token means; the policy picks which patches get written.
Bottom-k (write the least-aligned patches) is the default: it spreads
writes across the state over time instead of reinforcing a hot subset.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .decoder import DecodeResult, mean_state_logits
from .errors import ConfigError, ContractError, ShapeError
from .gates import Gate, GateKind
from .tensor import Matrix, Prng, dot_rows, l2_normalize_rows

# full-scale default: 708 of 768 state tokens rewritten per step
DEFAULT_STATE_TOKENS = 768
DEFAULT_K = 708


class Score(str, enum.Enum):
    DOT = "dot"
    COSINE = "cosine"
    ATTENTION = "attention"


class Features(str, enum.Enum):
    """Which (state side, observation side) pair feeds the score."""

    PREV_RAW = "prev_raw"  # previous state vs raw frame tokens
    PREV_DECODED = "prev_decoded"  # previous state vs decoded tokens
    CANDIDATE_RAW = "candidate_raw"  # candidate state vs raw frame tokens
    CANDIDATE_DECODED = "candidate_decoded"  # candidate state vs decoded tokens


class Policy(str, enum.Enum):
    BOTTOM_K = "bottom_k"
    TOP_K = "top_k"
    RANDOM_K = "random_k"


@dataclass(frozen=True)
class PatchPartition:
    """n state tokens split into p contiguous patches of patch_size tokens."""

    n: int
    patch_size: int = 1

    def __post_init__(self):
        if self.n < 1 or self.patch_size < 1:
            raise ConfigError("partition dims must be >= 1")
        if self.n % self.patch_size != 0:
            raise ConfigError(
                f"patch_size {self.patch_size} does not divide {self.n} tokens"
            )

    @property
    def patches(self) -> int:
        return self.n // self.patch_size

    def token_range(self, patch: int) -> range:
        lo = patch * self.patch_size
        return range(lo, lo + self.patch_size)


@dataclass(frozen=True)
class RoutingPlan:
    score: Score
    features: Features
    policy: Policy
    k: int
    partition: PatchPartition

    def __post_init__(self):
        if not 0 <= self.k <= self.partition.n:
            raise ConfigError(f"k={self.k} outside [0, {self.partition.n}]")
        if self.k % self.partition.patch_size != 0:
            raise ConfigError(
                f"k={self.k} must select whole patches of {self.partition.patch_size}"
            )


def default_plan(n: int, patch_size: int = 1) -> RoutingPlan:
    """Bottom-k dot-score plan scaled from the 708-of-768 default."""
    k = int(n * DEFAULT_K / DEFAULT_STATE_TOKENS + 0.5)
    k -= k % patch_size
    return RoutingPlan(
        score=Score.DOT,
        features=Features.CANDIDATE_RAW,
        policy=Policy.BOTTOM_K,
        k=k,
        partition=PatchPartition(n, patch_size),
    )


@dataclass(frozen=True)
class RoutingMask:
    """Selected patches with their token-level binary indicator."""

    selected_patches: tuple[int, ...]
    token_mask: np.ndarray

    def gate(self) -> Gate:
        return Gate(self.token_mask, GateKind.BINARY)


def token_scores(
    state_feat: Matrix,
    obs_feat: Matrix,
    score: Score,
    trace=None,
) -> np.ndarray:
    """Per-token alignment between state rows and observation rows.

    Attention scoring ignores the feature matrices and uses the decode
    trace's mean pre-softmax logit per state token.
    """
    if score is Score.ATTENTION:
        if trace is None:
            raise ContractError("attention scoring needs a decode trace")
        return mean_state_logits(trace)
    if state_feat.shape != obs_feat.shape:
        raise ShapeError(
            f"row-aligned scoring needs equal shapes, got {state_feat.shape} "
            f"vs {obs_feat.shape}"
        )
    if score is Score.DOT:
        return dot_rows(state_feat, obs_feat)
    if score is Score.COSINE:
        return dot_rows(l2_normalize_rows(state_feat), l2_normalize_rows(obs_feat))
    raise ConfigError(f"unknown score {score!r}")


def patch_scores(token_r: np.ndarray, partition: PatchPartition) -> np.ndarray:
    """Mean token score within each patch."""
    r = np.asarray(token_r, dtype=np.float64)
    if r.shape != (partition.n,):
        raise ShapeError(f"score length {r.shape} vs {partition.n} tokens")
    return r.reshape(partition.patches, partition.patch_size).mean(axis=1)


def select(
    patch_r: np.ndarray,
    policy: Policy,
    k: int,
    partition: PatchPartition,
    prng: Prng | None = None,
) -> RoutingMask:
    """Pick k/patch_size patches under the policy and build the token mask.

    Score ties break toward the lower patch index, giving a deterministic
    total order (score, index). Random-k uses a Fisher-Yates prefix.
    """
    p = partition.patches
    if k % partition.patch_size != 0:
        raise ConfigError(f"k={k} is not a multiple of patch_size")
    q = k // partition.patch_size
    if q > p:
        raise ConfigError(f"k={k} selects more than the {p} patches available")
    r = np.asarray(patch_r, dtype=np.float64)
    if r.shape != (p,):
        raise ShapeError(f"patch score length {r.shape} vs {p} patches")

    if policy is Policy.BOTTOM_K:
        order = sorted(range(p), key=lambda j: (r[j], j))
        chosen = order[:q]
    elif policy is Policy.TOP_K:
        order = sorted(range(p), key=lambda j: (-r[j], j))
        chosen = order[:q]
    elif policy is Policy.RANDOM_K:
        if prng is None:
            raise ContractError("random_k selection needs a generator")
        pool = list(range(p))
        for i in range(q):
            j = i + prng.uniform_index(p - i)
            pool[i], pool[j] = pool[j], pool[i]
        chosen = pool[:q]
    else:
        raise ConfigError(f"unknown policy {policy!r}")

    mask = np.zeros(partition.n, dtype=np.float64)
    for patch in chosen:
        mask[patch * partition.patch_size : (patch + 1) * partition.patch_size] = 1.0
    return RoutingMask(tuple(sorted(chosen)), mask)


def route(
    result: DecodeResult,
    s_prev: Matrix,
    x_t: Matrix,
    plan: RoutingPlan,
    prng: Prng | None = None,
) -> tuple[RoutingMask, np.ndarray]:
    """Resolve the plan's feature sources, score, and select.

    Returns the mask and the raw token scores. Row-aligned scores require
    the observation side to have exactly n tokens; a frame with m != n
    tokens is a configuration error, not something to silently pool.
    """
    state_feat = (
        s_prev
        if plan.features in (Features.PREV_RAW, Features.PREV_DECODED)
        else result.candidate_state
    )
    obs_feat = (
        x_t
        if plan.features in (Features.PREV_RAW, Features.CANDIDATE_RAW)
        else result.decoded_tokens
    )
    if plan.score is not Score.ATTENTION and obs_feat.shape[0] != state_feat.shape[0]:
        raise ConfigError(
            f"score '{plan.score.value}' pairs token i with token i; observation "
            f"has {obs_feat.shape[0]} tokens but the state has {state_feat.shape[0]}"
        )
    scores = token_scores(state_feat, obs_feat, plan.score, trace=result.trace)
    patch_r = patch_scores(scores, plan.partition)
    mask = select(patch_r, plan.policy, plan.k, plan.partition, prng)
    return mask, scores
