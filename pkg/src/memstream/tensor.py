"""Dense float64 matrix kernels and the seeded generator behind every run.

Matrices are plain C-contiguous float64 ndarrays of rank 2. All operations
are pure: inputs are never mutated, outputs are freshly allocated. The
matmul accumulation order is pinned (per output element, ascending shared
index) so recorded fixtures stay bit-stable; no BLAS path is used.
"""
from __future__ import annotations

import numba
import numpy as np

from .errors import ShapeError

Matrix = np.ndarray

_MASK64 = (1 << 64) - 1

# Smallest/largest float64 values inside the open unit interval; gates and
# sigmoids are clamped here so "strictly in (0,1)" holds even when exp()
# saturates.
UNIT_OPEN_LO = float(np.nextafter(0.0, 1.0))
UNIT_OPEN_HI = float(np.nextafter(1.0, 0.0))


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Build a float64 matrix from nested sequences or an ndarray.

    Checks the rank-2 shape, the optional expected dimensions, and that
    every entry is finite.
    """
    m = np.array(data, dtype=np.float64, order="C")
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    check_finite(m)
    return m


def check_finite(m: Matrix, what: str = "matrix") -> None:
    if not np.isfinite(m).all():
        raise ShapeError(f"{what} contains non-finite entries")


def _require_2d(m: Matrix, name: str) -> None:
    if not isinstance(m, np.ndarray) or m.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D ndarray")


@numba.njit(cache=True)
def _matmul_kernel(a, b, out):  # pragma: no cover - exercised via matmul()
    n, kk = a.shape
    mm = b.shape[1]
    for i in range(n):
        for k in range(kk):
            aik = a[i, k]
            for j in range(mm):
                out[i, j] += aik * b[k, j]


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a pinned accumulation order.

    Each output element accumulates a[i,k]*b[k,j] in ascending k, exactly
    matching a straight-line triple loop, so fixtures recorded from one are
    bit-identical to the other.
    """
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape} x {b.shape})")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    _matmul_kernel(
        np.ascontiguousarray(a, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
        out,
    )
    return out


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax with per-row max subtraction for overflow safety.

    Shifted logits are floored at -700 so extreme tails cannot produce
    subnormals (which would leave the FPU fast path); weights below
    ~1e-304 are indistinguishable from zero anyway.
    """
    _require_2d(m, "m")
    # non-finite logits produce non-finite rows here; callers detect that at
    # the step boundary rather than tripping FP warnings mid-decode
    with np.errstate(invalid="ignore", over="ignore"):
        shifted = np.maximum(m - m.max(axis=1, keepdims=True), -700.0)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)


def dot_rows(a: Matrix, b: Matrix) -> np.ndarray:
    """Per-row inner products; returns a length-rows vector."""
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"dot_rows: shapes differ ({a.shape} vs {b.shape})")
    return np.einsum("ij,ij->i", a, b)


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ ({a.shape} vs {b.shape})")
    return a * b


def add(a: Matrix, b: Matrix) -> Matrix:
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ ({a.shape} vs {b.shape})")
    return a + b


def scale_rows(m: Matrix, g: np.ndarray) -> Matrix:
    """Multiply every entry of row i by g[i]."""
    _require_2d(m, "m")
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.shape[0] != m.shape[0]:
        raise ShapeError(f"scale_rows: gate length {g.shape} vs {m.shape[0]} rows")
    return m * g[:, None]


def l2_normalize_rows(m: Matrix) -> Matrix:
    """Rows scaled to unit L2 norm; all-zero rows stay zero."""
    _require_2d(m, "m")
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    safe = np.where(norms > 0.0, norms, 1.0)
    return m / safe[:, None]


def sigmoid(x):
    """Numerically stable logistic, clamped to the open interval (0,1).

    The clamp keeps the contract meaningful in float64, where exp()
    saturation would otherwise return exactly 0.0 or 1.0 for |x| > ~37.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    out = np.clip(out, UNIT_OPEN_LO, UNIT_OPEN_HI)
    return float(out) if out.ndim == 0 else out


class Prng:
    """SplitMix64 generator; the single entropy source of the engine.

    The 64-bit state fully determines the sequence, so any run is
    replayable from its seed. Gaussians use Box-Muller on two draws each;
    bounded indices use rejection sampling to avoid modulo bias.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def clone(self) -> "Prng":
        c = Prng(0)
        c.state = self.state
        return c

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform float64 in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def gaussian(self) -> float:
        """Standard normal via Box-Muller; consumes exactly two draws."""
        return float(self.gaussian_matrix(1, 1)[0, 0])

    def uniform_index(self, n: int) -> int:
        """Unbiased integer in [0, n)."""
        if n < 1:
            raise ValueError("uniform_index: n must be >= 1")
        if n == 1:
            return 0
        limit = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def gaussian_matrix(self, rows: int, cols: int) -> Matrix:
        """Row-major matrix of standard normals, two draws per entry.

        The SplitMix64 state advances by a fixed increment per draw, so the
        whole block of draws is computed counter-style in one vectorized
        pass; the final state is exactly where 2*rows*cols sequential
        next_u64() calls would leave it.
        """
        count = 2 * rows * cols
        words = self._bulk_u64(count).reshape(rows * cols, 2)
        u1 = ((words[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (words[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(rows, cols)

    def _bulk_u64(self, count: int) -> np.ndarray:
        """The next `count` outputs of next_u64(), bit-identical, in one pass."""
        start = np.uint64(self.state)
        idx = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = start + idx * np.uint64(0x9E3779B97F4A7C15)
            self.state = int(z[-1])
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))
