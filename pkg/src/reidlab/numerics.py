"""Dense float64 matrix primitives, seeded randomness, gradient checking.

Everything here is deliberately boring: 64-bit floats, a fixed summation
order in every reduction, and one documented PRNG family (PCG64 keyed by
a hashed split path) so that every experiment is bit-reproducible from
its seed on any machine and under any thread count.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import NumericError, ShapeError

# 2-D row-major float64 ndarray. A plain alias: every public operation
# validates shape/dtype instead of wrapping arrays in a new class.
Matrix = np.ndarray


def as_matrix(a, name: str = "array", check_finite: bool = True) -> Matrix:
    """Coerce to a C-contiguous 2-D float64 array.

    Args:
        a: array-like input.
        name: label used in error messages.
        check_finite: reject NaN/Inf entries when True.
    """
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if check_finite and not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with fixed left-to-right summation per output cell.

    out[i, j] accumulates a[i, 0]*b[0, j], then a[i, 1]*b[1, j], ... in
    that exact order, so the result is bit-identical to a naive triple
    loop and independent of BLAS backend or thread count.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m), dtype=np.float64)
    if n == 0 or m == 0 or k == 0:
        return out
    tmp = np.empty((n, m), dtype=np.float64)
    for t in range(k):
        np.multiply(a[:, t, None], b[t, None, :], out=tmp)
        np.add(out, tmp, out=out)
    return out


def _row_sqnorms(a: Matrix) -> np.ndarray:
    # Same left-to-right accumulation as matmul's k-loop, so that
    # ||x||^2 equals the matmul-computed <x, x> bit for bit.
    n, d = a.shape
    out = np.zeros(n, dtype=np.float64)
    tmp = np.empty(n, dtype=np.float64)
    for t in range(d):
        np.multiply(a[:, t], a[:, t], out=tmp)
        np.add(out, tmp, out=out)
    return out


def pairwise_euclidean(a: Matrix, b: Matrix) -> Matrix:
    """All-pairs L2 distances D[i, j] = ||a_i - b_j||_2.

    Uses the norm expansion with summation orders arranged so that
    identical rows give exactly 0.0; tiny negative squared distances
    from rounding are clamped to 0 before the square root.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"pairwise_euclidean needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_euclidean dimension mismatch: {a.shape} vs {b.shape}")
    g = matmul(a, b.T)
    sq_a = _row_sqnorms(a)
    sq_b = _row_sqnorms(b)
    d2 = sq_a[:, None] + sq_b[None, :]
    d2 -= 2.0 * g
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2, out=d2)


def _derive_entropy(seed: int, path: tuple[str, ...]) -> int:
    # Length-prefixed tags make the encoding injective, so distinct
    # split paths can never collide into the same stream.
    material = "reidlab|%d|" % seed + "|".join("%d:%s" % (len(p), p) for p in path)
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Deterministic random stream: PCG64 keyed by (seed, split path).

    ``split(tag)`` derives an independent child stream whose identity
    depends only on the root seed and the sequence of tags, never on how
    much randomness was consumed before the split. Identical seeds give
    bit-identical streams (NumPy freezes released bit-generator streams).
    """

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(str(p) for p in _path)
        self._gen = np.random.Generator(
            np.random.PCG64(_derive_entropy(self.seed, self.path))
        )

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"

    def split(self, tag: Union[str, int]) -> "Rng":
        """Child stream addressed by tag; reproducible and independent."""
        return Rng(self.seed, self.path + (str(tag),))

    def normal(self, rows: int, cols: int) -> Matrix:
        """(rows x cols) matrix of i.i.d. standard normals."""
        return self._gen.standard_normal((rows, cols), dtype=np.float64)

    def normal_vec(self, n: int) -> np.ndarray:
        return self._gen.standard_normal(n, dtype=np.float64)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(a, size=size, replace=replace)


def rng_normal(rng: Rng, rows: int, cols: int) -> Matrix:
    """Standard-normal matrix from the stream; same seed, same bits."""
    return rng.normal(rows, cols)


@dataclass(frozen=True)
class GradCheckReport:
    """Result of one finite-difference sweep over a parameter vector."""

    max_rel_error: float
    worst_coordinate: int
    num_params: int

    def ok(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    params: Sequence[float],
    analytic_grad: Sequence[float],
    h: float = 1e-6,
) -> GradCheckReport:
    """Compare an analytic gradient against central differences of f.

    Per coordinate the relative error is
    |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|), with g_fd the central
    difference (f(x+h) - f(x-h)) / 2h. Non-finite objective values raise
    NumericError.
    """
    x = np.asarray(params, dtype=np.float64).ravel().copy()
    g_an = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if x.shape != g_an.shape:
        raise ShapeError(
            f"gradient shape {g_an.shape} does not match params shape {x.shape}"
        )
    n = x.size
    max_rel = 0.0
    worst = 0 if n else -1
    for i in range(n):
        orig = x[i]
        x[i] = orig + h
        f_hi = float(f(x))
        x[i] = orig - h
        f_lo = float(f(x))
        x[i] = orig
        if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
            raise NumericError(f"non-finite objective value at coordinate {i}")
        g_fd = (f_hi - f_lo) / (2.0 * h)
        rel = abs(g_fd - g_an[i]) / max(1e-8, abs(g_fd) + abs(g_an[i]))
        if rel > max_rel:
            max_rel = rel
            worst = i
    return GradCheckReport(max_rel_error=max_rel, worst_coordinate=worst, num_params=n)
