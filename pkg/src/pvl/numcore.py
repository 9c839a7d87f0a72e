"""Deterministic dense linear algebra shared by the engine and the analyses.

Vectors and matrices are plain float64 numpy arrays. Every reduction goes
through :func:`rowsum`, which is a strict left-to-right accumulation
(``np.add.accumulate``) rather than numpy's pairwise/BLAS summation. The
accumulation order therefore never depends on array shape, memory layout or
batch size, which is what makes sequential and layer-synchronous prefill
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

RMS_EPS = 1e-6


class DimensionError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


def as_vec(data, dim: int | None = None) -> np.ndarray:
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionError(f"expected dim {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def rowsum(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis, strictly left to right."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    return np.add.accumulate(a, axis=-1)[..., -1]


def dot(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"dot of shapes {a.shape} and {b.shape}")
    return float(rowsum(a * b))


def matvec(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``m @ x`` for ``m`` of shape (..., out, in) and ``x`` of shape (..., in).

    Leading axes broadcast, so one call can serve a single position or a
    whole batch of positions with identical per-row arithmetic.
    """
    if m.shape[-1] != x.shape[-1]:
        raise DimensionError(f"matvec of shapes {m.shape} and {x.shape}")
    return rowsum(m * x[..., None, :])


def weighted_sum(w: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``sum_j w[..., j] * rows[..., j, :]`` accumulated over j in order."""
    prod = w[..., :, None] * rows
    return np.add.accumulate(np.ascontiguousarray(prod), axis=-2)[..., -1, :]


def norm(v) -> float:
    return float(np.sqrt(dot(v, v)))


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def project(v, direction) -> float:
    """Signed salience of ``direction`` in ``v``.

    ``direction`` is either a :class:`pvl.persona.Direction` or a raw vector
    (normalized here).
    """
    unit = getattr(direction, "unit", None)
    if unit is None:
        unit = normalize(direction)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != unit.shape:
        raise DimensionError(f"project: dims {v.shape} vs {unit.shape}")
    return dot(v, unit)


def cosine(a, b) -> float:
    na, nb = norm(a), norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine of a zero-norm vector")
    c = dot(a, b) / (na * nb)
    return float(min(1.0, max(-1.0, c)))


def softmax(v: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    ``-inf`` entries are allowed (masked positions) and receive weight 0.
    """
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=-1, keepdims=True)
    e = np.exp(v - m)
    return e / rowsum(e)[..., None]


def rms_norm(v: np.ndarray, gain: np.ndarray) -> np.ndarray:
    if v.shape[-1] != gain.shape[-1]:
        raise DimensionError(f"rms_norm: dims {v.shape} vs gain {gain.shape}")
    ms = rowsum(v * v) / v.shape[-1]
    return (v * gain) / np.sqrt(ms + RMS_EPS)[..., None]


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def argmax_first(v) -> int:
    """Index of the maximum; ties go to the lowest index."""
    return int(np.argmax(np.asarray(v)))


@dataclass(frozen=True)
class PcaResult:
    components: np.ndarray  # (k, dim), rows orthonormal
    eigenvalues: np.ndarray  # (k,), descending
    variance_fraction: np.ndarray  # (k,)
    mean: np.ndarray
    total_variance: float

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.variance_fraction)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds (n even) of n/2 disjoint index pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin rounds of
    disjoint pairs that are rotated together. Converges when the off-diagonal
    Frobenius norm drops to ``tol`` times ``max(1, ||a||_F)``. Returns
    ``(eigenvalues, eigenvectors)`` with eigenvectors in columns, sorted by
    descending eigenvalue.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape != (n, n):
        raise DimensionError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("jacobi_eigh needs finite entries")
    vecs = np.eye(n)
    scale = max(1.0, float(np.sqrt(np.sum(a * a))))
    offmask = ~np.eye(n, dtype=bool)
    rounds = _round_robin(n) if n > 1 else []

    def off(m):
        return float(np.sqrt(np.sum(m[offmask] ** 2)))

    for _ in range(max_sweeps):
        if off(a) <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            safe = np.where(active, apq, 1.0)
            theta = (a[q, q] - a[p, p]) / (2.0 * safe)
            big = np.abs(theta) > 1e150
            th = np.where(big, 1.0, theta)
            t = np.where(th >= 0, 1.0, -1.0) / (np.abs(th) + np.sqrt(th * th + 1.0))
            t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            ap, aq = a[:, p], a[:, q]
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            rp, rq = a[p, :], a[q, :]
            a[p, :], a[q, :] = c[:, None] * rp - s[:, None] * rq, s[:, None] * rp + c[:, None] * rq
            vp, vq = vecs[:, p], vecs[:, q]
            vecs[:, p], vecs[:, q] = c * vp - s * vq, s * vp + c * vq
    else:
        if off(a) > tol * scale:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], vecs[:, order]


def _fix_sign(vec: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(vec)))
    return -vec if vec[i] < 0 else vec


def pca(points, k: int) -> PcaResult:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca needs at least 2 points")
    dim = x.shape[1]
    if not 1 <= k <= dim:
        raise ValueError(f"k={k} must be in [1, {dim}]")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    vals, vecs = jacobi_eigh(cov)
    vals = np.clip(vals, 0.0, None)
    total = float(vals.sum())
    comps = np.array([_fix_sign(vecs[:, i]) for i in range(k)])
    frac = vals[:k] / total if total > 0 else np.zeros(k)
    return PcaResult(comps, vals[:k].copy(), frac, mean, total)
