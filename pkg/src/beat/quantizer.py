"""Dual-level vector quantization.

A core codebook discretizes each query vector; a residual codebook
discretizes what the first stage missed. The quantized vector is the sum of
the two selected entries. Training support lives here too: the quantization
loss with its stop-gradient split, the straight-through gradient rule,
usage accounting, k-means initialization, and dead-entry resets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Codebook:
    """K learnable entries of dimension c. ``level`` is 1 (core) or 2 (residual)."""

    entries: np.ndarray
    level: int = 1

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] < 1:
            raise ValueError(f"codebook entries must be (K, c) with K >= 1, got {self.entries.shape}")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook contains non-finite entries")
        if self.level not in (1, 2):
            raise ValueError(f"level must be 1 or 2, got {self.level}")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class DvqResult:
    """Per-query quantization outcome. ``quantized`` always equals q1 + q2."""

    core_index: int
    residual_index: int | None
    q1: np.ndarray
    q2: np.ndarray | None
    quantized: np.ndarray
    pre_quant: np.ndarray

    @property
    def residual_target(self) -> np.ndarray:
        """What the residual stage was asked to approximate: v - q1."""
        return self.pre_quant - self.q1


class UsageStats:
    """Hit counters per codebook entry since the last reset."""

    def __init__(self, sizes: tuple[int, ...]):
        self.hits = [np.zeros(k, dtype=np.int64) for k in sizes]

    @property
    def total_assignments(self) -> int:
        # every level sees each query exactly once
        return int(self.hits[0].sum()) if self.hits else 0

    def record(self, level: int, index: int) -> None:
        self.hits[level][index] += 1

    def reset(self) -> None:
        for h in self.hits:
            h[:] = 0


def nearest_code(codebook: Codebook, v: np.ndarray) -> tuple[int, np.ndarray]:
    """Index and entry minimizing Euclidean distance to v; ties take the
    lowest index."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (codebook.dim,):
        raise ValueError(f"vector has shape {v.shape}, codebook dimension is {codebook.dim}")
    diffs = codebook.entries - v
    index = int(np.argmin(np.einsum("kc,kc->k", diffs, diffs)))
    return index, codebook.entries[index].copy()


def dvq_quantize(
    c1: Codebook,
    c2: Codebook | None,
    v: np.ndarray,
    stats: UsageStats | None = None,
) -> DvqResult:
    """Two-stage quantization of one vector.

    Stage 1 picks the nearest core entry; stage 2 picks the residual entry
    nearest to v - q1. Pass ``c2=None`` for single-level operation. Hit
    counters are incremented when ``stats`` is given.
    """
    v = np.asarray(v, dtype=np.float64)
    core_index, q1 = nearest_code(c1, v)
    if stats is not None:
        stats.record(0, core_index)
    if c2 is None:
        return DvqResult(core_index, None, q1, None, q1.copy(), v.copy())
    residual_index, q2 = nearest_code(c2, v - q1)
    if stats is not None:
        stats.record(1, residual_index)
    return DvqResult(core_index, residual_index, q1, q2, q1 + q2, v.copy())


def vq_loss(results: list[DvqResult], beta: float) -> float:
    """Quantization objective, summed over queries and levels.

    Per query and level j a codebook term ||sg[h_j] - q_j||^2 plus a
    commitment term beta * ||h_j - sg[q_j]||^2, where h_1 is the query vector
    and h_2 the stage-1 residual. Gradients are split in
    :func:`vq_loss_grads`: codebook terms move only codebook entries,
    commitment terms only the encoder output.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    total = 0.0
    for r in results:
        err1 = float(np.sum((r.pre_quant - r.q1) ** 2))
        total += (1.0 + beta) * err1
        if r.q2 is not None:
            err2 = float(np.sum((r.residual_target - r.q2) ** 2))
            total += (1.0 + beta) * err2
    return total


def vq_loss_grads(
    results: list[DvqResult],
    beta: float,
    k1: int,
    k2: int,
    scale: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``scale * vq_loss`` honoring the stop-gradient split.

    Returns (d_pre_quant, d_codebook1, d_codebook2): the commitment terms
    drive d_pre_quant (one row per query); the codebook terms accumulate
    2*(q_j - h_j) onto the selected entries only.
    """
    dim = results[0].pre_quant.shape[0] if results else 0
    d_pre = np.zeros((len(results), dim))
    d_c1 = np.zeros((k1, dim))
    d_c2 = np.zeros((k2, dim))
    for i, r in enumerate(results):
        e1 = r.pre_quant - r.q1
        d_c1[r.core_index] += scale * 2.0 * (-e1)
        d_pre[i] += scale * 2.0 * beta * e1
        if r.q2 is not None:
            e2 = r.residual_target - r.q2
            d_c2[r.residual_index] += scale * 2.0 * (-e2)
            d_pre[i] += scale * 2.0 * beta * e2
    return d_pre, d_c1, d_c2


def straight_through(pre_quant: np.ndarray, quantized: np.ndarray) -> np.ndarray:
    """Forward rule of the straight-through estimator: the quantized values,
    exactly. The backward rule is the identity on pre_quant; see
    :func:`straight_through_vjp`."""
    pre_quant = np.asarray(pre_quant)
    quantized = np.asarray(quantized)
    if pre_quant.shape != quantized.shape:
        raise ValueError(f"shape mismatch: {pre_quant.shape} vs {quantized.shape}")
    return quantized.copy()


def straight_through_vjp(grad_output: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. pre_quant equals the incoming gradient unchanged."""
    return np.asarray(grad_output).copy()


def straight_through_jvp(tangent: np.ndarray) -> np.ndarray:
    """Directional derivative w.r.t. pre_quant is the tangent itself
    (identity Jacobian)."""
    return np.asarray(tangent).copy()


def utilization(stats: UsageStats, k1: int, k2: int = 0) -> float:
    """Percent of entries hit at least once, jointly over both books.

    Pass k2=0 for single-level stats (the denominator is then k1 alone).
    """
    if stats.total_assignments == 0:
        raise ValueError("utilization is undefined with zero assignments")
    distinct = sum(int(np.count_nonzero(h)) for h in stats.hits)
    return 100.0 * distinct / (k1 + k2)


def kmeans(samples: np.ndarray, k: int, iterations: int = 10, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm with seeded k-means++ starts.

    Empty clusters keep their previous centroid. Deterministic under seed.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} samples to build {k} centroids, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(samples, k, rng)
    for _ in range(iterations):
        d2 = _pairwise_sq_dists(samples, centroids)
        assign = np.argmin(d2, axis=1)
        for j in range(k):
            members = samples[assign == j]
            if len(members) > 0:
                centroids[j] = members.mean(axis=0)
    return centroids


def _kmeans_pp_init(samples: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = samples.shape[0]
    centroids = np.empty((k, samples.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = samples[first]
    closest = np.sum((samples - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total == 0:
            # all points already covered: fall back to uniform choice
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=closest / total))
        centroids[j] = samples[pick]
        closest = np.minimum(closest, np.sum((samples - centroids[j]) ** 2, axis=1))
    return centroids


def _pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # ||x - y||^2 expanded; clip tiny negatives from cancellation
    d2 = (
        np.sum(x**2, axis=1)[:, None]
        - 2.0 * (x @ y.T)
        + np.sum(y**2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def init_codebooks(
    samples: np.ndarray,
    k1: int,
    k2: int | None,
    seed: int = 0,
    iterations: int = 10,
) -> tuple[Codebook, Codebook | None]:
    """Build the core book by k-means on encoder outputs and the residual
    book by k-means on the stage-1 residuals. ``k2=None`` skips level 2."""
    samples = np.asarray(samples, dtype=np.float64)
    c1 = Codebook(kmeans(samples, k1, iterations=iterations, seed=seed), level=1)
    if k2 is None:
        return c1, None
    d2 = _pairwise_sq_dists(samples, c1.entries)
    assign = np.argmin(d2, axis=1)
    residuals = samples - c1.entries[assign]
    c2 = Codebook(kmeans(residuals, k2, iterations=iterations, seed=seed + 1), level=2)
    return c1, c2


def reinit_dead_codes(
    codebook: Codebook,
    hits: np.ndarray,
    recent_pre_quant: np.ndarray,
    seed: int = 0,
    noise_std: float = 1e-3,
) -> Codebook:
    """Replace entries with zero hits by random recent pre-quantization
    vectors plus small noise. No dead entries means no change."""
    hits = np.asarray(hits)
    if hits.shape[0] != codebook.size:
        raise ValueError(f"hit counter length {hits.shape[0]} != codebook size {codebook.size}")
    dead = np.flatnonzero(hits == 0)
    if len(dead) == 0:
        return codebook
    recent = np.asarray(recent_pre_quant, dtype=np.float64)
    if recent.ndim != 2 or recent.shape[0] == 0:
        raise ValueError("need at least one recent pre-quantization vector")
    rng = np.random.default_rng(seed)
    entries = codebook.entries.copy()
    picks = rng.integers(0, recent.shape[0], size=len(dead))
    entries[dead] = recent[picks] + rng.normal(0.0, noise_std, size=(len(dead), codebook.dim))
    return Codebook(entries, level=codebook.level)
