"""Per-query inter-frame attention: correlation, weighting, aggregation, residual.

These functions operate on a single query vector against its sampled
neighbor set and define the semantics that the vectorized block forward
must reproduce. The weighted sum over values accumulates in double
precision regardless of storage precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .deform import NeighborSet
from .tensor import ShapeError, Tensor, dot

RAW = "raw"
SOFTMAX = "softmax"
NORM_MODES = (RAW, SOFTMAX)


@dataclass
class AttentionWeights:
    """One weight per grid point; `raw` entries are unmodified dot products."""

    values: np.ndarray  # (k*k,)
    mode: str = RAW


@dataclass
class QueryResult:
    aggregated: np.ndarray  # (C,)
    enhanced: np.ndarray    # (C,)


def correlate(query, keys) -> AttentionWeights:
    """Dot product of the query against every sampled key column."""
    q = np.asarray(query.data if isinstance(query, Tensor) else query)
    k = np.asarray(keys.data if isinstance(keys, Tensor) else keys)
    if q.ndim != 1 or k.ndim != 2:
        raise ShapeError("correlate expects query (C,) and keys (C, k*k)")
    if q.shape[0] != k.shape[0]:
        raise ShapeError(f"channel mismatch: query {q.shape[0]} vs keys {k.shape[0]}")
    vals = np.array([dot(q, k[:, g]) for g in range(k.shape[1])], dtype=q.dtype)
    return AttentionWeights(values=vals, mode=RAW)


def softmax_stable(v: np.ndarray) -> np.ndarray:
    m = np.max(v)
    e = np.exp(v - m)
    return e / np.sum(e)


def normalize(w: AttentionWeights, mode: str, channels: int) -> AttentionWeights:
    """Either pass raw correlations through or softmax them at 1/sqrt(C) scale."""
    if mode == RAW:
        return AttentionWeights(values=w.values, mode=RAW)
    if mode == SOFTMAX:
        scaled = w.values.astype(np.float64) / math.sqrt(channels)
        return AttentionWeights(values=softmax_stable(scaled).astype(w.values.dtype),
                                mode=SOFTMAX)
    raise ValueError(f"unknown normalization mode {mode!r}")


def aggregate(w: AttentionWeights, vals) -> np.ndarray:
    """Weighted channel-wise sum of value columns, accumulated in float64."""
    v = np.asarray(vals.data if isinstance(vals, Tensor) else vals)
    if v.ndim != 2:
        raise ShapeError("aggregate expects values (C, k*k)")
    if w.values.shape[0] != v.shape[1]:
        raise ShapeError(
            f"weight count {w.values.shape[0]} vs value columns {v.shape[1]}")
    acc = v.astype(np.float64) @ w.values.astype(np.float64)
    return acc.astype(v.dtype)


def enhance(query, aggregated) -> np.ndarray:
    """Residual combination of the query with its aggregated neighbors."""
    q = np.asarray(query.data if isinstance(query, Tensor) else query)
    a = np.asarray(aggregated)
    if q.shape != a.shape:
        raise ShapeError(f"length mismatch: {q.shape} vs {a.shape}")
    return q + a


def attend_query(query, neighbors: NeighborSet, mode: str = SOFTMAX) -> QueryResult:
    """Full per-query pipeline: correlate -> normalize -> aggregate -> enhance."""
    q = np.asarray(query.data if isinstance(query, Tensor) else query)
    w = correlate(q, neighbors.keys)
    w = normalize(w, mode, q.shape[0])
    a = aggregate(w, neighbors.vals)
    return QueryResult(aggregated=a, enhanced=enhance(q, a))
