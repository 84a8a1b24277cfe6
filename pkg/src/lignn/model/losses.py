"""Link-prediction decoders and the stable binary cross entropy."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


def decode_cosine(src_embedding: np.ndarray, dst_embedding: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; zero-norm inputs are an error."""
    u = np.asarray(src_embedding, dtype=np.float64)
    v = np.asarray(dst_embedding, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError("embedding dims differ")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for zero-norm embedding")
    return float(u @ v / (nu * nv))


class InBatchResult(NamedTuple):
    logits: np.ndarray  # (B, B)
    loss: float


def decode_in_batch_negatives(
    batch_src: np.ndarray, batch_dst: np.ndarray, temperature: float = 1.0
) -> InBatchResult:
    """Every other row of the batch serves as a negative.

    logits[i][j] = src_i . dst_j / temperature; the loss is mean softmax
    cross-entropy with diagonal targets. Needs B >= 2 (no negatives
    otherwise).
    """
    src = np.asarray(batch_src, dtype=np.float64)
    dst = np.asarray(batch_dst, dtype=np.float64)
    if src.ndim != 2 or src.shape != dst.shape:
        raise ValueError("expected matching (B, d) batches")
    if src.shape[0] < 2:
        raise ValueError("in-batch negatives need B >= 2")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = src @ dst.T / temperature
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    loss = float(np.mean(lse - np.diag(logits)))
    return InBatchResult(logits, loss)


class BCEResult(NamedTuple):
    loss: float
    grad: float  # d loss / d score


def bce_loss(score: float, label: int) -> BCEResult:
    """Sigmoid binary cross entropy in log-sum-exp form.

    loss = softplus(s) - y*s; gradient sigmoid(s) - y. Stable for any s.
    """
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    s = float(score)
    softplus = max(s, 0.0) + np.log1p(np.exp(-abs(s)))
    z = np.exp(-abs(s))
    sig = 1.0 / (1.0 + z) if s >= 0 else z / (1.0 + z)
    return BCEResult(float(softplus - label * s), float(sig - label))
