"""Probability primitives: softmax, entropy, cross-entropy and argmax.

Every function accepts either a single vector or a stack of vectors along
the leading axes; the class axis is always the last one. Logarithms are
natural and probabilities are clamped to ``[PROB_FLOOR, 1]`` before any log.
"""

import numpy as np

from .exceptions import InvalidInputError

PROB_FLOOR = 1e-12


def _as_float_array(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise InvalidInputError(f"{name} must be at least one-dimensional")
    if arr.shape[-1] < 2:
        raise InvalidInputError(f"{name} needs at least 2 classes, got {arr.shape[-1]}")
    return arr


def safe_log(p):
    """Natural log of ``p`` clamped to ``[PROB_FLOOR, 1]``."""
    return np.log(np.clip(p, PROB_FLOOR, 1.0))


def softmax(logits):
    """Numerically stable softmax over the last axis.

    Parameters
    ----------
    logits : array-like of shape (..., C)
        Finite real scores, ``C >= 2``.

    Returns
    -------
    probs : ndarray of shape (..., C)
    """
    z = _as_float_array(logits, "logits")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p):
    """Shannon entropy in nats; ``0 * ln 0`` counts as 0."""
    p = _as_float_array(p, "p")
    terms = np.where(p > 0, p * safe_log(p), 0.0)
    return -terms.sum(axis=-1)


def cross_entropy(q, p):
    """Cross-entropy ``-sum_i p_i ln q_i`` of prediction ``q`` against target ``p``.

    ``q`` is clamped away from zero, so saturated predictions give a large but
    finite value.
    """
    q = _as_float_array(q, "q")
    p = _as_float_array(p, "p")
    if q.shape[-1] != p.shape[-1]:
        raise InvalidInputError(
            f"class count mismatch: q has {q.shape[-1]}, p has {p.shape[-1]}"
        )
    return -(p * safe_log(q)).sum(axis=-1)


def argmax_class(p):
    """Index of the largest probability; ties resolve to the smallest index."""
    return np.argmax(np.asarray(p), axis=-1)


def check_distribution(p, atol=1e-9, name="distribution"):
    """Validate non-negativity and unit sum along the last axis."""
    p = _as_float_array(p, name)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError(f"{name} entries must be finite and non-negative")
    if not np.allclose(p.sum(axis=-1), 1.0, rtol=0.0, atol=atol):
        raise InvalidInputError(f"{name} must sum to 1 within {atol}")
    return p
