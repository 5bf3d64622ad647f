"""Relevancy + diversity training objective, its decompositions and training loop.

Per sample, with head distributions ``x_1..x_L`` and gold class ``y``::

    loss = sum_i alpha_i * CE(x_i, onehot(y)) - sum_{i>=2} beta_i * min_{j<i} CE(x_i, x_j)

``CE(q, p) = -sum p ln q``. Defaults are ``alpha_i = 1`` and ``beta_i = lam``.
Batch losses are means over samples.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from ._math import PROB_FLOOR, cross_entropy, safe_log
from .exceptions import InvalidInputError, TrainingDivergedError
from .model import Adam, adam_step, backward, forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObjectiveConfig:
    """Loss weights and diversity-term options.

    ``alpha``/``beta`` override the weight schemes when given; ``beta[0]`` is
    ignored since the first head has no predecessor. ``stop_gradient`` keeps
    the selected earlier head as a constant target.
    """

    lam: float = 0.2
    alpha_scheme: str = "uniform"
    zero_last_beta: bool = False
    adjacent_only: bool = False
    stop_gradient: bool = True
    alpha: tuple | None = None
    beta: tuple | None = None

    def __post_init__(self):
        if not (np.isfinite(self.lam) and 0.0 <= self.lam < 1.0):
            raise InvalidInputError(
                f"lambda must lie in [0, 1) (recommended range is (0, 1)), got {self.lam}"
            )
        if self.alpha_scheme not in ("uniform", "linear"):
            raise InvalidInputError("alpha_scheme must be 'uniform' or 'linear'")
        for name in ("alpha", "beta"):
            w = getattr(self, name)
            if w is not None:
                w = np.asarray(w, dtype=np.float64)
                if not np.all(np.isfinite(w)) or np.any(w < 0):
                    raise InvalidInputError(f"{name} weights must be finite and non-negative")

    def weights(self, num_layers):
        """Return ``(alpha, beta)`` arrays of length ``num_layers``."""
        if self.alpha is not None:
            alpha = np.asarray(self.alpha, dtype=np.float64)
        elif self.alpha_scheme == "linear":
            alpha = np.arange(1, num_layers + 1, dtype=np.float64)
        else:
            alpha = np.ones(num_layers)
        if self.beta is not None:
            beta = np.asarray(self.beta, dtype=np.float64).copy()
        else:
            beta = np.full(num_layers, float(self.lam))
        if alpha.shape != (num_layers,) or beta.shape != (num_layers,):
            raise InvalidInputError(f"weights must have length {num_layers}")
        beta[0] = 0.0
        if self.zero_last_beta:
            beta[-1] = 0.0
        return alpha, beta


@dataclass
class ObjectiveResult:
    loss: float
    relevancy: float
    diversity: float
    dist_grads: np.ndarray  # dL/d dists, shape (n, L, C)
    argmin: np.ndarray  # 0-based chosen earlier head per (sample, layer); -1 for layer 0


def pairwise_ce(dists):
    """``ce[n, i, j] = CE(x_i, x_j)`` for every pair of heads."""
    logq = safe_log(dists)  # (n, L, C)
    return -np.einsum("njc,nic->nij", dists, logq)


def select_targets(dists, adjacent_only=False):
    """Chosen earlier head for every layer >= 2 and the matching CE values.

    Returns ``argmin`` (n, L) with -1 in column 0 and ``min_ce`` (n, L) with 0
    in column 0. Ties pick the smallest index.
    """
    n, L, _ = dists.shape
    argmin = np.full((n, L), -1, dtype=np.int64)
    min_ce = np.zeros((n, L))
    if adjacent_only:
        for i in range(1, L):
            argmin[:, i] = i - 1
            min_ce[:, i] = cross_entropy(dists[:, i], dists[:, i - 1])
        return argmin, min_ce
    ce = pairwise_ce(dists)
    for i in range(1, L):
        j = np.argmin(ce[:, i, :i], axis=1)
        argmin[:, i] = j
        min_ce[:, i] = ce[np.arange(n), i, j]
    return argmin, min_ce


def _check_batch(dists, y):
    dists = np.asarray(dists, dtype=np.float64)
    y = np.asarray(y)
    if dists.ndim == 2:
        dists = dists[None]
        y = np.atleast_1d(y)
    if dists.ndim != 3 or len(y) != dists.shape[0]:
        raise InvalidInputError("expected dists of shape (n, L, C) and n labels")
    if np.any(y < 0) or np.any(y >= dists.shape[2]):
        raise InvalidInputError("labels out of range")
    return dists, y.astype(np.int64)


def _mean_relevancy(logq, y, alpha):
    n = len(y)
    return float(np.sum(-logq[np.arange(n), :, y] @ alpha) / n)


def relevancy_loss(dists, gold, alpha=None):
    """Weighted sum over heads of ``CE(x_i, onehot(gold))`` for one trace (L, C)."""
    dists, y = _check_batch(dists, gold)
    alpha = np.ones(dists.shape[1]) if alpha is None else np.asarray(alpha, dtype=np.float64)
    return _mean_relevancy(safe_log(dists), y, alpha)


def diversity_loss(dists, beta=None, adjacent_only=False, return_argmin=False):
    """``-sum_{i>=2} beta_i min_{j<i} CE(x_i, x_j)`` for one trace (L, C).

    ``beta`` defaults to ones. With ``return_argmin`` also returns the 1-based
    chosen layer for every layer (0 for layer 1).
    """
    dists = np.asarray(dists, dtype=np.float64)
    L = len(dists)
    if L < 2:
        raise InvalidInputError("the diversity loss needs at least two heads")
    beta = np.ones(L) if beta is None else np.asarray(beta, dtype=np.float64)
    argmin, min_ce = select_targets(dists[None], adjacent_only)
    value = -float(np.sum(beta[1:] * min_ce[0, 1:]))
    if return_argmin:
        return value, argmin[0] + 1
    return value


def combined_loss(dists, y, config):
    """Mean combined loss over a batch and its gradient w.r.t. every head distribution.

    Parameters
    ----------
    dists : array of shape (n, L, C) or (L, C)
    y : int labels of shape (n,) or a scalar
    config : ObjectiveConfig

    Returns
    -------
    ObjectiveResult
    """
    dists, y = _check_batch(dists, y)
    n, L, C = dists.shape
    alpha, beta = config.weights(L)
    logq = safe_log(dists)
    relevancy = _mean_relevancy(logq, y, alpha)

    argmin, min_ce = select_targets(dists, config.adjacent_only)
    diversity = -float(np.sum(min_ce @ beta) / n)
    loss = relevancy + diversity

    # d CE(q, p) / dq = -p / q, zero where the clamp is active
    live = (dists > PROB_FLOOR).astype(np.float64)
    inv_q = live / np.maximum(dists, PROB_FLOOR)
    grads = np.zeros_like(dists)
    grads[np.arange(n), :, y] -= (alpha * inv_q[np.arange(n), :, y]) / n
    rows = np.arange(n)
    for i in range(1, L):
        if beta[i] == 0.0:
            continue
        j = argmin[:, i]
        p = dists[rows, j]
        grads[:, i] += beta[i] * p * inv_q[:, i] / n
        if not config.stop_gradient:
            # d(-beta CE(q, p)) / dp = beta * ln q
            np.add.at(grads, (rows, j), beta[i] * logq[:, i] / n)
    return ObjectiveResult(loss, relevancy, diversity, grads, argmin)


def soft_target(p, gold, lam):
    """Two-class soft target ``(1 - lam p_c)`` on the gold class, ``lam p_c`` elsewhere."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (2,):
        raise InvalidInputError("soft_target is defined for two classes")
    a = lam * p[gold]
    out = np.full(2, a)
    out[gold] = 1.0 - a
    return out


def layer_loss(q, p, gold, lam):
    """Per-layer loss ``CE(q, onehot) - lam CE(q, p)`` without clamping."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return -np.log(q[gold]) + lam * np.sum(p * np.log(q))


def binary_decomposition(q, p, gold, lam):
    """Distillation form of the two-class layer loss.

    Returns ``(CE(q, p'), lam ln(1 - q_c))`` whose sum equals
    :func:`layer_loss` for two classes.
    """
    q = np.asarray(q, dtype=np.float64)
    target = soft_target(p, gold, lam)
    distill = -np.sum(target * np.log(q))
    return distill, lam * np.log(1.0 - q[gold])


def multiclass_decomposition(q, p, gold, lam):
    """``(lam p_c - 1) ln q_c + lam sum_{i != c} p_i ln q_i``."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    mask = np.ones(len(q), dtype=bool)
    mask[gold] = False
    return (lam * p[gold] - 1.0) * np.log(q[gold]) + lam * np.sum(p[mask] * np.log(q[mask]))


@dataclass
class DiagnosticRecord:
    """Training-time snapshot.

    ``alpha[i]`` is the batch mean of ``lam * p_c`` for 0-based layer ``i``
    (NaN for the first layer), ``argmin_layer[i]`` the most frequent 1-based
    closest earlier layer (0 for the first), ``argmin_counts[i, j]`` how often
    layer ``j`` was chosen for layer ``i``.
    """

    step: int
    alpha: np.ndarray
    argmin_layer: np.ndarray
    argmin_counts: np.ndarray


def record_diagnostics(dists, y, config, step, argmin=None):
    """Dynamic label-smoothing strength and closest-layer choice per layer."""
    dists, y = _check_batch(dists, y)
    n, L, _ = dists.shape
    if argmin is None:
        argmin, _ = select_targets(dists, config.adjacent_only)
    alpha = np.full(L, np.nan)
    counts = np.zeros((L, L), dtype=np.int64)
    modal = np.zeros(L, dtype=np.int64)
    rows = np.arange(n)
    for i in range(1, L):
        j = argmin[:, i]
        alpha[i] = float(np.mean(config.lam * dists[rows, j, y]))
        counts[i] = np.bincount(j, minlength=L)
        modal[i] = int(np.argmax(counts[i])) + 1
    return DiagnosticRecord(step, alpha, modal, counts)


def closest_layer_percentages(counts):
    """Row-normalise accumulated argmin counts to percentages (rows 2..L)."""
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        pct = np.where(totals > 0, 100.0 * counts / totals, 0.0)
    return pct


@dataclass
class TrainResult:
    model: object
    diagnostics: list = field(default_factory=list)
    closest_counts: np.ndarray | None = None
    losses: list = field(default_factory=list)


def train(model, X, y, config, epochs=30, lr=1e-2, batch_size=32, seed=0, log_every=10, callback=None):
    """Minibatch Adam training on the combined objective.

    The model is updated in place. Shuffling uses ``seed``; given identical
    inputs the trajectory is bit-identical.

    Raises
    ------
    TrainingDivergedError
        If the loss becomes non-finite.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise InvalidInputError("training set is empty")
    if len(X) != len(y):
        raise InvalidInputError("X and y lengths differ")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("features must be finite")
    C = model.config.num_classes
    if np.any(y < 0) or np.any(y >= C):
        raise InvalidInputError(f"labels must lie in [0, {C})")
    L = model.num_layers
    rng = np.random.default_rng(seed)
    opt = Adam(model.params)
    result = TrainResult(model, closest_counts=np.zeros((L, L), dtype=np.int64))
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start : start + batch_size]
            try:
                dists, cache = forward(model, X[idx], return_cache=True)
            except InvalidInputError as exc:
                raise TrainingDivergedError(f"non-finite activations at step {step}: {exc}") from exc
            obj = combined_loss(dists, y[idx], config)
            if not np.isfinite(obj.loss):
                raise TrainingDivergedError(f"non-finite loss at step {step} (epoch {epoch})")
            diag = record_diagnostics(dists, y[idx], config, step, argmin=obj.argmin)
            result.closest_counts += diag.argmin_counts
            if step % log_every == 0:
                result.diagnostics.append(diag)
                if callback is not None:
                    callback(diag, obj)
            grads = backward(model, cache, obj.dist_grads)
            adam_step(model, grads, opt, lr)
            result.losses.append(obj.loss)
            step += 1
        logger.debug("epoch %d loss %.6f", epoch, result.losses[-1])
    return result


def write_diagnostics_csv(records, path):
    """Rows ``step,layer,alpha,argmin_layer`` for layers 2..L (1-based)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "layer", "alpha", "argmin_layer"])
        for rec in records:
            for i in range(1, len(rec.alpha)):
                w.writerow([rec.step, i + 1, repr(float(rec.alpha[i])), int(rec.argmin_layer[i])])


def write_closest_layers_csv(counts, path):
    """Percentage matrix: one row per layer 2..L, one column per earlier layer."""
    pct = closest_layer_percentages(counts)
    L = pct.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer"] + [f"from_{j + 1}" for j in range(L - 1)])
        for i in range(1, L):
            w.writerow([i + 1] + [repr(float(v)) for v in pct[i, : L - 1]])
