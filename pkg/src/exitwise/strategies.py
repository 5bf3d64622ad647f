"""Early-exit decision rules over a sequence of head distributions.

Every decision function takes the full per-sample trace ``dists`` of shape
(L, C) but only ever reads the prefix up to the layer it exits at, so the
outcome is the same as running the layers one at a time.

Policy strings (used by the CLI)::

    voting:delta=2.5,k=0.5
    patience:s=6
    entropy:t=0.3
    maxprob:t=0.9
    oracle
    hybrid:voting:delta=2.5,k=0.5+entropy:t=0.15
"""

import math
from dataclasses import dataclass

import numpy as np

from ._math import argmax_class, entropy
from .exceptions import InvalidInputError

KINDS = ("entropy", "maxprob", "patience", "voting", "oracle", "hybrid")

# parameter names each kind requires in a policy string, in canonical order
_PARAMS = {
    "entropy": ("t",),
    "maxprob": ("t",),
    "patience": ("s",),
    "voting": ("delta", "k"),
    "oracle": (),
}


@dataclass(frozen=True)
class ExitOutcome:
    exit_layer: int  # 1-based
    prediction: int
    forced_final: bool


@dataclass(frozen=True)
class ExitPolicy:
    """An exit rule and its parameters.

    Only the fields relevant to ``kind`` are read. ``vote_threshold`` may be
    ``inf`` to disable voting inside a hybrid. ``voting_final_argmax`` makes a
    forced voting exit fall back to the last head's argmax instead of the
    plurality over all heads. For ``hybrid`` the first inner policy has
    priority when both fire on the same layer, and supplies the fallback when
    neither fires.
    """

    kind: str
    entropy_threshold: float = 0.0
    prob_threshold: float = 1.0
    patience: int = 1
    vote_threshold: float = 1.0
    exponent: float = 0.0
    inner: tuple = ()
    voting_final_argmax: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown policy kind {self.kind!r}")
        if self.kind == "entropy" and not (math.isfinite(self.entropy_threshold) and self.entropy_threshold >= 0):
            raise InvalidInputError("entropy threshold must be finite and >= 0")
        if self.kind == "maxprob" and not 0.0 < self.prob_threshold <= 1.0:
            raise InvalidInputError("probability threshold must lie in (0, 1]")
        if self.kind == "patience" and (int(self.patience) != self.patience or self.patience < 1):
            raise InvalidInputError("patience must be an integer >= 1")
        if self.kind == "voting":
            if not self.vote_threshold > 0 or math.isnan(self.vote_threshold):
                raise InvalidInputError("vote threshold must be > 0")
            if not 0.0 <= self.exponent < 1.0:
                raise InvalidInputError("voting exponent k must lie in [0, 1)")
        if self.kind == "hybrid":
            if len(self.inner) != 2 or any(p.kind == "hybrid" for p in self.inner):
                raise InvalidInputError("hybrid needs exactly two non-hybrid inner policies")

    @property
    def params(self):
        """Canonical ``{name: value}`` mapping for this kind."""
        if self.kind == "entropy":
            return {"t": self.entropy_threshold}
        if self.kind == "maxprob":
            return {"t": self.prob_threshold}
        if self.kind == "patience":
            return {"s": int(self.patience)}
        if self.kind == "voting":
            return {"delta": self.vote_threshold, "k": self.exponent}
        return {}

    def __str__(self):
        if self.kind == "hybrid":
            return "hybrid:" + "+".join(str(p) for p in self.inner)
        if not self.params:
            return self.kind
        return self.kind + ":" + ",".join(f"{k}={_fmt(v)}" for k, v in self.params.items())

    def decide(self, dists, gold=None):
        return decide(self, dists, gold)


def _fmt(v):
    return str(v) if isinstance(v, int) else repr(float(v))


def make_policy(kind, **params):
    """Build a policy from short parameter names (``t``, ``s``, ``delta``, ``k``)."""
    if kind not in _PARAMS:
        raise InvalidInputError(f"unknown policy kind {kind!r}")
    missing = set(_PARAMS[kind]) - set(params)
    extra = set(params) - set(_PARAMS[kind])
    if missing:
        raise InvalidInputError(f"{kind} policy is missing parameter(s): {', '.join(sorted(missing))}")
    if extra:
        raise InvalidInputError(f"{kind} policy does not take: {', '.join(sorted(extra))}")
    if kind == "entropy":
        return ExitPolicy(kind, entropy_threshold=float(params["t"]))
    if kind == "maxprob":
        return ExitPolicy(kind, prob_threshold=float(params["t"]))
    if kind == "patience":
        s = float(params["s"])
        if s != int(s):
            raise InvalidInputError("patience must be an integer")
        return ExitPolicy(kind, patience=int(s))
    if kind == "voting":
        return ExitPolicy(kind, vote_threshold=float(params["delta"]), exponent=float(params["k"]))
    return ExitPolicy(kind)


def split_policy_spec(spec):
    """``"voting:delta=2,k=0.5"`` to ``("voting", {"delta": 2.0, "k": 0.5})``."""
    kind, _, rest = spec.strip().partition(":")
    params = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidInputError(f"expected key=value in policy {spec!r}, got {item!r}")
        try:
            params[key.strip()] = float(value)
        except ValueError:
            raise InvalidInputError(f"non-numeric value for {key!r} in {spec!r}") from None
    return kind.strip(), params


def parse_policy(spec):
    """Parse a policy string such as ``voting:delta=2.0,k=0.5``."""
    spec = spec.strip()
    if spec.startswith("hybrid:"):
        parts = spec[len("hybrid:"):].split("+")
        if len(parts) != 2:
            raise InvalidInputError(f"hybrid needs two policies joined by '+': {spec!r}")
        return ExitPolicy("hybrid", inner=tuple(parse_policy(p) for p in parts))
    kind, params = split_policy_spec(spec)
    return make_policy(kind, **params)


def vote_score(dists, k):
    """Scaled plurality count ``max_c votes_c / l**k`` over the given heads."""
    dists = np.asarray(dists)
    l = len(dists)
    if l < 1:
        raise InvalidInputError("need at least one distribution")
    counts = np.bincount(argmax_class(dists), minlength=dists.shape[-1])
    return counts.max() / l**k


def _plurality(counts):
    return int(np.argmax(counts))


def decide_voting(dists, delta, k, final_argmax=False):
    dists = np.asarray(dists)
    L, C = dists.shape
    counts = np.zeros(C, dtype=np.int64)
    for l in range(1, L + 1):
        counts[argmax_class(dists[l - 1])] += 1
        if counts.max() / l**k >= delta:
            return ExitOutcome(l, _plurality(counts), False)
    pred = int(argmax_class(dists[-1])) if final_argmax else _plurality(counts)
    return ExitOutcome(L, pred, True)


def decide_patience(predictions, s):
    """Exit once the prediction has stayed unchanged for ``s`` consecutive layers.

    ``predictions`` is the per-layer argmax sequence (or an (L, C) array of
    distributions).
    """
    preds = np.asarray(predictions)
    if preds.ndim == 2:
        preds = argmax_class(preds)
    streak = 0
    for l in range(1, len(preds) + 1):
        if l > 1 and preds[l - 1] == preds[l - 2]:
            streak += 1
        else:
            streak = 0
        if streak >= s:
            return ExitOutcome(l, int(preds[l - 1]), False)
    return ExitOutcome(len(preds), int(preds[-1]), True)


def decide_entropy(dists, threshold):
    dists = np.asarray(dists)
    for l in range(1, len(dists) + 1):
        if entropy(dists[l - 1]) < threshold:
            return ExitOutcome(l, int(argmax_class(dists[l - 1])), False)
    return ExitOutcome(len(dists), int(argmax_class(dists[-1])), True)


def decide_maxprob(dists, threshold):
    dists = np.asarray(dists)
    for l in range(1, len(dists) + 1):
        if dists[l - 1].max() >= threshold:
            return ExitOutcome(l, int(argmax_class(dists[l - 1])), False)
    return ExitOutcome(len(dists), int(argmax_class(dists[-1])), True)


def decide_oracle(dists, gold):
    dists = np.asarray(dists)
    for l in range(1, len(dists) + 1):
        if argmax_class(dists[l - 1]) == gold:
            return ExitOutcome(l, int(gold), False)
    return ExitOutcome(len(dists), int(argmax_class(dists[-1])), True)


def decide_hybrid(dists, first, second, gold=None):
    """Exit as soon as either inner policy fires; ``first`` wins ties and the fallback."""
    a = decide(first, dists, gold)
    b = decide(second, dists, gold)
    if a.forced_final and b.forced_final:
        return a
    if b.forced_final or (not a.forced_final and a.exit_layer <= b.exit_layer):
        return a
    return b


def decide(policy, dists, gold=None):
    """Dispatch ``policy`` on one trace of shape (L, C)."""
    kind = policy.kind
    if kind == "entropy":
        return decide_entropy(dists, policy.entropy_threshold)
    if kind == "maxprob":
        return decide_maxprob(dists, policy.prob_threshold)
    if kind == "patience":
        return decide_patience(dists, policy.patience)
    if kind == "voting":
        return decide_voting(dists, policy.vote_threshold, policy.exponent, policy.voting_final_argmax)
    if kind == "oracle":
        if gold is None:
            raise InvalidInputError("the oracle policy needs the gold label")
        return decide_oracle(dists, gold)
    return decide_hybrid(dists, policy.inner[0], policy.inner[1], gold)
