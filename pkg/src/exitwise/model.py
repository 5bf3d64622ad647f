"""Multi-exit dense network with hand-written reverse-mode gradients.

The backbone is a stack of ``num_layers`` dense blocks. Every block output
feeds an internal classifier head (affine, activation, affine, softmax), so a
forward pass yields one class distribution per layer, shallow to deep.

Layer numbers in public records are 1-based; array axes are 0-based.

Checkpoint layout (little-endian)::

    b"MEXM1"
    int32 x 8   input_dim, hidden_dim, num_layers, num_classes,
                head_hidden_dim, activation (0=relu, 1=tanh), seed, residual
    float64 x N parameters in ``parameter_names(config)`` order, each array
                flattened row-major

Block ``i`` holds ``W`` (fan_in x hidden_dim) and ``b`` (hidden_dim); head ``i``
holds ``U`` (hidden_dim x head_hidden_dim), ``c``, ``V`` (head_hidden_dim x
num_classes) and ``e``.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._math import softmax
from .exceptions import DataFormatError, InvalidInputError, StaleCacheError, TrainingDivergedError

MAGIC = b"MEXM1"
_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dim: int = 16
    num_layers: int = 8
    num_classes: int = 2
    head_hidden_dim: int | None = None
    activation: str = "relu"
    seed: int = 42
    residual: bool = False

    def __post_init__(self):
        if self.head_hidden_dim is None:
            object.__setattr__(self, "head_hidden_dim", self.hidden_dim)
        for name in ("input_dim", "hidden_dim", "head_hidden_dim"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.num_layers < 2:
            raise InvalidInputError("num_layers must be >= 2; the diversity term needs two heads")
        if self.num_classes < 2:
            raise InvalidInputError("num_classes must be >= 2")
        if self.activation not in _ACTIVATIONS:
            raise InvalidInputError(f"activation must be one of {_ACTIVATIONS}")
        if self.seed < 0:
            raise InvalidInputError("seed must be non-negative")


def parameter_shapes(config):
    """Ordered ``{name: shape}`` map; this order is the checkpoint order."""
    shapes = {}
    d, hh, C = config.hidden_dim, config.head_hidden_dim, config.num_classes
    for i in range(config.num_layers):
        fan_in = config.input_dim if i == 0 else d
        shapes[f"block{i}.W"] = (fan_in, d)
        shapes[f"block{i}.b"] = (d,)
    for i in range(config.num_layers):
        shapes[f"head{i}.U"] = (d, hh)
        shapes[f"head{i}.c"] = (hh,)
        shapes[f"head{i}.V"] = (hh, C)
        shapes[f"head{i}.e"] = (C,)
    return shapes


def parameter_names(config):
    return list(parameter_shapes(config))


@dataclass
class MultiExitModel:
    config: ModelConfig
    params: dict
    version: int = 0

    @property
    def num_layers(self):
        return self.config.num_layers

    def copy(self):
        return MultiExitModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.version)


@dataclass
class ForwardCache:
    """Activations kept by :func:`forward` for :func:`backward`."""

    model_id: int
    version: int
    inputs: np.ndarray
    pre: list = field(default_factory=list)  # block pre-activations
    hidden: list = field(default_factory=list)  # block outputs h_i
    head_pre: list = field(default_factory=list)
    head_act: list = field(default_factory=list)
    dists: np.ndarray | None = None


def init_model(config):
    """Glorot-uniform weights, zero biases, deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return MultiExitModel(config, params)


def _act(x, kind):
    return np.maximum(x, 0.0) if kind == "relu" else np.tanh(x)


def _act_grad(pre, post, kind):
    return (pre > 0).astype(np.float64) if kind == "relu" else 1.0 - post**2


def _check_features(model, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != model.config.input_dim:
        raise InvalidInputError(
            f"expected {model.config.input_dim} features, got shape {np.shape(X)}"
        )
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("features must be finite")
    return X, single


def _run(model, X, depth, cache=None):
    cfg, P = model.config, model.params
    h = X
    dists = []
    for i in range(depth):
        s = h @ P[f"block{i}.W"] + P[f"block{i}.b"]
        out = _act(s, cfg.activation)
        if cfg.residual and i > 0:
            out = out + h
        h = out
        u = h @ P[f"head{i}.U"] + P[f"head{i}.c"]
        a = _act(u, cfg.activation)
        z = a @ P[f"head{i}.V"] + P[f"head{i}.e"]
        dists.append(softmax(z))
        if cache is not None:
            cache.pre.append(s)
            cache.hidden.append(h)
            cache.head_pre.append(u)
            cache.head_act.append(a)
    return np.stack(dists, axis=1)


def forward(model, X, return_cache=False):
    """Distributions of every head.

    Parameters
    ----------
    X : array-like of shape (n_samples, input_dim) or (input_dim,)

    Returns
    -------
    dists : ndarray of shape (n_samples, L, C), or (L, C) for a single vector
    cache : ForwardCache, only when ``return_cache`` is true
    """
    X, single = _check_features(model, X)
    cache = ForwardCache(id(model), model.version, X) if return_cache else None
    dists = _run(model, X, model.num_layers, cache)
    out = dists[0] if single else dists
    if cache is None:
        return out
    cache.dists = dists
    return out, cache


def forward_prefix(model, X, depth):
    """First ``depth`` head distributions; deeper blocks are never evaluated."""
    if not 1 <= depth <= model.num_layers:
        raise InvalidInputError(f"depth must be in [1, {model.num_layers}], got {depth}")
    X, single = _check_features(model, X)
    dists = _run(model, X, depth)
    return dists[0] if single else dists


def iter_layers(model, x):
    """Yield one head distribution per layer for a single sample, lazily.

    Stopping the iteration early skips the remaining blocks.
    """
    X, _ = _check_features(model, x)
    cfg, P = model.config, model.params
    h = X
    for i in range(cfg.num_layers):
        out = _act(h @ P[f"block{i}.W"] + P[f"block{i}.b"], cfg.activation)
        h = out + h if cfg.residual and i > 0 else out
        a = _act(h @ P[f"head{i}.U"] + P[f"head{i}.c"], cfg.activation)
        yield softmax(a @ P[f"head{i}.V"] + P[f"head{i}.e"])[0]


def backward(model, cache, dist_grads):
    """Parameter gradients given ``dL/d dists`` of shape (n, L, C).

    Each head's gradient reaches its own parameters and the blocks at or
    below its layer only.
    """
    if cache.model_id != id(model) or cache.version != model.version:
        raise StaleCacheError("forward cache does not match the current model parameters")
    cfg, P = model.config, model.params
    G = np.asarray(dist_grads, dtype=np.float64)
    if G.ndim == 2:
        G = G[None]
    if G.shape != cache.dists.shape:
        raise InvalidInputError(f"gradient shape {G.shape} != output shape {cache.dists.shape}")
    L = cfg.num_layers
    grads = {}
    head_to_hidden = []
    for i in range(L):
        x = cache.dists[:, i, :]
        g = G[:, i, :]
        gz = x * (g - (g * x).sum(axis=1, keepdims=True))
        a = cache.head_act[i]
        grads[f"head{i}.V"] = a.T @ gz
        grads[f"head{i}.e"] = gz.sum(axis=0)
        gu = (gz @ P[f"head{i}.V"].T) * _act_grad(cache.head_pre[i], a, cfg.activation)
        grads[f"head{i}.U"] = cache.hidden[i].T @ gu
        grads[f"head{i}.c"] = gu.sum(axis=0)
        head_to_hidden.append(gu @ P[f"head{i}.U"].T)

    gh = np.zeros_like(cache.hidden[-1])
    for i in reversed(range(L)):
        gh = gh + head_to_hidden[i]
        s = cache.pre[i]
        post = _act(s, cfg.activation)
        gs = gh * _act_grad(s, post, cfg.activation)
        below = cache.inputs if i == 0 else cache.hidden[i - 1]
        grads[f"block{i}.W"] = below.T @ gs
        grads[f"block{i}.b"] = gs.sum(axis=0)
        if i > 0:
            gh_below = gs @ P[f"block{i}.W"].T
            if cfg.residual:
                gh_below = gh_below + gh
            gh = gh_below
    return {name: grads[name] for name in P}


class Adam:
    """Adam optimizer state over a parameter dict (beta1=0.9, beta2=0.999)."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(model, grads, state, lr):
    """Apply one Adam update in place and bump ``model.version``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        model.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    model.version += 1
    return model, state


def save_checkpoint(model, path):
    cfg = model.config
    header = struct.pack(
        "<8i",
        cfg.input_dim,
        cfg.hidden_dim,
        cfg.num_layers,
        cfg.num_classes,
        cfg.head_hidden_dim,
        _ACTIVATIONS.index(cfg.activation),
        cfg.seed,
        int(cfg.residual),
    )
    body = b"".join(
        np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in parameter_names(cfg)
    )
    Path(path).write_bytes(MAGIC + header + body)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + 32:
        raise DataFormatError(f"{path}: truncated header")
    vals = struct.unpack_from("<8i", raw, off)
    off += 32
    if not 0 <= vals[5] < len(_ACTIVATIONS):
        raise DataFormatError(f"{path}: unknown activation code {vals[5]}")
    try:
        cfg = ModelConfig(
            input_dim=vals[0],
            hidden_dim=vals[1],
            num_layers=vals[2],
            num_classes=vals[3],
            head_hidden_dim=vals[4],
            activation=_ACTIVATIONS[vals[5]],
            seed=vals[6],
            residual=bool(vals[7]),
        )
    except InvalidInputError as exc:
        raise DataFormatError(f"{path}: invalid config ({exc})") from exc
    shapes = parameter_shapes(cfg)
    expected = sum(int(np.prod(s)) for s in shapes.values()) * 8
    if len(raw) - off != expected:
        raise DataFormatError(f"{path}: expected {expected} parameter bytes, found {len(raw) - off}")
    params = {}
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
        off += size * 8
    return MultiExitModel(cfg, params)
