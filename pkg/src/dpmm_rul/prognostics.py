"""Mode-informed RUL regressor built from three small MLPs.

``signal`` maps a flattened window to a 64-d embedding, ``context`` maps a
mode's parameter encoding to a 16-d embedding, and ``head`` maps the
concatenation of both to a scalar RUL.  Everything is plain numpy with
hand-written backpropagation; the objective is the mean squared error.

Mode contexts are passed as a ``(K, d_theta)`` matrix plus a per-window mode
index, so the context network runs once per mode rather than once per window.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dpmm import ModeParams, _atomic_savez
from .errors import InvalidInputError, InvalidStateError
from .preprocess import Windows

log = logging.getLogger(__name__)

NETWORKS = ("signal", "context", "head")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]  # input width first

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise InvalidInputError("an MLP needs an input width and at least one positive layer width")


@dataclass
class PrognosticParams:
    layers: dict[str, list[tuple[np.ndarray, np.ndarray]]]
    frozen: dict[str, bool] = field(default_factory=lambda: dict.fromkeys(NETWORKS, False))
    pretrained: bool = False
    in_mean: np.ndarray | None = None  # per-sensor input centring
    in_sd: np.ndarray | None = None
    y_scale: float = 1.0
    unfreeze_until: int = -1  # last iteration with the signal network trainable

    def copy(self) -> "PrognosticParams":
        return copy.deepcopy(self)

    @property
    def embed_dim(self) -> int:
        return self.layers["signal"][-1][0].shape[1]

    def n_parameters(self) -> int:
        return sum(W.size + b.size for net in self.layers.values() for W, b in net)


def _init_mlp(spec: MlpSpec, rng: np.random.Generator):
    layers = []
    n = len(spec.widths) - 1
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        # fan-in scaled uniform; wider range ahead of a rectifier
        lim = np.sqrt((6.0 if i < n - 1 else 3.0) / fan_in)
        layers.append((rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return layers


def init_params(
    n_sensors: int,
    xi: int,
    d_theta: int,
    rng: np.random.Generator,
    signal_widths=(128, 96, 64),
    context_width: int = 16,
    head_widths=(32,),
    in_mean=None,
    in_sd=None,
    y_scale: float = 1.0,
) -> PrognosticParams:
    sig = MlpSpec((n_sensors * xi, *signal_widths))
    ctx = MlpSpec((d_theta, context_width))
    head = MlpSpec((signal_widths[-1] + context_width, *head_widths, 1))
    layers = {"signal": _init_mlp(sig, rng), "context": _init_mlp(ctx, rng), "head": _init_mlp(head, rng)}
    # start from the label mean
    W, b = layers["head"][-1]
    layers["head"][-1] = (W, np.ones_like(b))
    return PrognosticParams(
        layers,
        in_mean=np.zeros(n_sensors) if in_mean is None else np.asarray(in_mean, dtype=float),
        in_sd=np.ones(n_sensors) if in_sd is None else np.asarray(in_sd, dtype=float),
        y_scale=float(y_scale),
    )


def encode_mode(params: ModeParams, center=None, scale=None) -> np.ndarray:
    """Standardized mean followed by log-variances (length ``2D``).

    With ``scale`` given the variances are measured in units of ``scale**2``,
    so both halves are centred near zero for typical modes.
    """
    var = np.asarray(params.var, dtype=float)
    if np.any(var <= 0):
        raise InvalidInputError("mode variances must be positive")
    mean = np.asarray(params.mean, dtype=float)
    log_var = np.log(var)
    if center is not None:
        mean = mean - center
    if scale is not None:
        mean = mean / scale
        log_var = log_var - 2.0 * np.log(scale)
    return np.concatenate([mean, log_var])


def _mlp_forward(layers, x):
    """Returns the output and the cache of (input, pre-activation) per layer."""
    cache = []
    h = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        cache.append((h, z))
        h = np.maximum(z, 0.0) if i < last else z
    return h, cache


def _mlp_backward(layers, cache, d_out, need_input_grad=True):
    grads = [None] * len(layers)
    d = d_out
    last = len(layers) - 1
    for i in range(last, -1, -1):
        W, _ = layers[i]
        h, z = cache[i]
        if i < last:
            d = d * (z > 0)
        grads[i] = (h.T @ d, d.sum(axis=0))
        if i > 0 or need_input_grad:
            d = d @ W.T
    return grads, d


def _signal_input(params: PrognosticParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    Xn = (X - params.in_mean[:, None]) / params.in_sd[:, None]
    return Xn.reshape(len(Xn), -1)


def embed_signal(params: PrognosticParams, X: np.ndarray) -> np.ndarray:
    return _mlp_forward(params.layers["signal"], _signal_input(params, X))[0]


def _check_shapes(params, X, contexts, mode_idx):
    n_in = params.layers["signal"][0][0].shape[0]
    if X.ndim != 3 or X.shape[1] * X.shape[2] != n_in:
        raise InvalidInputError(f"windows of shape {X.shape[1:]} do not match signal input {n_in}")
    if contexts.ndim != 2 or contexts.shape[1] != params.layers["context"][0][0].shape[0]:
        raise InvalidInputError("mode context width does not match the context network")
    if len(mode_idx) != len(X):
        raise InvalidInputError("one mode index per window is required")


def _head_forward(params, U, contexts, mode_idx):
    V, ctx_cache = _mlp_forward(params.layers["context"], contexts)
    x = np.concatenate([U, V[mode_idx]], axis=1)
    out, head_cache = _mlp_forward(params.layers["head"], x)
    return out[:, 0] * params.y_scale, ctx_cache, head_cache


def forward(params: PrognosticParams, X, contexts, mode_idx, embeddings=None) -> np.ndarray:
    """Batch prediction; ``embeddings`` may carry precomputed signal embeddings."""
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    mode_idx = np.asarray(mode_idx, dtype=int)
    if embeddings is None:
        X = np.asarray(X, dtype=float)
        _check_shapes(params, X, contexts, mode_idx)
        embeddings = embed_signal(params, X)
    return _head_forward(params, embeddings, contexts, mode_idx)[0]


def predict(params: PrognosticParams, window, mode_context) -> float:
    """RUL for one ``S x xi`` window under one mode context."""
    window = np.asarray(window, dtype=float)
    return float(forward(params, window[None], np.asarray(mode_context, dtype=float)[None], [0])[0])


def loss_and_grads(params: PrognosticParams, X, y, contexts, mode_idx, networks=NETWORKS, embeddings=None):
    """Mean squared error in units of ``y_scale`` and its gradient for the listed networks."""
    y = np.asarray(y, dtype=float)
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    mode_idx = np.asarray(mode_idx, dtype=int)
    n = len(y)
    sig_cache = None
    if embeddings is None:
        U, sig_cache = _mlp_forward(params.layers["signal"], _signal_input(params, X))
    else:
        U = embeddings
    pred, ctx_cache, head_cache = _head_forward(params, U, contexts, mode_idx)
    resid = (pred - y) / params.y_scale
    loss = float(np.mean(resid ** 2))
    d_out = (2.0 / n) * resid[:, None]
    need_x = "signal" in networks or "context" in networks
    head_g, dx = _mlp_backward(params.layers["head"], head_cache, d_out, need_input_grad=need_x)
    grads = {}
    if "head" in networks:
        grads["head"] = head_g
    d_u = params.embed_dim
    if "context" in networks:
        dV = np.zeros((len(contexts), dx.shape[1] - d_u))
        np.add.at(dV, mode_idx, dx[:, d_u:])
        grads["context"] = _mlp_backward(params.layers["context"], ctx_cache, dV, need_input_grad=False)[0]
    if "signal" in networks:
        if sig_cache is None:
            raise InvalidInputError("signal gradients need raw windows, not cached embeddings")
        grads["signal"] = _mlp_backward(params.layers["signal"], sig_cache, dx[:, :d_u], need_input_grad=False)[0]
    return loss, grads


def rul_loss(params: PrognosticParams, windows: Windows, contexts, mode_idx, embeddings=None) -> float:
    """Root mean squared error over all windows."""
    if len(windows) == 0:
        raise InvalidInputError("empty sample set")
    pred = forward(params, windows.X, contexts, mode_idx, embeddings=embeddings)
    return float(np.sqrt(np.mean((pred - windows.y) ** 2)))


def trainable(params: PrognosticParams) -> tuple[str, ...]:
    return tuple(n for n in NETWORKS if not params.frozen[n])


def _apply(params, grads, rate):
    for name, net_grads in grads.items():
        net = params.layers[name]
        for i, (gW, gb) in enumerate(net_grads):
            W, b = net[i]
            net[i] = (W - rate * gW, b - rate * gb)


def grad_step(params: PrognosticParams, X, y, contexts, mode_idx, rate: float) -> PrognosticParams:
    """One gradient-descent step on the unfrozen networks; returns new params."""
    if rate <= 0:
        raise InvalidInputError("learning rate must be positive")
    nets = trainable(params)
    out = params.copy()
    if not nets:
        return out
    _, grads = loss_and_grads(params, X, y, contexts, mode_idx, networks=nets)
    _apply(out, grads, rate)
    return out


def train(
    params: PrognosticParams,
    windows: Windows,
    contexts,
    window_modes,
    epochs: int,
    rate: float,
    rng: np.random.Generator,
    batch_size: int = 64,
    curve: list | None = None,
    tag=None,
) -> PrognosticParams:
    """Mini-batch gradient descent on the unfrozen networks.

    ``window_modes`` gives the mode index of every window.  When the signal
    network is frozen its embeddings are computed once and reused.
    """
    out = params.copy()
    nets = trainable(out)
    if epochs <= 0 or not nets or len(windows) == 0:
        return out
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    window_modes = np.asarray(window_modes, dtype=int)
    cached = None if "signal" in nets else embed_signal(out, windows.X)
    n = len(windows)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if cached is None:
                _, grads = loss_and_grads(out, windows.X[idx], windows.y[idx], contexts, window_modes[idx], nets)
            else:
                _, grads = loss_and_grads(out, None, windows.y[idx], contexts, window_modes[idx], nets,
                                          embeddings=cached[idx])
            _apply(out, grads, rate)
        if curve is not None:
            if cached is None:
                loss = rul_loss(out, windows, contexts, window_modes)
            else:
                loss = rul_loss(out, windows, contexts, window_modes, embeddings=cached)
            curve.append((tag, epoch + 1, loss))
    return out


def pretrain(params, windows, contexts, window_modes, epochs, rate, rng, batch_size=64, curve=None, tag=None):
    """Joint training of all three networks, then freeze the signal network."""
    if params.pretrained:
        raise InvalidStateError("parameters are already pretrained")
    start = params.copy()
    start.frozen = dict.fromkeys(NETWORKS, False)
    out = train(start, windows, contexts, window_modes, epochs, rate, rng, batch_size, curve, tag)
    out.pretrained = True
    out.frozen = {"signal": True, "context": False, "head": False}
    return out


def unfreeze_on_structure_change(params: PrognosticParams, iteration: int, changed: bool, window: int = 3) -> PrognosticParams:
    """Open the signal network for ``window`` iterations starting at ``iteration``.

    Repeated changes extend the deadline to the latest one.
    """
    out = params.copy()
    if changed:
        out.unfreeze_until = max(out.unfreeze_until, iteration + window - 1)
    return out


def apply_freeze_schedule(params: PrognosticParams, iteration: int) -> PrognosticParams:
    """Set the signal freeze flag for ``iteration`` from the unfreeze deadline."""
    out = params.copy()
    if out.pretrained:
        out.frozen["signal"] = iteration > out.unfreeze_until
    return out


def save_params(path, params: PrognosticParams) -> None:
    arrays = {}
    shapes = {}
    for name, net in params.layers.items():
        shapes[name] = len(net)
        for i, (W, b) in enumerate(net):
            arrays[f"{name}_{i}_W"] = W
            arrays[f"{name}_{i}_b"] = b
    arrays["in_mean"] = params.in_mean
    arrays["in_sd"] = params.in_sd
    meta = {
        "version": 1, "kind": "prognostic_params", "layers": shapes, "frozen": params.frozen,
        "pretrained": params.pretrained, "y_scale": params.y_scale, "unfreeze_until": params.unfreeze_until,
    }
    arrays["meta"] = np.array(json.dumps(meta))
    _atomic_savez(path, **arrays)


def load_params(path) -> PrognosticParams:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("kind") != "prognostic_params" or meta.get("version") != 1:
            raise InvalidInputError(f"unsupported parameter snapshot {meta}")
        layers = {
            name: [(z[f"{name}_{i}_W"].copy(), z[f"{name}_{i}_b"].copy()) for i in range(n)]
            for name, n in meta["layers"].items()
        }
        return PrognosticParams(
            layers, dict(meta["frozen"]), meta["pretrained"], z["in_mean"].copy(), z["in_sd"].copy(),
            meta["y_scale"], meta["unfreeze_until"],
        )
