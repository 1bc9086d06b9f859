"""Dense ReLU feedforward networks with hand-written reverse mode and Adam.

Weights are stored as ``(fan_out, fan_in)`` matrices so a layer maps a batch
``A`` of shape ``(n, fan_in)`` to ``A @ W.T + b``. Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nqnet import seeding


@dataclass
class DenseNet:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        dims = self.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("need exactly len(layer_dims) - 1 weight matrices and bias vectors")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (dims[l + 1], dims[l]):
                raise ValueError(f"layer {l}: weight shape {W.shape} != {(dims[l + 1], dims[l])}")
            if b.shape != (dims[l + 1],):
                raise ValueError(f"layer {l}: bias shape {b.shape} != {(dims[l + 1],)}")
        if self.activation != "relu":
            raise ValueError(f"unsupported hidden activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "DenseNet":
        return DenseNet(list(self.layer_dims), [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], self.activation)

    def __call__(self, X) -> np.ndarray:
        return forward(self, X)[0]


@dataclass
class ParallelNet:
    """Independent dense nets reading the same input; outputs are concatenated.

    Used for the NQ layout with separate mean and gaps networks. The
    functions below (forward, backward, Adam, flatten) accept either type.
    """

    parts: tuple

    def __post_init__(self):
        self.parts = tuple(self.parts)
        if not self.parts or not all(isinstance(p, DenseNet) for p in self.parts):
            raise ValueError("ParallelNet needs at least one DenseNet")
        if len({p.layer_dims[0] for p in self.parts}) != 1:
            raise ValueError("all parts must share the input dimension")

    @property
    def layer_dims(self) -> list[int]:
        """Input size, per-part hidden widths summed, total output size."""
        return [self.parts[0].layer_dims[0], *(sum(w) for w in zip(*(p.layer_dims[1:-1] for p in self.parts))),
                sum(p.layer_dims[-1] for p in self.parts)]

    @property
    def n_params(self) -> int:
        return sum(p.n_params for p in self.parts)

    def copy(self) -> "ParallelNet":
        return ParallelNet(tuple(p.copy() for p in self.parts))

    def __call__(self, X) -> np.ndarray:
        return forward(self, X)[0]


@dataclass
class ForwardCache:
    """Pre-activations ``z[l]`` and post-activations ``a[l]`` for one batch.

    ``a[0]`` is the input batch; ``a[l + 1] = relu(z[l])`` for hidden layers
    and ``a[-1] = z[-1]`` for the output layer.
    """

    pre: list[np.ndarray]
    post: list[np.ndarray]
    batch_size: int


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in (*self.weights, *self.biases))


@dataclass
class AdamState:
    m_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_w: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or not self.eps > 0:
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.step < 0:
            raise ValueError("step counter must be non-negative")


def init_net(layer_dims, seed: int) -> DenseNet:
    """Glorot-uniform weights, zero biases, drawn from the INIT stream of ``seed``."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output size")
    if any(d < 1 for d in dims):
        raise ValueError(f"all layer sizes must be positive, got {dims}")
    rng = seeding.stream(seed, seeding.INIT)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(dims, weights, biases)


def init_parallel(input_dim: int, hidden, out_dims, seed: int) -> ParallelNet:
    """One Glorot-initialised net per entry of ``out_dims``, each with widths ``hidden``."""
    return ParallelNet(tuple(init_net([input_dim, *hidden, k], seeding.derive(seed, i))
                             for i, k in enumerate(out_dims)))


def forward(net: DenseNet | ParallelNet, X) -> tuple[np.ndarray, ForwardCache]:
    if isinstance(net, ParallelNet):
        outs, caches = zip(*(forward(p, X) for p in net.parts))
        return np.concatenate(outs, axis=1), caches
    A = np.asarray(X, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None] if net.layer_dims[0] == 1 else A[None, :]
    if A.ndim != 2 or A.shape[1] != net.layer_dims[0]:
        raise ValueError(f"input has shape {np.shape(X)}, expected (n, {net.layer_dims[0]})")
    pre, post = [], [A]
    last = net.n_layers - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        Z = A @ W.T + b
        A = Z if l == last else np.maximum(Z, 0.0)
        pre.append(Z)
        post.append(A)
    return A, ForwardCache(pre, post, A.shape[0])


def backward(net: DenseNet | ParallelNet, cache, dL_doutput) -> Grads | tuple:
    """Parameter gradients of a scalar loss given its gradient w.r.t. the outputs.

    Gradients are summed over the batch; the ReLU derivative at exactly 0 is 0.
    For a ``ParallelNet`` the result is a tuple with one ``Grads`` per part.
    """
    G = np.asarray(dL_doutput, dtype=np.float64)
    if isinstance(net, ParallelNet):
        cuts = np.cumsum([p.layer_dims[-1] for p in net.parts])[:-1]
        if G.ndim != 2 or G.shape[1] != net.layer_dims[-1]:
            raise ValueError(f"output gradient has shape {G.shape}, expected (n, {net.layer_dims[-1]})")
        return tuple(backward(p, c, g) for p, c, g in zip(net.parts, cache, np.split(G, cuts, axis=1)))
    expected = (cache.batch_size, net.layer_dims[-1])
    if G.shape != expected:
        raise ValueError(f"output gradient has shape {G.shape}, expected {expected}")
    if len(cache.pre) != net.n_layers:
        raise ValueError("cache does not belong to this network")
    if not np.all(np.isfinite(G)):
        raise FloatingPointError("non-finite upstream gradient")
    dWs = [None] * net.n_layers
    dbs = [None] * net.n_layers
    for l in range(net.n_layers - 1, -1, -1):
        if l < net.n_layers - 1:
            G = G * (cache.pre[l] > 0.0)
        dWs[l] = G.T @ cache.post[l]
        dbs[l] = G.sum(axis=0)
        if l > 0:
            G = G @ net.weights[l]
    return Grads(dWs, dbs)


def adam_init(net: DenseNet | ParallelNet, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.99,
              eps: float = 1e-8) -> AdamState:
    if isinstance(net, ParallelNet):
        return tuple(adam_init(p, lr, beta1, beta2, eps) for p in net.parts)
    zeros = lambda ps: [np.zeros_like(p) for p in ps]  # noqa: E731
    return AdamState(zeros(net.weights), zeros(net.biases), zeros(net.weights), zeros(net.biases),
                     0, lr, beta1, beta2, eps)


def adam_step(net, grads, state):
    """One bias-corrected Adam update. Inputs are left untouched."""
    if isinstance(net, ParallelNet):
        pairs = [adam_step(p, g, st) for p, g, st in zip(net.parts, grads, state)]
        return ParallelNet(tuple(p for p, _ in pairs)), tuple(st for _, st in pairs)
    if len(grads.weights) != net.n_layers:
        raise ValueError("gradient list does not match network depth")
    for g, p in zip((*grads.weights, *grads.biases), (*net.weights, *net.biases)):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if not grads.all_finite():
        raise FloatingPointError("non-finite gradient passed to adam_step")

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t

    def update(params, gs, ms, vs):
        new_p, new_m, new_v = [], [], []
        for p, g, m, v in zip(params, gs, ms, vs):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
            new_m.append(m)
            new_v.append(v)
        return new_p, new_m, new_v

    W, m_w, v_w = update(net.weights, grads.weights, state.m_w, state.v_w)
    b, m_b, v_b = update(net.biases, grads.biases, state.m_b, state.v_b)
    new_net = DenseNet(list(net.layer_dims), W, b, net.activation)
    new_state = AdamState(m_w, m_b, v_w, v_b, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_net, new_state


def flatten_params(net: DenseNet | ParallelNet) -> np.ndarray:
    if isinstance(net, ParallelNet):
        return np.concatenate([flatten_params(p) for p in net.parts])
    return np.concatenate([p.ravel() for pair in zip(net.weights, net.biases) for p in pair])


def unflatten_params(net: DenseNet | ParallelNet, theta) -> DenseNet | ParallelNet:
    """Network with the same shapes as ``net`` and parameters taken from ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size != net.n_params:
        raise ValueError(f"expected {net.n_params} parameters, got {theta.size}")
    if isinstance(net, ParallelNet):
        cuts = np.cumsum([p.n_params for p in net.parts])[:-1]
        return ParallelNet(tuple(unflatten_params(p, t) for p, t in zip(net.parts, np.split(theta, cuts))))
    out_w, out_b, i = [], [], 0
    for W, b in zip(net.weights, net.biases):
        out_w.append(theta[i:i + W.size].reshape(W.shape))
        i += W.size
        out_b.append(theta[i:i + b.size].copy())
        i += b.size
    return DenseNet(list(net.layer_dims), out_w, out_b, net.activation)
