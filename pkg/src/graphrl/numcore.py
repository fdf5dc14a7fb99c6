"""Dense numeric kernel: small fully connected networks, hand-written
reverse-mode gradients, Adam updates, and a finite-difference gradient oracle.

Everything runs in float64 on numpy. Networks here are deliberately small and
CPU-bound; there is no GPU path and no generic autodiff graph, only the exact
architectures the rest of the library needs.
"""

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")


class ShapeError(ValueError):
    """Raised when an input does not match a network's layer dimensions."""


class NonFiniteError(ValueError):
    """Raised when a gradient or function value is NaN/inf.

    Carries the offending parameter name in ``.name`` when known.
    """

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


def activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(kind, z, y):
    """d activation / d z, given pre-activation z and output y = activate(z)."""
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {kind!r}")


class FnnParams:
    """Parameters of a fully connected network.

    weights[i] has shape (out_i, in_i), biases[i] shape (out_i,), and
    activations[i] is one of ACTIVATIONS. Adjacent layer dimensions chain.
    """

    def __init__(self, weights, biases, activations):
        if not (len(weights) == len(biases) == len(activations)):
            raise ShapeError("weights, biases, activations must align")
        for i, (w, b, a) in enumerate(zip(weights, biases, activations)):
            if a not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {a!r}")
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i > 0 and w.shape[1] != weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i}: input dim {w.shape[1]} != previous output "
                    f"{weights[i - 1].shape[0]}"
                )
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activations = list(activations)

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def named(self, prefix=""):
        """Flat {name: array} view of all parameters (arrays are shared)."""
        out = {}
        for i in range(self.n_layers):
            out[f"{prefix}W{i}"] = self.weights[i]
            out[f"{prefix}b{i}"] = self.biases[i]
        return out

    def copy(self):
        return FnnParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


def init_fnn(layer_dims, activations, rng):
    """Build an FNN with uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights.

    layer_dims = [in, h1, ..., out]; activations may be a single kind applied
    to every layer or a per-layer list.
    """
    n = len(layer_dims) - 1
    if isinstance(activations, str):
        activations = [activations] * n
    if len(activations) != n:
        raise ShapeError(f"need {n} activations, got {len(activations)}")
    weights, biases = [], []
    for i in range(n):
        fan_in = layer_dims[i]
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        weights.append(rng.uniform(-bound, bound, size=(layer_dims[i + 1], fan_in)))
        biases.append(rng.uniform(-bound, bound, size=layer_dims[i + 1]))
    return FnnParams(weights, biases, activations)


def fnn_apply(params, x):
    """Forward pass on a batch of row vectors.

    x: (batch, in_dim). Returns (y, cache) where cache holds what
    fnn_backward_from_cache needs.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(
            f"layer 0: input of shape {x.shape} does not match in_dim {params.in_dim}"
        )
    h = x
    pre, post = [], []
    for w, b, a in zip(params.weights, params.biases, params.activations):
        z = h @ w.T + b
        h = activate(a, z)
        pre.append(z)
        post.append(h)
    return h, (x, pre, post)


def fnn_backward_from_cache(params, cache, upstream):
    """Gradients of sum(upstream * y) w.r.t. parameters and the input batch.

    Returns (weight_grads, bias_grads, input_grad).
    """
    x, pre, post = cache
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != post[-1].shape:
        raise ShapeError(f"upstream shape {g.shape} != output {post[-1].shape}")
    w_grads = [None] * params.n_layers
    b_grads = [None] * params.n_layers
    for i in range(params.n_layers - 1, -1, -1):
        g = g * activate_grad(params.activations[i], pre[i], post[i])
        inp = x if i == 0 else post[i - 1]
        w_grads[i] = g.T @ inp
        b_grads[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return w_grads, b_grads, g


def fnn_forward(params, x):
    """Forward pass on a single vector. Pure and deterministic."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    y, _ = fnn_apply(params, x[None, :])
    return y[0]


def fnn_backward(params, x, upstream_grad):
    """Gradients of a scalar loss with upstream dL/dy at input x.

    Returns ({name: grad}, dL/dx) with names matching params.named().
    """
    x = np.asarray(x, dtype=np.float64)
    up = np.asarray(upstream_grad, dtype=np.float64)
    _, cache = fnn_apply(params, x[None, :])
    w_grads, b_grads, dx = fnn_backward_from_cache(params, cache, up[None, :])
    grads = {}
    for i in range(params.n_layers):
        grads[f"W{i}"] = w_grads[i]
        grads[f"b{i}"] = b_grads[i]
    return grads, dx[0]


class AdamState:
    """Adam moment accumulators for a named parameter set.

    Single-writer: one training loop owns an instance. Accumulators are
    created lazily on first step and mirror parameter shapes.
    """

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on the parameter arrays.

    params, grads: {name: ndarray} with matching shapes. Raises
    NonFiniteError naming the first parameter whose gradient is not finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}", name=name)
        if np.shape(g) != params[name].shape:
            raise ShapeError(
                f"{name}: gradient shape {np.shape(g)} != parameter "
                f"{params[name].shape}"
            )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def finite_diff_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at x, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xw = x.copy()
    xf = xw.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = f(xw)
        xf[i] = orig - eps
        lo = f(xw)
        xf[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"f not finite near coordinate {i}")
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_error(a, b, floor=1e-8):
    """Elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom
