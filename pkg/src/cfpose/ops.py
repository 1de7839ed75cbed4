"""Dense float64 kernels with hand-derived backward passes.

Every differentiable operation comes as a forward function plus a matching
``*_backward`` that consumes the forward cache and the upstream gradient.
Parameter gradients are accumulated in place (``+=``) so one backward sweep
can be shared by several forward uses of the same weights. Finite differences
(`grad_check`) are the reference for all of it.
"""

from __future__ import annotations

import numpy as np


class Parameter:
    """A learnable array paired with a gradient buffer of the same shape."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    def clone_shared(self):
        """Copy that shares the value array but owns a fresh gradient buffer.

        Used by the threaded batch path: workers accumulate into private
        gradients against shared (read-only) values.
        """
        p = Parameter.__new__(Parameter)
        p.value = self.value
        p.grad = np.zeros_like(self.value)
        p.name = self.name
        return p

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(a, b, grad_out):
    """d(a@b) -> (dL/da, dL/db) given dL/dout."""
    return grad_out @ b.T, a.T @ grad_out


# ---------------------------------------------------------------------------
# row softmax


def row_softmax(a):
    """Row-stochastic map of a square (or rectangular) score matrix.

    Per-row max subtraction keeps exp() in range for any finite input.
    """
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("row_softmax: non-finite input")
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def row_softmax_backward(softmax_out, grad_out):
    # rows are independent: dx = s * (g - <g, s>)
    dot = (grad_out * softmax_out).sum(axis=1, keepdims=True)
    return softmax_out * (grad_out - dot)


# ---------------------------------------------------------------------------
# shared per-point affine map (the 1x1 convolution over a point set)


def linear_project(x, w, b):
    """out[i] = x[i] @ W + b for every point i (row) of x."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.value.shape[0]:
        raise ValueError(
            f"linear_project shape mismatch: x {x.shape} vs W {w.value.shape}"
        )
    return x @ w.value + b.value


def linear_project_backward(x, w, b, grad_out):
    """Accumulate dW, db into the parameters; return dL/dx."""
    w.grad += x.T @ grad_out
    b.grad += grad_out.sum(axis=0)
    return grad_out @ w.value.T


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(pre, grad_out):
    return np.where(pre > 0.0, grad_out, 0.0)


def sigmoid(x):
    # split by sign so exp() never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    # log(1 + e^x), stable on both tails
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


class Linear:
    """Affine layer wrapping a weight/bias Parameter pair."""

    def __init__(self, d_in, d_out, rng, name="linear", scale=None):
        if scale is None:
            scale = np.sqrt(2.0 / d_in)
        w = rng.normal(0.0, scale, size=(d_in, d_out)) if scale > 0 else np.zeros((d_in, d_out))
        self.w = Parameter(w, name + ".w")
        self.b = Parameter(np.zeros(d_out), name + ".b")

    def forward(self, x):
        return linear_project(x, self.w, self.b), x

    def backward(self, cache, grad_out):
        return linear_project_backward(cache, self.w, self.b, grad_out)

    def parameters(self):
        return [self.w, self.b]

    def clone_shared(self):
        c = Linear.__new__(Linear)
        c.w = self.w.clone_shared()
        c.b = self.b.clone_shared()
        return c


class MLP:
    """Pointwise multilayer map: affine layers with a rectifier in between.

    ``final_scale=0.0`` zero-initializes the last layer, which pins the
    map's output to the bias (zero) at the start of training.
    """

    def __init__(self, widths, rng, name="mlp", final_scale=None):
        self.widths = tuple(widths)
        self.layers = []
        n = len(widths) - 1
        for i in range(n):
            scale = final_scale if (i == n - 1 and final_scale is not None) else None
            self.layers.append(Linear(widths[i], widths[i + 1], rng, f"{name}.{i}", scale=scale))

    def forward(self, x):
        caches = []
        h = np.asarray(x, dtype=np.float64)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            pre, c = layer.forward(h)
            caches.append((c, pre))
            h = relu(pre) if i < last else pre
        return h, caches

    def backward(self, caches, grad_out):
        g = grad_out
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            x_in, pre = caches[i]
            if i < last:
                g = relu_backward(pre, g)
            g = self.layers[i].backward(x_in, g)
        return g

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def clone_shared(self):
        c = MLP.__new__(MLP)
        c.widths = self.widths
        c.layers = [layer.clone_shared() for layer in self.layers]
        return c


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, params, eps=1e-5, atol=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``f()`` must run forward plus backward, accumulating gradients into the
    given parameters, and return the scalar loss. Relative error per entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12); entries where
    both magnitudes fall below ``atol`` count as matching. Below that scale
    the central difference is float noise at these eps values (a
    structurally zero gradient, like a key-projection bias that row softmax
    cancels exactly, would otherwise report a unit error).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"grad_check eps out of range: {eps}")
    zero_grads(params)
    loss0 = float(f())
    if not np.isfinite(loss0):
        raise FloatingPointError("grad_check: non-finite loss")
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat_v = p.value.reshape(-1)
        flat_g = ga.reshape(-1)
        for k in range(flat_v.size):
            v0 = flat_v[k]
            flat_v[k] = v0 + eps
            zero_grads(params)
            lp = float(f())
            flat_v[k] = v0 - eps
            zero_grads(params)
            lm = float(f())
            flat_v[k] = v0
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError("grad_check: non-finite probe")
            numeric = (lp - lm) / (2.0 * eps)
            if abs(flat_g[k]) <= atol and abs(numeric) <= atol:
                continue
            err = abs(flat_g[k] - numeric) / max(abs(flat_g[k]), abs(numeric), 1e-12)
            worst = max(worst, err)
    # leave the analytic gradients in place for the caller
    for p, ga in zip(params, analytic):
        p.grad[...] = ga
    return worst


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]


def adam_step(params, state, lr):
    """One bias-corrected Adam update; zeroes gradients afterwards."""
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()
