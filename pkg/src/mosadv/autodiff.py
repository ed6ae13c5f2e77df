"""Minimal reverse-mode differentiation on numpy arrays.

A computation is recorded as a dynamic graph of `Tensor` nodes, each holding
its forward value and a vector-Jacobian rule back to its parents.
`backward()` walks the graph once in reverse topological order, so every
gradient is exact and deterministic given the construction order.

All values are float64. Gradients of the non-smooth points (|x| at 0, relu
at 0, complex modulus at 0) use the symmetric subgradient 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, DomainError


class Tensor:
    """Graph node: forward value plus the VJP rule that produced it.

    Leaf tensors (no parents) are the differentiation targets; their `grad`
    field is populated by `backward()`.
    """

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, leaf={self._vjp is None})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` after numpy broadcasting in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(out: Tensor) -> None:
    """Accumulate gradients of the scalar `out` into every reachable tensor.

    Raises ContractError if `out` is not a scalar (size-1) node.
    """
    if out.data.size != 1:
        raise ContractError(f"backward seed must be scalar, got shape {out.data.shape}")

    # Iterative DFS; parents visited in construction order for determinism.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))

    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return Tensor(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return Tensor(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return Tensor(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar (not a graph node)."""
    a = _as_tensor(a)
    s = float(s)
    return Tensor(a.data * s, (a,), lambda g: (g * s,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return Tensor(out, (a,), lambda g: (g * mask,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    out = np.log(a.data)
    return Tensor(out, (a,), lambda g: (g / a.data,))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return Tensor(np.abs(a.data), (a,), lambda g: (g * sign,))


def complex_modulus(re, im) -> Tensor:
    """Modulus of a complex value given as separate real/imaginary parts.

    Subgradient at 0 is 0 in both components.
    """
    re, im = _as_tensor(re), _as_tensor(im)
    if re.data.shape != im.data.shape:
        raise DimensionError(
            f"real/imag shapes differ: {re.data.shape} vs {im.data.shape}"
        )
    mod = np.hypot(re.data, im.data)
    safe = np.where(mod == 0.0, 1.0, mod)

    def vjp(g):
        gm = g / safe
        return gm * re.data, gm * im.data

    return Tensor(mod, (re, im), vjp)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise DimensionError("matmul supports 1-D and 2-D operands")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return Tensor(out, (a, b), vjp)


def _windows_2d(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Sliding (kh, kw) windows of x (C, H, W) -> view (C, kh, kw, Ho, Wo)."""
    c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    s0, s1, s2 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (c, kh, kw, ho, wo), (s0, s1, s2, s1, s2), writeable=False
    )


def conv2d(x, w) -> Tensor:
    """Valid 2-D cross-correlation: x (Cin, H, W) * w (Cout, Cin, kh, kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 4 or xd.shape[0] != wd.shape[1]:
        raise DimensionError(
            f"conv2d expects x (Cin,H,W), w (Cout,Cin,kh,kw); got {xd.shape}, {wd.shape}"
        )
    cout, cin, kh, kw = wd.shape
    ho, wo = xd.shape[1] - kh + 1, xd.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d input {xd.shape[1:]} smaller than kernel {(kh, kw)}")
    cols = _windows_2d(xd, kh, kw).reshape(cin * kh * kw, ho * wo)
    out = (wd.reshape(cout, -1) @ cols).reshape(cout, ho, wo)

    def vjp(g):
        gflat = g.reshape(cout, -1)
        gw = (gflat @ cols.T).reshape(wd.shape)
        gcols = (wd.reshape(cout, -1).T @ gflat).reshape(cin, kh, kw, ho, wo)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, i : i + ho, j : j + wo] += gcols[:, i, j]
        return gx, gw

    return Tensor(out, (x, w), vjp)


def conv1d(x, w) -> Tensor:
    """Valid 1-D cross-correlation: x (Cin, T) * w (Cout, Cin, k)."""
    x, w = _as_tensor(x), _as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 3 or xd.shape[0] != wd.shape[1]:
        raise DimensionError(
            f"conv1d expects x (Cin,T), w (Cout,Cin,k); got {xd.shape}, {wd.shape}"
        )
    cout, cin, k = wd.shape
    to = xd.shape[1] - k + 1
    if to < 1:
        raise DimensionError(f"conv1d input length {xd.shape[1]} shorter than kernel {k}")
    s0, s1 = xd.strides
    cols = np.lib.stride_tricks.as_strided(
        xd, (cin, k, to), (s0, s1, s1), writeable=False
    ).reshape(cin * k, to)
    out = wd.reshape(cout, -1) @ cols

    def vjp(g):
        gw = (g @ cols.T).reshape(wd.shape)
        gcols = (wd.reshape(cout, -1).T @ g).reshape(cin, k, to)
        gx = np.zeros_like(xd)
        for i in range(k):
            gx[:, i : i + to] += gcols[:, i]
        return gx, gw

    return Tensor(out, (x, w), vjp)


def avg_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k x k mean pooling; trailing rows/cols are dropped."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 3:
        raise DimensionError(f"avg_pool2d expects (C,H,W), got {xd.shape}")
    c, h, w = xd.shape
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise DimensionError(f"avg_pool2d input {(h, w)} smaller than pool {k}")
    out = xd[:, : ho * k, : wo * k].reshape(c, ho, k, wo, k).mean(axis=(2, 4))

    def vjp(g):
        gx = np.zeros_like(xd)
        tile = np.broadcast_to(
            g[:, :, None, :, None] / (k * k), (c, ho, k, wo, k)
        ).reshape(c, ho * k, wo * k)
        gx[:, : ho * k, : wo * k] = tile
        return (gx,)

    return Tensor(out, (x,), vjp)


def frame_signal(x, length: int, hop: int) -> Tensor:
    """Slice a 1-D signal into overlapping frames: (T,) -> (F, length)."""
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 1:
        raise DimensionError(f"frame_signal expects 1-D input, got {xd.shape}")
    t = xd.shape[0]
    if t < length:
        raise DimensionError(f"signal length {t} shorter than frame {length}")
    f = (t - length) // hop + 1
    (s,) = xd.strides
    frames = np.lib.stride_tricks.as_strided(
        xd, (f, length), (hop * s, s), writeable=False
    ).copy()

    def vjp(g):
        gx = np.zeros_like(xd)
        if length % hop == 0:
            # Overlap-add by hop-sized strips: destinations within one strip
            # are disjoint, so plain slice-adds are safe.
            for c in range(length // hop):
                gx[c * hop : c * hop + f * hop] += g[:, c * hop : (c + 1) * hop].reshape(-1)
        else:
            for i in range(f):
                gx[i * hop : i * hop + length] += g[i]
        return (gx,)

    return Tensor(frames, (x,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def reduce_sum(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axes)

    def vjp(g):
        if axes is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor(out, (a,), vjp)


def reduce_mean(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axes)
    count = a.data.size if axes is None else int(np.prod([a.data.shape[ax] for ax in np.atleast_1d(axes)]))

    def vjp(g):
        if axes is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return Tensor(out, (a,), vjp)


def l1_norm(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return Tensor(np.abs(a.data).sum(), (a,), lambda g: (g * sign,))


def l2_norm_sq(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor((a.data * a.data).sum(), (a,), lambda g: (g * 2.0 * a.data,))


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter Adam moments; `t` counts completed steps."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_stability: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(
            m=np.zeros_like(param), v=np.zeros_like(param), learning_rate=learning_rate, **kw
        )


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; mutates `state`, returns the new param."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise DimensionError(
            f"adam_step shapes differ: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon_stability)


class Adam:
    """Convenience wrapper driving `adam_step` over a named parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = params
        self.states = {
            k: AdamState.for_param(p, learning_rate, beta1=beta1, beta2=beta2,
                                   epsilon_stability=epsilon)
            for k, p in params.items()
        }

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k] = adam_step(self.states[k], self.params[k], grads[k])


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(fn, x: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central-difference gradient of a scalar function of a numpy array.

    Independent of the graph machinery above by design: it only evaluates
    `fn` at perturbed copies of `x`. With `indices` given (flat indices),
    only those coordinates are filled in; the rest stay zero.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_idx = range(x.size) if indices is None else indices
    for i in flat_idx:
        xp = x.copy()
        xp.flat[i] += h
        fplus = float(fn(xp))
        xm = x.copy()
        xm.flat[i] -= h
        fminus = float(fn(xm))
        grad.flat[i] = (fplus - fminus) / (2.0 * h)
    return grad
