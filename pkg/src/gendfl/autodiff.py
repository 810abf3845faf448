"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Define-by-run tape: every operation on :class:`Tensor` records its parents
and a backward closure. `backward()` on a scalar root walks the tape in
reverse topological order and accumulates gradients into the leaves.

Kept deliberately small: the op set is the closure needed by the coupling
flow conditioners, smoothed CVaR objectives and unrolled solver iterates.
No GPU, no dynamic shapes, no higher-order derivatives.
"""

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN/Inf (carries the offending op name)."""

    def __init__(self, op_name):
        super().__init__(f"non-finite value produced by op '{op_name}'")
        self.op_name = op_name


# Finiteness checking can be disabled for speed in inner loops that are
# known-safe; training keeps it on so bad steps are skipped, not clamped.
CHECK_FINITE = True


def _checked(arr, op_name):
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(op_name)
    return arr


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # sum over leading broadcast axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum over axes that were 1 in the original shape
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    """A node in the autodiff graph: value + backward closure + parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    # keep numpy from absorbing Tensors into object arrays; reflected
    # operators on Tensor handle ndarray-op-Tensor expressions instead
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # ---- graph construction helpers -------------------------------------

    @staticmethod
    def _make(data, parents, backward, op):
        out = Tensor(_checked(data, op), _parents=parents, _backward=backward, op=op)
        return out

    # ---- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)

        def bwd(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), bwd, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)

        def bwd(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))

        return Tensor._make(self.data - other.data, (self, other), bwd, "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)

        def bwd(g):
            return (_unbroadcast(g * other.data, self.shape),
                    _unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)

        def bwd(g):
            return (_unbroadcast(g / other.data, self.shape),
                    _unbroadcast(-g * self.data / other.data**2, other.shape))

        return Tensor._make(self.data / other.data, (self, other), bwd, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        def bwd(g):
            return (-g,)

        return Tensor._make(-self.data, (self,), bwd, "neg")

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise TypeError("only constant exponents are supported")

        def bwd(g):
            return (g * k * self.data ** (k - 1),)

        return Tensor._make(self.data ** k, (self,), bwd, "pow")

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data

        def bwd(g):
            if a.ndim == 1 and b.ndim == 1:
                return (g * b, g * a)
            if a.ndim == 2 and b.ndim == 2:
                return (g @ b.T, a.T @ g)
            if a.ndim == 2 and b.ndim == 1:
                return (np.outer(g, b), a.T @ g)
            if a.ndim == 1 and b.ndim == 2:
                return (g @ b.T, np.outer(a, g))
            raise ValueError(f"unsupported matmul ranks {a.ndim} @ {b.ndim}")

        return Tensor._make(a @ b, (self, other), bwd, "matmul")

    def __rmatmul__(self, other):
        return _as_tensor(other) @ self

    def __getitem__(self, idx):
        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), bwd, "slice")

    def reshape(self, *shape):
        old = self.shape

        def bwd(g):
            return (g.reshape(old),)

        return Tensor._make(self.data.reshape(*shape), (self,), bwd, "reshape")

    # ---- reductions ------------------------------------------------------

    def sum(self, axis=None):
        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), self.shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis), (self,), bwd, "sum")

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    # ---- autodiff --------------------------------------------------------

    def backward(self):
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if not parent.requires_grad or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad = parent.grad + g


# ---- elementwise functions (work on Tensors and plain arrays) ------------


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    out_data = np.exp(x.data)

    def bwd(g):
        return (g * out_data,)

    return Tensor._make(out_data, (x,), bwd, "exp")


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)

    def bwd(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)
    return Tensor._make(out_data, (x,), bwd, "log")


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    out_data = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - out_data**2),)

    return Tensor._make(out_data, (x,), bwd, "tanh")


def sigmoid(x):
    if not isinstance(x, Tensor):
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    out_data = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bwd(g):
        return (g * out_data * (1.0 - out_data),)

    return Tensor._make(out_data, (x,), bwd, "sigmoid")


def softplus(x):
    if not isinstance(x, Tensor):
        return np.logaddexp(0.0, x)

    def bwd(g):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * x.data)),)

    return Tensor._make(np.logaddexp(0.0, x.data), (x,), bwd, "softplus")


def maximum(x, y):
    """Elementwise max; subgradient splits evenly on exact ties."""
    if not isinstance(x, Tensor) and not isinstance(y, Tensor):
        return np.maximum(x, y)
    x, y = _as_tensor(x), _as_tensor(y)

    def bwd(g):
        take_x = x.data > y.data
        tie = x.data == y.data
        gx = g * (take_x + 0.5 * tie)
        gy = g * (~take_x & ~tie) + g * 0.5 * tie
        return (_unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape))

    return Tensor._make(np.maximum(x.data, y.data), (x, y), bwd, "max")


def minimum(x, y):
    if not isinstance(x, Tensor) and not isinstance(y, Tensor):
        return np.minimum(x, y)
    return -maximum(-_as_tensor(x), -_as_tensor(y))


def clip(x, lo, hi):
    if not isinstance(x, Tensor):
        return np.clip(x, lo, hi)
    return minimum(maximum(x, lo), hi)


def relu(x):
    return maximum(x, 0.0)


def concat(parts, axis=0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]

    def bwd(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis),
                        tuple(parts), bwd, "concat")


def logsumexp(x):
    """Stable log(sum(exp(x))) for a flat tensor/array."""
    if not isinstance(x, Tensor):
        m = np.max(x)
        return m + np.log(np.sum(np.exp(x - m)))
    m = float(np.max(x.data))
    return log(exp(x - m).sum()) + m


def value(x):
    """Underlying numpy array of a Tensor, or the input if already plain."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---- gradient checking ---------------------------------------------------


def finite_diff_check(build, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `build` maps a dict of parameter Tensors to a scalar Tensor. `params`
    is a dict of numpy arrays. Error per entry is
    |analytic - fd| / max(1, |analytic|); the max over all entries is
    returned.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
    root = build(tensors)
    root.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}

    worst = 0.0
    for name, base in params.items():
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = build({k: Tensor(v) for k, v in params.items()}).item()
            flat[i] = orig - step
            lo = build({k: Tensor(v) for k, v in params.items()}).item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


# ---- optimizer -----------------------------------------------------------


class Adam:
    """Adam with bias correction; beta1=beta2=0 recovers plain SGD."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Update `params` (dict of numpy arrays) in place from `grads`."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            p = params[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for '{k}'")
            m = self.m.get(k)
            if m is None:
                m = np.zeros_like(p)
                self.m[k] = m
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            if b1 == 0.0 and b2 == 0.0:
                p -= self.lr * g
            else:
                m_hat = m / (1 - b1**self.t)
                v_hat = v / (1 - b2**self.t)
                p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params
