"""Dense-tensor reverse-mode automatic differentiation with an Adam optimizer.

Just enough engine for the graph backbones and training objectives in this
package: 64-bit floats everywhere, strict 2-D matmul, row-wise softmax, and a
small set of structured ops (gather, concat, batchnorm, dropout, gradient
reversal). Ops record a vector-Jacobian product when any operand requires
gradients; ``backward`` walks the tape once per call and accumulates into
``.grad`` additively.

Not supported on purpose: GPU execution, broadcasting beyond row-vector and
scalar cases, and in-place arithmetic on tensors that sit inside a live graph
(parameters may only be updated between steps, which is what the optimizer
does).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

__all__ = [
    "Tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "transpose",
    "relu",
    "softmax_rows",
    "cross_entropy",
    "tsum",
    "tmean",
    "sum_axis0",
    "sum_axis1",
    "gather",
    "gather_rows",
    "concat_cols",
    "dropout",
    "batchnorm",
    "grad_reverse",
    "backward",
    "AdamState",
    "adam_step",
    "Adam",
]


class Tensor:
    """A dense float64 array plus the tape metadata for reverse-mode autodiff.

    ``requires_grad`` on a leaf marks it as a parameter; on an op result it is
    inherited from the operands. After :func:`backward`, every requires_grad
    tensor reachable from the loss holds its accumulated gradient in ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, vjp):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad.copy()
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    # reductions can hand back 0-d scalars; pin the exact target shape
    return np.asarray(grad, dtype=np.float64).reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} are not compatible"
        ) from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def vjp(up):
        return ((a, _unbroadcast(up, a.data.shape)), (b, _unbroadcast(up, b.data.shape)))

    return _make(out_data, (a, b), vjp)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda up: ((a, -up),))


def sub(a, b):
    return add(a, neg(_as_tensor(b)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def vjp(up):
        return (
            (a, _unbroadcast(up * b.data, a.data.shape)),
            (b, _unbroadcast(up * a.data, b.data.shape)),
        )

    return _make(out_data, (a, b), vjp)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: cannot multiply shapes {a.data.shape} and {b.data.shape}"
        )
    out_data = a.data @ b.data

    def vjp(up):
        return ((a, up @ b.data.T), (b, a.data.T @ up))

    return _make(out_data, (a, b), vjp)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got shape {a.data.shape}")
    return _make(a.data.T, (a,), lambda up: ((a, np.ascontiguousarray(up.T)),))


def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def vjp(up):
        return ((a, up * (a.data > 0.0)),)

    return _make(out_data, (a,), vjp)


def softmax_rows(x):
    """Row-wise softmax of a 2-D tensor, stabilized by row-max subtraction."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D tensor, got shape {x.data.shape}")
    if not np.isfinite(x.data).all():
        raise ContractError("softmax_rows: input contains NaN or infinity")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    s = ex / ex.sum(axis=1, keepdims=True)

    def vjp(up):
        inner = (up * s).sum(axis=1, keepdims=True)
        return ((x, s * (up - inner)),)

    return _make(s, (x,), vjp)


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of integer class labels against row logits.

    ``reduction="mean"`` gives the scalar mean over rows; ``"none"`` the
    per-row loss vector. Labels outside ``[0, C)`` raise ``IndexError``.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected 2-D logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match "
            f"logits shape {logits.data.shape}"
        )
    m, c = logits.data.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: label out of range [0, {c})")
    if reduction not in ("mean", "none"):
        raise ConfigError(f"unknown reduction {reduction!r}", path="reduction")

    ls = _log_softmax(logits.data)
    rows = np.arange(m)
    per_sample = -ls[rows, labels]
    p = np.exp(ls)
    onehot = np.zeros_like(p)
    onehot[rows, labels] = 1.0

    if reduction == "mean":
        out_data = per_sample.mean()

        def vjp(up):
            return ((logits, (p - onehot) * (float(up) / m)),)

    else:
        out_data = per_sample

        def vjp(up):
            return ((logits, (p - onehot) * up[:, None]),)

    return _make(out_data, (logits,), vjp)


def tsum(a):
    a = _as_tensor(a)

    def vjp(up):
        return ((a, np.full_like(a.data, float(up))),)

    return _make(a.data.sum(), (a,), vjp)


def tmean(a):
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ContractError("mean of an empty tensor")
    n = a.data.size

    def vjp(up):
        return ((a, np.full_like(a.data, float(up) / n)),)

    return _make(a.data.mean(), (a,), vjp)


def sum_axis0(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"sum_axis0: expected 2-D tensor, got shape {a.data.shape}")

    def vjp(up):
        return ((a, np.broadcast_to(up, a.data.shape).copy()),)

    return _make(a.data.sum(axis=0), (a,), vjp)


def sum_axis1(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"sum_axis1: expected 2-D tensor, got shape {a.data.shape}")

    def vjp(up):
        return ((a, np.broadcast_to(up[:, None], a.data.shape).copy()),)

    return _make(a.data.sum(axis=1), (a,), vjp)


def gather(a, indices):
    """Select entries of a 1-D tensor; backward scatter-adds."""
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"gather: expected 1-D tensor, got shape {a.data.shape}")
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(up):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, up)
        return ((a, g),)

    return _make(a.data[idx], (a,), vjp)


def gather_rows(a, indices):
    """Select rows of a 2-D tensor; backward scatter-adds. Repeats allowed."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D tensor, got shape {a.data.shape}")
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(up):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, up)
        return ((a, g),)

    return _make(a.data[idx], (a,), vjp)


def concat_cols(tensors):
    """Concatenate 2-D tensors along columns."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat_cols: empty input")
    rows = ts[0].data.shape[0]
    for t in ts:
        if t.data.ndim != 2 or t.data.shape[0] != rows:
            raise ShapeError(
                "concat_cols: row counts differ: "
                + ", ".join(str(t.data.shape) for t in ts)
            )
    widths = [t.data.shape[1] for t in ts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def vjp(up):
        return tuple(
            (t, up[:, offsets[i] : offsets[i + 1]].copy()) for i, t in enumerate(ts)
        )

    return _make(np.concatenate([t.data for t in ts], axis=1), ts, vjp)


def dropout(x, p, rng, train):
    """Inverted dropout: scales kept units by 1/(1-p) at train time.

    Identity at eval time or for p == 0. Draws the mask from ``rng``.
    """
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}", path="dropout")
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def vjp(up):
        return ((x, up * keep),)

    return _make(x.data * keep, (x,), vjp)


def batchnorm(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Per-feature batch normalization over axis 0 with running statistics.

    ``running_mean``/``running_var`` are plain arrays updated in place during
    training (exponential moving average, unbiased variance) and used verbatim
    at eval time. Normalization uses the biased batch variance.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 2:
        raise ShapeError(f"batchnorm: expected 2-D input, got shape {x.data.shape}")
    d = x.data.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"batchnorm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature width {d}"
        )
    n = x.data.shape[0]
    if train:
        if n < 2:
            raise ContractError("batchnorm: training batch needs at least 2 rows")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean += momentum * (mean - running_mean)
        running_var += momentum * (var * n / (n - 1) - running_var)
    else:
        mean = running_mean
        var = running_var
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * istd
    out_data = xhat * gamma.data + beta.data

    if train:

        def vjp(up):
            dbeta = up.sum(axis=0)
            dgamma = (up * xhat).sum(axis=0)
            dx = (gamma.data * istd / n) * (n * up - dbeta - xhat * dgamma)
            return ((x, dx), (gamma, dgamma), (beta, dbeta))

    else:

        def vjp(up):
            return (
                (x, up * (gamma.data * istd)),
                (gamma, (up * xhat).sum(axis=0)),
                (beta, up.sum(axis=0)),
            )

    return _make(out_data, (x, gamma, beta), vjp)


def grad_reverse(x, lam):
    """Identity in the forward pass; backward multiplies the gradient by -lam."""
    x = _as_tensor(x)
    lam = float(lam)

    def vjp(up):
        return ((x, -lam * up),)

    return _make(x.data.copy(), (x,), vjp)


def backward(loss):
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every requires_grad ancestor.

    The loss must be a scalar. Each graph node is visited exactly once per
    call; calling again without zeroing grads adds another full pass.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # Iterative post-order DFS over the requires_grad subgraph.
    topo = []
    visited = set()
    stack = [(loss, False)]
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

    upstream = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        up = upstream.pop(id(node), None)
        if up is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += up
        if node._vjp is None:
            continue
        for parent, g in node._vjp(up):
            if not parent.requires_grad:
                continue
            acc = upstream.get(id(parent))
            if acc is None:
                # vjp implementations return freshly owned arrays, so the
                # accumulator may take them over and add in place.
                upstream[id(parent)] = np.asarray(g, dtype=np.float64)
            else:
                acc += g


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for one parameter group."""

    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                   epsilon=1e-8, weight_decay=0.0):
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            step_count=0,
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            weight_decay=weight_decay,
        )


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place, with decoupled weight decay."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, "
            f"{len(state.first_moment)} moment buffers"
        )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr, eps, wd = state.learning_rate, state.epsilon, state.weight_decay
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} does not match param {p.data.shape}"
            )
        if m.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: moment shape {m.shape} does not match param {p.data.shape}"
            )
        if wd != 0.0:
            p.data -= lr * wd * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class Adam:
    """Convenience wrapper reading gradients off the parameters themselves."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 epsilon=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.state = AdamState.for_params(
            self.params, learning_rate, beta1, beta2, epsilon, weight_decay
        )

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
