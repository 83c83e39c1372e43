"""
Dense tensors with a reverse-mode tape.

A ``Tape`` records every operation applied to tensors that were ``watch``-ed on
it. Tensors without a tape are constants: operations on them are plain numpy
evaluations and record nothing. A tape is used for one forward pass and one
``backward`` call.
"""

from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse, special

from metriforge.errors import ContractError, DimensionError

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: Tuple[Optional[int], ...], backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tape:
    def __init__(self):
        self._nodes: List[_Node] = []
        self._grads: dict = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> None:
        return None

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, value, op: str = "leaf") -> "Tensor":
        if self._consumed:
            raise ContractError("tape already ran backward; start a new tape")
        self._nodes.append(_Node(op, (), None))
        return Tensor(value, tape=self, node=len(self._nodes) - 1)

    def record(
        self,
        op: str,
        inputs: Sequence["Tensor"],
        value: np.ndarray,
        backward: BackwardRule,
    ) -> "Tensor":
        if self._consumed:
            raise ContractError("tape already ran backward; start a new tape")
        parents = tuple(t.node if t.tape is self else None for t in inputs)
        self._nodes.append(_Node(op, parents, backward))
        return Tensor(value, tape=self, node=len(self._nodes) - 1)

    def backward(self, output: "Tensor", seed: Optional[np.ndarray] = None) -> None:
        if output.tape is not self:
            raise ContractError("output was not recorded on this tape")
        if seed is None:
            seed = np.ones_like(output.data)
        grads = {output.node: np.asarray(seed, dtype=output.data.dtype)}

        for idx in range(output.node, -1, -1):
            upstream = grads.get(idx)
            node = self._nodes[idx]
            if upstream is None or not node.inputs:
                continue
            input_grads = node.backward(upstream)
            if input_grads is None or len(input_grads) != len(node.inputs):
                got = None if input_grads is None else len(input_grads)
                raise ContractError(
                    f"backward rule of '{node.op}' returned {got} gradients "
                    f"for {len(node.inputs)} inputs"
                )
            for parent, grad in zip(node.inputs, input_grads):
                if parent is None or grad is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + grad
                else:
                    grads[parent] = grad

        self._grads = grads
        self._consumed = True

    def gradient(self, tensor: "Tensor") -> np.ndarray:
        if tensor.tape is not self:
            raise ContractError("tensor was not recorded on this tape")
        grad = self._grads.get(tensor.node)
        if grad is None:
            return np.zeros_like(tensor.data)
        return np.broadcast_to(grad, tensor.shape).copy()


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 1000

    def __init__(self, data, tape: Optional[Tape] = None, node: Optional[int] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tracked = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def detach(value: TensorLike) -> Tensor:
    return Tensor(as_tensor(value).data)


def _tape_of(inputs: Iterable[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ContractError("tensors were recorded on different tapes")
    return tape


def _make(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(op, inputs, value, backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise arithmetic


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", value, (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", value, (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", value, (a, b), backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.data / b.data

    def backward(g):
        grad_a = _unbroadcast(g / b.data, a.shape)
        grad_b = _unbroadcast(-g * a.data / b.data**2, b.shape)
        return grad_a, grad_b

    return _make("div", value, (a, b), backward)


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    value = a.data**exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make("power", value, (a,), backward)


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.data)
    return _make("exp", value, (a,), lambda g: (g * value,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    value = np.sqrt(a.data)
    return _make("sqrt", value, (a,), lambda g: (0.5 * g / value,))


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    value = special.expit(a.data)
    return _make("sigmoid", value, (a,), lambda g: (g * value * (1.0 - value),))


def softplus(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    value = np.logaddexp(0.0, a.data)
    return _make("softplus", value, (a,), lambda g: (g * special.expit(a.data),))


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def silu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    s = special.expit(a.data)

    def backward(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make("silu", a.data * s, (a,), backward)


def clamp(a: TensorLike, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data > low) & (a.data < high)
    return _make("clamp", np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


# reductions and shape


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _normalize_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make("sum", value, (a,), backward)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis=axis, keepdims=keepdims) / float(max(count, 1))


def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def flip(a: TensorLike, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make("flip", np.flip(a.data, axis=axis), (a,), lambda g: (np.flip(g, axis=axis),))


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", value, tensors, backward)


def getitem(a: TensorLike, key) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _make("getitem", a.data[key], (a,), backward)


def gather(a: TensorLike, index) -> Tensor:
    """Rows of ``a`` selected by ``index`` (along axis 0)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _make("gather", a.data[index], (a,), backward)


def scatter_add(values: TensorLike, index, size: int) -> Tensor:
    """Sum rows of ``values`` into ``size`` slots at ``index``."""
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((size,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, index, values.data)
    return _make("scatter_add", out, (values,), lambda g: (g[index],))


# linear algebra


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    value = a.data @ b.data
    k, m = b.shape

    def backward(g):
        grad_a = g @ b.data.T
        grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        return grad_a, grad_b

    return _make("matmul", value, (a, b), backward)


def sparse_apply(operator: sparse.spmatrix, a: TensorLike) -> Tensor:
    """Product of a constant sparse operator with ``a`` (1-D or 2-D)."""
    a = as_tensor(a)
    if operator.shape[1] != a.shape[0]:
        raise DimensionError(
            f"operator of shape {operator.shape} cannot act on shape {a.shape}"
        )
    value = np.asarray(operator @ a.data)
    adjoint = operator.T.tocsr()
    return _make("sparse_apply", value, (a,), lambda g: (np.asarray(adjoint @ g),))


# normalizations


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    value = special.softmax(a.data, axis=axis)

    def backward(g):
        return (value * (g - (g * value).sum(axis=axis, keepdims=True)),)

    return _make("softmax", value, (a,), backward)


def log_softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    value = special.log_softmax(a.data, axis=axis)
    probs = np.exp(value)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", value, (a,), backward)


def cumsum(a: TensorLike, axis: int = 0, exclusive: bool = False) -> Tensor:
    a = as_tensor(a)
    value = np.cumsum(a.data, axis=axis)
    if exclusive:
        value = value - a.data

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        if exclusive:
            rev = rev - g
        return (rev,)

    return _make("cumsum", value, (a,), backward)


# stencils


def _pad_index(n: int, offset: int, padding: str) -> np.ndarray:
    idx = np.arange(n) + offset
    if padding == "replicate":
        return np.clip(idx, 0, n - 1)
    if padding == "periodic":
        return idx % n
    raise ValueError(f"Unknown padding '{padding}'. Available options: replicate, periodic")


def depthwise_conv3x3(
    x: TensorLike, kernel: TensorLike, padding: str = "replicate"
) -> Tensor:
    """Per-channel 3x3 correlation of an (H, W, K) field with a (K, 3, 3) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.shape != (x.shape[2], 3, 3):
        raise DimensionError(
            f"kernel {kernel.shape} does not match field {x.shape} (want (K, 3, 3))"
        )
    height, width, _ = x.shape
    taps = []
    value = np.zeros_like(x.data)
    for di in range(3):
        rows = _pad_index(height, di - 1, padding)
        for dj in range(3):
            cols = _pad_index(width, dj - 1, padding)
            shifted = x.data[rows][:, cols]
            value = value + kernel.data[:, di, dj] * shifted
            taps.append((di, dj, rows, cols, shifted))

    def backward(g):
        grad_x = np.zeros_like(x.data)
        grad_k = np.zeros_like(kernel.data)
        for di, dj, rows, cols, shifted in taps:
            grad_k[:, di, dj] = (g * shifted).sum(axis=(0, 1))
            np.add.at(grad_x, (rows[:, None], cols[None, :]), g * kernel.data[:, di, dj])
        return grad_x, grad_k

    return _make("depthwise_conv3x3", value, (x, kernel), backward)


# user-registered gradients


def custom_grad(
    value: np.ndarray, inputs: Sequence[TensorLike], backward: BackwardRule
) -> Tensor:
    """
    Wrap an externally computed ``value`` so that the tape replays ``backward``
    instead of differentiating whatever produced it. ``backward`` receives the
    upstream gradient and must return one gradient (or None) per input.
    """
    inputs = [as_tensor(t) for t in inputs]

    def checked(g):
        grads = backward(g)
        if grads is None or len(grads) != len(inputs):
            got = None if grads is None else len(grads)
            raise ContractError(
                f"custom gradient returned {got} gradients for {len(inputs)} inputs"
            )
        out = []
        for t, grad in zip(inputs, grads):
            if grad is not None:
                grad = np.asarray(grad, dtype=t.dtype)
                if grad.shape != t.shape:
                    raise ContractError(
                        f"custom gradient of shape {grad.shape} for input {t.shape}"
                    )
            out.append(grad)
        return tuple(out)

    return _make("custom", np.asarray(value), inputs, checked)
