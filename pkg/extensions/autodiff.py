"""
Reverse-mode differentiation core: Tensor, Tape and the elementwise/shape ops.

Forward ops run on float64 numpy buffers. An op is recorded only while a Tape
is active and at least one input requires gradients; outside a tape the same
functions are plain inference code.
"""
import contextvars
from collections import OrderedDict
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import NonFiniteError, TapeError, ValidationError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """Dense float64 array that can take part in a gradient tape."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values: Any, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.values = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.values = array
        tensor.requires_grad = False
        tensor.grad = None
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ValidationError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __getitem__(self, key: Any) -> "Tensor":
        return getitem(self, key)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """
    Ordered record of executed differentiable ops.

    Usage:
        with Tape() as tape:
            loss = build_loss()
        grads = tape.backward(loss, store)
    """

    def __init__(self):
        self._records: List[Tuple[Tensor, Tuple[Tensor, ...], BackwardFn]] = []
        self._outputs: set = set()
        self._dead = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, parents: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        if self._dead:
            raise TapeError("cannot record on a consumed tape; call reset() first")
        self._records.append((output, parents, backward))
        self._outputs.add(id(output))

    def reset(self) -> None:
        self._records.clear()
        self._outputs.clear()
        self._dead = False

    def backward(self, loss: Tensor, store: Optional[Any] = None) -> Optional["OrderedDict[str, np.ndarray]"]:
        """
        Propagate dLoss/dLeaf to every requires_grad leaf reached by the tape.

        Args:
            loss: Scalar tensor produced while this tape was active
            store: Optional ParameterStore; when given, its gradients are returned in store order

        Returns:
            OrderedDict name -> gradient (zeros for parameters the loss does not depend on),
            or None when no store is given

        Raises:
            TapeError: If the loss is not scalar or the tape was already consumed
        """
        if self._dead:
            raise TapeError("tape already consumed by a previous backward(); call reset() first")
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._dead = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        leaves: Dict[int, Tensor] = {}
        for output, parents, backward_fn in reversed(self._records):
            upstream = grads.pop(id(output), None)
            if upstream is None:
                continue
            parent_grads = backward_fn(upstream)
            for parent, parent_grad in zip(parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key not in self._outputs:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

        if id(loss) not in self._outputs and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            leaf_grad = grads.get(key)
            if leaf_grad is None:
                continue
            leaf.grad = leaf_grad.copy() if leaf.grad is None else leaf.grad + leaf_grad

        if store is None:
            return None
        result: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, tensor in store.items():
            grad = grads.get(id(tensor))
            result[name] = np.zeros_like(tensor.values) if grad is None else grad
        return result


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def make_result(values: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap a forward result, enforce finiteness and record it on the active tape."""
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor._wrap(np.asarray(values, dtype=np.float64))
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, tuple(parents), backward)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.values + b.values, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.values - b.values, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g * b.values, a.shape), unbroadcast(g * a.values, b.shape)

    return make_result(a.values * b.values, (a, b), backward, "mul")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors, recorded as one op."""
    if not tensors:
        raise ValidationError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for tensor in tensors:
        if tensor.shape != shape:
            raise ValidationError(f"add_n shape mismatch: {tensor.shape} vs {shape}")
    total = tensors[0].values.copy()
    for tensor in tensors[1:]:
        total = total + tensor.values

    def backward(g):
        return tuple(g for _ in tensors)

    return make_result(total, tuple(tensors), backward, "add_n")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def backward(g):
        return (g * mask,)

    return make_result(np.where(mask, x.values, 0.0), (x,), backward, "relu")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    # ties go to the constant branch, so the gradient there is zero
    mask = x.values > floor

    def backward(g):
        return (g * mask,)

    return make_result(np.where(mask, x.values, floor), (x,), backward, "clamp_min")


def power(x: Tensor, exponent: float) -> Tensor:
    out = np.power(x.values, exponent)

    def backward(g):
        return (g * exponent * np.power(x.values, exponent - 1.0),)

    return make_result(out, (x,), backward, "power")


def reduce_sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward, "sum")


def reduce_mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; ties resolve to the lowest index."""
    index = np.expand_dims(np.argmax(x.values, axis=axis), axis)
    out = np.take_along_axis(x.values, index, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.values)
        np.put_along_axis(full, index, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make_result(out, (x,), backward, "max")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(x.values.reshape(tuple(shape)), (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return make_result(x.values.transpose(tuple(axes)), (x,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis (channel axis 0 for feature maps)."""
    if not tensors:
        raise ValidationError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise ValidationError(f"concat shape mismatch: {e}") from e
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tuple(tensors), backward, "concat")


def stack_scalars(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,)) for t in tensors], axis=0)


def getitem(x: Tensor, key: Any) -> Tensor:
    """Basic (slice/int) indexing."""
    out = x.values[key]

    def backward(g):
        full = np.zeros_like(x.values)
        full[key] += g
        return (full,)

    return make_result(np.array(out, dtype=np.float64), (x,), backward, "getitem")


def pad_trailing(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the last two axes on the high side."""
    if pad_h == 0 and pad_w == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, pad_h), (0, pad_w)]
    h, w = x.shape[-2:]

    def backward(g):
        return (g[..., :h, :w],)

    return make_result(np.pad(x.values, widths), (x,), backward, "pad")
