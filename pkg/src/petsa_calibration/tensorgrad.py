"""Dense float64 tensors with a reverse-mode differentiation tape.

Every operation that has at least one input with ``requires_grad`` set is
recorded on a :class:`Tape`. Tapes are created lazily by the first recorded
operation. An operation whose inputs come from several tapes merges them
(the smaller is appended to the larger, which keeps recording order
topological), so a forward pass ends up on exactly one tape. Leaves (tensors created
directly by the user) never belong to a tape, which lets the same parameter
tensors take part in any number of independent tapes.

Only the operations needed by the calibration modules, the backbones and the
loss stack are implemented. Broadcasting follows numpy's rules; gradients are
summed back over broadcast axes.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from math import prod

import numpy as np

from petsa_calibration.exceptions import DataError, PetsaError

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
Axis = int | Sequence[int] | None


class DimensionError(DataError, ValueError):
    pass


class TapeError(PetsaError):
    pass


@dataclass(eq=False)
class Node:
    index: int
    tape: Tape
    output: Tensor
    parents: tuple[Tensor, ...]
    backward_fn: BackwardFn


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> Node:
        node = Node(
            index=len(self.nodes),
            tape=self,
            output=output,
            parents=parents,
            backward_fn=backward_fn,
        )
        self.nodes.append(node)
        return node

    def absorb(self, other: Tape) -> None:
        """Append the nodes of an independent tape; ``other`` is left empty."""
        for node in other.nodes:
            node.tape = self
            node.index = len(self.nodes)
            self.nodes.append(node)
        other.nodes = []


class Tensor:
    # Make numpy defer to our reflected operators (np.float64(2) * t -> t.__rmul__).
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.tape_node is None

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(other, self)

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(other, self)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, int | float):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        if isinstance(other, int | float):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other) -> Tensor:
        if isinstance(other, int | float):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __abs__(self) -> Tensor:
        return absolute(self)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        return getitem(self, index)

    def tanh(self) -> Tensor:
        return tanh(self)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], tuple | list):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], tuple | list):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class ComplexSpectrum:
    """Non-redundant half of the DFT of a real signal: bins ``0..length // 2``."""

    real: Tensor
    imag: Tensor
    length: int

    @property
    def n_bins(self) -> int:
        return self.length // 2 + 1

    def __sub__(self, other: ComplexSpectrum) -> ComplexSpectrum:
        if other.length != self.length:
            raise DimensionError(
                f"spectra of lengths {self.length} and {other.length} cannot be subtracted"
            )
        return ComplexSpectrum(self.real - other.real, self.imag - other.imag, self.length)

    def magnitude(self) -> Tensor:
        return modulus(self.real, self.imag)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_for(parents: Iterable[Tensor]) -> Tape:
    tapes = list({id(p.tape_node.tape): p.tape_node.tape for p in parents if p.tape_node is not None}.values())
    if not tapes:
        return Tape()
    tapes.sort(key=len, reverse=True)
    for other in tapes[1:]:
        tapes[0].absorb(other)
    return tapes[0]


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape_node = _tape_for(parents).record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(*shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as ex:
        shown = " and ".join(str(s) for s in shapes)
        raise DimensionError(f"cannot broadcast shapes {shown}") from ex


def _normalize_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} is out of range for a {ndim}-d tensor")
        normalized.append(ax % ndim)
    return tuple(sorted(set(normalized)))


def _expand_reduced(grad: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool):
    if not keepdims:
        grad = np.expand_dims(grad, axes)
    return np.broadcast_to(grad, shape)


# --- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    a_data, b_data = a.data, b.data
    return _make(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    a_data, b_data = a.data, b.data
    return _make(
        a_data / b_data,
        (a, b),
        lambda g: (g / b_data, -g * a_data / (b_data * b_data)),
    )


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def absolute(x) -> Tensor:
    """Elementwise ``|x|``; the subgradient at 0 is 0."""
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sqrt(x) -> Tensor:
    """Elementwise square root; the subgradient at 0 is 0."""
    x = as_tensor(x)
    y = np.sqrt(x.data)

    def backward_fn(g):
        return (np.divide(0.5 * g, y, out=np.zeros_like(y), where=y > 0),)

    return _make(y, (x,), backward_fn)


def where(condition, a, b) -> Tensor:
    """Select ``a`` where ``condition`` holds, else ``b``. The condition is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(condition, dtype=bool)
    _check_broadcast(mask.shape, a.shape, b.shape)
    return _make(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)),
    )


# --- linear algebra and shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast as batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as ex:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from ex
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return (
            np.matmul(g, np.swapaxes(b_data, -1, -2)),
            np.matmul(np.swapaxes(a_data, -1, -2), g),
        )

    return _make(np.matmul(a_data, b_data), (a, b), backward_fn)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as ex:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from ex
    original = x.shape
    return _make(data, (x,), lambda g: (g.reshape(original),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward_fn(g):
        grad = np.zeros(shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(x.data[index], (x,), backward_fn)


# --- reductions --------------------------------------------------------------


def reduce_sum(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    shape = x.shape
    return _make(
        x.data.sum(axis=axes, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, shape, axes, keepdims),),
    )


def mean(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = prod(x.shape[ax] for ax in axes)
    if count == 0:
        raise DimensionError(f"mean over an empty axis of shape {x.shape}")
    shape = x.shape
    return _make(
        x.data.mean(axis=axes, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, shape, axes, keepdims) / count,),
    )


def variance(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the element count)."""
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = prod(x.shape[ax] for ax in axes)
    if count == 0:
        raise DimensionError(f"variance over an empty axis of shape {x.shape}")
    shape = x.shape
    centered = x.data - x.data.mean(axis=axes, keepdims=True)
    return _make(
        (centered * centered).mean(axis=axes, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, shape, axes, keepdims) * (2.0 * centered / count),),
    )


# --- spectral ----------------------------------------------------------------


def _rdft_adjoint(grad_real: np.ndarray | None, grad_imag: np.ndarray | None, n: int) -> np.ndarray:
    """Gradient of a real input from gradients on the real and imaginary bins.

    ``dx[t] = sum_k Re((gr[k] + i*gi[k]) * exp(2j*pi*k*t/n))`` over the stored bins.
    ``irfft`` evaluates the Hermitian-expanded sum, which counts every interior
    bin twice and scales by ``1/n``; rescaling the bins folds that back.
    """
    template = grad_real if grad_real is not None else grad_imag
    spectrum = np.zeros(template.shape, dtype=np.complex128)
    if grad_real is not None:
        spectrum += grad_real
    if grad_imag is not None:
        spectrum += 1j * grad_imag
    spectrum *= n
    last_interior = (n - 1) // 2
    spectrum[..., 1 : last_interior + 1] *= 0.5
    return np.fft.irfft(spectrum, n=n, axis=-1)


def rdft(x) -> ComplexSpectrum:
    """Unnormalized forward DFT of a real signal along the last axis."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"rdft needs a non-empty last axis, got shape {x.shape}")
    n = x.shape[-1]
    spectrum = np.fft.rfft(x.data, axis=-1)
    real = _make(spectrum.real.copy(), (x,), lambda g: (_rdft_adjoint(g, None, n),))
    imag = _make(spectrum.imag.copy(), (x,), lambda g: (_rdft_adjoint(None, g, n),))
    return ComplexSpectrum(real=real, imag=imag, length=n)


def modulus(real, imag) -> Tensor:
    """Complex modulus ``sqrt(re^2 + im^2)``; the subgradient at 0 is 0."""
    real, imag = as_tensor(real), as_tensor(imag)
    _check_broadcast(real.shape, imag.shape)
    re, im = real.data, imag.data
    magnitude = np.hypot(re, im)
    nonzero = magnitude > 0

    def backward_fn(g):
        grad_re = np.divide(g * re, magnitude, out=np.zeros_like(magnitude), where=nonzero)
        grad_im = np.divide(g * im, magnitude, out=np.zeros_like(magnitude), where=nonzero)
        return grad_re, grad_im

    return _make(magnitude, (real, imag), backward_fn)


# --- backward ----------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``root`` depends on.

    Leaf gradients are overwritten, never accumulated across calls.
    """
    if root.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    node = root.tape_node
    if node is None:
        raise TapeError("root does not depend on any tensor that requires grad")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for current in reversed(node.tape.nodes[: node.index + 1]):
        grad = grads.pop(id(current.output), None)
        if grad is None:
            continue
        parent_grads = current.backward_fn(grad)
        for parent, parent_grad in zip(current.parents, parent_grads, strict=True):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = _unbroadcast(np.asarray(parent_grad), parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = np.array(parent_grad, dtype=np.float64)
            if parent.is_leaf:
                leaves[key] = parent

    for key, leaf in leaves.items():
        leaf.grad = grads[key]


def zero_grad(params: Iterable[Tensor]) -> None:
    for param in params:
        param.grad = None
