"""
Dense float64 tensor math with reverse-mode differentiation.

Values are plain numpy arrays; a :class:`ComputeNode` wraps one and records
how it was produced so :func:`backward` can push gradients to every
parameter it depends on. Only the layers needed by the load forecaster and
the signature / raw-data classifiers are provided: dense, LSTM and a small
strided 2D convolution.
"""

from dataclasses import dataclass, field
import json
from math import sqrt
from pathlib import Path
from struct import calcsize, pack, unpack_from
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray

from gridleak.errors import (
    ContractError,
    DatasetError,
    DivergenceError,
    ShapeError,
)


Tensor = NDArray[np.float64]
Operand = Union["ComputeNode", Tensor, float, int]

MAGIC = b"SGLK"
FORMAT_VERSION = 1

MIN_MAX = "minmax"
STANDARD = "standard"
SCALER_KINDS = (MIN_MAX, STANDARD)


class ComputeNode:
    """A value in the computation graph and its accumulated gradient."""

    __slots__ = ("value", "grad", "parents", "op", "name", "_backward")

    def __init__(
        self,
        value: Union[Tensor, float, Sequence[float]],
        parents: Tuple["ComputeNode", ...] = (),
        op: str = "leaf",
        backward: Optional[Callable[[Tensor], None]] = None,
        name: str = "",
    ) -> None:
        self.value: Tensor = np.asarray(value, dtype=np.float64)
        self.grad: Optional[Tensor] = None
        self.parents = parents
        self.op = op
        self.name = name
        self._backward = backward

    def __repr__(self) -> str:
        label = f"{self.name}: " if self.name else ""
        return f"ComputeNode({label}{self.op}, shape={self.shape})"

    @property
    def shape(self) -> Tuple[int, ...]:
        """Shape of the wrapped value."""
        return tuple(self.value.shape)

    @property
    def gradient(self) -> Tensor:
        """Accumulated gradient, zeros when nothing flowed here."""
        if self.grad is None:
            return np.zeros_like(self.value)
        return self.grad

    def accumulate(self, grad: Tensor) -> None:
        """Add ``grad`` to the stored gradient."""
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def __add__(self, other: Operand) -> "ComputeNode":
        return add(self, other)

    def __radd__(self, other: Operand) -> "ComputeNode":
        return add(other, self)

    def __sub__(self, other: Operand) -> "ComputeNode":
        return add(self, neg(as_node(other)))

    def __rsub__(self, other: Operand) -> "ComputeNode":
        return add(other, neg(self))

    def __mul__(self, other: Operand) -> "ComputeNode":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "ComputeNode":
        return mul(other, self)

    def __neg__(self) -> "ComputeNode":
        return neg(self)

    def __matmul__(self, other: Operand) -> "ComputeNode":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "ComputeNode":
        return take(self, index)


def as_node(value: Operand) -> ComputeNode:
    """Wrap constants so they can take part in graph operations."""
    if isinstance(value, ComputeNode):
        return value
    return ComputeNode(value, op="const")


def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Operand, b: Operand) -> ComputeNode:
    """Elementwise sum with numpy broadcasting."""
    left, right = as_node(a), as_node(b)

    def backward(grad: Tensor) -> None:
        left.accumulate(_unbroadcast(grad, left.shape))
        right.accumulate(_unbroadcast(grad, right.shape))

    return ComputeNode(
        left.value + right.value, (left, right), "add", backward
    )


def neg(a: Operand) -> ComputeNode:
    """Elementwise negation."""
    node = as_node(a)

    def backward(grad: Tensor) -> None:
        node.accumulate(-grad)

    return ComputeNode(-node.value, (node,), "neg", backward)


def mul(a: Operand, b: Operand) -> ComputeNode:
    """Elementwise product with numpy broadcasting."""
    left, right = as_node(a), as_node(b)

    def backward(grad: Tensor) -> None:
        left.accumulate(_unbroadcast(grad * right.value, left.shape))
        right.accumulate(_unbroadcast(grad * left.value, right.shape))

    return ComputeNode(
        left.value * right.value, (left, right), "mul", backward
    )


def matmul(a: Operand, b: Operand) -> ComputeNode:
    """Matrix product of two 2D operands."""
    left, right = as_node(a), as_node(b)

    if left.value.ndim != 2 or right.value.ndim != 2:
        raise ShapeError(
            f"matmul needs 2D operands, got {left.shape} and {right.shape}"
        )
    if left.shape[1] != right.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {left.shape} @ {right.shape}"
        )

    def backward(grad: Tensor) -> None:
        left.accumulate(grad @ right.value.T)
        right.accumulate(left.value.T @ grad)

    return ComputeNode(
        left.value @ right.value, (left, right), "matmul", backward
    )


def sigmoid(a: Operand) -> ComputeNode:
    """Logistic function, computed through tanh so it never overflows."""
    node = as_node(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * node.value))

    def backward(grad: Tensor) -> None:
        node.accumulate(grad * out * (1.0 - out))

    return ComputeNode(out, (node,), "sigmoid", backward)


def tanh(a: Operand) -> ComputeNode:
    """Hyperbolic tangent."""
    node = as_node(a)
    out = np.tanh(node.value)

    def backward(grad: Tensor) -> None:
        node.accumulate(grad * (1.0 - out * out))

    return ComputeNode(out, (node,), "tanh", backward)


def relu(a: Operand) -> ComputeNode:
    """Rectified linear unit."""
    node = as_node(a)
    mask = node.value > 0.0

    def backward(grad: Tensor) -> None:
        node.accumulate(grad * mask)

    return ComputeNode(node.value * mask, (node,), "relu", backward)


def take(a: Operand, index: Any) -> ComputeNode:
    """Basic or advanced indexing."""
    node = as_node(a)
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(
        isinstance(part, (slice, int, type(Ellipsis))) for part in parts
    )

    def backward(grad: Tensor) -> None:
        full = np.zeros_like(node.value)
        if basic:
            full[index] += grad
        else:
            np.add.at(full, index, grad)
        node.accumulate(full)

    return ComputeNode(node.value[index], (node,), "take", backward)


def concat(nodes: Sequence[Operand], axis: int = -1) -> ComputeNode:
    """Join operands along ``axis``."""
    parts = [as_node(node) for node in nodes]
    sizes = [part.value.shape[axis] for part in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(grad: Tensor) -> None:
        for part, piece in zip(parts, np.split(grad, bounds, axis=axis)):
            part.accumulate(piece)

    return ComputeNode(
        np.concatenate([part.value for part in parts], axis=axis),
        tuple(parts),
        "concat",
        backward,
    )


def reshape(a: Operand, shape: Tuple[int, ...]) -> ComputeNode:
    """View the operand with another shape."""
    node = as_node(a)

    def backward(grad: Tensor) -> None:
        node.accumulate(grad.reshape(node.shape))

    return ComputeNode(
        node.value.reshape(shape), (node,), "reshape", backward
    )


def total(a: Operand) -> ComputeNode:
    """Sum of every element, as a scalar node."""
    node = as_node(a)

    def backward(grad: Tensor) -> None:
        node.accumulate(np.broadcast_to(grad, node.shape))

    return ComputeNode(np.sum(node.value), (node,), "sum", backward)


def mean(a: Operand) -> ComputeNode:
    """Mean of every element, as a scalar node."""
    node = as_node(a)
    count = node.value.size

    def backward(grad: Tensor) -> None:
        node.accumulate(np.broadcast_to(grad / count, node.shape))

    return ComputeNode(np.mean(node.value), (node,), "mean", backward)


def mse(prediction: Operand, target: Operand) -> ComputeNode:
    """Mean squared error."""
    diff = add(prediction, neg(target))
    return mean(mul(diff, diff))


def bce_with_logits(
    logits: Operand,
    targets: Tensor,
    weights: Optional[Tensor] = None,
) -> ComputeNode:
    """Weighted binary cross-entropy on raw logits, averaged."""
    node = as_node(logits)
    z = node.value
    y = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    w = (
        np.ones_like(z)
        if weights is None
        else np.asarray(weights, dtype=np.float64).reshape(z.shape)
    )
    norm = float(np.sum(w))
    # log(1 + e^z) - y z, rearranged to stay finite for large |z|
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    probs = 0.5 * (1.0 + np.tanh(0.5 * z))

    def backward(grad: Tensor) -> None:
        node.accumulate(grad * w * (probs - y) / norm)

    return ComputeNode(
        np.sum(w * losses) / norm, (node,), "bce_with_logits", backward
    )


def conv2d(
    x: Operand,
    weight: Operand,
    bias: Operand,
    stride: int = 1,
    padding: int = 0,
) -> ComputeNode:
    """2D cross-correlation of (B, C, H, W) input with (F, C, kh, kw)."""
    inp, kernel, offset = as_node(x), as_node(weight), as_node(bias)

    if inp.value.ndim != 4 or kernel.value.ndim != 4:
        raise ShapeError(
            f"conv2d needs 4D input and kernel, got {inp.shape} "
            f"and {kernel.shape}"
        )
    if inp.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {inp.shape[1]}, "
            f"kernel {kernel.shape[1]}"
        )

    kh, kw = kernel.shape[2], kernel.shape[3]
    padded = np.pad(
        inp.value,
        ((0, 0), (0, 0), (padding, padding), (padding, padding)),
    )
    if padded.shape[2] < kh or padded.shape[3] < kw:
        raise ShapeError(f"conv2d input {inp.shape} smaller than kernel")

    cols = sliding_window_view(padded, (kh, kw), axis=(2, 3))[
        :, :, ::stride, ::stride
    ]
    out_h, out_w = cols.shape[2], cols.shape[3]
    out = np.einsum("bchwij,fcij->bfhw", cols, kernel.value, optimize=True)
    out = out + offset.value[None, :, None, None]

    def backward(grad: Tensor) -> None:
        kernel.accumulate(
            np.einsum("bfhw,bchwij->fcij", grad, cols, optimize=True)
        )
        offset.accumulate(grad.sum(axis=(0, 2, 3)))
        grad_cols = np.einsum(
            "bfhw,fcij->bchwij", grad, kernel.value, optimize=True
        )
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[
                    :,
                    :,
                    i : i + stride * out_h : stride,
                    j : j + stride * out_w : stride,
                ] += grad_cols[:, :, :, :, i, j]
        h_end = grad_padded.shape[2] - padding
        w_end = grad_padded.shape[3] - padding
        inp.accumulate(grad_padded[:, :, padding:h_end, padding:w_end])

    return ComputeNode(out, (inp, kernel, offset), "conv2d", backward)


def global_avg_pool(x: Operand) -> ComputeNode:
    """Average (B, C, H, W) over its spatial axes."""
    node = as_node(x)
    area = node.shape[2] * node.shape[3]

    def backward(grad: Tensor) -> None:
        node.accumulate(
            np.broadcast_to(grad[:, :, None, None] / area, node.shape)
        )

    return ComputeNode(
        node.value.mean(axis=(2, 3)), (node,), "global_avg_pool", backward
    )


def _topological_order(root: ComputeNode) -> List[ComputeNode]:
    order: List[ComputeNode] = []
    visited = set()
    stack: List[Tuple[ComputeNode, bool]] = [(root, False)]

    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    return order


def backward(loss_node: ComputeNode) -> Dict[str, Tensor]:
    """
    Back-propagate from a scalar loss.

    Gradients left over from a previous pass are discarded first, so every
    reachable node ends up holding the total derivative of this loss. The
    returned mapping covers the named leaves, i.e. the parameters.
    """
    if loss_node.value.size != 1:
        raise ContractError(
            f"backward needs a scalar loss, got shape {loss_node.shape}"
        )

    order = _topological_order(loss_node)
    for node in order:
        node.grad = None

    loss_node.grad = np.ones_like(loss_node.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    return {
        node.name: node.gradient
        for node in order
        if node.op == "leaf" and node.name
    }


def _uniform(
    rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int
) -> Tensor:
    bound = 1.0 / sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter(value: Tensor, name: str) -> ComputeNode:
    """Create a named trainable leaf."""
    return ComputeNode(value, name=name)


class Dense:
    """Fully connected layer ``x @ W + b``."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        name: str,
    ) -> None:
        self.weight = parameter(
            _uniform(rng, (in_features, out_features), in_features),
            f"{name}.weight",
        )
        self.bias = parameter(
            _uniform(rng, (out_features,), in_features), f"{name}.bias"
        )

    def __call__(self, x: Operand) -> ComputeNode:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> List[ComputeNode]:
        """Trainable nodes of the layer."""
        return [self.weight, self.bias]


class LSTMWeights(NamedTuple):
    """Input, recurrent and bias parameters of one LSTM cell."""

    input_weight: ComputeNode
    recurrent_weight: ComputeNode
    bias: ComputeNode


def lstm_cell_forward(
    x: Operand,
    h: Operand,
    c: Operand,
    weights: LSTMWeights,
) -> Tuple[ComputeNode, ComputeNode]:
    """
    Advance one LSTM step for a (batch, features) input.

    The packed gate order in the weight columns is input, forget, cell
    candidate, output.
    """
    x_node, h_node, c_node = as_node(x), as_node(h), as_node(c)
    w, u, b = weights
    hidden = u.shape[0]

    if x_node.value.ndim != 2 or x_node.shape[1] != w.shape[0]:
        raise ShapeError(
            f"LSTM input has shape {x_node.shape}, "
            f"expected (batch, {w.shape[0]})"
        )
    if h_node.shape[-1] != hidden or c_node.shape[-1] != hidden:
        raise ShapeError(
            f"LSTM state shapes {h_node.shape} / {c_node.shape} do not "
            f"match hidden size {hidden}"
        )
    if w.shape[1] != 4 * hidden or b.shape != (4 * hidden,):
        raise ShapeError("LSTM weights are not packed for four gates")

    z = add(add(matmul(x_node, w), matmul(h_node, u)), b)
    i_gate = sigmoid(z[:, :hidden])
    f_gate = sigmoid(z[:, hidden : 2 * hidden])
    g_gate = tanh(z[:, 2 * hidden : 3 * hidden])
    o_gate = sigmoid(z[:, 3 * hidden :])

    c_next = add(mul(f_gate, c_node), mul(i_gate, g_gate))
    h_next = mul(o_gate, tanh(c_next))
    return h_next, c_next


class LSTM:
    """Single-layer LSTM returning the last hidden state."""

    def __init__(
        self,
        input_size: int,
        hidden_size: int,
        rng: np.random.Generator,
        name: str,
    ) -> None:
        self.hidden_size = hidden_size
        self.weights = LSTMWeights(
            parameter(
                _uniform(rng, (input_size, 4 * hidden_size), input_size),
                f"{name}.input_weight",
            ),
            parameter(
                _uniform(rng, (hidden_size, 4 * hidden_size), hidden_size),
                f"{name}.recurrent_weight",
            ),
            parameter(
                _uniform(rng, (4 * hidden_size,), hidden_size),
                f"{name}.bias",
            ),
        )

    def __call__(self, sequence: Operand) -> ComputeNode:
        seq = as_node(sequence)
        if seq.value.ndim != 3:
            raise ShapeError(
                f"LSTM expects (batch, steps, features), got {seq.shape}"
            )
        batch = seq.shape[0]
        h = as_node(np.zeros((batch, self.hidden_size)))
        c = as_node(np.zeros((batch, self.hidden_size)))
        for step in range(seq.shape[1]):
            h, c = lstm_cell_forward(seq[:, step, :], h, c, self.weights)
        return h

    def parameters(self) -> List[ComputeNode]:
        """Trainable nodes of the layer."""
        return list(self.weights)


class Conv2d:
    """Strided 2D convolution with square kernels."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int,
        padding: int,
        rng: np.random.Generator,
        name: str,
    ) -> None:
        fan_in = in_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = parameter(
            _uniform(
                rng,
                (out_channels, in_channels, kernel_size, kernel_size),
                fan_in,
            ),
            f"{name}.weight",
        )
        self.bias = parameter(
            _uniform(rng, (out_channels,), fan_in), f"{name}.bias"
        )

    def __call__(self, x: Operand) -> ComputeNode:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> List[ComputeNode]:
        """Trainable nodes of the layer."""
        return [self.weight, self.bias]


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters; L2 acts as decoupled decay."""

    learning_rate: float
    l2: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_moment: Dict[str, Tensor] = field(default_factory=dict)
    second_moment: Dict[str, Tensor] = field(default_factory=dict)
    step: int = 0

    def hyperparameters(self) -> Dict[str, float]:
        """Scalars worth persisting alongside the weights."""
        return {
            "learning_rate": self.learning_rate,
            "l2": self.l2,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }


def adam_step(
    state: OptimizerState,
    params: Mapping[str, ComputeNode],
    grads: Mapping[str, Tensor],
) -> Mapping[str, ComputeNode]:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    for name, grad in grads.items():
        if name not in params:
            continue
        if grad.shape != params[name].shape:
            raise ShapeError(
                f"Gradient for {name} has shape {grad.shape}, "
                f"parameter has {params[name].shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(
                f"Non-finite gradient for {name} at step {state.step + 1}"
            )

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step

    for name, node in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(node.value)
        m = state.first_moment.get(name, np.zeros_like(node.value))
        v = state.second_moment.get(name, np.zeros_like(node.value))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v

        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        node.value = node.value - state.learning_rate * (
            update + state.l2 * node.value
        )

    return params


@dataclass(frozen=True)
class Scaler:
    """Per-feature affine scaling ``(x - offset) / divisor``."""

    kind: str
    offset: Tensor
    divisor: Tensor

    def apply(self, x: Union[Tensor, float]) -> Tensor:
        """Map raw values into the scaled space."""
        return (np.asarray(x, dtype=np.float64) - self.offset) / self.divisor

    def invert(self, x_scaled: Union[Tensor, float]) -> Tensor:
        """Map scaled values back to raw units."""
        return (
            np.asarray(x_scaled, dtype=np.float64) * self.divisor
            + self.offset
        )


def fit_scaler(kind: str, data: Union[Tensor, Sequence[float]]) -> Scaler:
    """
    Fit a min-max or standard scaler column-wise.

    Features without spread keep their offset but get a divisor of 1.
    """
    if kind not in SCALER_KINDS:
        raise ContractError(f"Unknown scaler kind: {kind}")

    values = np.asarray(data, dtype=np.float64)
    if values.size == 0:
        raise ContractError("Cannot fit a scaler on empty data")

    if kind == MIN_MAX:
        offset = values.min(axis=0)
        divisor = values.max(axis=0) - offset
    else:
        offset = values.mean(axis=0)
        divisor = values.std(axis=0)

    divisor = np.where(divisor > 0.0, divisor, 1.0)
    return Scaler(kind, np.asarray(offset), np.asarray(divisor))


def apply(scaler: Scaler, x: Union[Tensor, float]) -> Tensor:
    """Scale ``x`` with a fitted scaler."""
    return scaler.apply(x)


def invert(scaler: Scaler, x_scaled: Union[Tensor, float]) -> Tensor:
    """Undo :func:`apply`."""
    return scaler.invert(x_scaled)


def scaler_tensors(
    scaler: Scaler, prefix: str = "scaler"
) -> Dict[str, Tensor]:
    """Container records for a scaler."""
    return {
        f"{prefix}.offset": np.atleast_1d(scaler.offset),
        f"{prefix}.divisor": np.atleast_1d(scaler.divisor),
    }


def scaler_from_tensors(
    kind: str, tensors: Mapping[str, Tensor], prefix: str = "scaler"
) -> Scaler:
    """Rebuild a scaler saved with :func:`scaler_tensors`."""
    return Scaler(
        kind, tensors[f"{prefix}.offset"], tensors[f"{prefix}.divisor"]
    )


def save_container(
    path: Path,
    tensors: Mapping[str, Tensor],
    metadata: Optional[Mapping[str, Any]] = None,
) -> None:
    """
    Write tensors to a self-describing binary file.

    Layout: ``SGLK``, u16 format version, u32 metadata length and the
    metadata as UTF-8 JSON, u32 tensor count, then per tensor the u16 name
    length, the name, u8 rank, u32 dimensions and the little-endian float64
    payload. All integers are little-endian.
    """
    meta = json.dumps(
        dict(metadata or {}), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    chunks = [
        MAGIC,
        pack("<H", FORMAT_VERSION),
        pack("<I", len(meta)),
        meta,
        pack("<I", len(tensors)),
    ]
    for name in sorted(tensors):
        array = np.asarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(pack("<B", array.ndim))
        chunks.append(pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes(order="C"))

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_container(path: Path) -> Tuple[Dict[str, Tensor], Dict[str, Any]]:
    """Read a file written by :func:`save_container`."""
    raw = path.read_bytes()

    if raw[:4] != MAGIC:
        raise DatasetError(f"{path} is not a weight container")

    offset = 4
    (version,) = unpack_from("<H", raw, offset)
    offset += calcsize("<H")
    if version != FORMAT_VERSION:
        raise DatasetError(
            f"{path} has container version {version}, "
            f"expected {FORMAT_VERSION}"
        )

    (meta_len,) = unpack_from("<I", raw, offset)
    offset += calcsize("<I")
    metadata = json.loads(raw[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len

    (count,) = unpack_from("<I", raw, offset)
    offset += calcsize("<I")

    tensors: Dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = unpack_from("<H", raw, offset)
        offset += calcsize("<H")
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = unpack_from("<B", raw, offset)
        offset += calcsize("<B")
        dims = unpack_from(f"<{rank}I", raw, offset)
        offset += calcsize(f"<{rank}I")
        size = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        offset += size * 8
        tensors[name] = payload.astype(np.float64).reshape(dims)

    return tensors, metadata


def named_parameters(
    layers: Iterable[Any],
) -> Dict[str, ComputeNode]:
    """Collect the parameters of several layers by name."""
    params: Dict[str, ComputeNode] = {}
    for layer in layers:
        for node in layer.parameters():
            params[node.name] = node
    return params


def child_seed(master: int, *keys: int) -> int:
    """Derive an independent, reproducible seed from a master seed."""
    sequence = np.random.SeedSequence([int(master), *map(int, keys)])
    return int(sequence.generate_state(1)[0])
