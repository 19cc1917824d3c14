"""
Minimal dense tensors with reverse-mode automatic differentiation.

Data lives in NumPy arrays. Every differentiable operation is a `Function`
subclass with a `forward` on raw arrays and a `backward` that maps the output
gradient to one gradient per input. `Tensor.backward()` traces the graph that
produced a scalar, walks it in reverse topological order and accumulates
gradients on the leaf tensors only, so repeated calls keep adding up until
`zero_grad()` is called.

Training runs in 32-bit floats. Inside `check_mode()` every new tensor is
64-bit, which is what the finite-difference checks use.

There is no broadcasting: elementwise operations require identical shapes,
scalars are applied through `scale` and `shift`.
"""

import contextlib
import contextvars
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ShapeError

logger = logging.getLogger(__name__)

_default_dtype = contextvars.ContextVar('default_dtype', default=np.float32)


@contextlib.contextmanager
def check_mode():
    """Create every tensor in 64-bit precision for the duration of the block."""
    token = _default_dtype.set(np.float64)
    try:
        yield
    finally:
        _default_dtype.reset(token)


def default_dtype():
    return _default_dtype.get()


class Function:
    """
    Base class for differentiable operations.

    `backward` receives dL/d(output) as an array and returns a tuple with one
    entry per input (None for inputs that take no gradient).
    """

    op_name = 'function'

    def __init__(self, *tensors: 'Tensor'):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError('Forward pass not implemented for this function')

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError('Backward pass not implemented for this function')

    @classmethod
    def apply(cls, *tensors: 'Tensor', **kwargs) -> 'Tensor':
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out_data, creator=func if requires_grad else None, requires_grad=requires_grad)


class Tensor:
    """
    A dense float array with an optional gradient slot.

    Leaves are tensors without a creator; only leaves with `requires_grad`
    receive a `.grad` during backward.
    """

    def __init__(self, data, creator: Optional[Function] = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.creator = creator
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError('item', 'size', 1, self.data.size)
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, value: np.ndarray):
        if value.shape != self.data.shape:
            raise ShapeError('accumulate_grad', 'shape', self.data.shape, value.shape)
        if self.grad is None:
            self.grad = np.array(value, dtype=self.data.dtype, copy=True)
        else:
            self.grad += value

    def backward(self):
        if not self.requires_grad:
            return
        backward(ComputeGraph.trace(self))

    # Elementwise arithmetic, identical shapes only.
    def __add__(self, other: 'Tensor') -> 'Tensor':
        return Add.apply(self, other)

    def __sub__(self, other: 'Tensor') -> 'Tensor':
        return Sub.apply(self, other)

    def __mul__(self, other: 'Tensor') -> 'Tensor':
        return Mul.apply(self, other)

    def __truediv__(self, other: 'Tensor') -> 'Tensor':
        return Div.apply(self, other)

    def __neg__(self) -> 'Tensor':
        return Scale.apply(self, factor=-1.0)

    def scale(self, factor: float) -> 'Tensor':
        return Scale.apply(self, factor=factor)

    def shift(self, offset: float) -> 'Tensor':
        return Shift.apply(self, offset=offset)

    def mask(self, weights: np.ndarray) -> 'Tensor':
        """Multiply by a constant array of the same shape."""
        return Mul.apply(self, Tensor(weights))

    def sum(self) -> 'Tensor':
        return Sum.apply(self)

    def log(self) -> 'Tensor':
        return Log.apply(self)

    def sqrt(self) -> 'Tensor':
        return Sqrt.apply(self)

    def reshape(self, *shape: int) -> 'Tensor':
        return Reshape.apply(self, shape=shape)

    def channel(self, index: int) -> 'Tensor':
        return Channel.apply(self, index=index)


def _same_shape(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(op, 'shape', a.shape, b.shape)


class Add(Function):
    op_name = 'add'

    def forward(self, a, b):
        _same_shape(self.op_name, a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    op_name = 'sub'

    def forward(self, a, b):
        _same_shape(self.op_name, a, b)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    op_name = 'mul'

    def forward(self, a, b):
        _same_shape(self.op_name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    op_name = 'div'

    def forward(self, a, b):
        _same_shape(self.op_name, a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Scale(Function):
    op_name = 'scale'

    def forward(self, a, factor):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Shift(Function):
    op_name = 'shift'

    def forward(self, a, offset):
        return a + offset

    def backward(self, grad):
        return (grad,)


class Sum(Function):
    op_name = 'sum'

    def forward(self, a):
        self.input_shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.full(self.input_shape, grad, dtype=grad.dtype),)


class Log(Function):
    op_name = 'log'

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sqrt(Function):
    op_name = 'sqrt'

    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Reshape(Function):
    op_name = 'reshape'

    def forward(self, a, shape):
        self.input_shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.input_shape),)


class Channel(Function):
    op_name = 'channel'

    def forward(self, a, index):
        self.input_shape = a.shape
        self.index = index
        return a[index]

    def backward(self, grad):
        out = np.zeros(self.input_shape, dtype=grad.dtype)
        out[self.index] = grad
        return (out,)


class Conv2d(Function):
    """Cross-correlation with stride 1 and 'same' zero padding."""

    op_name = 'conv2d'

    def forward(self, x, kernel, bias):
        c_out, c_in, k, _ = kernel.shape
        _, h, w = x.shape
        pad = k // 2
        padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        windows = sliding_window_view(padded, (k, k), axis=(1, 2))
        self.cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, h * w)
        self.kernel = kernel
        self.geometry = (c_in, h, w, k, pad)
        out = kernel.reshape(c_out, -1) @ self.cols + bias[:, None]
        return out.reshape(c_out, h, w)

    def backward(self, grad):
        c_in, h, w, k, pad = self.geometry
        c_out = self.kernel.shape[0]
        g = grad.reshape(c_out, h * w)
        d_kernel = (g @ self.cols.T).reshape(self.kernel.shape)
        d_bias = g.sum(axis=1)
        d_cols = (self.kernel.reshape(c_out, -1).T @ g).reshape(c_in, k, k, h, w)
        d_padded = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                d_padded[:, i:i + h, j:j + w] += d_cols[:, i, j]
        d_x = d_padded[:, pad:pad + h, pad:pad + w]
        return d_x, d_kernel, d_bias


class ReLU(Function):
    op_name = 'relu'

    def forward(self, x):
        self.active = x > 0
        return np.where(self.active, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.active,)


class ChannelSoftmax(Function):
    op_name = 'channel_softmax'

    def forward(self, x):
        shifted = x - x.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=0, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=0, keepdims=True)),)


class MaxPool2(Function):
    """2x2 non-overlapping max; ties go to the first position in scan order."""

    op_name = 'maxpool2'

    def forward(self, x):
        c, h, w = x.shape
        windows = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
        self.argmax = windows.argmax(axis=3)
        self.input_shape = x.shape
        return np.take_along_axis(windows, self.argmax[..., None], axis=3)[..., 0]

    def backward(self, grad):
        c, h, w = self.input_shape
        routed = np.zeros((c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(routed, self.argmax[..., None], grad[..., None], axis=3)
        d_x = routed.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        return (d_x,)


class Upsample2Nearest(Function):
    op_name = 'upsample2_nearest'

    def forward(self, x):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, grad):
        c, h2, w2 = grad.shape
        return (grad.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4)),)


class ConcatChannels(Function):
    op_name = 'concat_channels'

    def forward(self, a, b):
        self.split = a.shape[0]
        return np.concatenate([a, b], axis=0)

    def backward(self, grad):
        return grad[:self.split], grad[self.split:]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 (or 1x1 head) convolution, zero padding to keep H and W."""
    if x.data.ndim != 3:
        raise ShapeError('conv2d', 'input ndim', 3, x.data.ndim)
    if kernel.data.ndim != 4:
        raise ShapeError('conv2d', 'kernel ndim', 4, kernel.data.ndim)
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError('conv2d', 'kernel spatial', '3x3 or 1x1', f"{kh}x{kw}")
    if x.shape[0] != c_in:
        raise ShapeError('conv2d', 'C_in', c_in, x.shape[0])
    if bias.shape != (c_out,):
        raise ShapeError('conv2d', 'C_out', (c_out,), bias.shape)
    return Conv2d.apply(x, kernel, bias)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def channel_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError('channel_softmax', 'ndim', 3, x.data.ndim)
    if x.shape[0] < 2:
        raise ShapeError('channel_softmax', 'K', '>= 2', x.shape[0])
    return ChannelSoftmax.apply(x)


def maxpool2(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError('maxpool2', 'ndim', 3, x.data.ndim)
    _, h, w = x.shape
    if h % 2:
        raise ShapeError('maxpool2', 'H', 'even', h)
    if w % 2:
        raise ShapeError('maxpool2', 'W', 'even', w)
    return MaxPool2.apply(x)


def upsample2_nearest(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError('upsample2_nearest', 'ndim', 3, x.data.ndim)
    return Upsample2Nearest.apply(x)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError('concat_channels', 'ndim', 3, (a.data.ndim, b.data.ndim))
    if a.shape[1] != b.shape[1]:
        raise ShapeError('concat_channels', 'H', a.shape[1], b.shape[1])
    if a.shape[2] != b.shape[2]:
        raise ShapeError('concat_channels', 'W', a.shape[2], b.shape[2])
    return ConcatChannels.apply(a, b)


@dataclass
class GraphNode:
    index: int
    op: str
    inputs: Tuple[int, ...]
    tensor: Tensor


@dataclass
class ComputeGraph:
    """
    The operations that produced one output, in topological order.

    Only tensors that require gradients take part; every node's inputs have
    smaller indices than the node itself.
    """

    nodes: List[GraphNode] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> 'ComputeGraph':
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, children_done = stack.pop()
            if id(node) in visited:
                continue
            if children_done:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in reversed(node.creator.tensors):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        index_of = {id(t): i for i, t in enumerate(order)}
        nodes = []
        for i, t in enumerate(order):
            if t.creator is None:
                nodes.append(GraphNode(i, 'leaf', (), t))
            else:
                inputs = tuple(index_of[id(p)] if p.requires_grad else -1 for p in t.creator.tensors)
                nodes.append(GraphNode(i, t.creator.op_name, inputs, t))
        return cls(nodes)

    @property
    def output(self) -> GraphNode:
        return self.nodes[-1]

    def leaves(self) -> List[Tensor]:
        return [n.tensor for n in self.nodes if n.op == 'leaf']


def backward(graph: ComputeGraph, loss_node: Optional[int] = None) -> List[Tensor]:
    """
    Propagate d(loss)/d(loss) = 1 back through the graph.

    Intermediate gradients live only for the duration of the call; leaf
    gradients accumulate on the tensors. Returns the leaves that were reached.
    """
    if not graph.nodes:
        return []
    root = graph.nodes[-1 if loss_node is None else loss_node]
    if root.tensor.data.size != 1:
        raise ShapeError('backward', 'loss size', 1, root.tensor.data.size)

    grads: Dict[int, np.ndarray] = {root.index: np.ones_like(root.tensor.data)}
    for node in reversed(graph.nodes[:root.index + 1]):
        grad = grads.pop(node.index, None)
        if grad is None:
            continue
        if node.op == 'leaf':
            node.tensor.accumulate_grad(grad)
            continue
        input_grads = node.tensor.creator.backward(grad)
        for parent_index, g in zip(node.inputs, input_grads):
            if parent_index < 0 or g is None:
                continue
            if parent_index in grads:
                grads[parent_index] = grads[parent_index] + g
            else:
                grads[parent_index] = g
    return graph.leaves()


def finite_diff_gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    kink_tolerance: float = 1e-4,
) -> float:
    """
    Compare the autodiff gradient of a scalar function with central differences.

    Runs in check mode. With a slope jump of J inside [x - h, x + h], the
    second difference D(0) = f(x+h) - 2f(x) + f(x-h) is exactly 2h times the
    central-difference error, so only coordinates with D(0) / 2h above
    kink_tolerance * max|g_fd| are examined further. Those are evaluated at
    x +- 2h: smooth curvature keeps D(+-h) within O(h^3) of D(0), a kink does
    not, and only kinked coordinates are left out. Returns
    max|g_ad - g_fd| / (max|g_fd| + 1e-8) over the rest, or inf when every
    coordinate was left out.
    """
    with check_mode():
        base = np.array(x.data, dtype=np.float64)
        tracked = Tensor(base, requires_grad=True)
        f(tracked).backward()
        g_ad = tracked.grad if tracked.grad is not None else np.zeros_like(base)

        flat = base.reshape(-1)

        def shifted(i, offset):
            original = flat[i]
            flat[i] = original + offset
            try:
                return f(Tensor(base)).item()
            finally:
                flat[i] = original

        f0 = f(Tensor(base)).item()
        f_plus = np.array([shifted(i, step) for i in range(flat.size)])
        f_minus = np.array([shifted(i, -step) for i in range(flat.size)])
        g_fd = ((f_plus - f_minus) / (2 * step)).reshape(base.shape)
        curvature = f_plus - 2 * f0 + f_minus

        threshold = kink_tolerance * (np.abs(g_fd).max() + 1e-8) * 2 * step
        included = np.ones(flat.size, dtype=bool)
        for i in np.flatnonzero(np.abs(curvature) > threshold):
            ahead = shifted(i, 2 * step) - 2 * f_plus[i] + f0
            behind = f0 - 2 * f_minus[i] + shifted(i, -2 * step)
            if max(abs(curvature[i] - ahead), abs(curvature[i] - behind)) > threshold:
                included[i] = False
        included = included.reshape(base.shape)

    excluded = int((~included).sum())
    if excluded:
        logger.debug(f"gradcheck excluded {excluded} non-differentiable coordinate(s)")
    if not included.any():
        logger.warning('gradcheck left out every coordinate; nothing was compared')
        return float('inf')
    diff = np.abs(g_ad - g_fd)[included].max()
    scale = np.abs(g_fd)[included].max()
    return float(diff / (scale + 1e-8))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
) -> Tuple[Mapping[str, Tensor], AdamState]:
    """Adam with bias correction; parameters are updated in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.data.shape:
            raise ShapeError('adam_step', name, param.data.shape, grad.shape)
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        if m.shape != param.data.shape:
            raise ShapeError('adam_step', f"{name} moment", param.data.shape, m.shape)
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.data.dtype)
    return params, state


_MASK64 = (1 << 64) - 1


def _stream_key(parent: int, keys: Sequence) -> int:
    digest = hashlib.blake2b(
        '\x1f'.join([str(parent)] + [str(k) for k in keys]).encode('utf-8'),
        digest_size=8,
    ).digest()
    return int.from_bytes(digest, 'little')


class RngStream:
    """
    Counter-based random stream (Philox) keyed by (seed, stream id).

    `derive(purpose, ...)` gives an independent child stream whose id is a
    hash of the parent id and the keys, so the same keys always give the
    same numbers regardless of call order elsewhere.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    @property
    def counter(self) -> Tuple[int, ...]:
        state = self.generator.bit_generator.state['state']
        return tuple(int(c) for c in state['counter'])

    def derive(self, *keys) -> 'RngStream':
        return RngStream(self.seed, _stream_key(self.stream_id, keys))

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def beta(self, a, b):
        return float(self.generator.beta(a, b))


def parameter_grads(tensors: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.zero_grad()
