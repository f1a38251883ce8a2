# atvc_lab/nn.py
"""
Dense-network substrate with reverse-mode automatic differentiation.

A ``Tensor`` wraps a float64 numpy array. While recording is enabled, every op
keeps references to its inputs together with a closure mapping the output
gradient to input gradients; that chain of records is the tape. ``backward``
walks the tape from a scalar loss in reverse topological order, accumulates
gradients into the leaf parameters of a ``ParamStore`` and then drops the tape.

Only what the encoder, attention scorer and the three heads need is provided:
dense layers, tanh, exp/log/sqrt, (masked) softmax and log-softmax, reductions,
concatenation, indexing, clipping and elementwise arithmetic with numpy
broadcasting.
"""

import contextlib
import logging
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from atvc_lab.errors import ContractError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int]

_recording = threading.local()


def is_recording() -> bool:
    return getattr(_recording, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording them (rollouts, evaluation)."""
    previous = is_recording()
    _recording.enabled = False
    try:
        yield
    finally:
        _recording.enabled = previous


def _contract_error(message: str) -> ContractError:
    logger.error(message)
    return ContractError(message)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # Makes ``ndarray <op> Tensor`` dispatch to the Tensor reflected operators.
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(data: np.ndarray, parents: Tuple[Tensor, ...],
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    out = Tensor(data)
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _contract_error(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise arithmetic -------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data
    return _record(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    return _record(np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def clip(x: ArrayLike, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)
    return _record(np.clip(x.data, low, high), (x,), lambda g: (g * inside,))


# --- unary ops ----------------------------------------------------------------

def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g / (2.0 * out),))


def square(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def softmax(x: ArrayLike, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    x = as_tensor(x)
    scores = x.data if mask is None else np.where(mask, x.data, -np.inf)
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record(out, (x,), backward_fn)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    probs = np.exp(out)
    return _record(out, (x,), lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True),))


# --- structural ops -------------------------------------------------------------

def matmul(x: ArrayLike, w: ArrayLike) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise _contract_error(f"matmul: incompatible shapes {x.shape} and {w.shape}")
    out = x.data @ w.data

    def backward_fn(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return _record(out, (x, w), backward_fn)


def dense(x: ArrayLike, w: ArrayLike, b: ArrayLike) -> Tensor:
    """Affine layer ``x @ w + b`` over the last axis of ``x``."""
    b = as_tensor(b)
    w = as_tensor(w)
    if b.shape != (w.shape[-1],):
        raise _contract_error(f"dense: bias shape {b.shape} does not match weight shape {w.shape}")
    return add(matmul(x, w), b)


def reduce_sum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (x,), backward_fn)


def reduce_mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return reduce_sum(x, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = " and ".join(str(p.shape) for p in parts)
        raise _contract_error(f"concat: incompatible shapes {shapes}") from None
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _record(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _contract_error(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def take(x: ArrayLike, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate their gradients."""
    x = as_tensor(x)
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out), (x,), backward_fn)


# --- sampling -------------------------------------------------------------------

def reparam_sample(mu: ArrayLike, sigma: ArrayLike, rng: Optional[np.random.Generator] = None,
                   noise: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
    """
    Reparameterised Gaussian draw ``z = mu + sigma * eps`` with ``eps ~ N(0, I)``.

    ``sigma`` is the elementwise scale. Passing ``noise`` replays a previous
    draw (common random numbers), which the trainer uses to re-evaluate stored
    latents under updated parameters.

    Returns:
        (z, eps): the latent tensor, recorded on the tape, and the noise used.
    """
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(~(sigma.data > 0)):
        raise _contract_error("reparam_sample: sigma must be strictly positive")
    if noise is None:
        if rng is None:
            raise _contract_error("reparam_sample: either rng or noise is required")
        noise = rng.standard_normal(np.broadcast_shapes(mu.shape, sigma.shape))
    return add(mu, mul(sigma, noise)), noise


# --- backward pass ----------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(parameter) into ``.grad`` of every reachable leaf.

    The tape behind ``loss`` is released afterwards, so each loss can be
    back-propagated once.
    """
    if loss.data.size != 1:
        raise _contract_error(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
        node._parents = ()
        node._backward = None


# --- parameters and optimiser --------------------------------------------------------

class ParamStore:
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._first_moment: Dict[str, np.ndarray] = {}
        self._second_moment: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise _contract_error(f"ParamStore: duplicate parameter name '{name}'")
        tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = tensor
        self._first_moment[name] = np.zeros_like(tensor.data)
        self._second_moment[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: (np.zeros_like(t.data) if t.grad is None else t.grad)
                for name, t in self._params.items()}

    def frozen_copy(self) -> "ParamStore":
        """Read-only snapshot for rollout workers."""
        snapshot = ParamStore()
        for name, tensor in self._params.items():
            snapshot.add(name, tensor.data)
            snapshot[name].requires_grad = False
        return snapshot

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        for name, tensor in self._params.items():
            arrays[f"param/{name}"] = tensor.data.copy()
            arrays[f"adam_m/{name}"] = self._first_moment[name].copy()
            arrays[f"adam_v/{name}"] = self._second_moment[name].copy()
        arrays["adam_t"] = np.array([float(self.step_count)])
        return arrays

    @classmethod
    def from_state_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ParamStore":
        store = cls()
        for key, value in arrays.items():
            if key.startswith("param/"):
                name = key[len("param/"):]
                store.add(name, value)
                store._first_moment[name] = np.array(arrays.get(f"adam_m/{name}", np.zeros_like(value)))
                store._second_moment[name] = np.array(arrays.get(f"adam_v/{name}", np.zeros_like(value)))
        store.step_count = int(arrays.get("adam_t", np.zeros(1))[0])
        return store


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Apply one Adam update from the accumulated gradients, then zero them."""
    store.step_count += 1
    t = store.step_count
    for name, tensor in store.items():
        if tensor.grad is None:
            continue
        g = tensor.grad
        m = store._first_moment[name] = beta1 * store._first_moment[name] + (1.0 - beta1) * g
        v = store._second_moment[name] = beta2 * store._second_moment[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()
