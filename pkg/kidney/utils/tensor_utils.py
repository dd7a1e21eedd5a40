import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from kidney.errors import ConfigError, NonFiniteError, ShapeError, TapeError
from kidney.utils.logger import configure_logger


logger = logging.getLogger(__name__)
configure_logger(logger)


BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
LOG_CLAMP = 1e-7


class Tensor:
    """Dense N-D array of 32- or 64-bit floats that can take part in a gradient tape.

    Parameters are leaf tensors created with ``requires_grad=True``; every op
    output is a new tensor and is never written to again.
    """

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        array = np.asarray(data)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float32)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of the ops run inside ``recording()``.

    Recording order is execution order, so walking it backwards visits every
    node after all of its consumers.
    """
    nodes: list[TapeNode] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: TapeNode) -> None:
        if self.consumed:
            raise TapeError("Cannot record on a tape that already ran backward")
        self.nodes.append(node)

    def backward(self, loss: Tensor, seed_grad: np.ndarray | None = None) -> None:
        """Propagate d(loss)/d(x) to every tensor that requires a gradient.

        Args:
            loss (Tensor): A single-element tensor produced on this tape.
            seed_grad (np.ndarray | None): Upstream gradient for a non-scalar output;
                the gradient checker uses it to weight every output element.

        Raises:
            TapeError: If backward already ran on this tape.
            ShapeError: If the loss is not a scalar.
        """
        if self.consumed:
            logger.error("backward called twice on the same tape")
            raise TapeError("backward already ran on this tape; run a new forward pass first")
        if seed_grad is None and loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        loss.grad = np.ones_like(loss.data) if seed_grad is None else np.asarray(seed_grad, dtype=loss.dtype)
        for node in reversed(self.nodes):
            grad_output = node.output.grad
            if grad_output is None:
                continue
            grads = node.backward(grad_output)
            for tensor, grad in zip(node.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                grad = np.asarray(grad, dtype=tensor.dtype)
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad

        logger.debug(f"Backward pass visited {len(self.nodes)} nodes")
        self.consumed = True
        self.nodes = []


_state = threading.local()


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


@contextmanager
def recording() -> Iterator[Tape]:
    """Context manager that records differentiable ops on a fresh thread-local tape.

    Yields:
        Tape: The tape collecting the ops run inside the block.
    """
    previous = active_tape()
    tape = Tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = previous


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for tensor in tensors:
        tensor.grad = None


def _emit(op: str, inputs: tuple[Tensor, ...], data: np.ndarray,
          backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]) -> Tensor:
    if not np.all(np.isfinite(data)):
        logger.error(f"{op} produced non-finite values")
        raise NonFiniteError(f"{op} produced non-finite values")

    tape = active_tape()
    requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        tape.record(TapeNode(op, inputs, out, backward))
    return out


def _check_ndim(op: str, tensor: Tensor, ndim: int) -> None:
    if tensor.data.ndim != ndim:
        raise ShapeError(f"{op} expects a {ndim}-D tensor, got shape {tensor.shape}")


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


##################################################
# Convolutions
##################################################


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlates a [N,C,H,W] input with a [F,C,kh,kw] kernel.

    With ``padding="same"`` the output is ceil(H/stride) x ceil(W/stride);
    any odd padding pixel goes after the image.

    Args:
        x (Tensor): Input feature map.
        kernel (Tensor): Filters.
        bias (Tensor | None): Optional per-filter bias of shape [F].
        stride (int): 1 or 2.
        padding (str): "same" or "valid".

    Returns:
        Tensor: Feature map of shape [N,F,H',W'].

    Raises:
        ShapeError: If the dimensions are inconsistent.
    """
    _check_ndim("conv2d", x, 4)
    _check_ndim("conv2d", kernel, 4)
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d kernel expects {kc} input channels, input has {c}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")

    if padding == "same":
        ho, pt, pb = _same_padding(h, kh, stride)
        wo, pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ShapeError(f"conv2d kernel {kh}x{kw} larger than input {h}x{w}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ShapeError(f"Unknown padding '{padding}'")
    if kh > h + pt + pb or kw > w + pl + pr:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    rows = stride * (ho - 1) + 1
    cols = stride * (wo - 1) + 1
    out = np.zeros((f, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + rows:stride, j:j + cols:stride]
            out += np.tensordot(kernel.data[:, :, i, j], patch, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(grad):
        g = grad.transpose(1, 0, 2, 3)
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + rows:stride, j:j + cols:stride]
                gk[:, :, i, j] = np.tensordot(g, patch, axes=([1, 2, 3], [0, 2, 3]))
                gxp[:, :, i:i + rows:stride, j:j + cols:stride] += np.tensordot(
                    kernel.data[:, :, i, j], g, axes=([0], [0])).transpose(1, 0, 2, 3)
        gx = gxp[:, :, pt:pt + h, pl:pl + w]
        if bias is None:
            return gx, gk
        return gx, gk, grad.sum(axis=(0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", inputs, out, backward)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Upsamples [N,C,H,W] to [N,F,2H,2W] with a [F,C,kh,kw] kernel.

    This is the adjoint of ``conv2d(..., stride=2, padding="same")`` on a 2H x 2W
    input, so the two ops round-trip spatial shapes exactly.

    Raises:
        ShapeError: If stride is not 2 or the kernel cannot produce a doubled output.
    """
    _check_ndim("conv2d_transpose", x, 4)
    _check_ndim("conv2d_transpose", kernel, 4)
    if stride != 2:
        raise ShapeError(f"conv2d_transpose only supports stride 2 (doubling), got {stride}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d_transpose kernel expects {kc} input channels, input has {c}")
    if kh > 2 * h or kw > 2 * w:
        raise ShapeError(f"conv2d_transpose kernel {kh}x{kw} cannot produce a {2 * h}x{2 * w} output")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d_transpose bias must have shape ({f},), got {bias.shape}")

    ho, wo = 2 * h, 2 * w
    _, pt, _ = _same_padding(ho, kh, 2)
    _, pl, _ = _same_padding(wo, kw, 2)
    full_h = max((h - 1) * 2 + kh, pt + ho)
    full_w = max((w - 1) * 2 + kw, pl + wo)
    rows, cols = 2 * (h - 1) + 1, 2 * (w - 1) + 1

    full = np.zeros((n, f, full_h, full_w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + rows:2, j:j + cols:2] += np.tensordot(
                kernel.data[:, :, i, j], x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
    out = full[:, :, pt:pt + ho, pl:pl + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(grad):
        gfull = np.zeros((n, f, full_h, full_w), dtype=grad.dtype)
        gfull[:, :, pt:pt + ho, pl:pl + wo] = grad
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        for i in range(kh):
            for j in range(kw):
                window = gfull[:, :, i:i + rows:2, j:j + cols:2]
                gx += np.tensordot(kernel.data[:, :, i, j], window, axes=([0], [1])).transpose(1, 0, 2, 3)
                gk[:, :, i, j] = np.tensordot(window, x.data, axes=([0, 2, 3], [0, 2, 3]))
        if bias is None:
            return gx, gk
        return gx, gk, grad.sum(axis=(0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d_transpose", inputs, out, backward)


##################################################
# Normalization and activations
##################################################


@dataclass
class RunningStats:
    """Per-channel moving averages kept by a batch-norm layer."""
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats, mode: str = "train",
               momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON) -> Tensor:
    """Normalizes each channel of a [N,C,H,W] tensor.

    In train mode the batch statistics are used and folded into ``running`` by
    exponential moving average; in eval mode ``running`` is used as-is.

    Raises:
        ShapeError: On a channel mismatch or a train batch with fewer than two values per channel.
    """
    _check_ndim("batch_norm", x, 4)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm parameters must have shape ({c},)")
    shape = (1, c, 1, 1)

    if mode == "eval":
        inv_std = (1.0 / np.sqrt(running.var + eps)).astype(x.dtype)
        scale = gamma.data * inv_std
        out = (x.data - running.mean.astype(x.dtype).reshape(shape)) * scale.reshape(shape) + beta.data.reshape(shape)
        xhat = (x.data - running.mean.astype(x.dtype).reshape(shape)) * inv_std.reshape(shape)

        def backward(grad):
            return (grad * scale.reshape(shape),
                    (grad * xhat).sum(axis=(0, 2, 3)),
                    grad.sum(axis=(0, 2, 3)))

        return _emit("batch_norm", (x, gamma, beta), out, backward)

    if mode != "train":
        raise ShapeError(f"Unknown batch_norm mode '{mode}'")
    count = n * h * w
    if count < 2:
        raise ShapeError("batch_norm in train mode needs at least two values per channel")

    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    running.mean = (momentum * running.mean + (1.0 - momentum) * mean).astype(running.mean.dtype)
    running.var = (momentum * running.var + (1.0 - momentum) * var).astype(running.var.dtype)

    def backward(grad):
        dxhat = grad * gamma.data.reshape(shape)
        sum_dxhat = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
        dx = inv_std.reshape(shape) / count * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        return dx, (grad * xhat).sum(axis=(0, 2, 3)), grad.sum(axis=(0, 2, 3))

    return _emit("batch_norm", (x, gamma, beta), out, backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, 0).astype(x.dtype)
    return _emit("relu", (x,), out, lambda grad: (grad * positive,))


def dropout(x: Tensor, p: float, mode: str = "train", seed: int = 0, layer_id: int = 0, step: int = 0) -> Tensor:
    """Zeroes units with probability p and rescales survivors by 1/(1-p).

    The mask comes from a counter-based Philox stream keyed by
    (seed, layer_id, step), so it does not depend on thread count or call order.
    Eval mode and p == 0 return the input tensor unchanged.

    Raises:
        ConfigError: If p is outside [0, 1).
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x

    generator = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, layer_id, step])))
    keep = (generator.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _emit("dropout", (x,), x.data * keep, lambda grad: (grad * keep,))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis of a [N,C,H,W] tensor."""
    _check_ndim("softmax_channels", x, 4)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)

    def backward(grad):
        return (probs * (grad - (grad * probs).sum(axis=1, keepdims=True)),)

    return _emit("softmax_channels", (x,), probs, backward)


##################################################
# Losses
##################################################


def weighted_cross_entropy(probs: Tensor, target: np.ndarray, class_weights: Sequence[float],
                           eps: float = LOG_CLAMP) -> Tensor:
    """Class-weighted categorical cross-entropy averaged over all pixels.

    Args:
        probs (Tensor): Softmax output of shape [N,K,H,W].
        target (np.ndarray): Integer labels of shape [N,H,W] in [0, K).
        class_weights (Sequence[float]): One weight per class, e.g. [w_B, w_K, w_KT].
        eps (float): Lower clamp applied to probabilities before the log.

    Returns:
        Tensor: Scalar loss.

    Raises:
        ShapeError: On mismatched shapes or labels outside the class range.
    """
    _check_ndim("weighted_cross_entropy", probs, 4)
    n, k, h, w = probs.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match probabilities {probs.shape}")
    if len(class_weights) != k:
        raise ShapeError(f"Expected {k} class weights, got {len(class_weights)}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ShapeError(f"target labels must lie in [0, {k})")

    index = target.astype(np.int64)[:, None]
    weights = np.asarray(class_weights, dtype=probs.dtype)[target.astype(np.int64)]
    picked = np.take_along_axis(probs.data, index, axis=1)[:, 0]
    clamped = np.maximum(picked, probs.dtype.type(eps))
    pixels = n * h * w
    loss = np.asarray(-(weights * np.log(clamped)).sum() / pixels, dtype=probs.dtype)

    def backward(grad):
        local = -(weights / clamped) / pixels * (picked > eps)
        g = np.zeros_like(probs.data)
        np.put_along_axis(g, index, (local * grad)[:, None], axis=1)
        return (g,)

    return _emit("weighted_cross_entropy", (probs,), loss, backward)


def l2_penalty(kernels: Sequence[Tensor], scale: float = 0.1) -> Tensor:
    """scale * sum of squared kernel entries; callers pass convolution kernels only."""
    kernels = tuple(kernels)
    dtype = kernels[0].dtype if kernels else np.float32
    total = sum(float(np.sum(k.data.astype(np.float64) ** 2)) for k in kernels)
    out = np.asarray(scale * total, dtype=dtype)

    def backward(grad):
        return tuple(2.0 * scale * k.data * grad for k in kernels)

    return _emit("l2_penalty", kernels, out, backward)


##################################################
# Structural ops
##################################################


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda grad: (grad, grad))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_ndim("concat_channels", a, 4)
    _check_ndim("concat_channels", b, 4)
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels needs matching N,H,W, got {a.shape} and {b.shape}")
    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit("concat_channels", (a, b), out, lambda grad: (grad[:, :split], grad[:, split:]))


def crop_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """Keeps the top-left height x width window of a [N,C,H,W] tensor."""
    _check_ndim("crop_spatial", x, 4)
    n, c, h, w = x.shape
    if height > h or width > w:
        raise ShapeError(f"Cannot crop {h}x{w} to {height}x{width}")
    if (height, width) == (h, w):
        return x

    def backward(grad):
        g = np.zeros_like(x.data)
        g[:, :, :height, :width] = grad
        return (g,)

    return _emit("crop_spatial", (x,), np.ascontiguousarray(x.data[:, :, :height, :width]), backward)
