import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from kidney.errors import ConfigError, IncompatibleCheckpointError, MissingParameterError, ShapeError
from kidney.utils.logger import configure_logger
from kidney.utils.tensor_utils import (
    RunningStats,
    Tensor,
    add,
    batch_norm,
    conv2d,
    conv2d_transpose,
    dropout,
    relu,
)


logger = logging.getLogger(__name__)
configure_logger(logger)


INIT_SCHEMES = ("truncated_normal", "he_uniform")
MIN_INPUT_SIZE = 16


def argmax_classes(probs: np.ndarray, axis: int = 1) -> np.ndarray:
    """Argmax over the class axis with ties going to the higher class index."""
    count = probs.shape[axis]
    flipped = np.flip(probs, axis=axis)
    return (count - 1 - np.argmax(flipped, axis=axis)).astype(np.uint8)


@dataclass(frozen=True)
class InitSpec:
    """Weight initialization: truncated normal (std 0.1, cut at 2 std) or He uniform."""
    scheme: str = "truncated_normal"
    seed: int = 0
    std: float = 0.1

    def __post_init__(self):
        if self.scheme not in INIT_SCHEMES:
            raise ConfigError(f"Unknown init scheme '{self.scheme}'. Expected one of {INIT_SCHEMES}")


def init_weights(shape: tuple[int, ...], init: InitSpec, rng: np.random.Generator) -> Tensor:
    """Draws a kernel of the given shape.

    Args:
        shape (tuple): Kernel shape; fan-in is the product of every axis but the first.
        init (InitSpec): Scheme and its parameters.
        rng (np.random.Generator): Shared generator, consumed in parameter creation order.

    Returns:
        Tensor: A float32 leaf tensor that requires a gradient.
    """
    if init.scheme == "he_uniform":
        fan_in = max(1, math.prod(shape[1:]))
        limit = math.sqrt(6.0 / fan_in)
        values = rng.uniform(-limit, limit, size=shape)
    else:
        values = rng.normal(0.0, init.std, size=shape)
        outside = np.abs(values) > 2.0 * init.std
        while outside.any():
            values[outside] = rng.normal(0.0, init.std, size=int(outside.sum()))
            outside = np.abs(values) > 2.0 * init.std
    return Tensor(values.astype(np.float32), requires_grad=True)


@dataclass(frozen=True)
class ForwardContext:
    mode: str
    seed: int
    step: int


class ParameterStore:
    """Ordered registry of named parameters, kernel names and batch-norm buffers."""

    def __init__(self, init: InitSpec):
        self.init = init
        self.rng = np.random.default_rng(init.seed)
        self.params: dict[str, Tensor] = {}
        self.kernel_names: list[str] = []
        self.buffers: dict[str, RunningStats] = {}
        self.dropout_layers = 0

    def _register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params:
            raise ConfigError(f"Duplicate parameter name '{name}'")
        tensor.name = name
        self.params[name] = tensor
        return tensor

    def kernel(self, name: str, shape: tuple[int, ...]) -> Tensor:
        self.kernel_names.append(name)
        return self._register(name, init_weights(shape, self.init, self.rng))

    def constant(self, name: str, size: int, value: float) -> Tensor:
        return self._register(name, Tensor(np.full(size, value, dtype=np.float32), requires_grad=True))

    def running_stats(self, name: str, channels: int) -> RunningStats:
        stats = RunningStats.create(channels)
        self.buffers[name] = stats
        return stats

    def next_dropout_id(self) -> int:
        self.dropout_layers += 1
        return self.dropout_layers


##################################################
# Layers
##################################################


class Conv:
    """Same-padded convolution, bias-free unless ``bias`` is set (classifier heads only)."""

    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, size: int,
                 stride: int = 1, bias: bool = False):
        self.stride = stride
        self.kernel = store.kernel(f"{name}/kernel", (cout, cin, size, size))
        self.bias = store.constant(f"{name}/bias", cout, 0.0) if bias else None

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return conv2d(x, self.kernel, self.bias, stride=self.stride, padding="same")


class ConvTranspose:
    """Stride-2 upsampling convolution with a [cout, cin, k, k] kernel."""

    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, size: int):
        self.kernel = store.kernel(f"{name}/kernel", (cout, cin, size, size))

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return conv2d_transpose(x, self.kernel, stride=2)


class BatchNorm:
    def __init__(self, store: ParameterStore, name: str, channels: int):
        self.gamma = store.constant(f"{name}/gamma", channels, 1.0)
        self.beta = store.constant(f"{name}/beta", channels, 0.0)
        self.running = store.running_stats(name, channels)

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running, mode=ctx.mode)


class PreActivation:
    """BN -> ReLU -> layer."""

    def __init__(self, store: ParameterStore, name: str, channels: int, layer):
        self.norm = BatchNorm(store, f"{name}/bn", channels)
        self.layer = layer

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return self.layer(relu(self.norm(x, ctx)), ctx)


class ResidualBlock:
    """Pre-activated residual block with a linear 1x1 shortcut convolution.

    body: BN -> ReLU -> conv3x3 (stride s) -> BN -> ReLU -> [dropout] -> conv3x3
    shortcut: conv1x1 (stride s), present even when channels match. No convolution here has a bias.
    """

    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, stride: int = 1,
                 dropout_p: float = 0.0):
        self.bn1 = BatchNorm(store, f"{name}/bn1", cin)
        self.conv1 = Conv(store, f"{name}/conv1", cin, cout, 3, stride=stride)
        self.bn2 = BatchNorm(store, f"{name}/bn2", cout)
        self.conv2 = Conv(store, f"{name}/conv2", cout, cout, 3)
        self.shortcut = Conv(store, f"{name}/shortcut", cin, cout, 1, stride=stride)
        self.dropout_p = dropout_p
        self.dropout_id = store.next_dropout_id() if dropout_p > 0 else 0

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        h = self.conv1(relu(self.bn1(x, ctx)), ctx)
        h = relu(self.bn2(h, ctx))
        if self.dropout_p > 0:
            h = dropout(h, self.dropout_p, mode=ctx.mode, seed=ctx.seed, layer_id=self.dropout_id, step=ctx.step)
        return add(self.conv2(h, ctx), self.shortcut(x, ctx))


##################################################
# Network instance
##################################################


class NetworkInstance:
    """A built network: parameters, buffers, a train/eval switch and a forward pass.

    Subclasses set ``kind`` and implement ``_build`` and ``_forward``.
    """

    kind = ""

    def __init__(self, spec, init: InitSpec | None = None):
        self.spec = spec
        self.init = init or InitSpec()
        self.store = ParameterStore(self.init)
        self.mode = "train"
        self._build()
        logger.debug(f"Built {self.kind} with {self.parameter_count()} parameters")

    def _build(self) -> None:
        raise NotImplementedError

    def _forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    ##################################################
    # Parameters
    ##################################################

    def parameters(self) -> list[Tensor]:
        return list(self.store.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.store.params)

    def kernels(self) -> list[Tensor]:
        return [self.store.params[name] for name in self.store.kernel_names]

    def buffers(self) -> dict[str, RunningStats]:
        return dict(self.store.buffers)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters plus running statistics as ``<bn>/running_mean`` and ``<bn>/running_var``."""
        state = {name: p.data.astype(np.float32).copy() for name, p in self.store.params.items()}
        for name, stats in self.store.buffers.items():
            state[f"{name}/running_mean"] = stats.mean.astype(np.float32).copy()
            state[f"{name}/running_var"] = stats.var.astype(np.float32).copy()
        return state

    def expected_names(self) -> list[str]:
        return list(self.state_dict())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copies arrays into the network.

        Raises:
            MissingParameterError: If a name is absent from ``state``.
            IncompatibleCheckpointError: If an array has the wrong shape.
        """
        current = self.state_dict()
        for name, value in current.items():
            if name not in state:
                logger.error(f"State is missing parameter {name}")
                raise MissingParameterError(f"State is missing parameter '{name}'")
            if np.shape(state[name]) != value.shape:
                logger.error(f"Parameter {name} has shape {np.shape(state[name])}, expected {value.shape}")
                raise IncompatibleCheckpointError(
                    f"Parameter '{name}' has shape {np.shape(state[name])}, expected {value.shape}")
        for name, tensor in self.store.params.items():
            tensor.data = np.array(state[name], dtype=np.float32)
            tensor.grad = None
        for name, stats in self.store.buffers.items():
            stats.mean = np.array(state[f"{name}/running_mean"], dtype=np.float32)
            stats.var = np.array(state[f"{name}/running_var"], dtype=np.float32)

    def architecture(self) -> dict:
        return {"kind": self.kind, **asdict(self.spec)}

    ##################################################
    # Forward
    ##################################################

    def train(self) -> "NetworkInstance":
        self.mode = "train"
        return self

    def eval(self) -> "NetworkInstance":
        self.mode = "eval"
        return self

    def forward(self, x: Tensor, step: int = 0) -> Tensor:
        """Maps [N,C,S,S] slabs to [N,3,S,S] class probabilities.

        Raises:
            ShapeError: On a wrong channel count or an odd or too small size.
        """
        if x.data.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"{self.kind} expects [N,{self.spec.in_channels},S,S] input, got {x.shape}")
        _, _, h, w = x.shape
        if h % 2 or w % 2 or min(h, w) < MIN_INPUT_SIZE:
            raise ShapeError(f"{self.kind} needs even spatial sizes >= {MIN_INPUT_SIZE}, got {h}x{w}")
        return self._forward(x, ForwardContext(self.mode, self.init.seed, step))

    def predict_proba(self, slabs: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Eval-mode probabilities for a stack of slabs, computed in chunks without a tape."""
        previous = self.mode
        self.eval()
        try:
            chunks = [self.forward(Tensor(np.asarray(slabs[start:start + batch_size], dtype=np.float32))).data
                      for start in range(0, len(slabs), batch_size)]
        finally:
            self.mode = previous
        if not chunks:
            return np.zeros((0, self.spec.out_classes) + tuple(np.shape(slabs)[2:]), dtype=np.float32)
        return np.concatenate(chunks, axis=0)

    def predict_labels(self, slabs: np.ndarray, batch_size: int = 8) -> np.ndarray:
        return argmax_classes(self.predict_proba(slabs, batch_size))


def build_network(architecture: dict, init: InitSpec | None = None) -> NetworkInstance:
    """Rebuilds a network from the dict returned by ``NetworkInstance.architecture()``.

    Raises:
        IncompatibleCheckpointError: If the kind is unknown or the fields do not fit its spec.
    """
    from kidney.models.res_net_model import ResNet, ResNetSpec, build_res_net
    from kidney.models.res_unet_model import ResUNet, ResUNetSpec, build_res_unet

    builders = {ResUNet.kind: (build_res_unet, ResUNetSpec), ResNet.kind: (build_res_net, ResNetSpec)}
    fields = dict(architecture)
    kind = fields.pop("kind", None)
    if kind not in builders:
        logger.error(f"Unknown network kind {kind}")
        raise IncompatibleCheckpointError(f"Unknown network kind '{kind}'")
    build, spec_cls = builders[kind]
    try:
        spec = spec_cls(**fields)
    except TypeError as e:
        raise IncompatibleCheckpointError(f"Architecture fields do not fit {kind}: {e}") from e
    return build(spec, init)
