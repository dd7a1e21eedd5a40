import logging
from dataclasses import dataclass

from kidney.errors import ConfigError
from kidney.models.network_model import (
    BatchNorm,
    Conv,
    ConvTranspose,
    ForwardContext,
    NetworkInstance,
    PreActivation,
    ResidualBlock,
)
from kidney.utils.logger import configure_logger
from kidney.utils.tensor_utils import Tensor, crop_spatial, relu, softmax_channels


logger = logging.getLogger(__name__)
configure_logger(logger)


@dataclass(frozen=True)
class ResNetSpec:
    """Transformation-style residual network: 7x7 stem, two stride-2 downsamples,
    a residual body with dropout, two stride-2 upsamples and a softmax head.
    """
    channels: tuple[int, int, int] = (32, 64, 128)
    blocks: int = 6
    dropout_p: float = 0.5
    stem_kernel: int = 7
    up_kernel: int = 3
    in_channels: int = 5
    out_classes: int = 3
    input_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError(f"Res-Net needs three positive channel widths, got {self.channels}")
        if self.blocks < 1:
            raise ConfigError(f"Res-Net needs at least one residual block, got {self.blocks}")
        if self.input_size is not None and (self.input_size % 2 or self.input_size < 16):
            raise ConfigError(f"Res-Net input size must be even and >= 16, got {self.input_size}")


class ResNet(NetworkInstance):
    kind = "res_net"

    def _build(self) -> None:
        spec, store = self.spec, self.store
        c1, c2, c3 = spec.channels

        self.stem = Conv(store, "stem", spec.in_channels, c1, spec.stem_kernel)
        self.down = [
            PreActivation(store, "down0", c1, Conv(store, "down0/conv", c1, c2, 3, stride=2)),
            PreActivation(store, "down1", c2, Conv(store, "down1/conv", c2, c3, 3, stride=2)),
        ]
        self.body = [ResidualBlock(store, f"body{index}", c3, c3, dropout_p=spec.dropout_p)
                     for index in range(spec.blocks)]
        self.up = [
            PreActivation(store, "up0", c3, ConvTranspose(store, "up0/convt", c3, c2, spec.up_kernel)),
            PreActivation(store, "up1", c2, ConvTranspose(store, "up1/convt", c2, c1, spec.up_kernel)),
        ]
        self.head_norm = BatchNorm(store, "head/bn", c1)
        self.head = Conv(store, "head/conv", c1, spec.out_classes, 1, bias=True)

    def _forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        h = self.stem(x, ctx)
        sizes = []
        for layer in self.down:
            sizes.append(h.shape[2:])
            h = layer(h, ctx)
        for block in self.body:
            h = block(h, ctx)
        for layer, (height, width) in zip(self.up, reversed(sizes)):
            h = crop_spatial(layer(h, ctx), height, width)
        return softmax_channels(self.head(relu(self.head_norm(h, ctx)), ctx))


def build_res_net(spec: ResNetSpec | None = None, init=None) -> ResNet:
    return ResNet(spec or ResNetSpec(), init)
