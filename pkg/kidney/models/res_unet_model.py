import logging
from dataclasses import dataclass

from kidney.errors import ConfigError
from kidney.models.network_model import (
    BatchNorm,
    Conv,
    ConvTranspose,
    ForwardContext,
    NetworkInstance,
    ResidualBlock,
)
from kidney.utils.logger import configure_logger
from kidney.utils.tensor_utils import Tensor, concat_channels, crop_spatial, relu, softmax_channels


logger = logging.getLogger(__name__)
configure_logger(logger)


@dataclass(frozen=True)
class ResUNetSpec:
    """Four-level residual UNet; channel widths double from ``base_channels`` per level."""
    levels: int = 4
    base_channels: int = 32
    in_channels: int = 5
    out_classes: int = 3
    up_kernel: int = 2
    dropout_p: float = 0.0
    final_preactivation: bool = True
    input_size: int | None = None

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"A Res-UNet needs at least 2 levels, got {self.levels}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_classes < 2:
            raise ConfigError("Res-UNet channel counts must be positive and out_classes >= 2")
        if self.input_size is not None and (self.input_size % 2 or self.input_size < 16):
            raise ConfigError(f"Res-UNet input size must be even and >= 16, got {self.input_size}")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.levels)]


class ResUNet(NetworkInstance):
    """Encoder of residual blocks (stride 2 from the second level on), a mirrored decoder
    with transposed-convolution upsampling and skip concatenation, and a softmax head.
    """

    kind = "res_unet"

    def _build(self) -> None:
        spec, store = self.spec, self.store
        widths = spec.widths()

        self.encoder = []
        cin = spec.in_channels
        for level, width in enumerate(widths):
            stride = 1 if level == 0 else 2
            self.encoder.append(ResidualBlock(store, f"enc{level}", cin, width, stride=stride,
                                              dropout_p=spec.dropout_p))
            cin = width

        self.decoder = []
        for level in reversed(range(spec.levels - 1)):
            width = widths[level]
            up = ConvTranspose(store, f"up{level}", cin, width, spec.up_kernel)
            block = ResidualBlock(store, f"dec{level}", 2 * width, width, dropout_p=spec.dropout_p)
            self.decoder.append((level, up, block))
            cin = width

        self.head_norm = BatchNorm(store, "head/bn", cin) if spec.final_preactivation else None
        self.head = Conv(store, "head/conv", cin, spec.out_classes, 1, bias=True)

    def _forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        skips = []
        h = x
        for block in self.encoder:
            h = block(h, ctx)
            skips.append(h)

        for level, up, block in self.decoder:
            skip = skips[level]
            h = crop_spatial(up(h, ctx), skip.shape[2], skip.shape[3])
            h = block(concat_channels(h, skip), ctx)

        if self.head_norm is not None:
            h = relu(self.head_norm(h, ctx))
        return softmax_channels(self.head(h, ctx))


def build_res_unet(spec: ResUNetSpec | None = None, init=None) -> ResUNet:
    return ResUNet(spec or ResUNetSpec(), init)
