import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from kidney.errors import ConfigError, EmptyGroupError, NonFiniteError
from kidney.models.network_model import InitSpec, NetworkInstance
from kidney.models.res_net_model import ResNet, ResNetSpec, build_res_net
from kidney.models.res_unet_model import ResUNet, ResUNetSpec, build_res_unet
from kidney.models.sampler_model import BalancedSampler, UniformSampler
from kidney.utils.checkpoint_utils import Checkpoint, CheckpointMeta, save_checkpoint
from kidney.utils.dice_utils import evaluate_case
from kidney.utils.logger import configure_logger
from kidney.utils.preprocess_utils import (
    AugmentationPolicy,
    PreparedCase,
    Slab,
    augment,
    build_stage1_slabs,
    build_stage2_slabs,
)
from kidney.utils.tensor_utils import (
    Tensor,
    add,
    l2_penalty,
    recording,
    weighted_cross_entropy,
    zero_grad,
)


logger = logging.getLogger(__name__)
configure_logger(logger)


LOG_COLUMNS = ["epoch", "loss", "dice_kidney", "dice_tumor", "l2"]

PRESETS = {
    "res-unet1": {
        "architecture": ResUNet.kind,
        "class_weights": (0.3, 1.0, 3.0),
        "learning_rate": 1e-4,
        "init_scheme": "truncated_normal",
        "augmentation": AugmentationPolicy(rotation=True),
    },
    "res-unet2": {
        "architecture": ResUNet.kind,
        "class_weights": (0.3, 1.0, 3.0),
        "learning_rate": 1e-4,
        "init_scheme": "truncated_normal",
        "augmentation": AugmentationPolicy(rotation=True, hflip=True),
    },
    "res-net": {
        "architecture": ResNet.kind,
        "class_weights": (0.2, 0.25, 0.55),
        "learning_rate": 1e-3,
        "init_scheme": "he_uniform",
        "augmentation": AugmentationPolicy(rotation=True, hflip=True, crop_zoom=True),
    },
}


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run needs. ``from_preset`` fills in a named configuration."""
    preset: str = "res-unet1"
    stage: int = 1
    architecture: str = ResUNet.kind
    class_weights: tuple[float, float, float] = (0.3, 1.0, 3.0)
    learning_rate: float = 1e-4
    init_scheme: str = "truncated_normal"
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    max_epochs: int = 250
    batch_size: int = 32
    l2_scale: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    validation_fraction: float = 0.1
    seed: int = 0
    base_channels: int = 32
    res_net_blocks: int = 6
    sampling: str = "balanced"
    iterations_per_epoch: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"Stage must be 1 or 2, got {self.stage}")
        if self.architecture not in (ResUNet.kind, ResNet.kind):
            raise ConfigError(f"Unknown architecture '{self.architecture}'")
        if len(self.class_weights) != 3 or min(self.class_weights) <= 0:
            raise ConfigError(f"Need three positive class weights, got {self.class_weights}")
        if self.learning_rate < 0 or self.l2_scale < 0:
            raise ConfigError("Learning rate and l2 scale must be >= 0")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if self.sampling not in ("balanced", "uniform"):
            raise ConfigError(f"Unknown sampling '{self.sampling}'")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        """Builds a config from one of PRESETS, then applies keyword overrides.

        Raises:
            ConfigError: If the preset name is unknown.
        """
        if name not in PRESETS:
            logger.error(f"Unknown preset {name}")
            raise ConfigError(f"Unknown preset '{name}'. Available: {', '.join(PRESETS)}")
        return cls(preset=name, **{**PRESETS[name], **overrides})

    def init_spec(self) -> InitSpec:
        return InitSpec(scheme=self.init_scheme, seed=self.seed)

    def build_network(self, input_size: int | None = None) -> NetworkInstance:
        """Builds the preset's architecture; a given ``input_size`` is validated here, before any data loads.

        Raises:
            ConfigError: If ``input_size`` is odd or below 16.
        """
        b = self.base_channels
        if self.architecture == ResNet.kind:
            spec = ResNetSpec(channels=(b, 2 * b, 4 * b), blocks=self.res_net_blocks, input_size=input_size)
            return build_res_net(spec, self.init_spec())
        return build_res_unet(ResUNetSpec(base_channels=b, input_size=input_size), self.init_spec())

    def regularization_scale(self, height: int, width: int) -> float:
        """L2 scale per pixel of a full batch; the cross-entropy is a mean over the same pixels."""
        return self.l2_scale / (self.batch_size * height * width)


##################################################
# Adam
##################################################


@dataclass
class AdamState:
    """Per-parameter first and second moments plus the shared step counter."""
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            {name: np.zeros_like(p.data) for name, p in params.items()},
            {name: np.zeros_like(p.data) for name, p in params.items()},
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"step": np.array([self.step], dtype=np.float32)}
        arrays.update({f"m/{name}": value for name, value in self.m.items()})
        arrays.update({f"v/{name}": value for name, value in self.v.items()})
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        m = {name[2:]: value for name, value in arrays.items() if name.startswith("m/")}
        v = {name[2:]: value for name, value in arrays.items() if name.startswith("v/")}
        return cls(m, v, int(arrays["step"][0]) if "step" in arrays else 0)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Applies one bias-corrected Adam update in place; a missing gradient counts as zero.

    Raises:
        NonFiniteError: If any gradient holds NaN or Inf, naming the parameter.
    """
    for name, param in params.items():
        if param.grad is not None and not np.all(np.isfinite(param.grad)):
            logger.error(f"Non-finite gradient for parameter {name}")
            raise NonFiniteError(f"Non-finite gradient for parameter '{name}'")

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, param in params.items():
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        update = lr * (state.m[name] / correction1) / (np.sqrt(state.v[name] / correction2) + eps)
        param.data = (param.data - update).astype(param.data.dtype)


##################################################
# Data
##################################################


def split_cases(volume_ids: list[str], fraction: float, seed: int = 0) -> tuple[list[str], list[str]]:
    """Deterministic train/validation split; at least one volume lands on each side."""
    if len(volume_ids) < 2:
        raise EmptyGroupError(f"Need at least two volumes to split, got {len(volume_ids)}")
    order = [volume_ids[i] for i in np.random.default_rng(seed).permutation(len(volume_ids))]
    held_out = min(len(order) - 1, max(1, math.ceil(fraction * len(order))))
    return sorted(order[held_out:]), sorted(order[:held_out])


def build_slabs(cases: list[PreparedCase], stage: int, size: int) -> list[Slab]:
    """Stage-1 slabs are downsampled to ``size``; stage-2 slabs are ``size`` ROI crops."""
    slabs = []
    for case in cases:
        slabs.extend(build_stage1_slabs(case, size) if stage == 1 else build_stage2_slabs(case, size))
    return slabs


def _slab_seed(seed: int, step: int, position: int) -> int:
    return int(np.random.SeedSequence([seed, step, position]).generate_state(1)[0])


##################################################
# Training
##################################################


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    log: pd.DataFrame
    best_epoch: int


def training_loss(network: NetworkInstance, batch: list[Slab], cfg: TrainConfig, step: int = 0):
    """Forward pass on a recording tape; returns (tape, loss tensor).

    Raises:
        NonFiniteError: If the forward pass or the loss turns non-finite; the message lists the batch provenance.
    """
    images = np.stack([slab.image for slab in batch]).astype(np.float32)
    targets = np.stack([slab.target for slab in batch]).astype(np.int64)
    try:
        with recording() as tape:
            probs = network.forward(Tensor(images), step=step)
            scale = cfg.regularization_scale(*images.shape[-2:])
            loss = add(weighted_cross_entropy(probs, targets, cfg.class_weights),
                       l2_penalty(network.kernels(), scale))
    except NonFiniteError as e:
        provenance = ", ".join(slab.provenance for slab in batch)
        logger.error(f"Non-finite values at step {step}; last batch: {provenance}")
        raise NonFiniteError(f"{e} at step {step}; last batch: {provenance}") from e
    return tape, loss


def l2_term(kernels: list[np.ndarray], scale: float) -> float:
    """Value of the L2 penalty for plain arrays, summed in float64."""
    return scale * sum(float(np.sum(np.asarray(k, dtype=np.float64) ** 2)) for k in kernels)


def train_step(network: NetworkInstance, batch: list[Slab], state: AdamState, cfg: TrainConfig, step: int = 0) -> float:
    params = network.named_parameters()
    zero_grad(list(params.values()))
    tape, loss = training_loss(network, batch, cfg, step)
    tape.backward(loss)
    adam_step(params, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return loss.item()


def validate(network: NetworkInstance, slabs: list[Slab], batch_size: int = 8) -> tuple[float, float]:
    """Mean per-volume (kidney-meta Dice, tumor Dice) over the validation slabs.

    Central-slice predictions of each volume's slabs are stacked and scored
    together with the stacked targets.

    Raises:
        EmptyGroupError: If there are no validation slabs.
    """
    if not slabs:
        logger.error("Validation set is empty")
        raise EmptyGroupError("Validation set is empty")
    by_volume: dict[str, list[Slab]] = {}
    for slab in slabs:
        by_volume.setdefault(slab.volume_id, []).append(slab)

    scores = []
    for volume_slabs in by_volume.values():
        predicted = network.predict_labels(np.stack([s.image for s in volume_slabs]), batch_size)
        targets = np.stack([s.target for s in volume_slabs])
        scores.append(evaluate_case(targets, predicted))
    kidney, tumor = np.mean(scores, axis=0)
    return float(kidney), float(tumor)


def _make_sampler(slabs: list[Slab], cfg: TrainConfig):
    if cfg.sampling == "uniform":
        return UniformSampler(slabs, cfg.batch_size, cfg.seed)
    return BalancedSampler(slabs, cfg.stage, cfg.batch_size, cfg.seed)


def train(network: NetworkInstance, train_slabs: list[Slab], val_slabs: list[Slab], cfg: TrainConfig,
          checkpoint_path: str | Path | None = None, log_path: str | Path | None = None) -> TrainingResult:
    """Runs the epoch loop and keeps the checkpoint with the best validation score.

    Each iteration draws a balanced batch, augments its KT slabs, minimizes
    weighted cross-entropy plus the per-pixel L2 kernel penalty and takes one
    Adam step. The log records that penalty for the weights at each epoch end.
    After every epoch the validation score, the mean of kidney-meta Dice and
    tumor Dice, decides whether the current weights become the best checkpoint.

    Args:
        network (NetworkInstance): Freshly built network, trained in place.
        train_slabs (list[Slab]): Training pool.
        val_slabs (list[Slab]): Validation slabs, grouped by volume id for scoring.
        cfg (TrainConfig): Run settings.
        checkpoint_path (str | Path | None): Where to write the best checkpoint.
        log_path (str | Path | None): Where to write the per-epoch CSV log.

    Returns:
        TrainingResult: Best checkpoint, the log and the best epoch.

    Raises:
        EmptyGroupError: If a group the sampler needs is empty or validation is empty.
        NonFiniteError: If the loss or a gradient becomes non-finite.
    """
    logger.info(f"Received request to train {cfg.preset} (stage {cfg.stage}) on {len(train_slabs)} slabs, "
                f"validating on {len(val_slabs)}")
    sampler = _make_sampler(train_slabs, cfg)
    iterations = cfg.iterations_per_epoch or sampler.epoch_length()
    state = AdamState.create(network.named_parameters())
    penalty_scale = cfg.regularization_scale(*train_slabs[0].image.shape[-2:]) if train_slabs else cfg.l2_scale
    info = {
        "architecture": network.architecture(),
        "preset": cfg.preset,
        "stage": cfg.stage,
        "init": asdict(network.init),
        "input_size": int(train_slabs[0].image.shape[-1]) if train_slabs else None,
    }

    records = []
    best: Checkpoint | None = None
    step = 0
    with ThreadPoolExecutor(max_workers=max(1, cfg.jobs)) as pool:
        for epoch in range(1, cfg.max_epochs + 1):
            network.train()
            losses = []
            for _ in range(iterations):
                batch = sampler.sample_batch()
                seeds = [_slab_seed(cfg.seed, step, i) for i in range(len(batch))]
                batch = list(pool.map(lambda item: augment(item[0], cfg.augmentation, item[1]), zip(batch, seeds)))
                losses.append(train_step(network, batch, state, cfg, step))
                step += 1

            network.eval()
            dice_kidney, dice_tumor = validate(network, val_slabs)
            score = (dice_kidney + dice_tumor) / 2.0
            l2 = l2_term([k.data for k in network.kernels()], penalty_scale)
            records.append({"epoch": epoch, "loss": float(np.mean(losses)),
                            "dice_kidney": dice_kidney, "dice_tumor": dice_tumor, "l2": l2})
            logger.info(f"Epoch {epoch}/{cfg.max_epochs}: loss {records[-1]['loss']:.5f}, "
                        f"dice kidney {dice_kidney:.4f}, dice tumor {dice_tumor:.4f}")
            if best is None or score > best.meta.val_dice:
                best = Checkpoint(network.state_dict(), state.to_arrays(), CheckpointMeta(epoch, score, dict(info)))

    log = pd.DataFrame(records, columns=LOG_COLUMNS)
    if checkpoint_path is not None:
        save_checkpoint(best.params, best.optimizer_state, best.meta, checkpoint_path)
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log.to_csv(log_path, index=False)
    logger.info(f"Successfully trained {cfg.preset}; best epoch {best.meta.epoch} with score {best.meta.val_dice:.4f}")
    return TrainingResult(best, log, best.meta.epoch)
