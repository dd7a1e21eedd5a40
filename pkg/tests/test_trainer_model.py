# pytest tests/test_trainer_model.py
import numpy as np
import pandas as pd
import pytest

from kidney.errors import ConfigError, EmptyGroupError, NonFiniteError
from kidney.models.network_model import InitSpec
from kidney.models.res_net_model import ResNet
from kidney.models.res_unet_model import ResUNet, ResUNetSpec
from kidney.models.trainer_model import (
    LOG_COLUMNS,
    AdamState,
    TrainConfig,
    adam_step,
    build_slabs,
    l2_term,
    split_cases,
    train,
    train_step,
    training_loss,
    validate,
)
from kidney.utils.checkpoint_utils import load_checkpoint
from kidney.utils.phantom_utils import generate_phantom, random_phantom_spec
from kidney.utils.preprocess_utils import AugmentationPolicy, Group, PreprocessConfig, Slab, preprocess_case
from kidney.utils.tensor_utils import Tensor


def parameter(values) -> dict[str, Tensor]:
    return {"w": Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)}


def synthetic_kt_slabs(count: int, size: int = 16, seed: int = 0) -> list[Slab]:
    """Discs of kidney with a smaller tumor disc; intensities encode the class."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    slabs = []
    for index in range(count):
        cy, cx = rng.integers(5, size - 5, size=2)
        target = np.zeros((size, size), dtype=np.uint8)
        target[(yy - cy) ** 2 + (xx - cx) ** 2 <= 16] = 1
        target[(yy - cy) ** 2 + (xx - cx) ** 2 <= 2] = 2
        intensity = np.array([-1.0, 1.0, 2.5])[target]
        image = np.stack([intensity + rng.normal(0.0, 0.1, size=(size, size)) for _ in range(5)])
        slabs.append(Slab(image.astype(np.float32), target, Group.KT, f"syn{index}", 0))
    return slabs


def phantom_kt_slabs(count: int, size: int = 32) -> list[Slab]:
    """Stage-1 KT slabs cut from seeded random phantoms until ``count`` are collected."""
    cfg = PreprocessConfig(thickness=3.0, stage1_size=size, roi_size=size)
    slabs = []
    for seed in range(50):
        spec = random_phantom_spec(np.random.default_rng(seed), dims=(64, 64, 20), spacing=(2.0, 2.0, 3.0),
                                   single_kidney_probability=0.0)
        case = preprocess_case(*generate_phantom(spec), cfg, f"phantom_{seed:03d}")
        slabs += [slab for slab in build_slabs([case], 1, size) if slab.group == Group.KT]
        if len(slabs) >= count:
            return slabs[:count]
    raise AssertionError(f"only {len(slabs)} KT slabs in 50 phantoms")


##################################################
# Adam
##################################################


def test_zero_gradient_changes_nothing():
    """Without a gradient the update is zero."""
    params = parameter([1.0, -2.0])
    adam_step(params, AdamState.create(params), lr=0.1)
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])


def test_first_step_moves_by_learning_rate():
    """After bias correction the first step is lr * sign(g)."""
    params = parameter([0.0, 0.0, 0.0])
    params["w"].grad = np.array([3.0, -0.5, 1e-3])
    adam_step(params, AdamState.create(params), lr=1e-3)
    np.testing.assert_allclose(params["w"].data, [-1e-3, 1e-3, -1e-3], rtol=1e-4)


def test_quadratic_bowl_converges():
    """Minimizing w^2 drives w to zero."""
    params = parameter([0.3])
    state = AdamState.create(params)
    for _ in range(300):
        params["w"].grad = 2.0 * params["w"].data
        adam_step(params, state, lr=1e-2)
    assert abs(float(params["w"].data[0])) < 1e-3
    assert state.step == 300


def test_non_finite_gradient_names_the_parameter():
    """A NaN gradient stops the step before any parameter moves."""
    params = parameter([1.0])
    params["w"].grad = np.array([np.nan])
    with pytest.raises(NonFiniteError, match="'w'"):
        adam_step(params, AdamState.create(params), lr=0.1)
    assert params["w"].data[0] == 1.0


def test_adam_state_round_trip():
    """Optimizer moments survive the checkpoint array layout."""
    params = parameter([1.0, 2.0])
    state = AdamState.create(params)
    params["w"].grad = np.array([0.5, -0.5])
    adam_step(params, state, lr=0.1)
    restored = AdamState.from_arrays(state.to_arrays())
    assert restored.step == 1
    np.testing.assert_array_equal(restored.m["w"], state.m["w"])
    np.testing.assert_array_equal(restored.v["w"], state.v["w"])


##################################################
# Configuration
##################################################


@pytest.mark.parametrize("preset, architecture, weights, lr, scheme", [
    ("res-unet1", ResUNet.kind, (0.3, 1.0, 3.0), 1e-4, "truncated_normal"),
    ("res-unet2", ResUNet.kind, (0.3, 1.0, 3.0), 1e-4, "truncated_normal"),
    ("res-net", ResNet.kind, (0.2, 0.25, 0.55), 1e-3, "he_uniform"),
])
def test_presets(preset, architecture, weights, lr, scheme):
    """Each named configuration carries its architecture, weights, rate and init."""
    cfg = TrainConfig.from_preset(preset)
    assert (cfg.architecture, cfg.class_weights, cfg.learning_rate, cfg.init_scheme) == (architecture, weights, lr, scheme)
    assert cfg.augmentation.rotation
    assert cfg.batch_size == 32 and cfg.l2_scale == 0.1


def test_augmentation_per_preset():
    """Flips join at res-unet2 and crop-zoom only for the Res-Net."""
    assert not TrainConfig.from_preset("res-unet1").augmentation.hflip
    assert TrainConfig.from_preset("res-unet2").augmentation.hflip
    assert TrainConfig.from_preset("res-net").augmentation.crop_zoom


def test_preset_overrides_and_network():
    """Overrides win over the preset and shape the network."""
    cfg = TrainConfig.from_preset("res-net", stage=2, base_channels=2, res_net_blocks=1)
    network = cfg.build_network()
    assert cfg.stage == 2
    assert isinstance(network, ResNet)
    assert network.spec.channels == (2, 4, 8)
    assert network.init.scheme == "he_uniform"


def test_build_network_checks_the_input_size():
    """A declared input size that breaks the stride-2 path fails before any data is touched."""
    with pytest.raises(ConfigError):
        TrainConfig.from_preset("res-unet1", base_channels=2).build_network(input_size=31)
    with pytest.raises(ConfigError):
        TrainConfig.from_preset("res-net", base_channels=2, res_net_blocks=1).build_network(input_size=15)
    network = TrainConfig.from_preset("res-unet1", base_channels=2).build_network(input_size=30)
    out = network.eval().forward(Tensor(np.zeros((1, 5, 30, 30), dtype=np.float32)))
    assert out.shape == (1, 3, 30, 30)


def test_regularization_scale_is_per_batch_pixel():
    """The L2 scale is divided by the pixels the cross-entropy averages over."""
    cfg = TrainConfig.from_preset("res-unet1")
    assert cfg.regularization_scale(64, 64) == pytest.approx(0.1 / (32 * 64 * 64))
    assert TrainConfig(l2_scale=0.0).regularization_scale(16, 16) == 0.0


def test_unknown_preset():
    """Only the three presets exist."""
    with pytest.raises(ConfigError, match="Unknown preset"):
        TrainConfig.from_preset("unet3")


@pytest.mark.parametrize("fields", [{"stage": 3}, {"class_weights": (1.0, 0.0, 1.0)}, {"sampling": "random"},
                                    {"validation_fraction": 1.0}])
def test_config_validation(fields):
    """Out-of-range settings are rejected."""
    with pytest.raises(ConfigError):
        TrainConfig(**fields)


##################################################
# Data
##################################################


def test_split_cases():
    """The split is deterministic, disjoint and leaves one volume on each side at least."""
    ids = [f"case_{i:03d}" for i in range(10)]
    train_ids, val_ids = split_cases(ids, 0.1, seed=3)
    assert len(val_ids) == 1 and len(train_ids) == 9
    assert sorted(train_ids + val_ids) == ids
    assert split_cases(ids, 0.1, seed=3) == (train_ids, val_ids)
    assert [len(side) for side in split_cases(ids[:2], 0.1)] == [1, 1]
    with pytest.raises(EmptyGroupError):
        split_cases(ids[:1], 0.1)


def test_build_slabs_per_stage(prepared_case):
    """Stage 1 gives one slab per slice, stage 2 only ROI slices."""
    assert len(build_slabs([prepared_case], 1, 16)) == 12
    assert 0 < len(build_slabs([prepared_case], 2, 16)) <= 12 * 2


##################################################
# Training
##################################################


def test_zero_learning_rate_keeps_parameters(tiny_unet, prepared_case):
    """With lr = 0 a step computes a finite loss and leaves every parameter bitwise unchanged."""
    batch = build_slabs([prepared_case], 1, 16)[2:6]
    before = {name: p.data.copy() for name, p in tiny_unet.named_parameters().items()}
    cfg = TrainConfig(learning_rate=0.0)
    loss = train_step(tiny_unet, batch, AdamState.create(tiny_unet.named_parameters()), cfg)
    assert np.isfinite(loss) and loss > 0
    for name, param in tiny_unet.named_parameters().items():
        np.testing.assert_array_equal(param.data, before[name])


def test_validate_scores_per_volume(mocker, prepared_case):
    """Perfect predictions score 1.0; all-background predictions score 0.0."""
    slabs = build_slabs([prepared_case], 1, 16)
    targets = np.stack([slab.target for slab in slabs])
    network = mocker.Mock()
    network.predict_labels.return_value = targets
    assert validate(network, slabs) == (1.0, 1.0)
    network.predict_labels.return_value = np.zeros_like(targets)
    assert validate(network, slabs) == (0.0, 0.0)


def test_validate_needs_slabs(tiny_unet):
    """An empty validation set is an error."""
    with pytest.raises(EmptyGroupError):
        validate(tiny_unet, [])


def test_train_writes_best_checkpoint_and_log(tmp_path, tiny_unet, prepared_case):
    """The saved checkpoint is the epoch with the best validation score."""
    slabs = build_slabs([prepared_case], 1, 16)
    cfg = TrainConfig.from_preset("res-unet1", max_epochs=3, batch_size=3, iterations_per_epoch=2,
                                  learning_rate=1e-3, base_channels=2)
    result = train(tiny_unet, slabs, slabs, cfg, tmp_path / "model.kck", tmp_path / "logs" / "train.csv")

    log = pd.read_csv(tmp_path / "logs" / "train.csv")
    assert log.columns.tolist() == LOG_COLUMNS
    assert log["epoch"].tolist() == [1, 2, 3]
    scores = (log["dice_kidney"] + log["dice_tumor"]) / 2
    assert result.best_epoch == int(log["epoch"][scores.idxmax()])

    checkpoint = load_checkpoint(tmp_path / "model.kck", expected_names=tiny_unet.expected_names())
    assert checkpoint.meta.epoch == result.best_epoch
    assert checkpoint.meta.val_dice == pytest.approx(scores.max(), abs=1e-6)
    assert checkpoint.meta.info["preset"] == "res-unet1"
    assert checkpoint.meta.info["architecture"]["kind"] == "res_unet"
    assert "optim/step" not in checkpoint.params

def test_one_step_lowers_the_loss_on_a_fixed_batch(prepared_case):
    """From fresh seeded weights one Adam step at the res-unet1 rate lowers the loss on its own batch."""
    slabs = build_slabs([prepared_case], 1, 16)
    batch = [slabs[z] for z in (1, 4, 6, 9)]
    cfg = TrainConfig.from_preset("res-unet1", batch_size=4)
    lowered = 0
    for seed in range(100):
        network = ResUNet(ResUNetSpec(base_channels=2), InitSpec(seed=seed)).train()
        before = train_step(network, batch, AdamState.create(network.named_parameters()), cfg)
        _, after = training_loss(network, batch, cfg)
        lowered += int(after.item() < before)
    assert lowered >= 95


def test_tumor_weight_raises_the_loss_monotonically(tiny_unet, prepared_case):
    """With tumor pixels in the batch, a heavier tumor weight gives a strictly larger loss."""
    batch = [slab for slab in build_slabs([prepared_case], 1, 16) if (slab.target == 2).any()]
    assert batch
    tiny_unet.eval()
    losses = []
    for weight in (1.0, 3.0, 10.0, 30.0):
        cfg = TrainConfig(class_weights=(0.3, 1.0, weight), l2_scale=0.0)
        _, loss = training_loss(tiny_unet, batch, cfg)
        losses.append(float(loss.data))
    assert all(lower < higher for lower, higher in zip(losses, losses[1:]))

@pytest.mark.slow
def test_heavier_tumor_weight_predicts_no_less_tumor(prepared_case):
    """Fifty steps on a fixed batch: a tenfold tumor weight never lowers the mean tumor fraction over five seeds."""
    batch = [slab for slab in build_slabs([prepared_case], 1, 16) if slab.group == Group.KT][:4]
    images = np.stack([slab.image for slab in batch])
    fractions = {}
    for weight in (3.0, 30.0):
        cfg = TrainConfig.from_preset("res-unet1", class_weights=(0.3, 1.0, weight), batch_size=len(batch))
        per_seed = []
        for seed in range(5):
            network = ResUNet(ResUNetSpec(base_channels=2), InitSpec(seed=seed)).train()
            state = AdamState.create(network.named_parameters())
            for step in range(50):
                train_step(network, batch, state, cfg, step)
            per_seed.append(float((network.predict_labels(images) == 2).mean()))
        fractions[weight] = np.mean(per_seed)
    assert fractions[30.0] >= fractions[3.0]



def test_training_is_deterministic_across_worker_counts(tmp_path, prepared_case):
    """Same seed, one or three augmentation workers: identical logs and checkpoints."""
    slabs = build_slabs([prepared_case], 1, 16)
    runs = []
    for jobs in (1, 3):
        cfg = TrainConfig.from_preset("res-unet1", max_epochs=2, batch_size=3, iterations_per_epoch=2,
                                      learning_rate=1e-3, base_channels=2, jobs=jobs)
        network = ResUNet(ResUNetSpec(base_channels=2), InitSpec(seed=3))
        runs.append(train(network, slabs, slabs, cfg, tmp_path / f"jobs{jobs}.kck"))
    pd.testing.assert_frame_equal(runs[0].log, runs[1].log)
    first = load_checkpoint(tmp_path / "jobs1.kck")
    second = load_checkpoint(tmp_path / "jobs3.kck")
    assert list(first.params) == list(second.params)
    for name, value in first.params.items():
        np.testing.assert_array_equal(second.params[name], value)


def test_logged_l2_matches_the_checkpoint(tmp_path, tiny_unet, prepared_case):
    """The l2 column at the best epoch recomputes from the saved kernels."""
    slabs = build_slabs([prepared_case], 1, 16)
    cfg = TrainConfig.from_preset("res-unet1", max_epochs=2, batch_size=3, iterations_per_epoch=2,
                                  learning_rate=1e-3, base_channels=2)
    result = train(tiny_unet, slabs, slabs, cfg, tmp_path / "model.kck", tmp_path / "train.csv")
    checkpoint = load_checkpoint(tmp_path / "model.kck", expected_names=tiny_unet.expected_names())
    names = [kernel.name for kernel in tiny_unet.kernels()]
    scale = 0.1 / (3 * 16 * 16)
    expected = scale * sum(float(np.sum(checkpoint.params[name].astype(np.float64) ** 2)) for name in names)
    logged = pd.read_csv(tmp_path / "train.csv")["l2"][result.best_epoch - 1]
    assert logged == pytest.approx(expected, rel=1e-6)
    assert l2_term([checkpoint.params[name] for name in names], scale) == pytest.approx(expected, rel=1e-12)



def test_train_needs_every_stage1_group(tiny_unet):
    """Balanced stage-1 sampling cannot start without background slabs."""
    slabs = synthetic_kt_slabs(4)
    with pytest.raises(EmptyGroupError):
        train(tiny_unet, slabs, slabs, TrainConfig(max_epochs=1, batch_size=3))


@pytest.mark.slow
def test_overfits_eight_phantom_tumor_slabs():
    """At the res-unet1 settings, eight phantom KT slabs are memorized within 500 iterations."""
    slabs = phantom_kt_slabs(8)
    cfg = TrainConfig.from_preset("res-unet1", max_epochs=25, iterations_per_epoch=20, batch_size=8,
                                  sampling="uniform", augmentation=AugmentationPolicy())
    result = train(cfg.build_network(input_size=32), slabs, slabs, cfg)
    assert result.log["dice_kidney"].max() > 0.95
    assert result.log["loss"].iloc[-1] < result.log["loss"].iloc[0]
