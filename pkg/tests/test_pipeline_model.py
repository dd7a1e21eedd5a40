# pytest tests/test_pipeline_model.py
import numpy as np
import pytest

from kidney.errors import ConfigError, GeometryError, IncompatibleCheckpointError, MissingParameterError
from kidney.models.pipeline_model import (
    REFERENCE_SPACING,
    PipelineConfig,
    PredictionModels,
    ProbabilityVolume,
    ensemble,
    load_models,
    load_network,
    predict_directory,
    predict_volume,
    stage1_predict,
    stage2_predict,
)
from kidney.models.network_model import InitSpec
from kidney.models.res_unet_model import ResUNet, ResUNetSpec
from kidney.utils.checkpoint_utils import CheckpointMeta, save_checkpoint
from kidney.utils.component_utils import Roi, extract_rois
from kidney.utils.preprocess_utils import PreprocessConfig
from kidney.utils.volume_utils import LabelVolume, Volume, case_paths, read_volume, write_volume


def member(*pixels, z0=0) -> ProbabilityVolume:
    """One-pixel probability volumes, one [3] vector per slice."""
    return ProbabilityVolume(np.array(pixels, dtype=np.float64).reshape(len(pixels), 3, 1, 1), z0)


def central_block(shape) -> np.ndarray:
    nz, ny, nx = shape
    mask = np.zeros(shape, dtype=np.uint8)
    mask[nz // 4:3 * nz // 4, ny // 4:3 * ny // 4, nx // 4:3 * nx // 4] = 1
    return mask


@pytest.fixture
def pipeline_cfg():
    return PipelineConfig(preprocess=PreprocessConfig(stage1_size=16, roi_size=16), min_component_voxels=1,
                          reference_spacing=None)


@pytest.fixture
def models(tiny_unet, tiny_resnet):
    return PredictionModels(tiny_unet, [tiny_unet, tiny_resnet], 16)


def save_network(network, path, **info):
    save_checkpoint(network.state_dict(), {}, CheckpointMeta(info=info), path)


##################################################
# Ensemble
##################################################


def test_mean_ensemble_averages_probabilities():
    """(0.6, 0.4, 0) and (0.2, 0.8, 0) average to (0.4, 0.6, 0), i.e. kidney."""
    labels = ensemble([member((0.6, 0.4, 0.0)), member((0.2, 0.8, 0.0))])
    assert labels.shape == (1, 1, 1)
    assert labels[0, 0, 0] == 1


def test_single_member_is_its_own_argmax():
    """An ensemble of one returns that model's labels."""
    labels = ensemble([member((0.1, 0.2, 0.7), (0.8, 0.1, 0.1))])
    assert labels[:, 0, 0].tolist() == [2, 0]


def test_vote_ensemble():
    """Majority of argmax labels wins; a tied vote goes to the higher class."""
    tumor, background, kidney = (0.1, 0.2, 0.7), (0.8, 0.1, 0.1), (0.2, 0.6, 0.2)
    assert ensemble([member(tumor), member(tumor), member(background)], "vote")[0, 0, 0] == 2
    assert ensemble([member(kidney), member(tumor)], "vote")[0, 0, 0] == 2


def test_members_must_share_geometry():
    """Shape and slice offset must agree."""
    with pytest.raises(GeometryError):
        ensemble([member((1.0, 0.0, 0.0)), member((1.0, 0.0, 0.0), (1.0, 0.0, 0.0))])
    with pytest.raises(GeometryError):
        ensemble([member((1.0, 0.0, 0.0)), member((1.0, 0.0, 0.0), z0=1)])
    with pytest.raises(GeometryError):
        ensemble([])


def test_unknown_ensemble_mode():
    """Only mean and vote exist."""
    with pytest.raises(ConfigError):
        ensemble([member((1.0, 0.0, 0.0))], "max")
    with pytest.raises(ConfigError):
        PipelineConfig(ensemble_mode="max")


def test_probability_check():
    """Class probabilities must sum to one."""
    member((0.2, 0.3, 0.5)).check()
    with pytest.raises(GeometryError):
        member((0.2, 0.3, 0.6)).check()


##################################################
# Configuration
##################################################


def test_component_threshold_scales_with_voxel_volume():
    """5000 voxels at the reference spacing are 1250 voxels four times as large."""
    cfg = PipelineConfig()
    assert cfg.component_threshold(REFERENCE_SPACING) == 5000
    assert cfg.component_threshold((1.56, 1.56, 3.0)) == 1250
    assert PipelineConfig(reference_spacing=None).component_threshold((1.56, 1.56, 3.0)) == 5000
    assert PipelineConfig(min_component_voxels=1).component_threshold((100.0, 100.0, 100.0)) == 1


##################################################
# Stages
##################################################


def coarse_probabilities(nz: int, with_kidney: bool = True) -> np.ndarray:
    """16x16 stage-1 output: background everywhere, a kidney square with a tumor strip beside it."""
    probs = np.full((nz, 3, 16, 16), 0.1, dtype=np.float32)
    probs[:, 0] = 0.8
    if with_kidney:
        probs[:, :, 4:8, 4:8] = np.array([0.1, 0.8, 0.1], dtype=np.float32)[None, :, None, None]
        probs[:, :, 5:7, 8:10] = np.array([0.1, 0.1, 0.8], dtype=np.float32)[None, :, None, None]
    return probs


def test_stage1_merges_kidney_and_tumor(mocker, prepared_case):
    """Kidney and tumor pixels both become 1 and each coarse pixel covers a 2x2 native block."""
    network = mocker.Mock()
    network.predict_proba.return_value = coarse_probabilities(12)
    mask = stage1_predict(prepared_case, network, 16)

    assert network.predict_proba.call_args.args[0].shape == (12, 5, 16, 16)
    assert isinstance(mask, LabelVolume)
    assert mask.spacing == prepared_case.image.spacing
    assert set(np.unique(mask.voxels).tolist()) == {0, 1}
    coarse = np.zeros((16, 16), dtype=np.uint8)
    coarse[4:8, 4:8] = 1
    coarse[5:7, 8:10] = 1
    expected = np.kron(coarse, np.ones((2, 2), dtype=np.uint8))
    for z in range(12):
        np.testing.assert_array_equal(mask.voxels[z], expected)


def test_stage1_background_network_finds_nothing(mocker, prepared_case):
    """An all-background stage 1 gives an empty mask and no ROI."""
    network = mocker.Mock()
    network.predict_proba.return_value = coarse_probabilities(12, with_kidney=False)
    mask = stage1_predict(prepared_case, network, 16)
    assert not mask.voxels.any()
    assert extract_rois(mask, 16) == []


def test_stage2_members_cover_the_roi(prepared_case):
    """One probability volume per network, roi_size square per ROI slice; equal networks agree."""
    (roi,) = extract_rois(central_block(prepared_case.image.voxels.shape), 16)
    networks = [ResUNet(ResUNetSpec(base_channels=2), InitSpec(seed=3)) for _ in range(2)]
    members = stage2_predict(prepared_case, roi, networks)

    assert len(members) == 2
    for item in members:
        assert item.probs.shape == (roi.z1 - roi.z0 + 1, 3, 16, 16)
        assert (item.z0, item.roi) == (roi.z0, roi)
        item.check()
    np.testing.assert_array_equal(members[0].probs, members[1].probs)


def test_stage2_rejects_a_window_outside_the_volume(prepared_case, tiny_unet):
    """A window hanging off the image is a geometry error."""
    with pytest.raises(GeometryError):
        stage2_predict(prepared_case, Roi(0, 20, 0, 0, 3, 16), [tiny_unet])


@pytest.mark.parametrize("tumor_first", [False, True])
def test_overlapping_rois_keep_the_higher_tumor_probability(mocker, pipeline_cfg, rng, tumor_first):
    """Where two windows overlap, the one with the larger mean tumor probability decides the label."""
    raw = Volume(rng.normal(40.0, 80.0, size=(8, 32, 32)), (1.0, 1.0, 3.0))
    rois = [Roi(0, 0, 0, 0, 7, 16), Roi(1, 8, 0, 0, 7, 16)]
    kidney_like, tumor_like = (0.1, 0.6, 0.3), (0.1, 0.2, 0.7)
    vectors = [tumor_like, kidney_like] if tumor_first else [kidney_like, tumor_like]

    def constant_members(case, roi, networks, batch_size):
        probs = np.broadcast_to(np.array(vectors[roi.kidney_index])[None, :, None, None], (8, 3, 16, 16))
        return [ProbabilityVolume(probs.copy(), roi.z0, roi)]

    mocker.patch("kidney.models.pipeline_model.stage1_predict",
                 side_effect=lambda case, *args: LabelVolume(central_block(case.image.voxels.shape), case.image.spacing))
    mocker.patch("kidney.models.pipeline_model.extract_rois", return_value=rois)
    mocker.patch("kidney.models.pipeline_model.stage2_predict", side_effect=constant_members)
    out = predict_volume(raw, PredictionModels(mocker.Mock(), [mocker.Mock()], 16), pipeline_cfg)

    expected = np.zeros((8, 32, 32), dtype=np.uint8)
    if tumor_first:
        expected[:, 0:16, 0:16] = 2
        expected[:, 0:16, 16:24] = 1
    else:
        expected[:, 0:16, 0:8] = 1
        expected[:, 0:16, 8:24] = 2
    np.testing.assert_array_equal(out.voxels, expected)


##################################################
# Prediction
##################################################


def test_no_kidney_gives_background_with_raw_geometry(mocker, phantom, pipeline_cfg):
    """When stage 1 finds nothing the result is all zeros at the input geometry."""
    image, _ = phantom
    mocker.patch("kidney.models.pipeline_model.stage1_predict",
                 side_effect=lambda case, *args: LabelVolume(np.zeros(case.image.voxels.shape), case.image.spacing))
    stage2 = mocker.Mock()
    out = predict_volume(image, PredictionModels(mocker.Mock(), [stage2], 16), pipeline_cfg, "empty")
    assert out.same_geometry(image)
    assert not out.voxels.any()
    stage2.predict_proba.assert_not_called()


def test_labels_stay_inside_the_rois(mocker, phantom, models, pipeline_cfg):
    """Stage-2 labels are pasted only inside the windows found by stage 1."""
    image, _ = phantom
    mocker.patch("kidney.models.pipeline_model.stage1_predict",
                 side_effect=lambda case, *args: LabelVolume(central_block(case.image.voxels.shape), case.image.spacing))
    out = predict_volume(image, models, pipeline_cfg, "p0")

    assert out.same_geometry(image)
    assert set(np.unique(out.voxels)) <= {0, 1, 2}
    inside = np.zeros(out.voxels.shape, dtype=bool)
    for roi in extract_rois(central_block(out.voxels.shape), 16):
        inside[roi.z0:roi.z1 + 1, roi.y0:roi.y1, roi.x0:roi.x1] = True
    assert not out.voxels[~inside].any()


def test_prediction_returns_to_the_source_slice_count(mocker, models, pipeline_cfg, rng):
    """A 1.5 mm volume is segmented at 3 mm and handed back with its own slice count."""
    raw = Volume(rng.normal(40.0, 80.0, size=(20, 32, 32)), (2.0, 2.0, 1.5))
    mocker.patch("kidney.models.pipeline_model.stage1_predict",
                 side_effect=lambda case, *args: LabelVolume(central_block(case.image.voxels.shape), case.image.spacing))
    out = predict_volume(raw, models, pipeline_cfg)
    assert out.voxels.shape == (20, 32, 32)
    assert out.spacing == raw.spacing


def test_stage1_member_can_join_the_ensemble(phantom, models, pipeline_cfg):
    """include_stage1 runs end to end with real networks."""
    image, _ = phantom
    cfg = PipelineConfig(preprocess=pipeline_cfg.preprocess, min_component_voxels=1, reference_spacing=None,
                         include_stage1=True, ensemble_mode="vote")
    out = predict_volume(image, models, cfg)
    assert out.same_geometry(image)


def test_predict_directory(tmp_path, mocker, phantom, models, pipeline_cfg):
    """Every image in a directory gets a label volume with its geometry."""
    image, _ = phantom
    for volume_id in ("a", "b"):
        write_volume(image, case_paths(tmp_path / "in", volume_id)[0])
    mocker.patch("kidney.models.pipeline_model.stage1_predict",
                 side_effect=lambda case, *args: LabelVolume(central_block(case.image.voxels.shape), case.image.spacing))
    written = predict_directory(tmp_path / "in", tmp_path / "out", models, pipeline_cfg, jobs=2)
    assert [p.name for p in written] == ["a.seg.kvl", "b.seg.kvl"]
    assert read_volume(written[0]).same_geometry(image)


def test_predict_empty_directory(tmp_path, models, pipeline_cfg):
    """A directory without images is a data error."""
    with pytest.raises(GeometryError):
        predict_directory(tmp_path, tmp_path / "out", models, pipeline_cfg)


##################################################
# Model loading
##################################################


def test_load_network_round_trip(tmp_path, tiny_unet, rng):
    """A saved network comes back in eval mode with identical predictions."""
    save_network(tiny_unet, tmp_path / "m.kck", architecture=tiny_unet.architecture(), input_size=16)
    network, info = load_network(tmp_path / "m.kck")
    x = rng.normal(size=(1, 5, 16, 16)).astype(np.float32)
    assert network.mode == "eval"
    assert info["input_size"] == 16
    np.testing.assert_array_equal(network.predict_proba(x), tiny_unet.predict_proba(x))


def test_load_models_reads_the_stage1_size(tmp_path, tiny_unet, tiny_resnet):
    """The stage-1 input size comes from its checkpoint."""
    save_network(tiny_unet, tmp_path / "s1.kck", architecture=tiny_unet.architecture(), input_size=32)
    save_network(tiny_resnet, tmp_path / "s2.kck", architecture=tiny_resnet.architecture())
    loaded = load_models(tmp_path / "s1.kck", [tmp_path / "s2.kck"], 256)
    assert loaded.stage1_size == 32
    assert len(loaded.stage2) == 1
    with pytest.raises(ConfigError):
        load_models(tmp_path / "s1.kck", [], 256)


def test_checkpoint_without_architecture(tmp_path, tiny_unet):
    """The meta block must describe the network."""
    save_network(tiny_unet, tmp_path / "m.kck", preset="res-unet1")
    with pytest.raises(IncompatibleCheckpointError):
        load_network(tmp_path / "m.kck")


def test_checkpoint_for_another_shape(tmp_path, tiny_unet):
    """Weights of a narrower network do not fit a wider architecture."""
    wider = ResUNet(ResUNetSpec(base_channels=4), InitSpec()).architecture()
    save_network(tiny_unet, tmp_path / "m.kck", architecture=wider)
    with pytest.raises(IncompatibleCheckpointError):
        load_network(tmp_path / "m.kck")


def test_checkpoint_missing_a_parameter(tmp_path, tiny_unet):
    """A checkpoint lacking one of the architecture's names is rejected by name."""
    state = tiny_unet.state_dict()
    del state["head/conv/kernel"]
    save_checkpoint(state, {}, CheckpointMeta(info={"architecture": tiny_unet.architecture()}), tmp_path / "m.kck")
    with pytest.raises(MissingParameterError, match="head/conv/kernel"):
        load_network(tmp_path / "m.kck")
