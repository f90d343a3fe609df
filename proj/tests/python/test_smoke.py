"""Smoke tests for the python bindings: round trips, shapes, and one tiny
training run through the bound API."""

import json

import numpy as np
import pytest

import ddaunet


@pytest.fixture(scope="module")
def phantom():
    spec = ddaunet.PhantomSpec()
    spec.set_dims(32, 32, 16)
    spec.set_spacing(1, 1, 3)
    spec.tumor_length_mm = 18
    spec.tumor_radius_mm = 7
    spec.esophagus_radius_mm = 4
    spec.seed = 11
    return ddaunet.generate_phantom(spec)


def test_volume_numpy_round_trip(tmp_path):
    arr = np.random.default_rng(3).uniform(-500, 500, size=(4, 5, 6)).astype(np.float32)
    vol = ddaunet.volume_from_numpy(arr, spacing=(1, 1, 3))
    assert vol.shape == (4, 5, 6)
    np.testing.assert_array_equal(vol.to_numpy(), arr)

    path = str(tmp_path / "vol.mha")
    ddaunet.save_volume(vol, path)
    back = ddaunet.load_volume(path)
    np.testing.assert_array_equal(back.to_numpy(), arr)
    assert back.spacing == (1, 1, 3)


def test_mask_rejects_nonbinary():
    bad = np.full((2, 2, 2), 2, dtype=np.uint8)
    with pytest.raises(ddaunet.DdaunetError):
        ddaunet.mask_from_numpy(bad)


def test_resample_identity(phantom):
    vol = phantom.volume
    res = ddaunet.resample_volume(vol, (1, 1, 3))
    np.testing.assert_array_equal(res.to_numpy(), vol.to_numpy())


def test_phantom_and_sdf(phantom):
    gtv = phantom.gtv.to_numpy()
    assert gtv.any()
    phi = ddaunet.signed_distance_map(phantom.gtv)
    assert phi.shape == gtv.shape
    assert (phi[gtv > 0] <= 0).all()
    assert (phi[gtv == 0] > 0).all()


def test_losses_agree_with_numpy(phantom):
    rng = np.random.default_rng(5)
    probs = rng.uniform(0.05, 0.95, size=216)
    gt = (rng.uniform(size=216) < 0.4).astype(np.uint8)
    dsc = ddaunet.soft_dice(probs, gt)
    expect = (2 * (probs * gt).sum() + 1e-5) / ((probs**2).sum() + gt.sum() + 1e-5)
    assert dsc == pytest.approx(expect, rel=1e-12)

    phi = rng.uniform(-5, 8, size=216)
    bl = ddaunet.boundary_loss(probs, phi, voxel_volume=3.0)
    assert bl == pytest.approx(3.0 * (phi * probs).sum(), rel=1e-12)


def test_network_forward_shapes():
    cfg = ddaunet.NetworkConfig.from_variant("DDAUnet")
    net = ddaunet.Network(cfg, seed=1)
    assert 40_000 <= net.parameter_count() <= 200_000
    x = np.random.default_rng(0).uniform(0, 1, size=(8, 8, 8)).astype(np.float32)
    p = net.forward(x)
    assert p.shape == (2, 8, 8, 8)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-5)


def test_variant_names_cover_the_comparison():
    names = ddaunet.NetworkConfig.variant_names()
    assert "DUnet" in names and "DDAUnet" in names
    rf_d = ddaunet.receptive_field(ddaunet.NetworkConfig.from_variant("DUnet"))
    rf_dd = ddaunet.receptive_field(ddaunet.NetworkConfig.from_variant("DDUnet"))
    assert all(b > a for a, b in zip(rf_d, rf_dd))


def test_inference_and_metrics(phantom):
    cfg = ddaunet.NetworkConfig.from_variant("DDAUnet")
    cfg.stem_channels = 4
    cfg.growth = 4
    cfg.bottleneck = 4
    cfg.sub_ddbs = 1
    net = ddaunet.Network(cfg, seed=3)
    norm = ddaunet.normalize_hu_window(phantom.volume)
    prob = ddaunet.infer_volume(net, norm)
    assert prob.shape == norm.shape
    mask = ddaunet.largest_component(ddaunet.binarize(prob, 0.5))
    m = ddaunet.evaluate_scan(phantom.gtv, phantom.gtv)
    assert m["dsc"] == 1.0
    assert m["msd_mm"] == 0.0
    assert mask.foreground_count() >= 0


def test_end_to_end_training(tmp_path):
    corpus_cfg = ddaunet.CorpusConfig()
    corpus_cfg.n = 4
    corpus_cfg.seed = 7
    corpus_cfg.set_dims(24, 24, 12)
    corpus_cfg.train_fraction = 0.5
    corpus_cfg.val_fraction = 0.25
    corpus_cfg.test_fraction = 0.25
    cases = ddaunet.generate_corpus(corpus_cfg, str(tmp_path / "corpus"))
    assert len(cases) == 4

    config = {
        "network": {
            "variant": "DDAUnet",
            "stem_channels": 4,
            "growth": 4,
            "bottleneck": 4,
            "sub_ddbs": 1,
        },
        "sampler": {"patch_size": [8, 8, 8], "noise_sigma_max": 0.02},
        "batch_size": 2,
        "epochs": 1,
        "steps_per_epoch": 2,
        "seed": 5,
    }
    result = ddaunet.train(
        json.dumps(config), str(tmp_path / "corpus" / "manifest.json"), str(tmp_path / "run")
    )
    assert result["steps_run"] == 2
    net = ddaunet.load_checkpoint(result["final_checkpoint"])
    assert net.config.variant == "DDAUnet"
