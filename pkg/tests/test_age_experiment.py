import numpy as np
import pytest

from voxaging.age_experiment import (
    AgeRegressor,
    RegressorSettings,
    age_regressor_experiment,
    format_experiment_table,
    synthesize_future_scans,
    train_age_regressor,
)
from voxaging.argen import ARConfig, ARModel
from voxaging.phantom import VolumeStore, make_dataset, render_volume, subject_from_seed
from voxaging.vqvae import VQVAE, VQVAEConfig


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("agex")
    man = make_dataset(6, 2, (40.0, 80.0), (8, 8, 8), seed=3, out_dir=str(root),
                       noise_sigma=0.01)
    vcfg = VQVAEConfig(input_dims=(8, 8, 8), channels=[4, 8], downsample_factor=2,
                       latent_channels=4, vocab_size=16)
    vq = VQVAE(vcfg, seed=0)
    ar = ARModel(ARConfig(d_model=16, n_blocks=1, n_heads=2, vocab_size=16, code_dim=4,
                          schedule=vcfg.schedule), seed=1)
    return man, vq, ar


def test_regressor_trains_on_easy_signal():
    # ventricle size tracks age; a few steps should beat the mean predictor
    vols, ages = [], []
    for i in range(8):
        p = subject_from_seed(100 + i)
        for t in (0.1, 0.9):
            vols.append(render_volume(p, t, (8, 8, 8), noise_sigma=0.0))
            ages.append(t)
    model = train_age_regressor(vols, ages, (8, 8, 8),
                                RegressorSettings(lr=2e-3, batch_size=4, max_steps=120, seed=2))
    preds = np.array([model.predict(v) for v in vols])
    mae = np.mean(np.abs(preds - np.array(ages)))
    assert mae < np.mean(np.abs(np.mean(ages) - np.array(ages)))


def test_regressor_deterministic():
    vols = [render_volume(subject_from_seed(i), 0.5, (8, 8, 8)) for i in range(3)]
    ages = [0.2, 0.5, 0.8]
    s = RegressorSettings(max_steps=10, seed=4)
    m1 = train_age_regressor(vols, ages, (8, 8, 8), s)
    m2 = train_age_regressor(vols, ages, (8, 8, 8), s)
    for k in m1.params:
        assert np.array_equal(m1.params[k].data, m2.params[k].data)


def test_synthesize_respects_age_cap(tiny_setup):
    man, vq, ar = tiny_setup
    store = VolumeStore(man)
    cap = max(r.age_norm for r in store.split("train"))
    vols, ages = synthesize_future_scans(store, vq, ar, "train", 0.3, cap)
    assert len(vols) == len(store.subjects("train"))
    assert all(a <= cap + 1e-12 for a in ages)
    assert all(v.shape == (8, 8, 8) for v in vols)
    # subjects above the cap are excluded rather than aged backwards
    none_vols, _ = synthesize_future_scans(store, vq, ar, "train", 0.3, age_cap=0.0)
    assert none_vols == []


def test_experiment_produces_both_arms(tiny_setup):
    man, vq, ar = tiny_setup
    store = VolumeStore(man)
    res = age_regressor_experiment(store, vq, ar,
                                   RegressorSettings(max_steps=15, batch_size=2, seed=5),
                                   age_increment=0.1)
    assert set(res["real_only"]) == {"mae", "r2"}
    assert set(res["mixed"]) == {"mae", "r2"}
    assert res["n_synthetic"] > 0
    assert isinstance(res["mixed_not_worse"], bool)
    table = format_experiment_table(res)
    assert "real + synthetic" in table


def test_experiment_refuses_preread_test_split(tiny_setup):
    man, vq, ar = tiny_setup
    store = VolumeStore(man)
    store.load(store.split("test")[0])  # poison the audit trail
    with pytest.raises(RuntimeError, match="test-split"):
        age_regressor_experiment(store, vq, ar, RegressorSettings(max_steps=5, seed=6))


def test_regressor_rejects_empty():
    with pytest.raises(ValueError):
        train_age_regressor([], [], (8, 8, 8), RegressorSettings())
