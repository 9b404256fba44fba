import csv
import math

import numpy as np
import pytest
import torch

from uwgan.losses import LossWeights
from uwgan.models import DiscriminatorSpec, GeneratorSpec
from uwgan.patching import ConfigMode
from uwgan.phantom import SubjectSpec, simulate_subject
from uwgan.training import (
    HISTORY_COLUMNS,
    PatchPairs,
    TrainConfig,
    TrainingDiverged,
    build_patch_pairs,
    denoise,
    init_state,
    load_checkpoint,
    load_generator,
    make_splits,
    save_checkpoint,
    train,
)
from uwgan.volume import Volume4D

TINY_G = GeneratorSpec(layer_filters=(2, 4, 8, 16, 8, 4, 2, 1))
TINY_D = DiscriminatorSpec(encoder_filters=(2, 4, 8, 16, 32))


def _cfg(**kw):
    base = dict(generator=TINY_G, discriminator=TINY_D, epochs=2, batch_size=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _pairs(n, size, seed=0):
    rng = np.random.default_rng(seed)
    clean = rng.uniform(0, 1, (n, size, size, size)).astype(np.float32)
    noisy = (clean + rng.normal(0, 0.1, clean.shape)).astype(np.float32)
    return PatchPairs(noisy, clean)


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def test_ten_subjects_five_folds():
    splits = make_splits(range(10), 5, seed=0)
    assert len(splits) == 5
    assert all(len(s.test_subjects) == 2 for s in splits)
    tested = sorted(x for s in splits for x in s.test_subjects)
    assert tested == list(range(10))
    for s in splits:
        assert set(s.train_subjects).isdisjoint(s.test_subjects)
        assert sorted(s.train_subjects + s.test_subjects) == list(range(10))


def test_108_subjects_remainder_spread():
    splits = make_splits([f"sub{i:03d}" for i in range(108)], 5, seed=1)
    assert sorted((len(s.test_subjects) for s in splits), reverse=True) == [22, 22, 22, 21, 21]


def test_splits_are_seeded():
    assert make_splits(range(12), 3, seed=4) == make_splits(range(12), 3, seed=4)
    assert make_splits(range(12), 3, seed=4) != make_splits(range(12), 3, seed=5)


@pytest.mark.parametrize("k", [0, 1, 11])
def test_bad_fold_count(k):
    with pytest.raises(ValueError):
        make_splits(range(10), k)


def test_default_config():
    cfg = TrainConfig()
    assert cfg.learning_rate == 1e-4 and cfg.batch_size == 32 and cfg.d_steps_per_g_step == 1
    assert cfg.betas == (0.5, 0.9)
    assert cfg.weights == LossWeights()


def test_history_length_without_critic():
    # 16^3 patches fit the generator; the critic needs 32^3, so lambda_d = 0 here
    cfg = _cfg(batch_size=32, weights=LossWeights(lambda_d=0.0))
    state = train(_pairs(64, 16), cfg)
    assert len(state.history) == 2 * math.ceil(64 / 32)
    assert state.discriminator is None
    for row in state.history:
        assert all(math.isfinite(row[c]) for c in HISTORY_COLUMNS)


def test_history_length_adversarial():
    cfg = _cfg(batch_size=32)
    state = train(_pairs(40, 32), cfg)
    assert len(state.history) == 2 * math.ceil(40 / 32)
    assert all(row["GP"] > 0 and math.isfinite(row["L_D"]) for row in state.history)


def test_generator_steps_follow_critic_ratio():
    cfg = _cfg(batch_size=2, epochs=1, d_steps_per_g_step=3)
    state = train(_pairs(12, 32), cfg)
    # 6 critic batches, generator after batches 3 and 6
    assert len(state.history) == 2


def test_zero_learning_rate_leaves_parameters():
    cfg = _cfg(learning_rate=0.0, epochs=1)
    state = init_state(cfg)
    g0, d0 = _params(state.generator), _params(state.discriminator)
    train(_pairs(8, 32), cfg, state)
    for a, b in zip(g0, _params(state.generator)):
        assert torch.equal(a, b)
    for a, b in zip(d0, _params(state.discriminator)):
        assert torch.equal(a, b)


def test_nan_loss_aborts_with_component_and_step():
    data = _pairs(8, 16)
    data.noisy[3, 0, 0, 0] = np.nan
    cfg = _cfg(weights=LossWeights(lambda_d=0.0), batch_size=8)
    with pytest.raises(TrainingDiverged, match=r"L_MSE.*step 0"):
        train(data, cfg)


def test_training_is_deterministic():
    cfg = _cfg(epochs=1)
    data = _pairs(8, 32)
    a, b = train(data, cfg), train(data, cfg)
    assert a.history == b.history
    for x, y in zip(_params(a.generator), _params(b.generator)):
        assert torch.equal(x, y)


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    data = _pairs(8, 32)
    full = train(data, _cfg(epochs=2))
    half = train(data, _cfg(epochs=1))
    save_checkpoint(half, tmp_path / "ckpt")
    resumed = load_checkpoint(tmp_path / "ckpt")
    assert resumed.epoch == 1 and resumed.step == half.step
    resumed = train(data, _cfg(epochs=2), resumed)
    assert resumed.history == full.history
    for x, y in zip(_params(full.generator), _params(resumed.generator)):
        assert torch.equal(x, y)
    for x, y in zip(_params(full.discriminator), _params(resumed.discriminator)):
        assert torch.equal(x, y)


def test_checkpoint_files(tmp_path):
    state = train(_pairs(4, 32), _cfg(epochs=1))
    save_checkpoint(state, tmp_path)
    assert {p.name for p in tmp_path.iterdir()} == {"arrays.npz", "manifest.json", "history.csv"}
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert len(rows) == 1 + len(state.history)


def test_load_generator_spec_mismatch(tmp_path):
    save_checkpoint(init_state(_cfg()), tmp_path)
    assert load_generator(tmp_path, TINY_G).spec == TINY_G
    with pytest.raises(ValueError, match="spec"):
        load_generator(tmp_path, GeneratorSpec())


def test_renoise_changes_inputs_per_epoch():
    subjects = [simulate_subject(SubjectSpec(grid=(32, 32, 4), cycles=1, on_seconds=24, off_seconds=24), seed=s) for s in range(2)]
    data = build_patch_pairs(subjects, 0.09, 0, ConfigMode.TIME_BASED, 32)
    fixed = train(data, _cfg(epochs=2, weights=LossWeights(lambda_d=0.0)))
    renoised = train(data, _cfg(epochs=2, renoise_per_epoch=True, weights=LossWeights(lambda_d=0.0)))
    assert fixed.history != renoised.history


def test_build_patch_pairs_counts():
    subjects = [simulate_subject(SubjectSpec(grid=(32, 32, 4), cycles=1, on_seconds=24, off_seconds=24), seed=s) for s in range(3)]
    data = build_patch_pairs(subjects, 0.09, 7, ConfigMode.SLICE_BASED, 32)
    # 4 slices x 16 frames = 64 along z -> 2 patches per subject
    assert len(data) == 6
    assert np.all(data.noisy >= 0)
    assert np.allclose(data.sigmas, [0.09 * s.intensity_max for s in subjects for _ in range(2)])


@pytest.mark.slow
def test_toy_descent():
    subjects = [simulate_subject(SubjectSpec(grid=(32, 32, 4)), seed=s) for s in range(2)]
    data = build_patch_pairs(subjects, 0.09, 0, ConfigMode.TIME_BASED, 32)
    # default optimiser and loss weights
    cfg = _cfg(epochs=20, batch_size=32)
    state = train(data, cfg)

    def epoch_mean(e):
        return np.mean([r["L_MSE"] for r in state.history if r["epoch"] == e])

    assert epoch_mean(19) < epoch_mean(0)


def test_denoise_identity_stub():
    vol = Volume4D(np.random.default_rng(0).uniform(0, 1, (40, 40, 3, 7)))
    out = denoise(lambda x: x, vol, ConfigMode.SLICE_BASED, patch_size=32)
    assert out.data.tobytes() == vol.data.tobytes()


def test_denoise_full_size_dims():
    vol = Volume4D(np.zeros((96, 96, 22, 300), dtype=np.float32), (0.3, 0.3, 1.0), 3.0)
    out = denoise(lambda x: x + 1, vol, ConfigMode.TIME_BASED, patch_size=32, batch_size=64)
    assert out.dims == (96, 96, 22, 300)
    assert out.tr_seconds == 3.0 and out.voxel_size_mm == (0.3, 0.3, 1.0)
    assert np.all(out.data == 1)


def test_denoise_is_deterministic():
    state = train(_pairs(4, 32), _cfg(epochs=1))
    vol = Volume4D(np.random.default_rng(1).uniform(0, 1, (32, 32, 2, 20)))
    a = denoise(state.generator, vol, ConfigMode.TIME_BASED)
    b = denoise(state.generator, vol, ConfigMode.TIME_BASED)
    assert a.data.tobytes() == b.data.tobytes()
    assert not state.generator.training
