import numpy as np
import pytest

from tossfuse.camera import backproject, derive_mask, render_depth
from tossfuse.config import NoiseConfig, SynthConfig
from tossfuse.dynamics import ContactModel
from tossfuse.errors import ConfigError, InvalidInputError
from tossfuse.synth import (apply_noise, camera_from_config, generate_toss_dataset, random_release,
                            simulate_toss, synthesize)


def desk_config(**changes) -> SynthConfig:
    settings = dict(n_tosses=2, frames=15, width=160, height=120, fx=300.0, fy=300.0, cx=80.0, cy=60.0,
                    camera_eye=(0.0, -0.7, 0.25), camera_target=(0.0, 0.0, 0.12), xy_range=0.03,
                    height_range=(0.15, 0.22), max_horizontal_speed=0.1, vertical_speed_range=(-0.3, 0.3),
                    max_spin=4.0)
    settings.update(changes)
    return SynthConfig(**settings)


def test_clean_frames_are_renders():
    config = desk_config(noise=NoiseConfig.clean())
    dataset = synthesize(config)
    mesh = dataset.ground_truth.mesh
    for clip in dataset.clips:
        assert np.allclose(np.diff(clip.timestamps), 1 / 30.0)
        assert clip.frames[0].mask.any()
        for frame, pose in zip(clip.frames, clip.gt_poses):
            assert np.array_equal(frame.depth, render_depth(mesh, pose, dataset.intrinsics))
            assert np.array_equal(frame.mask, derive_mask(frame.depth))


def test_clean_depth_lies_on_true_surface():
    dataset = synthesize(desk_config(noise=NoiseConfig.clean(), n_tosses=1))
    clip = dataset.clips[0]
    for k in (0, 7, 14):
        frame = clip.frames[k]
        points = clip.gt_poses[k].inverse().apply(backproject(frame.depth, frame.mask, dataset.intrinsics))
        assert len(points)
        assert np.abs(np.abs(points).max(axis=1) - 0.03).max() < 1e-6


def test_same_seed_same_dataset():
    config = desk_config()
    first, second = synthesize(config), synthesize(config, threads=2)
    for a, b in zip(first.clips, second.clips):
        for frame_a, frame_b in zip(a.frames, b.frames):
            assert np.array_equal(frame_a.depth, frame_b.depth)
            assert np.array_equal(frame_a.mask, frame_b.mask)
    other = synthesize(desk_config(seed=7))
    assert not np.array_equal(other.clips[0].frames[5].depth, first.clips[0].frames[5].depth)


def test_noise_statistics():
    clean = np.full((400, 400), 0.5)
    rng = np.random.default_rng(0)
    noisy, mask = apply_noise(clean, rng, NoiseConfig(depth_sigma=0.002, dropout_rate=0.0, mask_erosion=0))
    assert abs(np.std(noisy - clean) - 0.002) < 0.1 * 0.002
    assert mask.all()


def test_dropout_and_erosion():
    clean = np.zeros((50, 50))
    clean[10:40, 10:40] = 0.6
    rng = np.random.default_rng(1)
    noisy, mask = apply_noise(clean, rng, NoiseConfig(depth_sigma=0.0, dropout_rate=0.2, mask_erosion=1))
    assert np.count_nonzero(mask) == 28 * 28
    dropped = (clean > 0) & (noisy == 0)
    assert 0.1 < dropped.sum() / 900 < 0.3
    assert not noisy[clean == 0].any()


def test_release_distribution():
    config = SynthConfig()
    rng = np.random.default_rng(2)
    for _ in range(200):
        state = random_release(rng, config)
        assert 0.3 <= state.pose.translation[2] <= 0.6
        assert np.linalg.norm(state.linear_velocity) <= 1.5
        assert np.linalg.norm(state.angular_velocity) <= 10.0


@pytest.mark.slow
def test_default_tosses_come_to_rest():
    config = SynthConfig()
    model = ContactModel.cube(config.cube_side, config.mass, config.mu)
    for seed in range(config.n_tosses):
        rng = np.random.default_rng([config.seed, seed])
        states = simulate_toss(model, random_release(rng, config), config.frames, config.fps, config.substeps)
        assert max(state.kinetic_energy(model) for state in states[-30:]) < 1e-6


def test_rejected_setups():
    with pytest.raises(ConfigError):
        synthesize(desk_config(camera_target=(0.0, -1.5, 0.25)))
    model = ContactModel.cube()
    with pytest.raises(InvalidInputError):
        generate_toss_dataset(model, 0, camera_from_config(desk_config()))
    with pytest.raises(ConfigError):
        desk_config(max_horizontal_speed=1.0, vertical_speed_range=(-2.0, 1.0))
