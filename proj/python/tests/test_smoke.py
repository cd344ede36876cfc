import numpy as np
import pytest

import foresight as fs


def test_single_chunk_mask_is_dense():
    m = fs.block_mask(1)
    assert m.shape[0] == m.shape[1]
    # Every chunk block sees the whole prompt; the system prompt sees itself.
    assert m[1:].all()


def test_parity_groups_differ():
    a = fs.block_mask(4, group=0)
    b = fs.block_mask(4, group=1)
    assert a.shape == b.shape
    assert (a != b).any()


def test_sparse_matches_dense():
    sparse, dense = fs.sparse_and_dense_attention(3, head_dim=8, seed=2)
    assert sparse.shape == dense.shape
    np.testing.assert_allclose(sparse, dense, rtol=1e-9, atol=1e-12)


def test_layout_segments():
    lay = fs.layout(2)
    assert isinstance(lay, dict)
    assert "segments" in lay


def test_sampler_example():
    ax = np.zeros(20)
    ax[10:13] = -3.0
    cfg = {"epsilon_floor": 0.0, "windows": [[0, 4], [4, 10], [-4, 0]]}
    w = fs.importance_scores(ax, np.zeros(20), cfg)
    assert w[8] == 6.0
    p = fs.sampling_distribution(np.array([1.0, 4.0]), 1.0)
    np.testing.assert_allclose(p, [0.2, 0.8])
    steps = fs.sample_steps(np.full(30, 1 / 30), 5, 3, seed=1)
    assert all(0 < b - a <= 3 for a, b in zip(steps, steps[1:]))


def test_episode_and_codec():
    world = {"episode_len_s": 20.0,
             "event_script": [{"start_s": 10.0, "duration_s": 0.75, "kind": "BRAKE", "magnitude": 3.0}]}
    ep = fs.generate_episode(1, world)
    assert ep["obs_latents"].shape == (80, 3, 16)
    assert list(np.nonzero(ep["a_x"])[0]) == [40, 41, 42]
    assert ep["events"] == [(40, 43, "BRAKE")]
    z = np.random.default_rng(0).normal(size=16)
    np.testing.assert_allclose(fs.encode_observation(fs.decode_latent(z)), z, atol=1e-10)


def test_metrics():
    gt = np.stack([np.arange(5.0), np.zeros(5)], axis=1)
    pred = gt + [0.0, 0.5]
    e = fs.ade_fde(pred, gt)
    assert e["lat_ade"] == 0.5 and e["long_fde"] == 0.0
    assert round(fs.cces_total([0.9756, 0.9880, 0.9833, 0.9927]), 4) == 3.9396
    np.testing.assert_allclose(fs.rf_interpolate(np.zeros(2), np.array([2.0, 4.0]), 0.5), [1.0, 2.0])
    assert fs.camera_loss(np.array([[3.0, 4.0]]), np.zeros((1, 2)), 1) == 5.0


def test_errors_map_to_python():
    with pytest.raises(ValueError):
        fs.block_mask(2, mask={"no_such_key": 1})
    with pytest.raises(fs.DomainError):
        fs.sampling_distribution(np.zeros(3), 1.0)
