import numpy as np
import pytest

from ffrecon.geometry import pose_distance
from ffrecon.oracle import OracleConfig, SyntheticPredictor, corrupt, synth_scene


@pytest.fixture(scope="module")
def scene():
    return synth_scene(OracleConfig(seed=11, n_frames=60))


def test_scene_determinism():
    a = synth_scene(OracleConfig(seed=4, n_frames=20))
    b = synth_scene(OracleConfig(seed=4, n_frames=20))
    np.testing.assert_array_equal(a.boxes, b.boxes)
    for p, q in zip(a.poses, b.poses):
        np.testing.assert_array_equal(p.q.array, q.q.array)
        np.testing.assert_array_equal(p.t, q.t)
    np.testing.assert_array_equal(a.depth(7), b.depth(7))


def test_trajectory_continuity(scene):
    big = synth_scene(OracleConfig(seed=11))
    params = big.distance_params()
    d = [pose_distance(big.poses[i], big.poses[i + 1], params) for i in range(len(big.poses) - 1)]
    assert max(d) < 0.3


def test_depths_positive_finite(scene):
    for f in scene.frame_ids:
        d = scene.depth(f)
        assert np.all(np.isfinite(d)) and np.all(d > 0)


def test_loop_trajectory_closes():
    sc = synth_scene(OracleConfig(seed=1, trajectory="loop"))
    params = sc.distance_params()
    assert pose_distance(sc.poses[0], sc.poses[-1], params) < 0.3


def test_single_frame_noiseless(scene):
    pred = SyntheticPredictor(scene)
    w = pred.predict([5])
    f = w.frames[0]
    np.testing.assert_allclose(f.depth, scene.depth(5) / w.normalizer, rtol=0, atol=1e-12)
    assert f.pose.q.angle() == 0.0 and np.all(f.pose.t == 0.0)


def test_window_normalized(scene):
    w = SyntheticPredictor(scene).predict([10, 3, 20, 31])
    d = np.concatenate([np.linalg.norm(f.pointmap[f.valid], axis=-1) for f in w.frames])
    assert abs(np.median(d) - 1.0) < 1e-6
    assert w.frames[0].pose.q.angle() == 0.0


def test_noiseless_reproduces_metric_gt(scene):
    ids = [8, 0, 16, 24]
    w = SyntheticPredictor(scene).predict(ids)
    anchor = scene.poses[ids[0]]
    for f in w.frames:
        P = anchor.apply(f.pointmap * w.normalizer)
        assert np.abs(P - scene.world_points(f.frame_id)).max() < 1e-9


def test_metric_log_depth_matches_normalizer(scene):
    w = SyntheticPredictor(scene).predict([2, 9, 40])
    for f in w.frames:
        assert abs(f.metric_scale() - w.normalizer) < 1e-9 * w.normalizer
    assert abs(w.metric_factor() - w.normalizer) < 1e-9 * w.normalizer


def test_pointmap_consistent_with_depth_and_pose(scene):
    w = SyntheticPredictor(scene).predict([4, 12])
    rays = scene.rays()
    for f in w.frames:
        P = f.pose.apply(rays * f.depth[..., None])
        assert np.abs(P - f.pointmap).max() < 1e-9


def test_predict_determinism_and_permutation(scene):
    cfg = OracleConfig(seed=11, n_frames=60, sigma=0.02, pose_noise_rot=0.01, dropout=0.05)
    pred = SyntheticPredictor(scene, cfg)
    a = pred.predict([3, 10, 17, 25])
    b = pred.predict([3, 10, 17, 25])
    c = pred.predict([3, 25, 10, 17])
    for x, y in zip(a.frames, b.frames):
        np.testing.assert_array_equal(x.pointmap, y.pointmap)
        np.testing.assert_array_equal(x.confidence, y.confidence)
    assert a.normalizer == c.normalizer
    for fid in (3, 10, 17, 25):
        x, y = a.frame(fid), c.frame(fid)
        np.testing.assert_array_equal(x.pointmap, y.pointmap)
        np.testing.assert_array_equal(x.valid, y.valid)
        np.testing.assert_array_equal(x.pose.t, y.pose.t)
    assert c.frame_ids[0] == 3


def test_unknown_frame(scene):
    with pytest.raises(KeyError, match="unknown frame"):
        SyntheticPredictor(scene).predict([0, 10_000])


def test_corrupt_identity(scene):
    gt = SyntheticPredictor(scene).predict([1, 2])
    out = corrupt(gt, OracleConfig(seed=11))
    for x, y in zip(gt.frames, out.frames):
        np.testing.assert_array_equal(x.pointmap, y.pointmap)
        np.testing.assert_array_equal(x.confidence, y.confidence)
        np.testing.assert_array_equal(x.valid, y.valid)
        assert x.metric_log_depth == y.metric_log_depth


def test_corrupt_noise_statistics():
    sc = synth_scene(OracleConfig(seed=2, n_frames=40, height=48, width=64, focal=56))
    clean = SyntheticPredictor(sc).predict(list(range(40)))  # 40 * 3072 pixels > 1e5 points
    noisy = corrupt(clean, OracleConfig(seed=2, sigma=0.01), key=(1,))
    rel = np.concatenate([(np.linalg.norm(n.pointmap - c.pointmap, axis=-1) / c.depth).ravel()
                          for n, c in zip(noisy.frames, clean.frames)])
    assert rel.size >= 1e5
    assert 0.007 <= rel.mean() <= 0.013
    drop = corrupt(clean, OracleConfig(seed=2, dropout=0.1), key=(1,))
    invalid = np.concatenate([~f.valid.ravel() for f in drop.frames])
    assert invalid.size >= 1e5
    assert 0.08 <= invalid.mean() <= 0.12


def test_confidence_non_increasing_in_error(scene):
    clean = SyntheticPredictor(scene).predict([6])
    noisy = corrupt(clean, OracleConfig(seed=11, sigma=0.05), key=(0,))
    c, n = clean.frames[0], noisy.frames[0]
    err = np.linalg.norm(n.pointmap - c.pointmap, axis=-1) / c.depth
    base = c.confidence
    # Normalized by the clean confidence, confidence is a decreasing function of the error.
    ratio = (n.confidence / base).ravel()
    order = np.argsort(err.ravel())
    assert np.all(np.diff(ratio[order]) <= 1e-12)


def test_backend_prediction_less_noisy(scene):
    cfg = OracleConfig(seed=11, n_frames=60, sigma=0.02)
    pred = SyntheticPredictor(scene, cfg)
    ids = [0, 5, 10]
    clean = pred.clean_window(ids)
    front, back = pred.predict(ids), pred.predict(ids, backend=True)
    err = lambda w: np.mean([np.abs(f.pointmap - g.pointmap).mean() for f, g in zip(w.frames, clean.frames)])
    assert err(back) < err(front)


def test_outlier_frames_low_confidence():
    cfg = OracleConfig(seed=3, n_frames=20, n_outlier_frames=3)
    sc = synth_scene(cfg)
    assert sc.outlier_ids == {20, 21, 22}
    w = SyntheticPredictor(sc, cfg).predict([0, 5, 21])
    assert w.frame(21).frame_confidence() < 0.1 * w.frame(5).frame_confidence()
    assert np.linalg.norm(sc.descriptors[21] - sc.descriptors[0]) > 10


def test_config_invariants():
    with pytest.raises(ValueError, match="invariant violation: sigma"):
        OracleConfig(sigma=-0.1)
    with pytest.raises(ValueError, match="invariant violation: dropout"):
        OracleConfig(dropout=1.0)
