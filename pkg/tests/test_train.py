import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tarpose import model as M
from tarpose import synth
from tarpose import train as TR
from tarpose.backbone import BackboneConfig
from tarpose.fusion import FusionConfig
from tarpose.io import TrainConfig
from tarpose.tensor import Tensor


def adamw_oracle(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    """Textbook AdamW in float64, one parameter, a list of gradients."""
    p = np.array(p, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * wd * p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


# ---- optimiser ------------------------------------------------------------

def test_adamw_first_step_is_sign_step():
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]))}
    TR.adamw_step(p, {"w": np.array([0.3, -4.0, 1e-3])}, TR.OptimState(lr=0.1, weight_decay=0.0))
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9, 0.4], atol=1e-5)


def test_adamw_matches_formula_over_several_steps():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal((3, 4))
    grads = [rng.standard_normal((3, 4)) for _ in range(6)]
    p = {"w": Tensor(p0.copy())}
    state = TR.OptimState(lr=0.01, weight_decay=0.05)
    for g in grads:
        TR.adamw_step(p, {"w": g}, state)
    np.testing.assert_allclose(p["w"].data, adamw_oracle(p0, grads, 0.01, wd=0.05), rtol=1e-12, atol=1e-14)
    assert state.step == 6


def test_adamw_pure_decay_is_geometric():
    p = {"w": Tensor(np.array([2.0, -1.0]))}
    state = TR.OptimState(lr=0.1, weight_decay=0.5)
    for _ in range(4):
        TR.adamw_step(p, {}, state)
    np.testing.assert_allclose(p["w"].data, np.array([2.0, -1.0]) * 0.95 ** 4, rtol=1e-12)


def test_adamw_rejects_bad_input():
    with pytest.raises(ValueError):
        TR.OptimState(lr=-1.0)
    with pytest.raises(Exception):
        TR.adamw_step({"w": Tensor(np.zeros(3))}, {"w": np.zeros(4)}, TR.OptimState())


def test_lr_schedule_examples():
    assert TR.lr_at(0, 5e-6) == 5e-6
    assert TR.lr_at(4, 5e-6) == 5e-6
    assert TR.lr_at(5, 5e-6) == 2.5e-6
    assert TR.lr_at(12, 1e-3) == pytest.approx(0.25e-3)
    with pytest.raises(ValueError):
        TR.lr_at(-1, 1e-3)


@given(e=st.integers(0, 200), every=st.integers(1, 20), base=st.floats(1e-8, 1.0))
def test_lr_schedule_monotone_and_halving(e, every, base):
    assert TR.lr_at(e + 1, base, every) <= TR.lr_at(e, base, every)
    assert TR.lr_at(e + every, base, every) == pytest.approx(TR.lr_at(e, base, every) / 2)


# ---- readout and PCK ------------------------------------------------------

def test_argmax_decode_spike_and_shift():
    hm = np.zeros((2, 16, 12))
    hm[0, 5, 3] = 1.0
    hm[1, 5, 3] = 1.0
    hm[1, 5, 4] = 0.5  # right neighbour higher -> +0.25 cell
    hm[1, 4, 3] = 0.2  # upper neighbour higher -> -0.25 cell
    xy, score = TR.argmax_decode(hm)
    np.testing.assert_allclose(xy[0], [12.0, 20.0])
    np.testing.assert_allclose(xy[1], [13.0, 19.0])
    np.testing.assert_allclose(score, [1.0, 1.0])


def test_argmax_decode_constant_map_picks_origin():
    xy, _ = TR.argmax_decode(np.full((1, 16, 12), 0.3))
    np.testing.assert_array_equal(xy[0], [0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(x=st.floats(4, 40), y=st.floats(4, 56))
def test_ground_truth_heatmap_round_trip(x, y):
    hm = synth.gt_heatmaps(np.array([[x, y, 1.0]]), 64, 48)
    xy, _ = TR.argmax_decode(hm)
    assert np.hypot(xy[0, 0] - x, xy[0, 1] - y) <= 2.0 * np.sqrt(2)
    assert abs(xy[0, 0] - x) <= 2.0 and abs(xy[0, 1] - y) <= 2.0


def test_pck_examples():
    gt = np.array([[0.0, 0.0, 1], [10.0, 0.0, 1], [0.0, 10.0, 1], [10.0, 10.0, 1]])
    assert TR.pck(gt[:, :2], gt, 0.1, 10.0) == 1.0
    shifted = gt[:, :2] + [1.0, 0.0]
    assert TR.pck(shifted, gt, 0.1, 10.0) == 1.0  # distance == threshold counts
    half = gt[:, :2].copy()
    half[:2] += 5.0
    assert TR.pck(half, gt, 0.1, 10.0) == 0.5
    none = gt.copy()
    none[:, 2] = 0
    assert TR.pck(gt[:, :2], none, 0.1, 10.0) is None
    with pytest.raises(ValueError):
        TR.pck(gt[:, :2], gt, 0.0, 10.0)


def test_pck_ignores_invisible_joints():
    gt = np.array([[0.0, 0.0, 1], [10.0, 0.0, 0]])
    pred = np.array([[0.0, 0.0], [99.0, 99.0]])
    assert TR.pck(pred, gt, 0.1, 10.0) == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_pck_joint_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    gt = np.concatenate([r.random((15, 2)) * 50, r.random((15, 1)) > 0.2], axis=1)
    gt[0, 2] = 1
    pred = gt[:, :2] + r.standard_normal((15, 2)) * 4
    perm = r.permutation(15)
    assert TR.pck(pred[perm], gt[perm], 0.1, 40.0) == TR.pck(pred, gt, 0.1, 40.0)


def test_skeleton_norm():
    assert TR.skeleton_norm(np.array([[0, 0, 1], [3, 7, 1], [1, 2, 0]])) == 7.0


# ---- training loop ---------------------------------------------------------

def small_cfg():
    return M.ModelConfig(BackboneConfig(channels=16, depth=1, heads=1),
                         FusionConfig(jta_layers=1, temporal_span=1, heads=1))


def test_zero_learning_rate_leaves_weights():
    cfg = small_cfg()
    ds = synth.make_benchmark("plain", 4, 1, 0)
    res = TR.train(cfg, ds, 1, 3, TrainConfig(base_lr=0.0, batch_size=2, augment=True))
    init = M.init_params(cfg, 3)
    for n in init:
        assert res.params[n].data.tobytes() == init[n].data.tobytes(), n


def test_training_is_deterministic_and_writes_artifacts(tmp_path):
    cfg = small_cfg()
    ds = synth.make_benchmark("plain", 4, 1, 0)
    tc = TrainConfig(batch_size=2, max_steps=3, eval_every=2)
    a = TR.train(cfg, ds, 5, 1, tc, out_dir=tmp_path / "a")
    b = TR.train(cfg, ds, 5, 1, tc, out_dir=tmp_path / "b")
    assert a.losses == b.losses and len(a.losses) == 3
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a" / "metrics.csv")))
    assert tuple(rows[0]) == TR.METRICS_HEADER
    assert len(rows) == 4
    assert rows[2][5] != "" and rows[1][5] == ""  # eval at step 2 only, then final
    assert rows[3][5] != ""


def test_different_seeds_differ():
    cfg = small_cfg()
    ds = synth.make_benchmark("plain", 4, 1, 0)
    tc = TrainConfig(batch_size=2, max_steps=2)
    assert TR.train(cfg, ds, 1, 0, tc).losses != TR.train(cfg, ds, 1, 1, tc).losses


def test_nan_input_aborts_with_diagnostic():
    cfg = small_cfg()
    clip = synth.make_benchmark("plain", 1, 1, 0).clips[0]
    frames = clip.frames.copy()
    frames[1, 0, 3, 3] = np.nan
    bad = synth.PersonClip(frames, clip.keypoints, clip.center_index)
    with pytest.raises(TR.TrainingError, match="non-finite"):
        TR.train(cfg, [bad], 1, 0, TrainConfig(batch_size=1, augment=False))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        TR.train(small_cfg(), [], 1, 0)


def test_evaluate_on_ground_truth_heatmaps():
    # a "model" that returns the GT heatmap gives near-perfect PCK@0.1
    clips = synth.make_benchmark("plain", 3, 1, 4).clips
    for c in clips:
        hm = synth.gt_heatmaps(c.current_keypoints, 64, 48)
        xy, _ = TR.argmax_decode(hm)
        assert TR.pck(xy, c.current_keypoints, 0.1, TR.skeleton_norm(c.current_keypoints)) == 1.0


def test_gradcheck_suite_passes():
    entries = TR.gradcheck_suite(tol=1e-4, seed=0, per_group=4)
    bad = [(e.name, e.max_rel_error) for e in entries if not e.passed]
    assert not bad, bad
    names = {e.name for e in entries}
    assert {"matmul", "softmax_masked", "deconv2d"} <= names


def test_readout_uses_the_model_stride():
    # patch 8 gives stride-2 heatmaps; GT maps at that stride must decode back in place
    cfg = M.ModelConfig(BackboneConfig(patch=8, channels=16, depth=0), FusionConfig(jta_layers=1))
    clip = synth.make_benchmark("plain", 1, 1, 0).clips[0]
    target, _ = TR._targets([clip], cfg, 2.0, False)
    xy, _ = TR.argmax_decode(target[0], cfg.backbone.heatmap_stride)
    gt = clip.current_keypoints
    assert TR.pck(xy, gt, 0.05, TR.skeleton_norm(gt)) == 1.0


def test_supervise_occluded_only_changes_hidden_in_image_joints():
    ds = synth.make_benchmark("occlusion", 3, 1, 5)
    cfg = small_cfg()
    plain, vis = TR._targets(ds.clips, cfg, 2.0, False)
    both, vis_all = TR._targets(ds.clips, cfg, 2.0, True)
    for b, j in enumerate(ds.occluded_joint):
        assert not vis[b, j] and vis_all[b, j]
        assert not plain[b, j].any() and both[b, j].max() > 0.5
    np.testing.assert_array_equal(plain[vis], both[vis])
