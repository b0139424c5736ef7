import numpy as np
import pytest
import torch

from oracles import central_difference_grads, relu_pattern_recorder
from morphalign.flowcore import FlowField
from morphalign.refiner.checkpoint import FORMAT_VERSION, CheckpointError, load_checkpoint, save_checkpoint
from morphalign.refiner.model import (
    RefinerConfig,
    backward,
    build_model,
    flow_tensor,
    forward,
    image_tensor,
    parameter_count,
    refine,
    smooth_l1,
    smooth_l1_tensor,
)
from morphalign.refiner.trainer import (
    SampleSet,
    TrainingError,
    crop_pair,
    make_synthetic_set,
    resume_state,
    scene_pair,
    train,
)
from morphalign.synthmotion import AffineTransform, affine_flow, corrupt_flow, synthetic_scene

TINY = dict(channels=(2, 2, 2, 2, 2, 4))


def pair(size=64, seed=0):
    a = synthetic_scene(seed, size, size)
    b = synthetic_scene(seed + 1, size, size)
    gt = affine_flow(AffineTransform(theta=0.04, tx=1.5, ty=-0.5, cx=(size - 1) / 2, cy=(size - 1) / 2), size, size)
    return a, b, gt, corrupt_flow(gt, np.random.default_rng(seed))


@pytest.fixture(scope="module")
def small_set():
    return make_synthetic_set(2, crops_per_scene=4, size=32, scene_size=64, seed=5, composed_fraction=0.5)


def test_identity_at_init_is_bit_exact():
    model = build_model(RefinerConfig())
    a, b, _, F = pair()
    dF, F_hat, _ = forward(model, a, b, F)
    assert np.all(dF.vectors == 0)
    assert np.array_equal(F_hat.vectors, F.vectors)
    assert np.array_equal(refine(model, a, b, F).vectors, F.vectors)


def test_residual_shape_and_finite():
    model = build_model(RefinerConfig(zero_init_head=False))
    a, b, _, F = pair()
    dF, F_hat, _ = forward(model, a, b, F)
    assert dF.vectors.shape == (64, 64, 2)
    assert np.isfinite(dF.vectors).all()


def test_gray_input_accepted():
    model = build_model(RefinerConfig.preset("tiny"))
    a, b, _, F = pair(32)
    dF, _, _ = forward(model, a.mean(axis=2), b.mean(axis=2), F)
    assert dF.shape == (32, 32)


@pytest.mark.parametrize("size", [32, 64, 96])
def test_encoder_strides(size):
    model = build_model(RefinerConfig.preset("tiny"))
    assert model.feature_strides(size) == [1, 2, 4, 8, 16, 32]


def test_rejects_non_multiple_of_32():
    model = build_model(RefinerConfig.preset("tiny"))
    a, b, _, F = pair(48)
    with pytest.raises(ValueError, match="divisible by 32"):
        forward(model, a, b, F)


def test_config_validation():
    with pytest.raises(ValueError):
        RefinerConfig(channels=(1, 2, 3))
    with pytest.raises(ValueError):
        RefinerConfig(input_size=40)


def test_presets_param_counts():
    assert parameter_count(build_model(RefinerConfig.preset("tiny"))) < 2000
    desk = parameter_count(build_model(RefinerConfig.preset("desk")))
    assert 5e6 < desk < 1e7


def test_smooth_l1_values():
    gt = FlowField.zeros(5, 4)
    assert smooth_l1(gt, gt) == 0.0
    assert smooth_l1(FlowField.constant(0.5, -0.5, 5, 4), gt) == pytest.approx(0.125)
    assert smooth_l1(FlowField.constant(2.0, -2.0, 5, 4), gt) == pytest.approx(1.5)


def test_smooth_l1_respects_mask_and_rejects_empty():
    gt = FlowField.zeros(4, 4)
    pred = FlowField.constant(2.0, 2.0, 4, 4)
    pred.vectors[0, 0] = 100.0
    mask = np.ones((4, 4), bool)
    mask[0, 0] = False
    assert smooth_l1(pred, gt, mask) == pytest.approx(1.5)
    with pytest.raises(ValueError, match="empty"):
        smooth_l1(pred, gt, np.zeros((4, 4), bool))


def test_smooth_l1_tensor_matches_numpy():
    rng = np.random.default_rng(0)
    p = FlowField(rng.normal(0, 2, (8, 8, 2)))
    g = FlowField(rng.normal(0, 2, (8, 8, 2)))
    t = smooth_l1_tensor(flow_tensor(p, torch.float64), flow_tensor(g, torch.float64), torch.ones(1, 8, 8, dtype=bool))
    assert float(t) == pytest.approx(smooth_l1(p, g), rel=1e-12)


def test_stale_cache_rejected():
    model = build_model(RefinerConfig.preset("tiny"))
    a, b, gt, F = pair(32)
    _, _, cache = forward(model, a, b, F)
    backward(model, cache, gt)
    with pytest.raises(RuntimeError, match="stale"):
        backward(model, cache, gt)
    _, _, cache = forward(model, a, b, F)
    with torch.no_grad():
        model.head.bias += 1.0
    with pytest.raises(RuntimeError, match="stale"):
        backward(model, cache, gt)


def test_zero_loss_gives_zero_head_gradients():
    model = build_model(RefinerConfig.preset("tiny"))
    a, b, gt, _ = pair(32)
    _, _, cache = forward(model, a, b, gt)
    out = backward(model, cache, gt)
    assert out["loss"] == 0.0
    assert np.all(out["grads"]["head.weight"] == 0)
    assert np.all(out["grads"]["head.bias"] == 0)


def gradient_check(seed):
    cfg = RefinerConfig.preset("tiny", input_size=32, zero_init_head=False, seed=seed)
    model = build_model(cfg, torch.float64)
    a, b, gt, F = pair(32, seed=seed)
    _, _, cache = forward(model, a, b, F)
    analytic = backward(model, cache, gt)["grads"]
    ta, tb, tf, tg = (image_tensor(a, torch.float64), image_tensor(b, torch.float64),
                      flow_tensor(F, torch.float64), flow_tensor(gt, torch.float64))
    valid = torch.ones(1, 32, 32, dtype=torch.bool)
    record, _ = relu_pattern_recorder(model)

    def loss_fn():
        record.clear()
        out = model(ta, tb, tf)[1]
        return smooth_l1_tensor(out, tg, valid), tuple(record) + (((out - tg).abs() < 1).numpy().tobytes(),)

    names = [n for n, _ in model.named_parameters()]
    numeric, smooth = central_difference_grads(loss_fn, list(model.parameters()), eps=1e-4)
    worst, checked = 0.0, 0
    for name, num, ok in zip(names, numeric, smooth):
        an = analytic[name]
        rel = np.abs(an - num) / np.maximum(np.maximum(np.abs(an), np.abs(num)), 1e-8)
        if ok.any():
            worst = max(worst, float(rel[ok].max()))
        checked += int(ok.sum())
    return worst, checked, sum(o.size for o in smooth)


def test_finite_difference_gradients():
    worst, checked, total = gradient_check(seed=4)
    assert checked > 0.9 * total
    assert worst < 1e-3


def test_gradients_deterministic():
    a, b, gt, F = pair(32)
    runs = []
    for _ in range(2):
        model = build_model(RefinerConfig.preset("tiny", zero_init_head=False, seed=9))
        _, _, cache = forward(model, a, b, F)
        runs.append(backward(model, cache, gt)["grads"])
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k])


def test_build_model_is_seeded_and_restores_rng():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    m1 = build_model(RefinerConfig.preset("tiny", seed=1))
    after = torch.rand(1)
    assert torch.equal(before, after)
    m2 = build_model(RefinerConfig.preset("tiny", seed=1))
    m3 = build_model(RefinerConfig.preset("tiny", seed=2))
    s1, s2, s3 = m1.state_dict(), m2.state_dict(), m3.state_dict()
    assert all(torch.equal(s1[k], s2[k]) for k in s1)
    assert not all(torch.equal(s1[k], s3[k]) for k in s1)


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(RefinerConfig.preset("tiny", zero_init_head=False, seed=3))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, train_state={"epoch": 2})
    loaded, opt, state = load_checkpoint(path, expected=RefinerConfig.preset("tiny"))
    assert opt is None and state == {"epoch": 2}
    sd, ld = model.state_dict(), loaded.state_dict()
    assert all(torch.equal(sd[k], ld[k]) for k in sd)
    a, b, _, F = pair(32)
    assert np.array_equal(refine(model, a, b, F).vectors, refine(loaded, a, b, F).vectors)
    save_checkpoint(tmp_path / "again.ckpt", loaded, train_state={"epoch": 2})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_architecture_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_model(RefinerConfig.preset("tiny")))
    with pytest.raises(CheckpointError, match="architecture"):
        load_checkpoint(path, expected=RefinerConfig.preset("desk"))


def test_checkpoint_version_and_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_model(RefinerConfig.preset("tiny")))
    buf = bytearray(path.read_bytes())
    buf[8:12] = (FORMAT_VERSION + 1).to_bytes(4, "little")
    bad = tmp_path / "v.ckpt"
    bad.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(b"NOTACKPT" + bytes(buf[8:]))
    with pytest.raises(CheckpointError, match="not a refiner checkpoint"):
        load_checkpoint(bad)
    bad.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(bad)


def test_crop_pair_offset_is_exact():
    rng = np.random.default_rng(0)
    a, b, fin, gt, kind = scene_pair(rng, 128)
    ca, cb, cf, cg, cv = crop_pair(a, b, fin, gt, 30, 40, 32)
    assert kind == "corrupted" and cv.all()
    # the residual between input and target is unchanged by the shift
    np.testing.assert_allclose(cf - cg, fin.vectors[40:72, 30:62] - gt.vectors[40:72, 30:62], atol=1e-12)
    assert ca.shape == cb.shape == (32, 32, 3)


def test_synthetic_set_deterministic(small_set):
    again = make_synthetic_set(2, crops_per_scene=4, size=32, scene_size=64, seed=5, composed_fraction=0.5)
    assert len(small_set) == 8
    assert np.array_equal(small_set.flow_in, again.flow_in)
    assert np.array_equal(small_set.img_b, again.img_b)


def test_train_one_epoch_writes_checkpoint(tmp_path, small_set):
    cfg = RefinerConfig.preset("tiny", input_size=32, epochs=1, batch_size=4)
    state = train(cfg, small_set, small_set, out_dir=tmp_path)
    assert np.isfinite(state.history[0]["train_loss"])
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    load_checkpoint(tmp_path / "best.ckpt", expected=cfg)


def test_train_rejects_empty_set():
    empty = SampleSet(*(np.zeros((0, 3, 32, 32)),) * 2, np.zeros((0, 2, 32, 32)), np.zeros((0, 2, 32, 32)),
                      np.zeros((0, 32, 32), bool))
    with pytest.raises(TrainingError, match="empty"):
        train(RefinerConfig.preset("tiny"), empty)


def test_train_aborts_on_non_finite_loss(tmp_path, small_set):
    bad = small_set.subset(range(len(small_set)))
    bad.gt[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(RefinerConfig.preset("tiny", input_size=32, epochs=1, batch_size=4), bad, out_dir=tmp_path)


def test_loss_decreases_over_three_epochs():
    data = make_synthetic_set(4, crops_per_scene=8, size=64, seed=11)
    cfg = RefinerConfig(epochs=3, batch_size=8, lr=1e-3, flow_scale=8.0)
    losses = [h["train_loss"] for h in train(cfg, data).history]
    assert losses[0] > losses[1] > losses[2]


def test_resume_matches_uninterrupted(tmp_path, small_set):
    cfg = RefinerConfig.preset("tiny", input_size=32, epochs=3, batch_size=4, lr=1e-2, zero_init_head=False)
    full = train(cfg, small_set, small_set)
    train(cfg, small_set, small_set, out_dir=tmp_path, stop_after=1)
    resumed = train(cfg, small_set, small_set, out_dir=tmp_path, state=resume_state(tmp_path / "last.ckpt"))
    assert resumed.history == full.history
    a, b = full.model.state_dict(), resumed.model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
