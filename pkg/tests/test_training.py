import numpy as np
import pytest

import oracles
from sdnet import autograd as ag
from sdnet.dcr import convert_model
from sdnet.graph import TOY, TRAINING, GraphError, LayerSpec, ModelConfig, ModelGraph
from sdnet.models import apply_layer, build_sdnet, build_stdnet, init_params, sdnet_forward, stdnet_forward
from sdnet.tensor import ConvDescriptor, ShapeError
from sdnet.training import (COMBINED, Adam, LossConfig, backward, boring_clip, check_gradients, compute_loss,
                            evaluate_loss, iou_loss, square_dataset, ssim_loss, step_lr, train_toy,
                            train_two_stage, weighted_bce)

TOL = 1e-3


def _pair(rng, shape=(2, 1, 12, 12)):
    pred = rng.uniform(0.05, 0.95, size=shape)
    gt = (rng.uniform(size=shape) > 0.6).astype(np.float64)
    return pred, gt


# --------------------------------------------------------------------------- losses


def test_bce_matches_scalar_oracle(rng):
    pred, gt = _pair(rng)
    assert abs(float(weighted_bce(pred, gt).value) - oracles.weighted_bce(pred, gt)) <= 1e-7


def test_iou_matches_scalar_oracle(rng):
    pred, gt = _pair(rng)
    assert abs(float(iou_loss(pred, gt).value) - oracles.iou(pred, gt)) <= 1e-6


def test_ssim_matches_scalar_oracle(rng):
    pred, gt = _pair(rng, (2, 1, 9, 8))
    assert abs(float(ssim_loss(pred, gt).value) - oracles.ssim(pred, gt)) <= 1e-6


def test_perfect_prediction_losses(rng):
    _, gt = _pair(rng)
    assert float(weighted_bce(gt, gt).value) <= 1e-4
    assert float(iou_loss(gt, gt).value) <= 1e-12
    assert float(ssim_loss(gt, gt).value) <= 1e-4


def test_inverted_prediction_iou_near_one():
    gt = np.zeros((1, 1, 16, 16))
    gt[..., :8] = 1
    assert float(iou_loss(1 - gt, gt).value) == pytest.approx(1 - 1 / 257)


def test_bce_all_positive_ignores_negatives(rng):
    gt = np.ones((1, 1, 4, 4))
    # negative weight is |Y+|/|Y| on negatives, positive weight |Y-|/|Y| = 0: the loss vanishes
    assert float(weighted_bce(rng.uniform(size=gt.shape), gt).value) == 0.0


def test_bce_rejects_soft_targets(rng):
    with pytest.raises(ValueError, match="binary"):
        weighted_bce(rng.uniform(size=(1, 1, 4, 4)), np.full((1, 1, 4, 4), 0.5))
    with pytest.raises(ShapeError):
        iou_loss(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


def test_loss_report_is_additive(rng):
    pred, gt = _pair(rng)
    total, report = compute_loss(pred, gt, COMBINED)
    assert abs(report.total - (report.bce + report.iou + report.ssim)) <= 1e-7
    assert min(report.bce, report.iou, report.ssim) >= 0
    with pytest.raises(ValueError):
        LossConfig(bce=False)


@pytest.mark.parametrize("name", ["bce", "iou", "ssim"])
def test_loss_gradients(rng, name):
    pred, gt = _pair(rng, (1, 1, 8, 8))
    fn = {"bce": weighted_bce, "iou": iou_loss, "ssim": ssim_loss}[name]
    errors = check_gradients(lambda v: fn(v["p"], gt), {"p": pred})
    assert errors["p"] <= TOL


def test_ssim_on_clips(rng):
    pred, gt = _pair(rng, (1, 1, 3, 8, 8))
    frames = float(ssim_loss(pred.transpose(0, 2, 1, 3, 4).reshape(3, 1, 8, 8),
                             gt.transpose(0, 2, 1, 3, 4).reshape(3, 1, 8, 8)).value)
    assert float(ssim_loss(pred, gt).value) == pytest.approx(frames)


# --------------------------------------------------------------------------- gradients


def _two_layer_net():
    specs = [LayerSpec("a", 3, 4, 3, bias=True, branches=("conv", "cpdc", "apdc", "rpdc")),
             LayerSpec("b", 4, 1, 3, branches=("conv", "cpdc"))]
    g = ModelGraph(ModelConfig(), TRAINING, {s.name: s for s in specs})
    g.params = init_params(g, 0, np.float64)
    r = np.random.default_rng(0)
    g.params["a.alpha"] = r.normal(size=4)
    g.params["a.bias"] = r.normal(size=4) * 0.1
    g.params["b.alpha"] = r.normal(size=2)
    return g


def test_two_layer_net_every_parameter():
    g = _two_layer_net()
    x = np.random.default_rng(1).uniform(size=(2, 3, 8, 8))
    gt = np.zeros((2, 1, 8, 8))
    gt[:, :, 2:6, 3:7] = 1

    def loss(v):
        h = ag.relu(apply_layer(g, v, "a", ag.Var(x)))
        pred = ag.sigmoid(apply_layer(g, v, "b", h))
        return compute_loss(pred, gt, COMBINED)[0]

    errors = check_gradients(loss, g.params)
    assert max(errors.values()) <= TOL, errors


@pytest.mark.parametrize("kind", ["cpdc", "apdc", "rpdc"])
def test_dual_path_gradient(rng, kind):
    x = rng.normal(size=(2, 3, 9, 9))
    w = rng.normal(size=(4, 3, 3, 3))
    probe = rng.normal(size=(2, 4, 9, 9))
    pad = 2 if kind == "rpdc" else 1
    desc = ConvDescriptor(padding=pad)

    def grad(path):
        wv = ag.Var(w, requires_grad=True)
        xv = ag.Var(x, requires_grad=True)
        if path == "direct":
            y = ag.pdc_direct(xv, wv, None, kind, desc)
        else:
            y = ag.conv2d(xv, ag.pdc_kernel(wv, kind), None, desc)
        ag.total(y * probe).backward()
        return wv.grad, xv.grad

    (gw1, gx1), (gw2, gx2) = grad("direct"), grad("transform")
    assert np.abs(gw1 - gw2).max() <= 1e-5
    assert np.abs(gx1 - gx2).max() <= 1e-5


# Deep nets put ReLU kinks within 1e-4 of some sampled entries; a smaller step keeps the
# central difference on one linear piece. Per-op and two-layer checks above use h=1e-4.
DEEP_H = 1e-6


def test_sdnet_gradients_sampled():
    g = build_sdnet(ModelConfig(**TOY), seed=1, dtype=np.float64)
    r = np.random.default_rng(2)
    for k in g.params:
        if k.endswith(".alpha") or k.endswith(".bias"):
            g.params[k] = r.normal(size=g.params[k].shape) * 0.1
    x, gt = square_dataset(1, 32, seed=3, dtype=np.float64)
    report, grads = backward(g, x, gt, COMBINED)
    assert set(grads) == set(g.params)
    errors = check_gradients(lambda v: compute_loss(sdnet_forward(g, x, v), gt, COMBINED)[0], g.params,
                             max_entries=2, seed=4, h=DEEP_H)
    assert max(errors.values()) <= TOL, {k: e for k, e in errors.items() if e > TOL}
    assert all(np.abs(grads[k]).max() > 0 for k in g.params if k.endswith(".alpha"))


def test_stdnet_gradients_sampled():
    g = build_stdnet(ModelConfig(arch="stdnet", **TOY), seed=1, dtype=np.float64)
    r = np.random.default_rng(5)
    for k in g.params:
        if k.endswith(".alpha"):
            g.params[k] = r.normal(size=g.params[k].shape)
    x, gt = square_dataset(1, 16, seed=6, dtype=np.float64)
    clip = boring_clip(x, 3) + r.normal(size=(1, 3, 3, 16, 16)) * 0.05
    gtc = boring_clip(gt, 3)
    names = {k: v for k, v in g.params.items() if k.startswith(("d1.", "d4.", "head"))}

    def loss(v):
        return compute_loss(stdnet_forward(g, clip, {**{k: ag.Var(a) for k, a in g.params.items()}, **v}), gtc)[0]

    errors = check_gradients(loss, names, max_entries=3, seed=7, h=DEEP_H)
    assert max(errors.values()) <= TOL, {k: e for k, e in errors.items() if e > TOL}


def test_backward_requires_training_form():
    g = build_sdnet(ModelConfig(**TOY), seed=0)
    x, gt = square_dataset(1, 32)
    with pytest.raises(GraphError, match="training-form"):
        backward(convert_model(g), x, gt)


def test_zero_loss_gives_zero_gradients():
    g = build_sdnet(ModelConfig(**TOY), seed=0, dtype=np.float64)
    g.params["head.bias"][:] = 60.0  # saturate the head so pred == 1 == gt after clamping
    x, _ = square_dataset(1, 32, dtype=np.float64)
    report, grads = backward(g, x, np.ones((1, 1, 32, 32)), LossConfig(weighted=False))
    assert report.total <= 1e-5
    assert max(np.abs(v).max() for v in grads.values()) <= 1e-8


# --------------------------------------------------------------------------- trainer


def test_adam_matches_hand_computed_step():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.1])}
    opt = Adam()
    opt.step(p, g, 0.1)
    # first bias-corrected step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"], [1.0 - 0.1, -2.0 + 0.1], atol=1e-6)
    assert step_lr(1e-3, 10, (5, 8)) == pytest.approx(1e-5)


def test_lr_zero_keeps_loss_constant():
    g = build_sdnet(ModelConfig(**TOY), seed=0)
    x, y = square_dataset(2, 32)
    curve = train_toy(g, x, y, 4, lr=0.0).curve
    assert max(curve) - min(curve) == 0.0


def test_training_is_deterministic():
    x, y = square_dataset(3, 32)
    runs = [train_toy(build_sdnet(ModelConfig(**TOY), seed=5), x, y, 5, batch_size=2, seed=9) for _ in range(2)]
    assert runs[0].curve == runs[1].curve
    for k in runs[0].graph.params:
        np.testing.assert_array_equal(runs[0].graph.params[k], runs[1].graph.params[k])


def test_training_input_checks():
    g = build_sdnet(ModelConfig(**TOY), seed=0)
    with pytest.raises(ValueError, match="empty"):
        train_toy(g, np.zeros((0, 3, 32, 32)), np.zeros((0, 1, 32, 32)), 1)
    x, y = square_dataset(2, 32)
    with pytest.raises(ShapeError):
        train_toy(g, x, y[:1], 1)
    with pytest.raises(GraphError):
        train_toy(convert_model(g), x, y, 1)


def test_short_training_reduces_loss_and_survives_conversion():
    x, y = square_dataset(2, 32)
    res = train_toy(build_sdnet(ModelConfig(**TOY), seed=0), x, y, 30, lr=3e-3)
    assert res.curve[-1] < 0.7 * res.curve[0]
    before = evaluate_loss(res.graph, x, y).total
    after = evaluate_loss(convert_model(res.graph), x, y).total
    assert abs(after - before) / before <= 1e-3


def test_two_stage_protocol():
    g = build_stdnet(ModelConfig(arch="stdnet", **TOY), seed=0)
    x, y = square_dataset(1, 32)
    clips, masks = boring_clip(x, 4), boring_clip(y, 4)
    first, second = train_two_stage(g, clips, masks, (2, 2))
    # stage one never touches the temporal branch
    for k, v in g.params.items():
        if ".wt." in k or ".ht." in k:
            np.testing.assert_array_equal(first.graph.params[k], v)
    assert any(not np.array_equal(second.graph.params[k], first.graph.params[k])
               for k in g.params if ".wt." in k)
    # backbone moves 100x slower in stage two
    k = "b02.pw.weight"
    d1 = np.abs(first.graph.params[k] - g.params[k]).max()
    d2 = np.abs(second.graph.params[k] - first.graph.params[k]).max()
    assert d2 < 0.05 * d1
    with pytest.raises(GraphError):
        train_two_stage(build_sdnet(ModelConfig(**TOY)), x, y, (1, 1))


def test_square_dataset_and_boring_clip():
    x, y = square_dataset(4, 64, seed=0)
    assert x.shape == (4, 3, 64, 64) and y.shape == (4, 1, 64, 64)
    assert set(np.unique(y)) == {0.0, 1.0}
    assert x[y.repeat(3, axis=1) == 1].min() >= 0.7 and x[y.repeat(3, axis=1) == 0].max() <= 0.2
    c = boring_clip(x, 8)
    assert c.shape == (4, 3, 8, 64, 64) and np.all(c == c[:, :, :1])
