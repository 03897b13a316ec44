import math
import struct

import numpy as np
import pytest

from crowdpoint.core import (
    DataValidationError,
    DenseGrid,
    DivergenceError,
    FormatError,
    ImageRecord,
    PointAnnotation,
    Rng,
)
from crowdpoint.losses import LossConfig
from crowdpoint.micronet import (
    Adam,
    Conv2d,
    Deconv2d,
    MicroNet,
    PReLU,
    ReLU,
    Sigmoid,
    TrainConfig,
    _flip_horizontal,
    _random_crop,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_curve,
)
from crowdpoint.supervision import SupervisionConfig

from oracles import fd_grad, rel_err


def _bind(layer, seed=0):
    params = [np.zeros(s) for s in layer.param_shapes()]
    grads = [np.zeros(s) for s in layer.param_shapes()]
    layer.bind(params, grads)
    layer.init_params(Rng(seed))
    return params, grads


def _image(size, seed=0):
    rng = np.random.default_rng(seed)
    return DenseGrid(rng.uniform(0.0, 1.0, (size, size)))


def _scene(size=8, seed=0, heads=((3.2, 4.1), (6.0, 2.0))):
    pts = tuple(PointAnnotation(x, y, 4.0, 4.0) for x, y in heads)
    return ImageRecord(f"s{seed}", size, size, pts, _image(size, seed))


# --- single layers: values and exact gradients -----------------------------------

def _check_layer_grads(layer, x, seed=3):
    params, grads = _bind(layer, seed)
    rng = np.random.default_rng(seed + 1)
    out = layer.forward(x)
    proj = rng.normal(0.0, 1.0, out.shape)

    dx = layer.backward(proj)
    fd_dx = fd_grad(lambda a: float((layer.forward(a) * proj).sum()), x)
    assert rel_err(dx, fd_dx, 1e-6).max() < 1e-5

    for p, g in zip(params, grads):
        def f(vals, p=p):
            p[...] = vals
            return float((layer.forward(x) * proj).sum())
        fd_p = fd_grad(f, p.copy())
        assert rel_err(g, fd_p, 1e-6).max() < 1e-5


def test_conv_gradients_stride_1():
    rng = np.random.default_rng(0)
    _check_layer_grads(Conv2d(2, 3, 3, 1, 1), rng.normal(0, 1, (2, 5, 6)))


def test_conv_gradients_stride_2():
    rng = np.random.default_rng(1)
    _check_layer_grads(Conv2d(2, 2, 3, 2, 1), rng.normal(0, 1, (2, 6, 6)))


def test_deconv_gradients():
    rng = np.random.default_rng(2)
    _check_layer_grads(Deconv2d(2, 2, 4, 2, 1), rng.normal(0, 1, (2, 3, 4)))


def test_prelu_gradients():
    rng = np.random.default_rng(3)
    # keep activations away from the kink at zero
    x = rng.normal(0, 1, (2, 4, 4))
    x[np.abs(x) < 0.1] = 0.5
    _check_layer_grads(PReLU(2), x)


def test_sigmoid_gradients():
    rng = np.random.default_rng(4)
    _check_layer_grads(Sigmoid(), rng.normal(0, 1, (1, 4, 5)))


def test_conv_output_shapes():
    layer = Conv2d(1, 4, 3, 2, 1)
    _bind(layer)
    assert layer.forward(np.zeros((1, 10, 16))).shape == (4, 5, 8)
    layer = Conv2d(1, 2, 1, 1, 0)
    _bind(layer)
    assert layer.forward(np.zeros((1, 7, 7))).shape == (2, 7, 7)


def test_deconv_exactly_doubles_spatial_size():
    layer = Deconv2d(3, 2, 4, 2, 1)
    _bind(layer)
    assert layer.forward(np.zeros((3, 5, 8))).shape == (2, 10, 16)


def test_relu_masks_negatives():
    layer = ReLU()
    x = np.array([[[-1.0, 2.0], [0.0, -3.0]]])
    assert np.array_equal(layer.forward(x), [[[0.0, 2.0], [0.0, 0.0]]])
    g = layer.backward(np.ones_like(x))
    assert np.array_equal(g, [[[0.0, 1.0], [0.0, 0.0]]])


def test_prelu_uses_per_channel_slopes():
    layer = PReLU(2)
    params, _ = _bind(layer)
    params[0][:] = [0.5, 0.1]
    x = np.full((2, 2, 2), -2.0)
    out = layer.forward(x)
    assert np.allclose(out[0], -1.0) and np.allclose(out[1], -0.2)


# --- initialization ------------------------------------------------------------------

def test_conv_init_is_bounded_uniform():
    layer = Conv2d(8, 4, 3)
    params, _ = _bind(layer, seed=9)
    bound = 1.0 / math.sqrt(8 * 9)
    w, b = params
    assert np.abs(w).max() <= bound
    assert w.std() > 0.25 * bound  # actually random, not collapsed
    assert np.array_equal(b, np.zeros(4))


def test_deconv_init_bound_accounts_for_stride_overlap():
    layer = Deconv2d(4, 3, 4, 2, 1)
    params, _ = _bind(layer, seed=9)
    assert np.abs(params[0]).max() <= 0.25  # 1/sqrt(4 * (4/2)**2)


def test_default_net_initial_output_heads():
    net = MicroNet()
    net.init_params(Rng(0))
    heat, dens = net.forward(_image(16))
    # localization bias starts at logit(0.01): background-dominated start
    assert float(heat.values.mean()) == pytest.approx(0.01, abs=0.02)
    assert net.loc_head[4].bias[0] == pytest.approx(math.log(0.01 / 0.99))
    assert all(s == 0.25 for layer in (net.count_head[1], net.count_head[3])
               for s in layer.slope)


# --- the assembled net -----------------------------------------------------------------

def test_parameter_counts():
    assert MicroNet().n_params == 25755
    assert MicroNet.tiny().n_params == 460


def test_layer_arrays_are_views_into_flat_vector():
    net = MicroNet.tiny()
    net.init_params(Rng(1))
    w = net.trunk[0].weight
    net.params[...] = 0.0
    assert not w.any()
    net.params[...] = 1.0
    assert (w == 1.0).all()


def test_forward_shapes_and_ranges():
    net = MicroNet.tiny()
    net.init_params(Rng(2))
    heat, dens = net.forward(_image(8))
    assert heat.shape == (8, 8)
    assert dens.shape == (4, 4)
    assert 0.0 < heat.values.min() and heat.values.max() < 1.0

    net = MicroNet()
    net.init_params(Rng(2))
    heat, dens = net.forward(_image(16))
    assert heat.shape == (16, 16)
    assert dens.shape == (8, 8)


def test_forward_rejects_odd_input():
    net = MicroNet.tiny()
    net.init_params(Rng(0))
    with pytest.raises(DataValidationError):
        net.forward(DenseGrid(np.zeros((9, 8))))
    with pytest.raises(DataValidationError):
        net.forward(DenseGrid(np.zeros((8, 10 + 1))))


def test_backward_rejects_mismatched_gradient_shapes():
    net = MicroNet.tiny()
    net.init_params(Rng(0))
    net.forward(_image(8))
    with pytest.raises(DataValidationError):
        net.backward(DenseGrid(np.zeros((8, 8))), DenseGrid(np.zeros((5, 5))))


def test_full_net_gradients_match_finite_differences():
    net = MicroNet.tiny()
    net.init_params(Rng(7))
    x = _image(8, seed=7).values
    rng = np.random.default_rng(8)
    target_h = rng.uniform(0, 1, (8, 8))
    target_d = rng.uniform(0, 1, (4, 4))

    def loss_at(params):
        net.params[...] = params
        h, d = net._forward(x)
        return float(((h - target_h) ** 2).sum() + ((d - target_d) ** 2).sum())

    base = net.params.copy()
    loss_at(base)
    h, d = net._forward(x)
    net.zero_grads()
    net._backward(2.0 * (h - target_h), 2.0 * (d - target_d))
    got = net.grads.copy()
    fd = fd_grad(loss_at, base)
    assert rel_err(got, fd, 1e-5).max() < 1e-4


def test_backward_accumulates_until_zeroed():
    net = MicroNet.tiny()
    net.init_params(Rng(3))
    heat, dens = net.forward(_image(8))
    gh = DenseGrid(np.ones((8, 8)))
    gd = DenseGrid(np.ones((4, 4)))
    net.zero_grads()
    net.backward(gh, gd)
    once = net.grads.copy()
    net.backward(gh, gd)
    assert np.allclose(net.grads, 2.0 * once, rtol=1e-12, atol=0)
    net.zero_grads()
    assert not net.grads.any()


def test_describe_and_digest():
    tiny = MicroNet.tiny()
    assert tiny.describe() == (
        "trunk[conv(1>3,k3,s1,p1)|relu|conv(3>4,k3,s2,p1)|relu];"
        "loc[deconv(4>3,k4,s2,p1)|relu|conv(3>1,k1,s1,p0)|sigmoid];"
        "count[conv(4>3,k3,s1,p1)|prelu(3)|conv(3>1,k1,s1,p0)|prelu(1)]"
    )
    assert len(tiny.digest()) == 32
    assert tiny.digest() != MicroNet().digest()
    assert MicroNet.tiny().digest() == tiny.digest()


# --- optimizer --------------------------------------------------------------------------

def test_adam_first_step_is_signed_learning_rate():
    opt = Adam(3, lr=0.01)
    params = np.array([1.0, -2.0, 0.5])
    grads = np.array([10.0, -3.0, 0.0])
    opt.step(params, grads)
    assert params[0] == pytest.approx(1.0 - 0.01, rel=1e-6)
    assert params[1] == pytest.approx(-2.0 + 0.01, rel=1e-6)
    assert params[2] == 0.5


def test_adam_matches_hand_computed_second_step():
    opt = Adam(1, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    params = np.array([0.0])
    opt.step(params, np.array([1.0]))
    opt.step(params, np.array([2.0]))
    m2 = 0.9 * 0.1 + 0.1 * 2.0
    v2 = 0.999 * 0.001 + 0.001 * 4.0
    m_hat = m2 / (1.0 - 0.9**2)
    v_hat = v2 / (1.0 - 0.999**2)
    want = -0.1 * 1.0 / (math.sqrt(1.0) + 1e-8) - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert params[0] == pytest.approx(want, rel=1e-12)


def test_adam_zero_lr_freezes_parameters():
    opt = Adam(4, lr=0.0)
    params = np.arange(4.0)
    opt.step(params, np.ones(4))
    assert np.array_equal(params, np.arange(4.0))


def test_adam_rejects_bad_hyperparameters():
    with pytest.raises(DataValidationError):
        Adam(1, lr=-1e-3)
    with pytest.raises(DataValidationError):
        Adam(1, beta1=1.0)
    with pytest.raises(DataValidationError):
        Adam(1, eps=0.0)


# --- augmentation -----------------------------------------------------------------------

def test_random_crop_slices_pixels_and_remaps_points():
    rec = _scene(16, seed=5, heads=((2.0, 3.0), (12.0, 13.0), (9.0, 1.0)))
    rng = Rng(99)
    out = _random_crop(rec, 8, rng)
    assert out.width == out.height == 8
    assert out.pixels.shape == (8, 8)
    full = rec.pixels.values
    window = None
    for oy in range(9):
        for ox in range(9):
            if np.array_equal(full[oy:oy + 8, ox:ox + 8], out.pixels.values):
                window = (ox, oy)
    assert window is not None
    ox, oy = window
    want = [(p.x - ox, p.y - oy) for p in rec.points
            if 0 <= p.x - ox < 8 and 0 <= p.y - oy < 8]
    assert [(p.x, p.y) for p in out.points] == want


def test_random_crop_full_size_is_identity():
    rec = _scene(8, seed=6)
    out = _random_crop(rec, 8, Rng(0))
    assert np.array_equal(out.pixels.values, rec.pixels.values)
    assert out.points == rec.points


def test_random_crop_rejects_oversized_window():
    with pytest.raises(DataValidationError):
        _random_crop(_scene(8), 10, Rng(0))


def test_flip_mirrors_pixels_and_x_coordinates():
    rec = _scene(8, seed=7, heads=((1.0, 2.0), (6.5, 4.0)))
    out = _flip_horizontal(rec)
    assert np.array_equal(out.pixels.values, rec.pixels.values[:, ::-1])
    assert [(p.x, p.y) for p in out.points] == [(6.0, 2.0), (0.5, 4.0)]
    back = _flip_horizontal(out)
    assert np.array_equal(back.pixels.values, rec.pixels.values)
    assert [(p.x, p.y) for p in back.points] == [(1.0, 2.0), (6.5, 4.0)]


# --- training loop ----------------------------------------------------------------------

def _tiny_cfg(**kw):
    base = dict(epochs=3, batch=2, lr=1e-3, crop=8, flip_prob=0.5, seed=11)
    base.update(kw)
    return TrainConfig(**base)


def test_train_returns_one_curve_row_per_epoch():
    net = MicroNet.tiny()
    net.init_params(Rng(0))
    data = [_scene(8, s) for s in range(3)]
    curve = train(net, data, _tiny_cfg())
    assert len(curve) == 3
    arr = np.array(curve)
    assert np.isfinite(arr).all()
    # row totals recombine the three parts with the default weights
    cfg = LossConfig()
    want = arr[:, 0] + cfg.lambda1 * arr[:, 1] + cfg.lambda2 * arr[:, 2]
    assert np.allclose(arr[:, 3], want, rtol=1e-9)


def test_train_is_deterministic_given_seed():
    data = [_scene(8, s) for s in range(2)]
    runs = []
    for _ in range(2):
        net = MicroNet.tiny()
        net.init_params(Rng(4))
        curve = train(net, data, _tiny_cfg(seed=21))
        runs.append((net.params.copy(), curve))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]

    net = MicroNet.tiny()
    net.init_params(Rng(4))
    other = train(net, data, _tiny_cfg(seed=22))
    assert other != runs[0][1]


def test_train_zero_epochs_keeps_initialization():
    net = MicroNet.tiny()
    net.init_params(Rng(5))
    before = net.params.copy()
    curve = train(net, [_scene(8, 0)], _tiny_cfg(epochs=0))
    assert curve == []
    assert np.array_equal(net.params, before)


def test_train_descends_on_a_single_scene():
    net = MicroNet.tiny()
    net.init_params(Rng(6))
    data = [_scene(8, 3)]
    curve = train(net, data, _tiny_cfg(epochs=80, batch=1, lr=1e-2,
                                       flip_prob=0.0, seed=2))
    assert curve[-1][3] < 0.5 * curve[0][3]


def test_train_raises_divergence_on_numerical_blowup():
    net = MicroNet.tiny()
    net.init_params(Rng(7))
    with pytest.raises(DivergenceError), np.errstate(invalid="ignore", over="ignore"):
        train(net, [_scene(8, 1)], _tiny_cfg(epochs=3, batch=1, lr=1e150))


def test_train_validates_dataset():
    net = MicroNet.tiny()
    net.init_params(Rng(0))
    with pytest.raises(DataValidationError):
        train(net, [], _tiny_cfg())
    no_pixels = ImageRecord("p", 8, 8, (PointAnnotation(1, 1, 2, 2),))
    with pytest.raises(DataValidationError):
        train(net, [no_pixels], _tiny_cfg())


def test_train_config_validation():
    with pytest.raises(DataValidationError):
        TrainConfig(epochs=-1)
    with pytest.raises(DataValidationError):
        TrainConfig(batch=0)
    with pytest.raises(DataValidationError):
        TrainConfig(crop=7)
    with pytest.raises(DataValidationError):
        TrainConfig(crop=0)
    with pytest.raises(DataValidationError):
        TrainConfig(flip_prob=1.5)
    with pytest.raises(DataValidationError):
        TrainConfig(lr=-1.0)


def test_loss_curve_file_round_trips_floats_exactly(tmp_path):
    curve = [(0.5, 0.25, 0.125, 1.0),
             (0.1, 0.0, 1e-07, 0.30000000000000004)]
    path = tmp_path / "curve.csv"
    write_loss_curve(curve, path)
    text = path.read_text()
    assert text == (
        "epoch,l_nsf,l_fp,l_r,total\n"
        "1,0.5,0.25,0.125,1.0\n"
        "2,0.1,0.0,1e-07,0.30000000000000004\n"
    )
    rows = [line.split(",") for line in text.splitlines()[1:]]
    back = [tuple(float(v) for v in row[1:]) for row in rows]
    assert back == curve


# --- checkpoints -------------------------------------------------------------------------

def test_checkpoint_round_trip_is_exact(tmp_path):
    net = MicroNet.tiny()
    net.init_params(Rng(13))
    net.params[0] = -0.123456789123456789
    path = tmp_path / "model.dpw"
    save_checkpoint(net, path)
    assert path.stat().st_size == 4 + 32 + 8 + 8 * net.n_params

    other = MicroNet.tiny()
    load_checkpoint(other, path)
    assert np.array_equal(other.params, net.params)


def test_checkpoint_rejects_bad_magic(tmp_path):
    net = MicroNet.tiny()
    net.init_params(Rng(0))
    path = tmp_path / "model.dpw"
    save_checkpoint(net, path)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="not a checkpoint"):
        load_checkpoint(net, path)


def test_checkpoint_rejects_architecture_mismatch(tmp_path):
    tiny = MicroNet.tiny()
    tiny.init_params(Rng(0))
    path = tmp_path / "model.dpw"
    save_checkpoint(tiny, path)
    with pytest.raises(FormatError, match="architecture"):
        load_checkpoint(MicroNet(), path)


def test_checkpoint_rejects_wrong_count(tmp_path):
    net = MicroNet.tiny()
    net.init_params(Rng(0))
    path = tmp_path / "model.dpw"
    save_checkpoint(net, path)
    blob = bytearray(path.read_bytes())
    blob[36:44] = struct.pack("<Q", net.n_params + 1)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="parameters"):
        load_checkpoint(net, path)


def test_checkpoint_rejects_truncated_payload(tmp_path):
    net = MicroNet.tiny()
    net.init_params(Rng(0))
    path = tmp_path / "model.dpw"
    save_checkpoint(net, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(net, path)
