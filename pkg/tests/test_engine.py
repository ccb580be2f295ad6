import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtmxai import engine
from dtmxai.engine import Conv3d, Dense, GlobalAvgPool, MaxPool3d, NetworkSpec, ReLU, Sigmoid
from dtmxai.errors import ConfigurationError, ShapeError, StateError

from conftest import small_net


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop 3D cross-correlation of one sample ``(C, D, H, W)``."""
    c, d, h, wd = x.shape
    o = w.shape[0]
    kd, kh, kw = w.shape[2:]
    xp = np.zeros((c, d + 2 * pad[0], h + 2 * pad[1], wd + 2 * pad[2]))
    xp[:, pad[0]:pad[0] + d, pad[1]:pad[1] + h, pad[2]:pad[2] + wd] = x
    od = (xp.shape[1] - kd) // stride[0] + 1
    oh = (xp.shape[2] - kh) // stride[1] + 1
    ow = (xp.shape[3] - kw) // stride[2] + 1
    out = np.zeros((o, od, oh, ow))
    for oc in range(o):
        for i in range(od):
            for j in range(oh):
                for k in range(ow):
                    acc = b[oc]
                    for ic in range(c):
                        for a in range(kd):
                            for bb in range(kh):
                                for cc in range(kw):
                                    acc += (w[oc, ic, a, bb, cc]
                                            * xp[ic, i * stride[0] + a, j * stride[1] + bb,
                                                 k * stride[2] + cc])
                    out[oc, i, j, k] = acc
    return out


def trilinear_oracle(vol, target):
    """Closed-form corner-aligned trilinear value at every target voxel."""
    out = np.empty(target)
    n = vol.shape
    for i in range(target[0]):
        for j in range(target[1]):
            for k in range(target[2]):
                pos = [idx * (ni - 1) / (ti - 1) if ti > 1 else 0.0
                       for idx, ni, ti in zip((i, j, k), n, target)]
                lo = [min(int(np.floor(p)), ni - 1) for p, ni in zip(pos, n)]
                hi = [min(l + 1, ni - 1) for l, ni in zip(lo, n)]
                f = [p - l for p, l in zip(pos, lo)]
                val = 0.0
                for da in (0, 1):
                    for db in (0, 1):
                        for dc in (0, 1):
                            wt = ((f[0] if da else 1 - f[0]) * (f[1] if db else 1 - f[1])
                                  * (f[2] if dc else 1 - f[2]))
                            val += wt * vol[(hi if da else lo)[0], (hi if db else lo)[1],
                                            (hi if dc else lo)[2]]
                out[i, j, k] = val
    return out


def single_conv(kernel=(3, 3, 3), stride=(1, 1, 1), padding=(1, 1, 1), cin=1, cout=1):
    return NetworkSpec((Conv3d(cin, cout, kernel, stride, padding, cam_target=True),))


# -- forward ---------------------------------------------------------------


def test_identity_kernel_reproduces_input(rng):
    spec = single_conv()
    w = np.zeros((1, 1, 3, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1, 1] = 1.0
    x = rng.normal(size=(1, 5, 6, 4)).astype(np.float32)
    out, _ = engine.forward(spec, {"0.weight": w, "0.bias": np.zeros(1, np.float32)}, x)
    np.testing.assert_array_equal(out[0], x)


def test_zero_input_gives_bias(rng):
    spec = single_conv(cout=2)
    params = engine.init_params(spec, 0)
    params["0.bias"] = np.array([0.25, -1.5], dtype=np.float32)
    out, _ = engine.forward(spec, params, np.zeros((1, 4, 4, 4), np.float32))
    np.testing.assert_array_equal(out[0, 0], 0.25)
    np.testing.assert_array_equal(out[0, 1], -1.5)


@pytest.mark.parametrize("stride,pad", [((1, 1, 1), (1, 1, 1)), ((2, 1, 2), (0, 1, 1)),
                                        ((1, 2, 1), (2, 0, 1))])
def test_conv_matches_nested_loop_oracle(rng, stride, pad):
    spec = single_conv(stride=stride, padding=pad, cin=2, cout=3)
    params = engine.init_params(spec, 4)
    params["0.bias"] = rng.normal(size=3).astype(np.float32)
    x = rng.normal(size=(2, 6, 5, 7)).astype(np.float32)
    out, _ = engine.forward(spec, params, x)
    ref = conv_oracle(x.astype(np.float64), params["0.weight"].astype(np.float64),
                      params["0.bias"].astype(np.float64), stride, pad)
    np.testing.assert_allclose(out[0], ref, atol=1e-5)


def test_two_layer_net_matches_oracle(rng):
    # 1x8x8x4 input through conv -> relu -> conv(cam) -> gap -> dense
    spec = NetworkSpec((Conv3d(1, 2, 3, 1, 1), ReLU(), Conv3d(2, 3, 3, 1, 1, cam_target=True),
                        GlobalAvgPool(), Dense(3, 1)))
    params = engine.init_params(spec, 9)
    for k in params:
        if k.endswith("bias"):
            params[k] = rng.normal(size=params[k].shape).astype(np.float32) * 0.1
    x = rng.normal(size=(1, 8, 8, 4)).astype(np.float32)
    out, _ = engine.forward(spec, params, x)
    p = {k: v.astype(np.float64) for k, v in params.items()}
    a = np.maximum(conv_oracle(x, p["0.weight"], p["0.bias"], (1, 1, 1), (1, 1, 1)), 0)
    a = conv_oracle(a, p["2.weight"], p["2.bias"], (1, 1, 1), (1, 1, 1))
    ref = a.reshape(3, -1).mean(axis=1) @ p["4.weight"] + p["4.bias"]
    np.testing.assert_allclose(out[0], ref, atol=1e-5)


def test_shape_mismatch_names_layer():
    spec = NetworkSpec((Conv3d(1, 2, 3, 1, 0, cam_target=True), GlobalAvgPool(), Dense(2, 1)))
    with pytest.raises(ShapeError, match=r"layer 0 \(conv3d\)"):
        engine.forward(spec, engine.init_params(spec, 0), np.zeros((1, 2, 2, 2), np.float32))
    with pytest.raises(ShapeError, match="layer 0"):
        engine.forward(spec, engine.init_params(spec, 0), np.zeros((3, 4, 4, 4), np.float32))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        NetworkSpec((Conv3d(1, 2), ReLU()))
    with pytest.raises(ConfigurationError):
        NetworkSpec((Conv3d(1, 2, cam_target=True), Conv3d(2, 2, cam_target=True)))
    with pytest.raises(ShapeError, match="layer 2"):
        NetworkSpec((Conv3d(1, 2, cam_target=True), ReLU(), Conv3d(3, 2)))
    with pytest.raises(ShapeError, match="dense"):
        NetworkSpec((Conv3d(1, 2, cam_target=True), Dense(2, 1)))


def test_spec_round_trip():
    spec = engine.default_network_spec()
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    assert spec.cam_index == 3
    assert spec.capture_index == 4


def test_forward_is_deterministic(rng):
    spec = engine.default_network_spec()
    params = engine.init_params(spec, 3)
    x = rng.normal(size=(2, 1, 8, 8, 4)).astype(np.float32)
    a, _ = engine.forward(spec, params, x)
    b, _ = engine.forward(spec, params, x)
    assert a.tobytes() == b.tobytes()


def test_cam_capture_equals_recomputed_activation(rng):
    spec = engine.default_network_spec()
    params = engine.init_params(spec, 5)
    x = rng.normal(size=(1, 1, 8, 8, 4)).astype(np.float32)
    _, tape = engine.forward(spec, params, x)
    h = x
    for i in range(spec.capture_index + 1):
        h, _ = engine._layer_forward(spec.layers[i], params, i, h)
    np.testing.assert_array_equal(tape.cam_activation, h)
    out = engine.forward_from_cam(spec, params, tape.cam_activation)
    np.testing.assert_array_equal(out, tape.output)


def test_init_params_glorot_bounds():
    spec = engine.default_network_spec()
    params = engine.init_params(spec, 0)
    lim = np.sqrt(6.0 / (8 * 27 + 16 * 27))
    assert np.abs(params["3.weight"]).max() <= lim
    assert not params["3.bias"].any()
    assert sorted(params) == sorted(engine.param_names(spec))
    np.testing.assert_array_equal(params["0.weight"], engine.init_params(spec, 0)["0.weight"])


def test_nan_rejected():
    with pytest.raises(ValueError):
        engine.as_tensor([1.0, np.nan])


# -- backward --------------------------------------------------------------


def test_backward_before_forward():
    with pytest.raises(StateError):
        engine.backward(None, 1.0)
    spec = single_conv()
    tape = engine.Tape(spec, engine.init_params(spec, 0), 0)
    with pytest.raises(StateError):
        engine.backward(tape, 1.0)


def test_constant_network_has_zero_gradients(rng):
    spec = small_net()
    params = {k: np.zeros_like(v) for k, v in engine.init_params(spec, 0).items()}
    params["6.bias"][:] = 0.7
    x = rng.normal(size=(1, 1, 4, 4, 4)).astype(np.float32)
    out, tape = engine.forward(spec, params, x)
    np.testing.assert_array_equal(out, np.float32(0.7))
    g = engine.backward(tape, 1.0)
    for k, v in g.params.items():
        if k != "6.bias":
            assert not v.any(), k
    assert not g.cam.any()
    assert not g.input.any()


def test_dense_weight_gradient_is_input():
    spec = NetworkSpec((Conv3d(1, 3, 1, 1, 0, cam_target=True), GlobalAvgPool(), Dense(3, 1)))
    params = engine.init_params(spec, 1)
    x = np.ones((1, 2, 2, 2), np.float32)
    params["0.weight"] = np.array([1.0, 2.0, -3.0], np.float32).reshape(3, 1, 1, 1, 1)
    out, tape = engine.forward(spec, params, x)
    g = engine.backward(tape, 1.0)
    np.testing.assert_array_equal(g.params["2.weight"][:, 0], [1.0, 2.0, -3.0])
    np.testing.assert_array_equal(g.params["2.bias"], [1.0])


def fd_check(spec, params, x, seed_grad, eps=1e-3, rtol=1e-3):
    """Central differences of sum(seed * f) against the analytic reverse pass."""
    out, tape = engine.forward(spec, params, x)
    g = engine.backward(tape, seed_grad)

    def f(p, xx):
        o, _ = engine.forward(spec, p, xx)
        return float(np.sum(o * seed_grad))

    def compare(analytic, numeric):
        mask = np.abs(numeric) > 1e-6
        np.testing.assert_allclose(analytic[mask], numeric[mask], rtol=rtol, atol=1e-8)

    for name, val in params.items():
        num = np.zeros_like(val)
        for idx in np.ndindex(val.shape):
            p = {k: v.copy() for k, v in params.items()}
            p[name][idx] += eps
            up = f(p, x)
            p[name][idx] -= 2 * eps
            num[idx] = (up - f(p, x)) / (2 * eps)
        compare(g.params[name], num)
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xx = x.copy()
        xx[idx] += eps
        up = f(params, xx)
        xx[idx] -= 2 * eps
        num[idx] = (up - f(params, xx)) / (2 * eps)
    compare(g.input, num)


LAYER_NETS = {
    "conv_stride1": lambda: NetworkSpec((Conv3d(2, 2, 3, 1, 1, cam_target=True),)),
    "conv_strided": lambda: NetworkSpec((Conv3d(2, 3, (2, 3, 2), (2, 1, 2), (0, 1, 1),
                                                cam_target=True),)),
    "relu": lambda: NetworkSpec((Conv3d(1, 2, 1, 1, 0, cam_target=True), ReLU())),
    "maxpool": lambda: NetworkSpec((Conv3d(1, 2, 1, 1, 0, cam_target=True),
                                    MaxPool3d((2, 2, 2), (2, 2, 2)))),
    "gap_dense": lambda: NetworkSpec((Conv3d(1, 2, 1, 1, 0, cam_target=True), GlobalAvgPool(),
                                      Dense(2, 3))),
    "sigmoid": lambda: NetworkSpec((Conv3d(1, 2, 1, 1, 0, cam_target=True), Sigmoid())),
}


@pytest.mark.parametrize("name", sorted(LAYER_NETS))
@pytest.mark.parametrize("seed", [0, 1])
def test_layer_gradients_match_finite_differences(name, seed):
    spec = LAYER_NETS[name]()
    rng = np.random.default_rng(seed)
    params = {k: v.astype(np.float64) for k, v in engine.init_params(spec, seed).items()}
    for k in params:
        if k.endswith("bias"):
            params[k] = rng.normal(size=params[k].shape) * 0.3
    cin = spec.layers[0].in_channels
    # distinct values on a grid keep max-pool ties and ReLU zeros out of reach of the step
    x = rng.permutation(np.linspace(-2, 2, cin * 4 * 4 * 4)).reshape(cin, 4, 4, 4)[None]
    if name == "relu":
        # keep pre-activations away from zero
        params["0.bias"] = np.array([0.013, -0.017])
    out, _ = engine.forward(spec, params, x)
    seed_grad = rng.normal(size=out.shape)
    fd_check(spec, params, x, seed_grad, eps=1e-4)


def test_full_network_gradients(rng):
    spec = small_net()
    params = {k: v.astype(np.float64) for k, v in engine.init_params(spec, 2).items()}
    params["3.bias"] = np.array([0.3, 0.2, 0.25, 0.35])
    x = rng.permutation(np.linspace(-2, 2, 64)).reshape(1, 1, 4, 4, 4)
    fd_check(spec, params, x, np.ones((1, 1)), eps=1e-5)


def test_cam_gradient_matches_finite_differences(rng):
    spec = small_net()
    params = {k: v.astype(np.float64) for k, v in engine.init_params(spec, 6).items()}
    x = rng.normal(size=(1, 1, 4, 4, 4))
    out, tape = engine.forward(spec, params, x)
    g = engine.backward(tape, 1.0)
    A = tape.cam_activation
    assert g.cam.shape == A.shape
    for idx in list(np.ndindex(A.shape))[:40]:
        a = A.copy()
        a[idx] += 1e-6
        up = engine.forward_from_cam(spec, params, a)[0, 0]
        a[idx] -= 2e-6
        num = (up - engine.forward_from_cam(spec, params, a)[0, 0]) / 2e-6
        np.testing.assert_allclose(g.cam[idx], num, rtol=1e-6, atol=1e-12)


def test_gradient_shapes_match_parameters(rng):
    spec = engine.default_network_spec()
    params = engine.init_params(spec, 0)
    out, tape = engine.forward(spec, params, rng.normal(size=(3, 1, 8, 8, 4)).astype(np.float32))
    g = engine.backward(tape, np.ones_like(out))
    for k, v in params.items():
        assert g.params[k].shape == v.shape
        assert g.params[k].dtype == v.dtype


# -- upsampling ------------------------------------------------------------


def test_upsample_constant():
    out = engine.trilinear_upsample(np.full((2, 3, 2), 1.75, np.float32), (7, 9, 5))
    np.testing.assert_allclose(out, 1.75, rtol=0, atol=1e-7)


def test_upsample_midpoint():
    vol = np.zeros((2, 2, 2))
    vol[0, 0, 0] = vol[1, 1, 1] = vol[0, 1, 1] = vol[1, 0, 0] = 1.0
    out = engine.trilinear_upsample(vol, (3, 3, 3))
    assert out[1, 1, 1] == pytest.approx(0.5)


def test_upsample_matches_closed_form_at_reference_scale(rng):
    vol = rng.normal(size=(4, 4, 2)).astype(np.float32)
    out = engine.trilinear_upsample(vol, (128, 128, 28))
    ref = trilinear_oracle(vol.astype(np.float64), (128, 128, 28))
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_upsample_rejects_shrinking():
    with pytest.raises(ShapeError):
        engine.trilinear_upsample(np.zeros((4, 4, 4)), (3, 4, 4))
    with pytest.raises(ShapeError):
        engine.trilinear_upsample(np.zeros((4, 4)), (4, 4))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_upsample_within_bounds(a, b, c, seed):
    vol = np.random.default_rng(seed).normal(size=(a, b, c)).astype(np.float32)
    out = engine.trilinear_upsample(vol, (a + 3, b * 2, c + 1))
    assert out.min() >= vol.min() and out.max() <= vol.max()
