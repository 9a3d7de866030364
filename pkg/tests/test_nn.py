import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ganshot.tensor_core as tc
from ganshot import nn
from ganshot.tensor_core import Tensor


def small_cnn():
    return nn.ModelSpec((3, 8, 8), (
        nn.conv(4, 3, 1, 1), nn.batchnorm(), nn.act("leaky_relu"),
        nn.conv(6, 4, 2, 1, bias=False), nn.act("tanh"),
        nn.maxpool(2), nn.flatten(), nn.dense(5), nn.act("sigmoid"),
    ))


def test_init_is_deterministic():
    a = nn.init_params(small_cnn(), seed=11)
    b = nn.init_params(small_cnn(), seed=11)
    assert list(a) == list(b)
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes()


def test_init_biases_zero_and_bn_identity():
    params = nn.init_params(small_cnn(), seed=3)
    for name, t in params.items():
        if name.endswith(".bias"):
            assert not t.data.any(), name
    np.testing.assert_array_equal(params["1.weight"].data, 1.0)
    np.testing.assert_array_equal(params["1.running_var"].data, 1.0)


def test_init_weight_statistics():
    spec = nn.ModelSpec((100,), (nn.dense(100),))
    w = nn.init_params(spec, seed=0)["0.weight"].data
    assert w.size == 10_000
    assert -0.002 < w.mean() < 0.002
    assert 0.018 < w.std() < 0.022


def test_inconsistent_spec_names_layer():
    with pytest.raises(nn.SpecError, match="layer 2"):
        nn.ModelSpec((1, 4, 4), (nn.conv(2, 3), nn.act("relu"), nn.conv(2, 5)))
    with pytest.raises(nn.SpecError, match="layer 0"):
        nn.ModelSpec((8,), (nn.conv(2, 3),))


def test_identity_spec():
    spec = nn.ModelSpec((2, 3, 3))
    x = Tensor(np.random.default_rng(0).normal(size=(4, 2, 3, 3)).astype(np.float32))
    out = nn.forward(spec, nn.init_params(spec, 0), x)
    np.testing.assert_array_equal(out.data, x.data)


def test_forward_input_mismatch():
    spec = small_cnn()
    with pytest.raises(tc.DimensionError):
        nn.forward(spec, nn.init_params(spec, 0), Tensor(np.zeros((1, 3, 9, 9))))


def test_eval_mode_is_pure():
    spec = small_cnn()
    params = nn.init_params(spec, 0)
    rng = np.random.default_rng(1)
    nn.forward(spec, params, Tensor(rng.normal(size=(6, 3, 8, 8)).astype(np.float32)), mode="train")
    before = params.snapshot()
    x = Tensor(rng.normal(size=(3, 3, 8, 8)).astype(np.float32))
    y1 = nn.forward(spec, params, x, mode="eval").data
    y2 = nn.forward(spec, params, x, mode="eval").data
    assert y1.tobytes() == y2.tobytes()
    assert all(before[n].tobytes() == params[n].data.tobytes() for n in params)


def test_train_mode_updates_running_stats_unless_frozen():
    spec = small_cnn()
    params = nn.init_params(spec, 0)
    x = Tensor(np.random.default_rng(2).normal(2.0, 1.0, size=(6, 3, 8, 8)).astype(np.float32))
    with params.frozen_scope():
        nn.forward(spec, params, x, mode="train")
    assert not params["1.running_mean"].data.any()
    nn.forward(spec, params, x, mode="train")
    assert params["1.running_mean"].data.any()


@st.composite
def random_specs(draw):
    c = draw(st.integers(1, 3))
    h = draw(st.integers(6, 12))
    layers = []
    shape = (c, h, h)
    for _ in range(draw(st.integers(0, 5))):
        kind = draw(st.sampled_from(["conv", "conv_transpose", "batchnorm", "activation", "maxpool"]))
        if kind == "conv":
            k = draw(st.integers(1, 3))
            layer = nn.conv(draw(st.integers(1, 4)), k, draw(st.integers(1, 2)), draw(st.integers(0, 1)))
        elif kind == "conv_transpose":
            layer = nn.conv_transpose(draw(st.integers(1, 4)), draw(st.integers(1, 4)), draw(st.integers(1, 2)), 0)
        elif kind == "batchnorm":
            layer = nn.batchnorm()
        elif kind == "activation":
            layer = nn.act(draw(st.sampled_from(["sigmoid", "tanh", "leaky_relu", "relu"])))
        else:
            layer = nn.maxpool(2)
        try:
            nn.ModelSpec(shape, tuple(layers) + (layer,))
        except nn.SpecError:
            continue
        layers.append(layer)
        if max(nn.propagate_shapes(nn.ModelSpec(shape, tuple(layers)))[-1]) > 40:
            layers.pop()
    if draw(st.booleans()):
        layers += [nn.flatten(), nn.dense(draw(st.integers(1, 5)))]
    return nn.ModelSpec(shape, tuple(layers))


@settings(max_examples=40, deadline=None)
@given(random_specs(), st.integers(0, 2**16))
def test_forward_shape_matches_symbolic_propagation(spec, seed):
    params = nn.init_params(spec, seed)
    x = Tensor(np.random.default_rng(seed).normal(size=(2,) + spec.input_shape).astype(np.float32))
    for mode in ("train", "eval"):
        out = nn.forward(spec, params, x, mode=mode)
        assert out.shape[1:] == nn.propagate_shapes(spec, x.shape[1:])[-1]


def test_adam_zero_gradients_leave_params():
    spec = small_cnn()
    params = nn.init_params(spec, 0)
    before = params.snapshot()
    state = nn.AdamState()
    grads = {params[n]: np.zeros_like(params[n].data) for n in params.trainable()}
    nn.adam_step(params, grads, state)
    assert state.t == 1
    assert all(before[n].tobytes() == params[n].data.tobytes() for n in params)


def test_adam_first_step_hand_computed():
    params = nn.ParamSet({"w": Tensor(np.zeros(1, dtype=np.float32))})
    state = nn.AdamState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    nn.adam_step(params, {params["w"]: np.ones(1, dtype=np.float32)}, state)
    # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps)
    assert params["w"].data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-6)


def test_adam_missing_gradient():
    params = nn.init_params(small_cnn(), 0)
    with pytest.raises(tc.ContractError, match="0.weight"):
        nn.adam_step(params, {}, nn.AdamState())


def test_frozen_params_never_move():
    spec = small_cnn()
    params = nn.init_params(spec, 0)
    params.set_frozen(True)
    before = params.snapshot()
    state = nn.AdamState(lr=0.1)
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3, 8, 8)).astype(np.float32), requires_grad=True)
    for _ in range(3):
        loss = nn.forward(spec, params, x).sum()
        grads = tc.backward(loss)
        assert all(params[n] not in grads for n in params)
        nn.adam_step(params, grads, state)
    assert all(before[n].tobytes() == params[n].data.tobytes() for n in params)


@pytest.mark.parametrize("seed", range(20))
def test_one_step_decreases_smooth_loss(seed):
    rng = np.random.default_rng(seed)
    spec = nn.ModelSpec((6,), (nn.dense(8), nn.act("tanh"), nn.dense(1)))
    params = nn.init_params(spec, seed)
    x = Tensor(rng.normal(size=(16, 6)).astype(np.float32))
    y = rng.normal(size=(16, 1)).astype(np.float32)

    def loss():
        d = nn.forward(spec, params, x) - Tensor(y)
        return (d * d).mean()

    first = loss()
    nn.adam_step(params, tc.backward(first), nn.AdamState(lr=1e-3))
    assert loss().item() < first.item()
