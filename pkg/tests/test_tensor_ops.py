import numpy as np
import pytest

from lidarflow import gradcheck, ops
from lidarflow.errors import GraphError, OptimizerError, ShapeError
from lidarflow.optim import OptimizerConfig, ParameterStore, adam_step
from lidarflow.tensor import (
    Tensor,
    backward,
    get_dtype,
    mul,
    no_grad,
    oracle_precision,
    square,
    sum_all,
)


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=grad)


# conv2d

def test_conv_identity_kernel():
    out = ops.conv2d(t(np.full((1, 1, 1, 1), 5.0)), t(np.ones((1, 1, 1, 1))), t(np.zeros((1, 1, 1, 1))))
    assert out.data.item() == 5.0


def test_conv_constant_image_interior_and_corner():
    c = 1.5
    out = ops.conv2d(t(np.full((1, 1, 5, 5), c)), t(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[2, 2] == pytest.approx(9 * c)
    assert out[0, 0] == pytest.approx(4 * c)
    assert out[0, 2] == pytest.approx(6 * c)


def test_conv_dilation_shape_and_gradient(rng):
    out = ops.conv2d(t(rng.standard_normal((2, 3, 8, 8))), t(rng.standard_normal((4, 3, 3, 3))), padding=2, dilation=2)
    assert out.shape == (2, 4, 8, 8)
    err = gradcheck.check_function(lambda a, w: ops.conv2d(a, w, padding=2, dilation=2),
                                   [rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))])
    assert err < 1e-5


def test_conv_is_linear_in_input(rng):
    w = t(rng.standard_normal((3, 2, 3, 3)))
    x, y = rng.standard_normal((2, 1, 2, 6, 7))
    lhs = ops.conv2d(t(2.0 * x - 3.0 * y), w, padding=1).data
    rhs = 2.0 * ops.conv2d(t(x), w, padding=1).data - 3.0 * ops.conv2d(t(y), w, padding=1).data
    assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) < 1e-6


def test_conv_shape_errors_name_the_operand():
    with pytest.raises(ShapeError) as exc:
        ops.conv2d(t(np.zeros((1, 3, 4, 4))), t(np.zeros((2, 2, 3, 3))))
    assert exc.value.operand == "weight"
    with pytest.raises(ShapeError) as exc:
        ops.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((2, 2, 3, 3))), t(np.zeros((1, 3, 1, 1))), padding=1)
    assert exc.value.operand == "bias"


# activations and pooling

def test_activation_values():
    assert ops.activation(t(-1.0), "leaky_relu").data.item() == pytest.approx(-0.1)
    assert ops.activation(t(3.0), "leaky_relu").data.item() == 3.0
    assert ops.activation(t(0.0), "sigmoid").data.item() == 0.5
    with pytest.raises(ValueError):
        ops.activation(t(0.0), "tanh")


def test_sigmoid_stays_in_open_interval_for_moderate_inputs(rng):
    s = ops.sigmoid(t(rng.uniform(-15, 15, (1, 4, 8, 8)))).data
    assert (s > 0).all() and (s < 1).all()


@pytest.mark.parametrize("axis", ["spatial", "channel"])
@pytest.mark.parametrize("kind", ["avg", "max"])
def test_pool_of_constant_is_constant(axis, kind):
    out = ops.pool(t(np.full((2, 3, 4, 5), 1.25)), axis, kind)
    assert np.all(out.data == np.float32(1.25))
    assert out.shape == ((2, 3, 1, 1) if axis == "spatial" else (2, 1, 4, 5))


def test_pool_arithmetic():
    x = t(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
    assert ops.pool(x, "channel", "max").data.item() == 3.0
    assert ops.pool(x, "channel", "avg").data.item() == 2.0
    plane = t(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert ops.pool(plane, "spatial", "avg").data.item() == 2.5


def test_max_pool_tie_goes_to_lowest_flat_index():
    x = t(np.full((1, 1, 2, 2), 7.0), grad=True)
    backward(sum_all(ops.pool(x, "spatial", "max")))
    assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


# resampling

def test_upsample_constant_and_single_sample():
    assert np.all(ops.upsample2x(t(np.full((1, 2, 3, 4), 0.75))).data == np.float32(0.75))
    assert np.all(ops.upsample2x(t(np.full((1, 1, 1, 1), 7.0))).data == 7.0)


def test_upsample_pixel_centre_convention():
    row = ops.upsample2x(t(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))).data[0, 0, 0]
    assert row.tolist() == [0.0, 0.5, 1.5, 2.0]


def test_avg_pool2x_block():
    out = ops.avg_pool2x(t(np.array([[0.0, 0.0], [4.0, 4.0]]).reshape(1, 1, 2, 2)))
    assert out.data.item() == 2.0


# backwarp

def test_backwarp_zero_flow_bit_exact(rng):
    src = rng.standard_normal((2, 3, 7, 9)).astype(np.float32)
    out = ops.backwarp(t(src), t(np.zeros((2, 2, 7, 9)))).data
    assert np.array_equal(out, src)


def test_backwarp_integer_shift_and_border():
    src = np.arange(1, 13, dtype=np.float32).reshape(1, 1, 3, 4)
    flow = np.zeros((1, 2, 3, 4), np.float32)
    flow[:, 0] = 1.0
    out = ops.backwarp(t(src), t(flow)).data[0, 0]
    assert np.array_equal(out[:, :3], src[0, 0, :, 1:])
    assert np.all(out[:, 3] == 0.0)


def test_backwarp_half_pixel_average():
    src = t(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))
    flow = np.zeros((1, 2, 1, 2), np.float32)
    flow[:, 0] = 0.5
    assert ops.backwarp(src, t(flow)).data[0, 0, 0, 0] == 1.0


def test_backwarp_shape_error():
    with pytest.raises(ShapeError):
        ops.backwarp(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 2, 4, 5))))


# correlation

def test_correlation_constant_features():
    f = t(np.full((1, 4, 5, 5), 2.0))
    cv = ops.correlation(f, f, 1).data
    assert cv.shape == (1, 9, 5, 5)
    assert cv[0, 4, 2, 2] == 4.0


def test_correlation_zero_and_orthogonal():
    f2 = t(np.ones((1, 3, 4, 4)))
    assert not ops.correlation(t(np.zeros((1, 3, 4, 4))), f2, 2).data.any()
    a = np.zeros((1, 2, 4, 4), np.float32)
    b = np.zeros((1, 2, 4, 4), np.float32)
    a[:, 0] = 1.0
    b[:, 1] = 1.0
    centre = (2 * 2 + 1) ** 2 // 2
    assert not ops.correlation(t(a), t(b), 2).data[:, centre].any()


def test_correlation_centre_channel_is_symmetric(rng):
    a, b = t(rng.standard_normal((1, 3, 6, 6))), t(rng.standard_normal((1, 3, 6, 6)))
    centre = 40
    assert np.allclose(ops.correlation(a, b, 4).data[:, centre], ops.correlation(b, a, 4).data[:, centre])


def test_correlation_shape_error():
    with pytest.raises(ShapeError):
        ops.correlation(t(np.zeros((1, 3, 4, 4))), t(np.zeros((1, 2, 4, 4))), 1)


# backward

def test_backward_linear_map():
    x = np.arange(6, dtype=np.float32).reshape(1, 1, 2, 3)
    w = t(np.ones((1, 1, 2, 3)), grad=True)
    backward(sum_all(mul(w, t(x))))
    assert np.array_equal(w.grad, x)


def test_backward_squared_conv_norm_matches_finite_differences(rng):
    err = gradcheck.check_function(lambda x, w: sum_all(square(ops.conv2d(x, w, padding=1))),
                                   [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))])
    assert err < 1e-5


def test_unused_parameter_gets_zero_gradient():
    store = ParameterStore()
    a = store.add("a", np.ones((1, 1, 1, 2)))
    store.add("unused", np.ones((1, 1, 1, 3)))
    backward(sum_all(square(a)), store)
    assert np.all(store["unused"].grad == 0)
    assert np.array_equal(a.grad, np.full((1, 1, 1, 2), 2.0))


def test_backward_without_graph_raises():
    with pytest.raises(GraphError):
        backward(t(1.0))
    with no_grad():
        y = sum_all(square(t(np.ones((1, 1, 1, 1)), grad=True)))
    with pytest.raises(GraphError):
        backward(y)


def test_oracle_precision_is_scoped():
    with oracle_precision():
        assert Tensor(1.0).dtype == np.float64
    assert get_dtype() == np.float32


# ADAM

def test_adam_zero_gradient_is_identity():
    store = ParameterStore()
    p = store.add("p", np.array([1.0, -2.0]).reshape(1, 1, 1, 2))
    before = p.data.copy()
    p.grad = np.zeros_like(p.data)
    adam_step(store, OptimizerConfig())
    assert np.array_equal(p.data, before)


def test_adam_first_step_by_hand():
    store = ParameterStore()
    p = store.add("theta", np.ones((1, 1, 1, 1)))
    p.grad = np.full((1, 1, 1, 1), 0.5, np.float32)
    adam_step(store, OptimizerConfig(lr=0.1))
    assert p.data.item() == pytest.approx(1 - 0.1 * 0.5 / (0.5 + 1e-7), rel=1e-6)


def test_adam_two_step_trace():
    with oracle_precision():
        store = ParameterStore()
        p = store.add("theta", np.full((1, 1, 1, 1), 2.0))
        cfg = OptimizerConfig(lr=0.01)
        g = 0.3
        theta, m, v = 2.0, 0.0, 0.0
        for step in (1, 2):
            p.grad = np.full((1, 1, 1, 1), g)
            adam_step(store, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.01 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-7)
        assert abs(p.data.item() - theta) < 1e-9


def test_adam_missing_gradient_names_parameter():
    store = ParameterStore()
    store.add("conv.weight", np.ones((1, 1, 1, 1)))
    with pytest.raises(OptimizerError, match="conv.weight"):
        adam_step(store, OptimizerConfig())


# finite-difference oracle over every op

@pytest.mark.parametrize("name", sorted(gradcheck.op_cases(np.random.default_rng(0))))
def test_op_gradient(name):
    for seed in range(5):
        fn, inputs = gradcheck.op_cases(np.random.default_rng(seed))[name]
        assert gradcheck.check_function(fn, inputs, seed=seed) < 1e-5
