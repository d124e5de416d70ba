import math

import numpy as np
import pytest

from fedrdn import tensor as T
from fedrdn.errors import MisuseError, NonFiniteError
from fedrdn.model import MLP, ModelSpec, SmallCNN, forward, init_params, loss_and_grad
from fedrdn.params import ParameterVector, param_axpy, sgd_step

from oracles import central_differences, max_relative_error


def _flat_loss(spec, params, x, y):
    return lambda flat: loss_and_grad(spec, params.with_flat(flat), x, y)[0]


@pytest.fixture
def mlp():
    return ModelSpec(MLP((7, 5)), (2, 3, 3), 4)


@pytest.fixture
def cnn():
    return ModelSpec(SmallCNN((3, 4), 3, 2, 6), (2, 8, 8), 3)


def test_tensor_rejects_nan_at_construction():
    with pytest.raises(NonFiniteError):
        T.Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        T.Tensor([[np.inf]])


@pytest.mark.filterwarnings("ignore:overflow")
def test_debug_mode_checks_op_outputs():
    T.set_debug(True)
    try:
        big = T.Tensor([1e200])
        with pytest.raises(NonFiniteError):
            big * T.Tensor([1e200])
    finally:
        T.set_debug(False)


def test_square_gradient():
    w = T.Tensor(3.0, requires_grad=True)
    (w * w).backward()
    assert w.grad == pytest.approx(6.0)
    w2 = T.Tensor(3.0, requires_grad=True)
    (w2 ** 2).backward()
    assert w2.grad == pytest.approx(6.0)


def test_shared_subexpression_accumulates():
    x = T.Tensor(2.0, requires_grad=True)
    y = x * x
    z = y * y + y  # x^4 + x^2
    z.backward()
    assert x.grad == pytest.approx(4 * 8 + 2 * 2)


def test_zero_mlp_gives_zero_logits(mlp):
    params = init_params(mlp, 0).zeros_like()
    x = np.random.default_rng(0).normal(size=(5, 2, 3, 3))
    assert np.array_equal(forward(mlp, params, x).data, np.zeros((5, 4)))


def test_identical_rows_give_identical_logits(cnn):
    params = init_params(cnn, 1)
    img = np.random.default_rng(1).normal(size=(2, 8, 8))
    logits = forward(cnn, params, np.stack([img] * 4)).data
    for row in logits[1:]:
        assert np.array_equal(row, logits[0])


def test_forward_is_pure(cnn):
    params = init_params(cnn, 2)
    x = np.random.default_rng(2).normal(size=(3, 2, 8, 8))
    a = forward(cnn, params, x).data
    b = forward(cnn, params, x).data
    assert a.tobytes() == b.tobytes()
    l1, g1 = loss_and_grad(cnn, params, x, [0, 1, 2])
    l2, g2 = loss_and_grad(cnn, params, x, [0, 1, 2])
    assert l1 == l2 and g1.bit_equal(g2)


def test_init_is_deterministic(cnn):
    assert init_params(cnn, 5).bit_equal(init_params(cnn, 5))
    assert not init_params(cnn, 5).bit_equal(init_params(cnn, 6))


def test_forward_shape_mismatch_names_both_shapes(cnn):
    params = init_params(cnn, 0)
    with pytest.raises(MisuseError, match=r"\(1, 2, 7, 8\).*\(B, 2, 8, 8\)"):
        forward(cnn, params, np.zeros((1, 2, 7, 8)))


def test_forward_rejects_misaligned_params(cnn, mlp):
    with pytest.raises(MisuseError):
        forward(cnn, init_params(mlp, 0), np.zeros((1, 2, 8, 8)))


def test_uniform_logits_loss_is_log_classes():
    spec = ModelSpec(MLP(()), (1, 2, 2), 10)
    params = init_params(spec, 0).zeros_like()
    loss, _ = loss_and_grad(spec, params, np.ones((3, 1, 2, 2)), [0, 4, 9])
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert loss == pytest.approx(2.302585, abs=1e-6)


def test_out_of_range_label_is_misuse(mlp):
    with pytest.raises(MisuseError, match="label"):
        loss_and_grad(mlp, init_params(mlp, 0), np.zeros((2, 2, 3, 3)), [0, 4])


def test_loss_nonnegative_and_grad_aligned(cnn):
    params = init_params(cnn, 3)
    x = np.random.default_rng(3).normal(size=(4, 2, 8, 8))
    loss, grad = loss_and_grad(cnn, params, x, [0, 1, 2, 0])
    assert loss >= 0
    assert grad.aligned_with(params)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mlp_gradient_matches_finite_differences(mlp, seed):
    rng = np.random.default_rng(seed)
    params = init_params(mlp, seed)
    x = rng.normal(size=(4, 2, 3, 3))
    y = rng.integers(0, 4, size=4)
    _, grad = loss_and_grad(mlp, params, x, y)
    fd = central_differences(_flat_loss(mlp, params, x, y), params.flat())
    assert max_relative_error(grad.flat(), fd) < 1e-4


def test_tanh_mlp_gradient_matches_finite_differences():
    spec = ModelSpec(MLP((5,), "tanh"), (1, 2, 2), 3)
    rng = np.random.default_rng(4)
    params = init_params(spec, 4)
    x = rng.normal(size=(3, 1, 2, 2))
    y = [0, 2, 1]
    _, grad = loss_and_grad(spec, params, x, y)
    fd = central_differences(_flat_loss(spec, params, x, y), params.flat())
    assert max_relative_error(grad.flat(), fd) < 1e-4


@pytest.mark.parametrize("seed", [0, 1])
def test_cnn_gradient_matches_finite_differences(cnn, seed):
    rng = np.random.default_rng(seed)
    params = init_params(cnn, seed)
    x = rng.normal(size=(3, 2, 8, 8))
    y = rng.integers(0, 3, size=3)
    _, grad = loss_and_grad(cnn, params, x, y)
    fd = central_differences(_flat_loss(cnn, params, x, y), params.flat())
    assert max_relative_error(grad.flat(), fd) < 1e-4


def test_soft_target_gradient_matches_finite_differences(mlp):
    rng = np.random.default_rng(9)
    params = init_params(mlp, 9)
    x = rng.normal(size=(3, 2, 3, 3))
    soft = 0.7 * np.eye(4)[[0, 3, 1]]
    _, grad = loss_and_grad(mlp, params, x, soft)
    fd = central_differences(_flat_loss(mlp, params, x, soft), params.flat())
    assert max_relative_error(grad.flat(), fd) < 1e-4


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 4))
    w = rng.normal(size=(2, 3, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(w)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 2, 5, 4))
    for b in range(2):
        for o in range(2):
            for h in range(5):
                for ww in range(4):
                    ref[b, o, h, ww] = np.sum(xp[b, :, h:h + 3, ww:ww + 3] * w[o])
    assert np.allclose(out, ref, atol=1e-12)


def test_maxpool_routes_gradient_to_max():
    x = T.Tensor(np.array([[[[1.0, 5.0], [2.0, 3.0]]]]), requires_grad=True)
    out = T.maxpool2d(x, 2)
    assert out.data.item() == 5.0
    T.tsum(out).backward()
    assert np.array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])


# --- parameter arithmetic ---------------------------------------------------

def _pv(*values):
    return ParameterVector([("w", np.array(values, dtype=float))])


def test_sgd_step_examples():
    assert sgd_step(_pv(1.0), _pv(0.5), 0.1, 0.0)["w"][0] == pytest.approx(0.95)
    assert sgd_step(_pv(1.0, -2.0), _pv(0.0, 0.0), 0.3, 0.0) == _pv(1.0, -2.0)
    assert sgd_step(_pv(1.0), _pv(0.0), 0.01, 1e-5)["w"][0] == pytest.approx(0.9999999, abs=1e-15)


def test_sgd_step_rejects_bad_arguments():
    with pytest.raises(MisuseError):
        sgd_step(_pv(1.0), _pv(1.0, 2.0), 0.1)
    with pytest.raises(MisuseError):
        sgd_step(_pv(1.0), _pv(1.0), 0.0)
    with pytest.raises(MisuseError):
        sgd_step(_pv(1.0), _pv(1.0), 0.1, -1.0)


def test_param_axpy_examples():
    x, y = _pv(1.0, 2.0), _pv(3.0, 4.0)
    assert param_axpy(0.0, x, y) == y
    assert param_axpy(1.0, x, _pv(0.0, 0.0)) == x
    assert param_axpy(2.0, x, y) == _pv(5.0, 8.0)


def test_param_axpy_requires_alignment():
    a = ParameterVector([("a", np.zeros(2))])
    b = ParameterVector([("b", np.zeros(2))])
    with pytest.raises(MisuseError, match="aligned"):
        param_axpy(1.0, a, b)
    with pytest.raises(MisuseError):
        param_axpy(1.0, _pv(1.0), _pv(1.0, 2.0))


def test_parameter_vector_invariants():
    pv = ParameterVector([("a", np.zeros((2, 3))), ("b", np.ones(4))])
    assert pv.total_len == 10
    assert pv.with_flat(pv.flat()) == pv
    with pytest.raises(MisuseError):
        ParameterVector([("a", np.zeros(1)), ("a", np.zeros(1))])
    with pytest.raises(NonFiniteError):
        ParameterVector([("a", np.array([np.nan]))])
    with pytest.raises(ValueError):
        pv["a"][0, 0] = 1.0  # read-only
