import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import grad_check, ssm_impulse_by_recurrence
from tsadc import numerics as nx
from tsadc.errors import ShapeError
from tsadc.s4 import (
    S4Layer,
    SSMCore,
    SSMKernel,
    apply_conv,
    apply_recurrent,
    cached_kernels,
    discretize,
    hippo_diag_init,
    kernel,
    vandermonde_kernel,
)


def random_core(rng, N=4, D=None):
    A = -rng.uniform(0.1, 2.0, N) + 1j * rng.uniform(-5, 5, N)
    B = rng.normal(size=N) + 1j * rng.normal(size=N)
    C = rng.normal(size=N) + 1j * rng.normal(size=N)
    return SSMCore(A, B, C, D=rng.normal() if D is None else D,
                   log_dt=np.log(rng.uniform(1e-3, 1e-1)))


def scalar_core(a_bar, b_bar, c_bar):
    """A core whose bilinear discretization yields the given real scalars."""
    dt = 1.0
    A = 2.0 * (a_bar - 1.0) / (dt * (a_bar + 1.0))
    den = 1.0 - dt / 2.0 * A
    return SSMCore(np.array([A + 0j]), np.array([b_bar * den / dt + 0j]), np.array([c_bar + 0j]),
                   D=0.0, log_dt=np.log(dt))


def test_geometric_kernel():
    core = scalar_core(0.5, 1.0, 1.0)
    np.testing.assert_allclose(kernel(core, 6), [1, 0.5, 0.25, 0.125, 0.0625, 0.03125], atol=1e-14)


def test_first_kernel_entry_is_cb(rng):
    core = random_core(rng)
    A_bar, B_bar, C_bar = discretize(core)
    assert kernel(core, 4)[0] == pytest.approx((C_bar * B_bar).sum().real, abs=1e-14)


def test_kernel_matches_unrolled_recurrence(rng):
    core = random_core(rng)
    ref = ssm_impulse_by_recurrence(*discretize(core), 50)
    np.testing.assert_allclose(kernel(core, 50), ref, atol=1e-10)


def test_impulse_response(rng):
    core = random_core(rng)
    x = np.zeros(20)
    x[0] = 1.0
    y = apply_conv(core, x)
    expected = kernel(core, 20)
    expected[0] += core.D
    np.testing.assert_allclose(y, expected, atol=1e-12)


def test_identity_kernel():
    core = SSMCore(np.zeros(1, complex), np.zeros(1, complex), np.zeros(1, complex), D=0.0)
    delta = np.zeros(8)
    delta[0] = 1.0
    x = np.arange(8.0)
    np.testing.assert_array_equal(apply_conv(core, x, K=delta), x)


def test_length_mismatch(rng):
    with pytest.raises(ShapeError):
        apply_conv(random_core(rng), np.ones(8), K=np.ones(7))


def test_zero_input_zero_output(rng):
    assert np.all(apply_recurrent(random_core(rng), np.zeros(16)) == 0)


def test_constant_input_converges_to_geometric_limit():
    a, b, c, D = 0.8, 0.5, 1.5, 0.3
    core = scalar_core(a, b, c)
    core.D = D
    y = apply_recurrent(core, np.full(400, 2.0))
    assert y[-1] == pytest.approx((c * b / (1 - a) + D) * 2.0, rel=1e-12)


@pytest.mark.parametrize("L", [64, 256])
def test_conv_equals_recurrence(rng, L):
    for _ in range(5):
        core = random_core(rng)
        x = rng.normal(size=L)
        assert np.max(np.abs(apply_conv(core, x) - apply_recurrent(core, x))) < 1e-8


def test_hippo_init():
    A, B = hippo_diag_init(16)
    assert np.all(A.real == -0.5)
    assert np.all(np.diff(A.imag) > 0)
    assert np.all(B == 1)


def test_hippo_kernels_do_not_diverge_over_long_horizons(rng):
    A, B = hippo_diag_init(32)
    for log_dt in np.log([1e-3, 1e-2, 1e-1]):
        core = SSMCore(A, B, rng.normal(size=32) + 1j * rng.normal(size=32), log_dt=log_dt)
        K = kernel(core, 10_000)
        head = np.max(np.abs(K[:100]))
        assert np.all(np.isfinite(K)) and np.max(np.abs(K[100:])) <= head * 1.5


@given(st.floats(0.01, 10), st.floats(-50, 50), st.floats(1e-4, 1.0))
def test_stable_systems_have_contracting_eigenvalues(neg_re, im, dt):
    core = SSMCore(np.array([-neg_re + 1j * im]), np.ones(1, complex), np.ones(1, complex),
                   log_dt=np.log(dt))
    A_bar, _, _ = discretize(core)
    assert np.abs(A_bar[0]) < 1


def test_tensor_kernel_matches_numpy_reference(rng):
    ssm = SSMKernel(3, 8, rng)
    np.testing.assert_allclose(ssm(40).data, kernel(ssm.core(), 40), atol=1e-12)


def test_vandermonde_gradient(rng):
    H, N, L = 2, 3, 12
    arrays = [-rng.uniform(0.01, 0.3, (H, N)), rng.uniform(-1, 1, (H, N)),
              rng.normal(size=(H, N)), rng.normal(size=(H, N)), rng.normal(size=(H, L))]

    def build(m, a, wr, wi, R):
        return (vandermonde_kernel(m, a, wr, wi, L) * R).sum()

    assert grad_check(build, arrays) < 1e-6


def test_gradient_through_kernel_materialization(rng):
    ssm = SSMKernel(2, 4, rng)
    R = rng.normal(size=(2, 16))
    names = [n for n, _ in ssm.named_parameters() if n != "D"]
    base = {n: p.data.copy() for n, p in ssm.named_parameters()}

    def build(*tensors):
        for n, t in zip(names, tensors):
            setattr(ssm, n, t)
        return (ssm._materialize(16) * R).sum()

    err = grad_check(build, [base[n] for n in names])
    assert err < 1e-3


def test_layer_gradient_and_shape(rng):
    layer = S4Layer(3, 4, rng)
    x = rng.normal(size=(2, 3, 10))
    y = layer(nx.parameter(x))
    assert y.shape == x.shape
    R = rng.normal(size=y.shape)
    assert grad_check(lambda x, R: (layer(x) * R).sum(), [x, R]) < 1e-5
    (layer(x) * R).sum().backward()
    assert all(p.grad is not None for p in layer.parameters())


def test_length_generalization(rng):
    layer = S4Layer(4, 8, rng)
    assert layer(rng.normal(size=(1, 4, 128))).shape == (1, 4, 128)
    assert layer(rng.normal(size=(1, 4, 256))).shape == (1, 4, 256)


def test_layer_is_causal(rng):
    layer = S4Layer(3, 4, rng)
    x = rng.normal(size=(1, 3, 20))
    x2 = x.copy()
    x2[..., 12:] += 5.0
    np.testing.assert_allclose(layer(x).data[..., :12], layer(x2).data[..., :12], atol=1e-12)


def test_cached_kernels_reuse_within_block(rng):
    ssm = SSMKernel(2, 4, rng)
    with cached_kernels():
        assert ssm(16) is ssm(16)
    assert ssm(16) is not ssm(16)


def test_wrong_channel_count(rng):
    with pytest.raises(ShapeError):
        S4Layer(3, 4, rng)(np.ones((1, 2, 8)))


def test_bidirectional_layer_sees_the_future(rng):
    layer = S4Layer(3, 4, rng, bidirectional=True)
    x = rng.normal(size=(1, 3, 20))
    x2 = x.copy()
    x2[..., 12:] += 5.0
    assert not np.allclose(layer(x).data[..., :12], layer(x2).data[..., :12])


def test_bidirectional_reverse_branch_is_a_flipped_causal_conv(rng):
    layer = S4Layer(2, 4, rng, bidirectional=True)
    u = rng.normal(size=(1, 2, 16))
    K = layer.ssm_rev(16).data
    ref = np.stack([np.convolve(u[0, h, ::-1], K[h])[:16][::-1] for h in range(2)])[None]
    got = nx.causal_conv(nx.tensor(u[..., ::-1]), layer.ssm_rev(16)).data[..., ::-1]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_bidirectional_gradient(rng):
    layer = S4Layer(2, 4, rng, bidirectional=True)
    x, R = rng.normal(size=(1, 2, 9)), rng.normal(size=(1, 2, 9))
    assert grad_check(lambda x, R: (layer(x) * R).sum(), [x, R]) < 1e-5
    (layer(x) * R).sum().backward()
    assert np.any(layer.ssm_rev.c_re.grad)
