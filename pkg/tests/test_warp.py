import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from grfp import tensor as T
from grfp.gradsuite import off_integer_flow
from grfp.tensor import ContractError
from grfp.warp import warp_backward, warp_bilinear, warp_oracle


def warp(x, f):
    return warp_bilinear(x, f).data


def test_zero_flow_is_identity(rng):
    x = rng.normal(size=(5, 7, 3))
    assert np.array_equal(warp(x, np.zeros((5, 7, 2))), x)
    assert np.array_equal(warp_oracle(x, np.zeros((5, 7, 2))), x)


def test_integer_shift_with_zero_padding():
    x = np.tile(np.arange(4.0), (4, 1))[..., None]
    f = np.zeros((4, 4, 2))
    f[..., 0] = 1.0
    y = warp(x, f)[..., 0]
    assert np.array_equal(y[:, :3], np.tile([1.0, 2.0, 3.0], (4, 1)))
    assert np.array_equal(y[:, 3], np.zeros(4))


def test_half_pixel_sample():
    x = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    f = np.zeros((2, 2, 2))
    f[0, 0] = (0.5, 0.5)
    assert warp(x, f)[0, 0, 0] == 1.5
    assert warp_oracle(x, f)[0, 0, 0] == 1.5


def test_oracle_splits_single_pixel_mass():
    x = np.zeros((5, 5, 1))
    x[2, 2] = 1.0
    f = np.zeros((5, 5, 2))
    f[..., 0] = 0.25
    y = warp_oracle(x, f)[..., 0]
    # target (2,2) samples column 2.25, target (2,1) samples 1.25
    assert y[2, 2] == 0.75 and y[2, 1] == 0.25
    assert np.count_nonzero(y) == 2


def test_bit_exact_against_oracle_100_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        h, w, c = rng.integers(1, 17), rng.integers(1, 17), rng.integers(1, 5)
        x = rng.normal(size=(h, w, c))
        f = rng.uniform(-3, 3, size=(h, w, 2))
        assert np.array_equal(warp(x, f), warp_oracle(x, f))


def test_shape_mismatch_is_contract_error():
    with pytest.raises(ContractError):
        warp_bilinear(np.zeros((4, 4, 1)), np.zeros((4, 5, 2)))
    with pytest.raises(ContractError):
        warp_bilinear(np.zeros((4, 4, 1)), np.zeros((4, 4, 3)))


flows = arrays(np.float64, (6, 6, 2), elements=st.floats(-2.5, 2.5))
images = arrays(np.float64, (6, 6, 2), elements=st.floats(-5, 5))


@given(images, images, flows, st.floats(-3, 3), st.floats(-3, 3))
def test_linear_in_source(x, y, f, a, b):
    lhs = warp(a * x + b * y, f)
    rhs = a * warp(x, f) + b * warp(y, f)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@given(arrays(np.float64, (6, 6, 2), elements=st.floats(0, 5)),
       arrays(np.float64, (6, 6, 2), elements=st.floats(0.0, 0.999)))
def test_output_bounded_by_its_taps(x, f):
    y = warp(x, f)
    ii, jj = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
    sy, sx = ii + f[..., 1], jj + f[..., 0]
    for i, j in zip(*np.nonzero((sy <= 5) & (sx <= 5))):
        m, n = int(np.floor(sy[i, j])), int(np.floor(sx[i, j]))
        taps = x[m:m + 2, n:n + 2].reshape(-1, 2)
        assert np.all(y[i, j] <= taps.max(axis=0) + 1e-12)


@given(st.integers(-2, 2), st.integers(-2, 2))
def test_integer_flow_conserves_mass_strictly_inside(dx, dy):
    x = np.zeros((10, 10, 2))
    x[3:7, 3:7] = np.random.default_rng([dx + 2, dy + 2]).uniform(size=(4, 4, 2))
    f = np.zeros((10, 10, 2))
    f[..., 0], f[..., 1] = dx, dy
    assert warp(x, f).sum() == pytest.approx(x.sum(), abs=1e-12)


def test_backward_zero_grad_gives_zeros(rng):
    x = rng.normal(size=(4, 4, 2))
    f = rng.uniform(-2, 2, size=(4, 4, 2))
    gx, gf = warp_backward(np.zeros((4, 4, 2)), x, f)
    assert not gx.any() and not gf.any()


def test_backward_at_zero_flow(rng):
    # at integer flow the kernel derivative is taken as 0, so only x receives gradient
    x = rng.normal(size=(5, 5, 3))
    g = rng.normal(size=(5, 5, 3))
    gx, gf = warp_backward(g, x, np.zeros((5, 5, 2)))
    assert np.array_equal(gx, g)
    assert np.array_equal(gf, np.zeros((5, 5, 2)))


def test_backward_near_zero_flow_is_a_one_sided_difference(rng):
    # just off zero, d/dfx weighs the forward column differences of x
    x = rng.normal(size=(5, 5, 2))
    g = rng.normal(size=(5, 5, 2))
    _, gf = warp_backward(g, x, np.full((5, 5, 2), 1e-4))
    np.testing.assert_allclose(gf[..., 0], _expected_dx(g, x, 1e-4), atol=1e-12)


def _expected_dx(g, x, eps):
    """d/dfx of sum(g * y) at fx = fy = eps: bilinear weights over the 4 taps."""
    h, w, _ = x.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            def tap(m, n):
                return x[m, n] if 0 <= m < h and 0 <= n < w else np.zeros(x.shape[-1])
            d = (1 - eps) * (tap(i, j + 1) - tap(i, j)) + eps * (tap(i + 1, j + 1) - tap(i + 1, j))
            out[i, j] = (g[i, j] * d).sum()
    return out


def test_gradients_match_finite_differences(rng):
    x = rng.normal(size=(6, 6, 2))
    f = off_integer_flow(rng, (6, 6, 2))
    g = rng.normal(size=(6, 6, 2))

    def fn(x, f):
        return T.total(T.mul(warp_bilinear(x, f), g))

    assert T.grad_check(fn, [x, f]) <= 1e-5


def test_tape_gradient_equals_warp_backward(rng):
    x = rng.normal(size=(5, 5, 2))
    f = off_integer_flow(rng, (5, 5, 2))
    g = rng.normal(size=(5, 5, 2))
    tape = T.Tape()
    xt, ft = tape.watch(x), tape.watch(f)
    grads = T.backward(tape, T.total(T.mul(warp_bilinear(xt, ft), g)))
    gx, gf = warp_backward(g, x, f)
    np.testing.assert_allclose(grads.array(xt), gx, atol=1e-14)
    np.testing.assert_allclose(grads.array(ft), gf, atol=1e-14)
