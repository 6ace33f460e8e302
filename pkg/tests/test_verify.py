import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from convoy.keymask import SecurityParams, blind, keygen, precompute_masks, sample_z
from convoy.tensor import ConvShape, OpCounter, flatten_kernels, im2col, matmul
from convoy.verify import TolerancePolicy, make_verification_tag, verify


def instance(rng, shape, params, weight_bound=16, input_bound=256):
    if params.mode == "int":
        w = rng.integers(-weight_bound, weight_bound + 1, shape.weight_dims)
        x = rng.integers(-input_bound, input_bound + 1, shape.input_dims)
    else:
        w = rng.uniform(-1, 1, shape.weight_dims)
        x = rng.uniform(-input_bound, input_bound, shape.input_dims)
    wbar = flatten_kernels(w)
    masks = precompute_masks(wbar, shape, params, rng)
    sk = keygen(params, shape, rng)
    xbar_prime = blind(im2col(x, shape.k), sk, masks)
    tag = make_verification_tag(sk.r, wbar)
    return wbar, xbar_prime, sk, tag


def test_tag_examples():
    np.testing.assert_array_equal(make_verification_tag([1, 1], np.array([[1, 2], [3, 4]])), [4, 6])
    np.testing.assert_array_equal(make_verification_tag([5, -2], np.zeros((2, 3), dtype=np.int64)), [0, 0, 0])
    with pytest.raises(ValueError):
        make_verification_tag([1, 2, 3], np.ones((2, 2), dtype=np.int64))


def test_tag_associativity(rng):
    r = rng.integers(-100, 100, 5)
    wbar = rng.integers(-100, 100, (5, 12))
    v = make_verification_tag(r, wbar)
    for _ in range(100):
        x = rng.integers(-100, 100, (12, 1))
        assert int(v @ x[:, 0]) == int(r @ (wbar @ x)[:, 0])


def test_honest_result_always_accepted(rng):
    params = SecurityParams(lambda1=16, lambda2=4)
    shape = ConvShape(7, 6, 3, 3, 5)
    for _ in range(200):
        wbar, xbar_prime, sk, tag = instance(rng, shape, params)
        assert verify(matmul(wbar, xbar_prime), xbar_prime, sk.r, tag, params.tolerance)


def test_single_output_channel_tamper_always_caught(rng):
    params = SecurityParams(lambda1=16)
    shape = ConvShape(6, 6, 3, 2, 1)
    for _ in range(300):
        wbar, xbar_prime, sk, tag = instance(rng, shape, params)
        y = matmul(wbar, xbar_prime)
        y[0, rng.integers(y.shape[1])] += int(rng.integers(1, 1000)) * (1 if rng.random() < 0.5 else -1)
        assert not verify(y, xbar_prime, sk.r, tag)


def test_random_single_entry_tamper_detection_rate(rng):
    params = SecurityParams(lambda1=16, lambda2=2)
    shape = ConvShape(4, 4, 2, 2, 4)
    wbar, xbar_prime, _, _ = instance(rng, shape, params)
    honest = matmul(wbar, xbar_prime)
    caught = 0
    trials = 10**5
    for _ in range(trials):
        r = sample_z(params, rng, size=shape.c_out)
        tag = make_verification_tag(r, wbar)
        y = honest.copy()
        y[rng.integers(4), rng.integers(9)] += sample_z(params, rng)
        caught += not verify(y, xbar_prime, r, tag)
    assert caught / trials >= 0.999


def test_verify_ignores_changes_in_the_kernel_of_r(rng):
    params = SecurityParams(lambda1=8)
    shape = ConvShape(5, 5, 2, 2, 3)
    wbar, xbar_prime, sk, tag = instance(rng, shape, params)
    y = matmul(wbar, xbar_prime)
    r = sk.r
    # D with r @ D = 0: columns orthogonal to r, built from integer combinations
    u = np.array([r[1], -r[0], 0])
    d = np.outer(u, rng.integers(-5, 6, y.shape[1]))
    assert np.all(r @ d == 0)
    assert verify(y + d, xbar_prime, r, tag)
    assert not np.array_equal(y + d, y) or not d.any()


def test_verify_cost_matches_formula(rng):
    params = SecurityParams()
    shape = ConvShape(9, 8, 3, 3, 5)
    wbar, xbar_prime, sk, tag = instance(rng, shape, params)
    c = OpCounter()
    verify(matmul(wbar, xbar_prime), xbar_prime, sk.r, tag, counter=c)
    assert c.sm == (shape.c_out + shape.patch) * shape.windows


def test_verify_dimension_errors(rng):
    params = SecurityParams()
    shape = ConvShape(5, 5, 2, 2, 3)
    wbar, xbar_prime, sk, tag = instance(rng, shape, params)
    y = matmul(wbar, xbar_prime)
    with pytest.raises(ValueError):
        verify(y[:, :-1], xbar_prime, sk.r, tag)
    with pytest.raises(ValueError):
        verify(y, xbar_prime, sk.r[:-1], tag)
    with pytest.raises(ValueError):
        verify(y, xbar_prime, sk.r, tag[:-1])


def test_tolerance_policy_validation():
    with pytest.raises(ValueError):
        TolerancePolicy(-1, 0)
    assert TolerancePolicy.exact().is_exact
    with pytest.raises(ValueError):
        SecurityParams(mode="int", tolerance=TolerancePolicy(1e-3, 0))


def test_float_completeness_default_policy():
    rng = np.random.default_rng(2024)
    params = SecurityParams(lambda1=10, lambda2=3, mode="float")
    for _ in range(10**4):
        k = int(rng.integers(1, 4))
        shape = ConvShape(int(rng.integers(k, 7)), int(rng.integers(k, 7)), k, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        wbar, xbar_prime, sk, tag = instance(rng, shape, params, input_bound=2**10)
        assert verify(matmul(wbar, xbar_prime), xbar_prime, sk.r, tag, params.tolerance)


def test_float_tamper_of_small_magnitude_caught_on_modest_data(rng):
    params = SecurityParams(lambda1=4, lambda2=2, mode="float")
    shape = ConvShape(6, 6, 3, 2, 3)
    for _ in range(500):
        wbar, xbar_prime, sk, tag = instance(rng, shape, params, input_bound=1)
        y = matmul(wbar, xbar_prime)
        y[rng.integers(3), rng.integers(16)] += 1e-3 * (1 if rng.random() < 0.5 else -1)
        assert not verify(y, xbar_prime, sk.r, tag, params.tolerance)


@given(st.integers(0, 2**32 - 1))
def test_float_honest_accepted(seed):
    rng = np.random.default_rng(seed)
    params = SecurityParams(lambda1=16, lambda2=4, mode="float")
    shape = ConvShape(8, 8, 3, 4, 8)
    wbar, xbar_prime, sk, tag = instance(rng, shape, params, input_bound=1)
    assert verify(matmul(wbar, xbar_prime), xbar_prime, sk.r, tag, params.tolerance)
