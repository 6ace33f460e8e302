import numpy as np
import pytest

from convoy.server import BEHAVIORS, CHEATING, ServerBehavior, adversary_compute, compute
from convoy.tensor import OpCounter, flatten_kernels, im2col


def test_identity_model_returns_input(rng):
    x = rng.integers(-50, 50, (6, 11))
    np.testing.assert_array_equal(compute(np.eye(6, dtype=np.int64), x), x)


def test_hand_example(ex3):
    w = np.array([[[[1, 0], [0, 1]]]])
    got = compute(flatten_kernels(w), im2col(ex3, 2))
    np.testing.assert_array_equal(got, [[6, 8, 12, 14]])


def test_server_multiply_count(rng):
    w = rng.integers(-3, 4, (2, 1, 2, 2))
    x = rng.integers(-3, 4, (1, 3, 3))
    c = OpCounter()
    compute(flatten_kernels(w), im2col(x, 2), c)
    assert c.sm == 32


def test_honest_behavior_bit_identical(rng):
    wbar = rng.uniform(-1, 1, (4, 27))
    xbar = rng.uniform(-1, 1, (27, 36))
    got = adversary_compute(wbar, xbar, ServerBehavior(), rng)
    assert got.tobytes() == compute(wbar, xbar).tobytes()


def test_lazy_zero_returns_zeros(rng):
    wbar = rng.integers(1, 5, (3, 4))
    xbar = rng.integers(1, 5, (4, 5))
    out = adversary_compute(wbar, xbar, ServerBehavior("lazy-zero"), rng)
    assert out.shape == (3, 5) and not out.any()


def test_tamper_one_changes_exactly_one_entry(rng):
    wbar = rng.integers(-5, 6, (4, 9))
    xbar = rng.integers(-5, 6, (9, 16))
    honest = compute(wbar, xbar)
    for _ in range(50):
        out = adversary_compute(wbar, xbar, ServerBehavior("tamper-one"), rng)
        assert np.count_nonzero(out != honest) == 1


def test_tamper_sparse_count(rng):
    wbar = rng.integers(-5, 6, (4, 9))
    xbar = rng.integers(-5, 6, (9, 16))
    honest = compute(wbar, xbar)
    out = adversary_compute(wbar, xbar, ServerBehavior("tamper-sparse", count=5), rng)
    assert np.count_nonzero(out != honest) == 5


@pytest.mark.parametrize("kind", CHEATING)
@pytest.mark.parametrize("zero_product", [False, True])
def test_cheating_always_differs(kind, zero_product, rng):
    wbar = np.zeros((3, 4), dtype=np.int64) if zero_product else rng.integers(-5, 6, (3, 4))
    xbar = rng.integers(-5, 6, (4, 6))
    for _ in range(20):
        out = adversary_compute(wbar, xbar, ServerBehavior(kind), rng)
        assert not np.array_equal(out, compute(wbar, xbar))


def test_behavior_parse_and_validation():
    assert ServerBehavior.parse("tamper-sparse:7").count == 7
    assert ServerBehavior.parse("scale-all:3").scale == 3
    assert str(ServerBehavior.parse("scale-all:3")) == "scale-all:3"
    assert set(BEHAVIORS) == {"honest", *CHEATING}
    for bad in ("nope", "honest:2", "tamper-sparse:0", "scale-all:1"):
        with pytest.raises(ValueError):
            ServerBehavior.parse(bad)


def test_int_scale_must_be_integral(rng):
    with pytest.raises(ValueError):
        adversary_compute(np.ones((2, 2), dtype=np.int64), np.ones((2, 2), dtype=np.int64),
                          ServerBehavior("scale-all", scale=1.5), rng)
