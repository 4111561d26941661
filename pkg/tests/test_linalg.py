import math

import numpy as np
import pytest

from faegen.linalg import (
    SeededRng,
    ShapeError,
    add,
    concat,
    diag,
    draw_gaussian,
    draw_uniform,
    hadamard,
    matmul,
    sigmoid_ew,
    softmax,
    tanh_ew,
)


class TestMatmul:
    def test_identity(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(np.eye(2), b), b)

    def test_hand_computed(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = np.array([[19.0, 22.0], [43.0, 50.0]])
        assert np.array_equal(matmul(a, b), expected)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_associativity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(4, 5))
            c = rng.normal(size=(5, 2))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5], atol=1e-15)

    def test_exact_exponentials(self):
        out = softmax(np.array([math.log(1.0), math.log(3.0)]))
        assert np.allclose(out, [0.25, 0.75], atol=1e-12)

    def test_large_inputs_no_overflow(self):
        out = softmax(np.array([1000.0, 1000.0]))
        assert np.allclose(out, [0.5, 0.5], atol=1e-15)

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            v = rng.normal(scale=10.0, size=rng.integers(1, 12))
            out = softmax(v)
            assert abs(out.sum() - 1.0) <= 1e-12
            shifted = softmax(v + 123.456)
            assert np.max(np.abs(out - shifted)) <= 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            softmax(np.array([]))


class TestDiag:
    def test_single(self):
        assert np.array_equal(diag(np.array([1.0])), [[1.0]])

    def test_two(self):
        assert np.array_equal(diag(np.array([1.0, 2.0])), [[1.0, 0.0], [0.0, 2.0]])

    def test_zeros(self):
        assert np.array_equal(diag(np.zeros(3)), np.zeros((3, 3)))

    def test_diag_matmul_equals_hadamard(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            v = rng.normal(size=6)
            x = rng.normal(size=6)
            assert np.max(np.abs(matmul(diag(v), x) - hadamard(v, x))) <= 1e-15


class TestElementwise:
    def test_tanh_zero(self):
        assert np.array_equal(tanh_ew(np.array([0.0])), [0.0])

    def test_sigmoid_zero(self):
        assert np.array_equal(sigmoid_ew(np.array([0.0])), [0.5])

    def test_sigmoid_stable_at_extremes(self):
        out = sigmoid_ew(np.array([700.0, -700.0]))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)
        assert np.all(np.isfinite(out))

    def test_hadamard(self):
        assert np.array_equal(hadamard(np.array([2.0, 3.0]), np.array([4.0, 5.0])), [8.0, 15.0])

    def test_add_and_concat(self):
        assert np.array_equal(add(np.array([1.0, 2.0]), np.array([3.0, 4.0])), [4.0, 6.0])
        assert np.array_equal(concat(np.array([1.0]), np.array([2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hadamard(np.zeros(2), np.zeros(3))
        with pytest.raises(ShapeError):
            add(np.zeros(2), np.zeros(3))


class TestSeededRng:
    def test_same_seed_same_sequence(self):
        a = SeededRng(99)
        b = SeededRng(99)
        assert np.array_equal(draw_uniform(a, -1.0, 1.0, 100), draw_uniform(b, -1.0, 1.0, 100))
        assert np.array_equal(draw_gaussian(a, 0.0, 2.0, 100), draw_gaussian(b, 0.0, 2.0, 100))

    def test_zero_sigma_gives_mean(self):
        rng = SeededRng(5)
        out = draw_gaussian(rng, 3.25, 0.0, 10)
        assert np.array_equal(out, np.full(10, 3.25))

    def test_uniform_mean(self):
        rng = SeededRng(7)
        out = draw_uniform(rng, 0.0, 1.0, 100_000)
        assert abs(out.mean() - 0.5) < 0.01
        assert out.min() >= 0.0 and out.max() < 1.0

    def test_gaussian_moments(self):
        rng = SeededRng(11)
        out = draw_gaussian(rng, 1.0, 2.0, 100_000)
        assert abs(out.mean() - 1.0) < 0.03
        assert abs(out.std() - 2.0) < 0.03

    def test_shuffle_deterministic(self):
        a = list(range(20))
        b = list(range(20))
        SeededRng(3).shuffle(a)
        SeededRng(3).shuffle(b)
        assert a == b
        assert sorted(a) == list(range(20))

    def test_uniform_rejects_bad_range(self):
        with pytest.raises(ValueError):
            SeededRng(0).uniform(1.0, 1.0, 3)
