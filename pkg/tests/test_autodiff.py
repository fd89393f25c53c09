"""Tests for the tape-based autodiff core."""
from __future__ import annotations

import numpy as np
import pytest

from refusion_desk import autodiff as ad
from refusion_desk.autodiff import DiffArray, Parameter, RngStream, Tape
from refusion_desk.exceptions import DimensionError, ParameterError

OP_TOLERANCE = 1e-5


def _away_from(values: np.ndarray, points: tuple[float, ...], margin: float = 0.05) -> np.ndarray:
    for point in points:
        close = np.abs(values - point) < margin
        values[close] += 2 * margin
    return values


# op name -> (function of leaves, input builder)
OPS = {
    "add": (lambda a, b: ad.add(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (lambda a, b: ad.sub(a, b), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
    "mul": (lambda a, b: ad.mul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))]),
    "div": (lambda a, b: ad.div(a, b), lambda r: [r.normal(size=(3, 4)), 1.5 + np.abs(r.normal(size=(3, 4)))]),
    "neg": (lambda a: ad.neg(a), lambda r: [r.normal(size=(5,))]),
    "exp": (lambda a: ad.exp(a), lambda r: [r.normal(size=(2, 3))]),
    "log": (lambda a: ad.log(a), lambda r: [0.5 + np.abs(r.normal(size=(2, 3)))]),
    "tanh": (lambda a: ad.tanh(a), lambda r: [r.normal(size=(4,))]),
    "clip": (
        lambda a: ad.clip(a, -1.0, 1.0),
        lambda r: [_away_from(r.uniform(-2.0, 2.0, size=(3, 4)), (-1.0, 1.0))],
    ),
    "matmul": (lambda a, b: ad.matmul(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "transpose": (lambda a: ad.transpose(a, (1, 0, 2)), lambda r: [r.normal(size=(2, 3, 4))]),
    "swapaxes": (lambda a: ad.swapaxes(a), lambda r: [r.normal(size=(2, 3, 4))]),
    "reshape": (lambda a: ad.reshape(a, (3, 4)), lambda r: [r.normal(size=(2, 6))]),
    "getitem": (lambda a: ad.getitem(a, (slice(None), slice(1, 3))), lambda r: [r.normal(size=(3, 4))]),
    "take_rows": (lambda a: ad.take_rows(a, np.array([[0, 2], [2, 1]])), lambda r: [r.normal(size=(3, 4))]),
    "gather_positions": (lambda a: ad.gather_positions(a, np.array([2, 0])), lambda r: [r.normal(size=(2, 3, 4))]),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "reduce_sum": (lambda a: ad.reduce_sum(a, axis=1), lambda r: [r.normal(size=(3, 4))]),
    "reduce_mean": (lambda a: ad.reduce_mean(a, axis=0, keepdims=True), lambda r: [r.normal(size=(3, 4))]),
    "softmax": (lambda a: ad.softmax(a, axis=-1), lambda r: [r.normal(size=(3, 5))]),
    "exclusive_cumsum": (lambda a: ad.exclusive_cumsum(a), lambda r: [r.normal(size=(4, 6))]),
    "layer_norm": (
        lambda x, g, b: ad.layer_norm(x, g, b),
        lambda r: [r.normal(size=(3, 6)), 1.0 + 0.1 * r.normal(size=(6,)), r.normal(size=(6,))],
    ),
    "gelu": (lambda a: ad.gelu(a), lambda r: [r.normal(size=(3, 4))]),
    "cross_entropy": (lambda a: ad.cross_entropy(a, [0, 2, 1]), lambda r: [r.normal(size=(3, 4))]),
}


@pytest.mark.unit
@pytest.mark.parametrize("seed", range(100))
@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name: str, seed: int):
    """Analytic gradients of every op agree with central differences."""
    fn, build = OPS[name]
    numpy_rng = np.random.default_rng(seed)
    inputs = build(numpy_rng)
    out_shape = fn(*(DiffArray(x) for x in inputs)).shape
    weights = numpy_rng.normal(size=out_shape)

    def loss(*leaves: DiffArray) -> DiffArray:
        return ad.reduce_sum(ad.mul(fn(*leaves), weights))

    error = ad.gradient_check(loss, inputs)
    assert error < OP_TOLERANCE, f"{name} seed {seed}: relative error {error:.2e}"


class TestTape:
    """Recording and backward semantics."""

    def test_untracked_ops_record_nothing(self):
        tape = Tape()
        out = ad.add(np.ones(3), np.ones(3))
        assert not out.tracked
        assert len(tape) == 0

    def test_parameter_watched_once_accumulates(self):
        param = Parameter("w", np.array([2.0, -1.0]))
        tape = Tape()
        x = ad.read(param, tape)
        y = ad.read(param, tape)
        assert x is y
        loss = ad.reduce_sum(ad.add(ad.mul(x, 3.0), ad.mul(y, y)))
        grads = ad.backward(tape, loss)
        np.testing.assert_allclose(grads[param], 3.0 + 2.0 * param.value)

    def test_leaf_off_path_has_zero_gradient(self):
        tape = Tape()
        used = tape.watch(np.array([1.0, 2.0]))
        unused = tape.watch(np.array([[3.0]]))
        grads = ad.backward(tape, ad.reduce_sum(used))
        np.testing.assert_array_equal(grads[unused], np.zeros((1, 1)))
        unwatched = Parameter("never", np.zeros(4))
        np.testing.assert_array_equal(grads[unwatched], np.zeros(4))

    def test_gradients_for_parameters_by_name(self):
        a, b = Parameter("a", [1.0]), Parameter("b", [4.0])
        tape = Tape()
        loss = ad.reduce_sum(ad.mul(ad.read(a, tape), ad.read(b, tape)))
        grads = ad.backward(tape, loss).for_parameters([a, b])
        assert grads["a"].tolist() == [4.0]
        assert grads["b"].tolist() == [1.0]

    def test_backward_needs_scalar(self):
        tape = Tape()
        x = tape.watch(np.ones(3))
        with pytest.raises(DimensionError):
            ad.backward(tape, ad.mul(x, 2.0))

    def test_gradient_check_parameters(self):
        weight = Parameter("weight", np.random.default_rng(3).normal(size=(3, 2)))

        def loss(tape: Tape | None) -> DiffArray:
            x = ad.matmul(np.ones((1, 3)), ad.read(weight, tape))
            return ad.reduce_sum(ad.tanh(x))

        errors = ad.gradient_check_parameters(loss, [weight])
        assert errors["weight"] < OP_TOLERANCE


class TestOpContracts:
    """Shape and value contracts of individual ops."""

    def test_matmul_rejects_inner_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(np.ones((2, 3)), np.ones((4, 2)))

    def test_broadcast_mismatch_raises(self):
        with pytest.raises(DimensionError):
            ad.add(np.ones((2, 3)), np.ones((4,)))

    def test_exclusive_cumsum_values(self):
        out = ad.exclusive_cumsum(np.array([0.2, 0.3, 0.5])).values
        assert out[0] == 0.0
        np.testing.assert_allclose(out, [0.0, 0.2, 0.5])

    def test_softmax_sums_to_one(self):
        out = ad.softmax(np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]])).values
        np.testing.assert_allclose(out.sum(axis=-1), [1.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(out[0], [0.09003057, 0.24472847, 0.66524096], atol=1e-8)

    def test_cross_entropy_label_range(self):
        with pytest.raises(ParameterError):
            ad.cross_entropy(np.zeros((1, 3)), [3])

    def test_cross_entropy_uniform_logits(self):
        assert ad.cross_entropy(np.zeros(4), 1).item() == pytest.approx(np.log(4.0))

    def test_clip_blocks_gradient_outside(self):
        tape = Tape()
        x = tape.watch(np.array([-2.0, 0.5, 3.0]))
        grads = ad.backward(tape, ad.reduce_sum(ad.clip(x, 0.0, 1.0)))
        assert grads[x].tolist() == [0.0, 1.0, 0.0]


class TestRandomness:
    """Counter-based random streams."""

    def test_same_seed_replays(self):
        a, b = RngStream(5), RngStream(5)
        np.testing.assert_array_equal(a.normal((3, 3)), b.normal((3, 3)))
        np.testing.assert_array_equal(a.gumbel(4), b.gumbel(4))
        assert a.counter == b.counter

    def test_split_streams_differ(self):
        root = RngStream(5)
        left, right = root.split(1), root.split(2)
        assert not np.array_equal(left.uniform(8), right.uniform(8))
        np.testing.assert_array_equal(RngStream(5).split(1).uniform(8), root.split(1).uniform(8))

    def test_uniform_open_interval(self):
        samples = RngStream(9).uniform(10_000)
        assert samples.min() > 0.0
        assert samples.max() < 1.0

    def test_gumbel_softmax_rejects_non_positive_tau(self):
        with pytest.raises(ParameterError):
            ad.gumbel_softmax_sample(np.zeros(3), 0.0, RngStream(0))

    def test_gumbel_softmax_noise_free_is_softmax(self):
        logits = np.array([0.5, -1.0, 2.0])
        out = ad.gumbel_softmax_sample(logits, 0.5, None, noise_free=True).values
        np.testing.assert_allclose(out, ad.softmax(logits / 0.5).values)

    def test_gumbel_softmax_needs_stream_when_noisy(self):
        with pytest.raises(ParameterError):
            ad.gumbel_softmax_sample(np.zeros(3), 1.0, None)

    def test_gumbel_softmax_cold_sample_is_hard_argmax(self):
        """At tau=0.01 the sample picks argmax(logits + g), so picks follow softmax(logits)."""
        print("\n\n=== Testing cold Gumbel-Softmax samples ===")
        logits = np.array([1.0, 0.0, -0.5, 0.5])
        picks = np.zeros(len(logits))
        for seed in range(1000):
            sample = ad.gumbel_softmax_sample(logits, 0.01, RngStream(seed)).values
            noise = RngStream(seed).gumbel(logits.shape)
            assert np.argmax(sample) == np.argmax(logits + noise), f"seed {seed}"
            picks[np.argmax(sample)] += 1
        frequencies = picks / 1000
        np.testing.assert_allclose(frequencies, ad.softmax(logits).values, atol=0.05)
        print(f"[OK] pick frequencies {np.round(frequencies, 3).tolist()}")


class TestFlopCounter:
    """Instrumented FLOP counting."""

    def test_matmul_counts_multiply_adds(self):
        with ad.count_flops() as counter:
            ad.matmul(np.ones((4, 3)), np.ones((3, 5)))
        assert counter.total == 2 * 4 * 5 * 3
        assert counter.by_op == {"matmul": 120}

    def test_shape_ops_are_free(self):
        with ad.count_flops() as counter:
            x = ad.reshape(np.ones((2, 6)), (3, 4))
            ad.transpose(x)
            ad.getitem(x, 0)
        assert counter.total == 0

    def test_counter_inactive_outside_block(self):
        with ad.count_flops() as counter:
            ad.exp(np.ones(3))
        ad.exp(np.ones(100))
        assert counter.total == 3
