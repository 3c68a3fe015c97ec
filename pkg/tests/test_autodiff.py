import warnings

import numpy as np
import pytest

from pssl import autodiff as ad
from pssl.autodiff import ParamStore, Tensor, ZeroVectorWarning, no_grad

from gradcheck import (KERNEL_CASES, check_gradients, kernel_error, sentence_encoder_error,
                       sequence_encoder_error)

SEEDS = range(20)


@pytest.mark.parametrize("name", sorted(KERNEL_CASES))
def test_kernel_gradients_match_central_differences(name):
    worst = max(kernel_error(name, s) for s in SEEDS)
    assert worst < 1e-4, f"{name}: {worst:.2e}"


def test_sentence_encoder_gradients():
    assert max(sentence_encoder_error(s) for s in SEEDS) < 1e-4


def test_sequence_encoder_gradients():
    assert max(sequence_encoder_error(s) for s in SEEDS) < 1e-4


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_broadcast_gradient_is_reduced_to_input_shape():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    (a * b).sum().backward()
    assert b.grad.shape == (1, 4)
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    z = (x * 2.0).sum()
    assert z.requires_grad


def test_non_finite_values_are_trapped():
    x = Tensor(np.array([0.0, 1.0]))
    with pytest.raises(FloatingPointError):
        with np.errstate(divide="ignore"):
            ad.log(x)


def test_embedding_padding_row_gets_no_gradient():
    w = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    out = ad.embedding(w, np.array([[0, 2, 0], [1, 0, 2]]), padding_idx=0)
    out.sum().backward()
    np.testing.assert_array_equal(w.grad[0], 0.0)
    np.testing.assert_array_equal(w.grad[2], 2.0)
    np.testing.assert_array_equal(w.grad[3], 0.0)


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(IndexError):
        ad.embedding(Tensor(np.zeros((3, 2))), [3])


def test_cosine_of_zero_vector_warns_and_is_zero():
    with pytest.warns(ZeroVectorWarning):
        c = ad.cosine(Tensor(np.zeros(3)), Tensor(np.ones(3)))
    assert c.item() == 0.0


def test_cosine_is_scale_invariant_and_bounded():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(50, 6)), rng.normal(size=(50, 6))
    c = ad.cosine(Tensor(a), Tensor(b)).data
    c2 = ad.cosine(Tensor(a * 7.5), Tensor(b * 0.01)).data
    np.testing.assert_allclose(c, c2, atol=1e-12)
    assert np.all(np.abs(c) <= 1.0)


def test_softmax_rows_sum_to_one_even_for_large_logits():
    x = Tensor(np.array([[1000.0, 1001.0, 999.0], [-5.0, 0.0, 5.0]]))
    s = ad.softmax(x, axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0)
    np.testing.assert_allclose(ad.logsumexp(x, axis=-1).data[0],
                               1001.0 + np.log(np.exp(-1) + 1 + np.exp(-2)))


def test_log_sigmoid_is_stable_in_the_tails():
    x = Tensor(np.array([-800.0, 0.0, 800.0]))
    out = ad.log_sigmoid(x).data
    np.testing.assert_allclose(out, [-800.0, -np.log(2.0), 0.0], atol=1e-12)


def test_layer_norm_output_statistics():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(3.0, 5.0, size=(4, 16)))
    y = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    p = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    store = ParamStore({"p": p})
    (p * Tensor(np.array([2.0, -3.0, 0.1]))).sum().backward()
    store.adam_step(lr=0.01)
    np.testing.assert_allclose(p.data, [0.99, -0.99, 0.49], atol=1e-6)
    assert p.grad is None


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(3)
    p = Tensor(rng.normal(size=5), requires_grad=True)
    store = ParamStore({"p": p})
    ref = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    target = rng.normal(size=5)
    for t in range(1, 30):
        ((p - Tensor(target)) * (p - Tensor(target))).sum().backward()
        g = 2 * (ref - target)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        store.adam_step(lr=0.05)
        np.testing.assert_allclose(p.data, ref, rtol=1e-12, atol=1e-12)


def test_adam_requires_gradients_and_reset_clears_state():
    p = Tensor(np.ones(2), requires_grad=True)
    store = ParamStore({"p": p})
    with pytest.raises(ValueError):
        store.adam_step(0.1)
    p.sum().backward()
    store.adam_step(0.1)
    store.reset_optimizer()
    assert store.step == 0 and not store.m["p"].any()


def test_duplicate_parameter_names_rejected():
    store = ParamStore({"a": Tensor(np.ones(1))})
    with pytest.raises(KeyError):
        store.add("a", Tensor(np.ones(1)))


def test_check_gradients_detects_a_wrong_backward():
    def bad_square(a):
        return ad._node(a.data ** 2, (a,), lambda g: (g * a.data,), "bad").sum()

    with warnings.catch_warnings():
        assert check_gradients(bad_square, [np.array([1.0, 2.0])]) > 0.1
