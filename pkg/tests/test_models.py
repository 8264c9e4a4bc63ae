import numpy as np
import pytest

from scarcegrad.checks import random_instance
from scarcegrad.models import (GcnParams, LabeledTargets, gcn_forward, gcn_loss, inner_grad_gcn,
                               inner_grad_labels, laplacian_reg_objective, laplacian_regularizer,
                               masked_loss)
from scarcegrad.tensor import ContractError, DimensionError, Tape


def _numpy_gcn(arrays, A, X):
    # independent plain-numpy forward pass
    H = X
    layers = [arrays[i:i + 3] for i in range(0, len(arrays), 3)]
    for l, (W1, W2, b) in enumerate(layers):
        Z = H @ W1 + A @ H @ W2 + b
        H = np.maximum(Z, 0) if l < len(layers) - 1 else Z
    return H


def test_gcn_forward_matches_numpy():
    rng = np.random.default_rng(0)
    A, X, _, _ = random_instance(rng, n=8, p=4)
    params = GcnParams.xavier([4, 5, 3], rng)
    tape = Tape()
    out = gcn_forward(params.on(tape), tape.constant(A), X).output.value
    assert np.allclose(out, _numpy_gcn(params.arrays(), A, X), atol=1e-14)


def test_gcn_shapes_checked():
    rng = np.random.default_rng(0)
    params = GcnParams.xavier([3, 2], rng)
    tape = Tape()
    with pytest.raises(DimensionError):
        gcn_forward(params.on(tape), tape.constant(np.eye(4)), np.ones((5, 3)))


def test_xavier_bounds():
    rng = np.random.default_rng(1)
    params = GcnParams.xavier([10, 6], rng)
    W1 = params.arrays()[0]
    assert np.all(np.abs(W1) <= np.sqrt(6.0 / 16) + 1e-15)
    assert np.all(params.arrays()[2] == 0)


@pytest.mark.parametrize("kind", ["mse", "cce"])
def test_hand_gcn_gradient_equals_reverse_pass(kind):
    rng = np.random.default_rng(2)
    c = 3 if kind == "cce" else 1
    A, X, targets, split = random_instance(rng, n=7, p=3, c=c, kind=kind)
    params = GcnParams.xavier([3, 4, 4, c], rng)
    tape = Tape()
    P = params.on(tape, requires_grad=True)
    Av = tape.constant(A)
    tr = gcn_forward(P, Av, X)
    loss = masked_loss(tr.output, targets, split.train, kind)
    auto = tape.backward(loss, P)
    hand = inner_grad_gcn(P, tr, Av, targets, split.train, kind)
    for p, g in zip(P, hand):
        assert np.allclose(g.value, auto[p], atol=1e-13)


def test_masked_loss_values():
    Y = np.array([[1.0], [2.0], [0.0]])
    t = LabeledTargets(Y, [True, True, False])
    tape = Tape()
    pred = tape.constant([[1.5], [2.0], [9.0]])
    assert masked_loss(pred, t, [0, 1], "mse").value[0, 0] == pytest.approx(0.125)
    with pytest.raises(ContractError):
        masked_loss(pred, t, [2], "mse")
    with pytest.raises(ContractError):
        masked_loss(pred, t, [], "mse")


def test_cce_uniform_logits():
    t = LabeledTargets(np.eye(4)[[1, 3]], [True, True])
    tape = Tape()
    loss = masked_loss(tape.constant(np.zeros((2, 4))), t, [0, 1], "cce")
    assert loss.value[0, 0] == pytest.approx(np.log(4))


def test_unlabelled_rows_zero_filled():
    t = LabeledTargets(np.array([[np.nan], [1.0]]), [False, True])
    assert t.Y[0, 0] == 0.0


def test_laplacian_regularizer_is_edge_sum():
    rng = np.random.default_rng(3)
    A, _, _, _ = random_instance(rng, n=6)
    Y = rng.normal(size=(6, 2))
    tape = Tape()
    val = laplacian_regularizer(tape.constant(Y), tape.constant(A)).value[0, 0]
    i, j = np.triu_indices(6, 1)
    ref = np.sum(A[i, j][:, None] * (Y[i] - Y[j]) ** 2)
    assert val == pytest.approx(ref, rel=1e-12)


def test_laplacian_inner_gradient_equals_reverse_pass():
    rng = np.random.default_rng(4)
    A, _, targets, split = random_instance(rng, n=8, c=2)
    Y0 = rng.normal(size=(8, 2))
    tape = Tape()
    Y = tape.leaf(Y0)
    Av = tape.constant(A)
    auto = tape.backward(laplacian_reg_objective(Y, Av, targets, split.train, 0.8), [Y])[Y]
    hand = inner_grad_labels(Y, Av, targets, split.train, 0.8).value
    assert np.allclose(hand, auto, atol=1e-14)


def test_laplacian_objective_rejects_bad_lambda_and_empty_graph():
    rng = np.random.default_rng(5)
    A, _, targets, split = random_instance(rng, n=6)
    tape = Tape()
    Y = tape.constant(np.zeros((6, 1)))
    with pytest.raises(ContractError):
        laplacian_reg_objective(Y, tape.constant(A), targets, split.train, 0.0)
    with pytest.raises(ContractError):
        laplacian_reg_objective(Y, tape.constant(np.zeros((6, 6))), targets, split.train, 1.0)


def test_gcn_loss_differentiable_in_adjacency():
    from scarcegrad.tensor import grad_check

    rng = np.random.default_rng(6)
    A, X, targets, split = random_instance(rng, n=6, p=3)
    params = GcnParams.xavier([3, 1], rng)  # single linear layer, no kinks
    err = grad_check(lambda t, Av: gcn_loss(params.on(t), Av, X, targets, split.train, "mse"), [A])
    assert err <= 1e-6
