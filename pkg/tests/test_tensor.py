import numpy as np
import pytest

from scarcegrad.tensor import ContractError, DimensionError, PRIMITIVES, Tape, grad_check


def test_matmul_identity_and_relu_and_softmax():
    tape = Tape()
    M = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = tape.matmul(tape.constant(np.eye(2)), tape.constant(M))
    assert np.array_equal(out.value, M)
    assert np.array_equal(tape.relu(tape.constant([[-1.0, 2.0]])).value, [[0.0, 2.0]])
    assert np.allclose(tape.softmax_rows(tape.constant([[0.0, 0.0]])).value, [[0.5, 0.5]])


def test_sum_of_square_gradient():
    tape = Tape()
    x = tape.leaf([[3.0]])
    g = tape.backward(tape.reduce_sum(tape.square(x)))
    assert g[x][0, 0] == 6.0


def test_non_scalar_root_rejected():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    with pytest.raises(ContractError):
        tape.backward(x * 2.0)


def test_shape_mismatch_names_primitive():
    tape = Tape()
    with pytest.raises(DimensionError, match="matmul"):
        tape.matmul(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((2, 3))))
    with pytest.raises(DimensionError, match="add"):
        tape.add(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((3, 2))))


def test_log_of_nonpositive_is_a_contract_error():
    tape = Tape()
    with pytest.raises(ContractError):
        tape.log(tape.leaf([[0.0, 1.0]]))


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    B = rng.normal(size=(2, 2))
    err = grad_check(lambda tape, A: tape.reduce_sum(A @ tape.constant(B)), [np.eye(2)])
    assert err <= 1e-5


def test_fused_cce_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(1, 4))
    onehot = np.eye(4)[[2]]
    tape = Tape()
    zv = tape.leaf(z)
    loss = -tape.reduce_sum(tape.log_softmax_rows(zv) * tape.constant(onehot))
    g = tape.backward(loss)[zv]
    sm = np.exp(z) / np.exp(z).sum()
    assert np.allclose(g, sm - onehot, atol=1e-14)
    assert grad_check(lambda t, v: -t.reduce_sum(t.log_softmax_rows(v) * t.constant(onehot)), [z]) <= 1e-6


def test_grad_check_frobenius_and_constant():
    rng = np.random.default_rng(2)
    assert grad_check(lambda t, x: t.reduce_sum(t.square(x)), [rng.normal(size=(3, 3))]) <= 1e-6
    assert grad_check(lambda t, x: t.constant([[4.0]]), [rng.normal(size=(3, 3))]) == 0.0


def test_grad_check_step_range():
    with pytest.raises(ContractError):
        grad_check(lambda t, x: t.reduce_sum(x), [np.ones((1, 1))], h=1e-2)
    with pytest.raises(ContractError):
        grad_check(lambda t, x: t.reduce_sum(x), [np.ones((1, 1))], h=0.0)


def test_linearity_of_backward():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(4, 3))
    W = rng.normal(size=(3, 2))

    def grads(a, b):
        tape = Tape()
        x = tape.leaf(X)
        f = tape.reduce_sum(tape.exp(x @ tape.constant(W)))
        g = tape.reduce_sum(tape.square(x))
        return tape.backward(f * a + g * b)[x], tape.backward(f)[x], tape.backward(g)[x]

    a, b = 1.7, -0.3
    combo, gf, gg = grads(a, b)
    ref = a * gf + b * gg
    assert np.max(np.abs(combo - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_tape_reusable_for_second_root():
    tape = Tape()
    x = tape.leaf([[2.0, -1.0]])
    r1 = tape.reduce_sum(tape.square(x))
    r2 = tape.reduce_sum(x * 3.0)
    n = len(tape)
    g1 = tape.backward(r1)[x]
    g2 = tape.backward(r2)[x]
    assert len(tape) == n
    assert np.array_equal(g1, [[4.0, -2.0]])
    assert np.array_equal(g2, [[3.0, 3.0]])


def test_intermediate_gradients_and_unreached_zero():
    tape = Tape()
    x = tape.leaf([[1.0, 2.0]])
    y = tape.leaf([[5.0]])
    h = x * 2.0
    root = tape.reduce_sum(tape.square(h))
    g = tape.backward(root, [x, h, y])
    assert np.array_equal(g[h], 2.0 * h.value)
    assert np.array_equal(g[y], [[0.0]])


def test_determinism_bit_identical():
    def once():
        rng = np.random.default_rng(11)
        tape = Tape()
        A = tape.leaf(rng.normal(size=(5, 5)))
        B = tape.constant(rng.normal(size=(5, 2)))
        root = tape.reduce_sum(tape.log_softmax_rows(tape.relu(A) @ B))
        return root.value.tobytes(), tape.backward(root)[A].tobytes()

    assert once() == once()


def test_topological_order_of_nodes():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = tape.relu(x @ x) + x
    tape.reduce_sum(y)
    for k, (op, parents, _) in enumerate(tape.nodes):
        assert all(p < k for p in parents)


def test_sqrt_gradient_at_zero_is_zero():
    tape = Tape()
    x = tape.leaf([[0.0, 4.0]])
    g = tape.backward(tape.reduce_sum(tape.sqrt(x)))[x]
    assert np.array_equal(g, [[0.0, 0.25]])


def test_relu_subgradient_at_zero():
    tape = Tape()
    x = tape.leaf([[0.0]])
    assert tape.backward(tape.reduce_sum(tape.relu(x)))[x][0, 0] == 0.0


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_every_primitive_has_fd_coverage(name):
    from scarcegrad.checks import _primitive_cases

    cases = _primitive_cases()
    keys = [k for k in cases if k.split("[")[0] == name]
    assert keys
    rng = np.random.default_rng(5)
    for key in keys:
        for _ in range(5):
            point, f = cases[key](rng)
            assert grad_check(f, point) <= 1e-5
