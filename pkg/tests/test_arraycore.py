import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nssl import arraycore as ac
from nssl.arraycore import Tensor, grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


def test_softmax_uniform():
    out = ac.softmax(Tensor([0.0, 0.0, 0.0]), temperature=1.0)
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-7)


def test_matmul_identity():
    a = rng().normal(size=(3, 5))
    out = ac.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a.astype(np.float32))


def test_batch_norm_columns_standardised():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(50, 4))
    out = ac.batch_norm(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(out.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(0), 1.0, rtol=1e-5)
    with pytest.raises(ac.ShapeError):
        ac.batch_norm(Tensor(np.ones((1, 3))))


def test_layer_norm_constant_row_is_zero():
    out = ac.layer_norm(Tensor(np.full((2, 7), 3.5)))
    assert np.all(out.data == 0.0)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ac.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ac.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ac.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ac.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_domain_errors():
    with pytest.raises(ac.DomainError):
        ac.log(Tensor([1.0, -1.0]))
    with pytest.raises(ac.DomainError):
        ac.sqrt(Tensor([-0.5]))


def test_default_dtype_is_float32():
    t = Tensor([1.0, 2.0])
    assert t.data.dtype == np.float32
    assert ac.sum_(t).data.dtype == np.float32
    with ac.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64


def test_grad_check_linear_function_exact():
    rep = grad_check(lambda x: ac.sum_(x), rng().normal(size=(3, 4)))
    np.testing.assert_array_equal(rep.analytic, np.ones((3, 4)))
    assert rep.max_rel_err < 1e-9
    assert rep.passed


def test_grad_check_constant_function():
    rep = grad_check(lambda x: Tensor(2.0), rng().normal(size=5))
    assert np.all(rep.analytic == 0)
    assert rep.max_rel_err == 0.0


def test_grad_check_rejects_bad_eps_and_nonfinite():
    with pytest.raises(ValueError):
        grad_check(lambda x: ac.sum_(x), np.ones(2), eps=1.0)
    with pytest.raises(ac.NonFiniteError):
        grad_check(lambda x: ac.sum_(x) * np.inf, np.ones(2))


def test_grad_check_mlp_cross_entropy():
    r = rng(3)
    w1, b1 = r.normal(size=(6, 8)) * 0.5, r.normal(size=8) * 0.1
    w2 = r.normal(size=(8, 4)) * 0.5
    labels = np.array([0, 2, 3, 1, 2])
    onehot = np.eye(4)[labels]

    def f(x):
        h = ac.gelu(ac.linear(x, Tensor(w1), Tensor(b1)))
        logp = ac.log_softmax(ac.matmul(h, Tensor(w2)))
        return -ac.mean(ac.sum_(logp * onehot, axis=-1))

    rep = grad_check(f, r.normal(size=(5, 6)), eps=1e-4)
    assert rep.max_rel_err < 1e-4


# per-op finite-difference coverage: every differentiable op, <= 64 elements
X = rng(11).normal(size=(4, 5))
POS = np.abs(rng(12).normal(size=(4, 5))) + 0.5
W = rng(13).normal(size=(5, 3))
W_ROW = rng(14).normal(size=5)

OPS = {
    "add": lambda x: ac.sum_(ac.add(x, Tensor(W_ROW)) ** 2),
    "sub": lambda x: ac.sum_(ac.sub(Tensor(W_ROW), x) ** 2),
    "mul": lambda x: ac.sum_(ac.mul(x, x) * Tensor(X)),
    "div": lambda x: ac.sum_(ac.div(Tensor(X), x * x + 1.0)),
    "power": lambda x: ac.sum_(ac.power(x * x + 1.0, 1.5)),
    "exp": lambda x: ac.sum_(ac.exp(x) * Tensor(X)),
    "log": lambda x: ac.sum_(ac.log(x * x + 0.5)),
    "sqrt": lambda x: ac.sum_(ac.sqrt(x * x + 0.3) * Tensor(X)),
    "gelu": lambda x: ac.sum_(ac.gelu(x) * Tensor(X)),
    "matmul": lambda x: ac.sum_(ac.matmul(x, Tensor(W)) ** 2),
    "matmul_batched": lambda x: ac.sum_(
        ac.matmul(ac.reshape(x, (2, 2, 5)), Tensor(W)) ** 3),
    "softmax": lambda x: ac.sum_(ac.softmax(x, temperature=0.7) * Tensor(X)),
    "log_softmax": lambda x: ac.sum_(ac.log_softmax(x, axis=0, temperature=1.3) * Tensor(X)),
    "logsumexp": lambda x: ac.sum_(ac.logsumexp(x, axis=1) ** 2),
    "logsumexp_masked": lambda x: ac.sum_(
        ac.logsumexp(x, axis=1, mask=~np.eye(4, 5, dtype=bool)) ** 2),
    "layer_norm": lambda x: ac.sum_(
        ac.layer_norm(x, Tensor(W_ROW), Tensor(W_ROW * 0.1)) * Tensor(X)),
    "batch_norm": lambda x: ac.sum_(
        ac.batch_norm(x, Tensor(W_ROW), Tensor(W_ROW * 0.1)) * Tensor(X)),
    "reshape_transpose": lambda x: ac.sum_(ac.transpose(ac.reshape(x, (5, 4))) * Tensor(X)),
    "getitem_slice": lambda x: ac.sum_(x[1:3, ::2] ** 2),
    "getitem_fancy": lambda x: ac.sum_(x[np.array([0, 0, 3]), np.array([1, 1, 4])] ** 2),
    "concat": lambda x: ac.sum_(ac.concat([x, x * 2.0], axis=1) ** 2),
    "stack": lambda x: ac.sum_(ac.stack([x, x * x], axis=0) * 0.5),
    "mean": lambda x: ac.sum_(ac.mean(x, axis=0) ** 2) + ac.mean(x),
    "l2_normalize": lambda x: ac.sum_(ac.l2_normalize(x) * Tensor(X)),
    "cosine_similarity": lambda x: ac.sum_(ac.cosine_similarity(x, Tensor(X)) ** 2),
    "pairwise_sq_dist": lambda x: ac.sum_(ac.sqrt(ac.pairwise_sq_dist(x, Tensor(POS)) + 1.0)),
    "where": lambda x: ac.sum_(ac.where(X > 0, x * x, x * 3.0)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rep = grad_check(OPS[name], rng(21).normal(size=(4, 5)), eps=1e-5)
    assert rep.max_rel_err < 1e-4, name


def test_backward_linearity_of_adjoints():
    r = rng(5)
    x0 = r.normal(size=(3, 4))
    w = Tensor(r.normal(size=(4, 4)))

    def outputs(x):
        return ac.softmax(ac.gelu(ac.matmul(x, w)), axis=-1)

    x = Tensor(x0, requires_grad=True)
    ac.sum_(outputs(x)).backward()
    total = x.grad.copy()

    per = np.zeros_like(x0, dtype=np.float32)
    for i in range(3):
        for j in range(4):
            xi = Tensor(x0, requires_grad=True)
            outputs(xi)[i, j].backward()
            per += xi.grad
    np.testing.assert_allclose(total, per, atol=1e-6)


def test_shared_subexpression_gradient_accumulates():
    x = Tensor([2.0, 3.0], requires_grad=True)
    y = x * x
    ac.sum_(y + y).backward()
    np.testing.assert_allclose(x.grad, [8.0, 12.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ac.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_deterministic_outputs(seed):
    a = np.random.default_rng(seed).normal(size=(6, 5))
    f = lambda: ac.layer_norm(ac.gelu(ac.matmul(Tensor(a), Tensor(a.T)))).data
    assert f().tobytes() == f().tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 8))
def test_random_composite_gradients(seed, n, d):
    r = np.random.default_rng(seed)
    w = Tensor(r.normal(size=(d, d)))

    def f(x):
        h = ac.layer_norm(ac.gelu(ac.matmul(x, w)) + x)
        return ac.sum_(ac.log_softmax(h) * h)

    rep = grad_check(f, r.normal(size=(n, d)))
    assert rep.max_rel_err < 1e-4
