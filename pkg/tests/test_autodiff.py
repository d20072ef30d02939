import numpy as np
import pytest

from softreplay import autodiff as ad
from softreplay.errors import GradError, NonFiniteError, ShapeError, TargetError


def rel_err(approx, exact):
    """Max abs difference scaled by the max magnitude of the exact value."""
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    denom = max(np.abs(exact).max(), 1e-12)
    return np.abs(approx - exact).max() / denom


def random_dist_rows(rng, b, c):
    t = rng.uniform(0.05, 1.0, size=(b, c))
    return t / t.sum(axis=1, keepdims=True)


# ------------------------------------------------------------- basic forward

def test_identity_and_relu_forward():
    x = ad.constant([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(x.data, [1.0, 2.0, 3.0])
    r = ad.relu(ad.constant([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(r.data, [[0.0, 0.0, 2.0]])


def test_matmul_forward():
    out = ad.matmul(ad.constant([[1.0, 2.0], [3.0, 4.0]]), ad.constant([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_forward_deterministic():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    a = ad.affine(ad.constant(x), ad.constant(w), ad.constant(b)).data
    bb = ad.affine(ad.constant(x), ad.constant(w), ad.constant(b)).data
    assert a.tobytes() == bb.tobytes()


def test_nonfinite_raises():
    big = ad.constant(np.full((2, 2), 1e308))
    with pytest.raises(NonFiniteError):
        ad.matmul(big, big)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((3, 2))))


# ------------------------------------------------------------------ backward

def test_square_gradient():
    x = ad.Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    y.backward()
    np.testing.assert_allclose(x.grad, 6.0)


def test_constant_graph_zero_gradient():
    x = ad.Tensor(np.ones(4), requires_grad=True)
    loss = ad.mean(ad.constant(np.full(3, 2.0)))
    loss.backward()
    assert x.grad is None


def test_backward_seed_shape_checked():
    x = ad.Tensor(np.zeros((2, 2)), requires_grad=True)
    y = ad.scale(x, 2.0)
    with pytest.raises(GradError):
        y.backward()
    with pytest.raises(ShapeError):
        y.backward(np.zeros(3))


def test_repeat_backward_does_not_accumulate():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    y.backward(np.ones(1))
    first = x.grad.copy()
    y.backward(np.ones(1))
    np.testing.assert_array_equal(x.grad, first)


def _mlp_loss(leaves, x, targets):
    h = ad.relu(ad.affine(ad.constant(x), leaves["w0"], leaves["b0"]))
    z = ad.affine(h, leaves["w1"], leaves["b1"])
    return ad.softmax_cross_entropy(z, targets)


def _random_mlp(rng, d=4, h=5, c=3):
    return ad.ParameterSet.build([
        ("w0", rng.normal(size=(d, h))),
        ("b0", rng.normal(size=h)),
        ("w1", rng.normal(size=(h, c))),
        ("b1", rng.normal(size=c)),
    ])


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(10):
        theta = _random_mlp(rng)
        x = rng.normal(size=(3, 4))
        t = random_dist_rows(rng, 3, 3)

        leaves = theta.leaves()
        loss = _mlp_loss(leaves, x, t)
        loss.backward()
        analytic = theta.gather_grad(leaves)

        def f(vec):
            return float(_mlp_loss(theta.leaves(vec), x, t).data)

        fd = ad.finite_diff_grad(f, theta.values.copy(), eps=1e-5)
        assert rel_err(analytic, fd) < 1e-6


PRIMITIVE_CASES = 110


def test_primitive_gradients_match_finite_differences():
    """Every primitive's reverse rule against central differences."""
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < PRIMITIVE_CASES:
        b, k, c = rng.integers(2, 5, size=3)
        x = rng.normal(size=(b, k))
        # keep relu inputs away from the kink so the FD oracle is valid
        x[np.abs(x) < 1e-3] += 0.1
        w = rng.normal(size=(k, c))
        bias = rng.normal(size=c)
        t = random_dist_rows(rng, b, c)
        other = rng.normal(size=(b, c))
        seed_m = rng.normal(size=(b, c))

        def build(vec, op):
            xt = ad.Tensor(vec.reshape(b, k), requires_grad=True)
            if op == "matmul":
                out = ad.matmul(xt, ad.constant(w))
            elif op == "affine":
                out = ad.affine(xt, ad.constant(w), ad.constant(bias))
            elif op == "add":
                out = ad.add(ad.matmul(xt, ad.constant(w)), ad.constant(other))
            elif op == "sub":
                out = ad.sub(ad.matmul(xt, ad.constant(w)), ad.constant(other))
            elif op == "mul":
                out = ad.mul(ad.matmul(xt, ad.constant(w)), ad.constant(other))
            elif op == "relu":
                out = ad.relu(xt)
                return ad.mean(out), xt
            elif op == "softmax":
                out = ad.softmax_rows(ad.matmul(xt, ad.constant(w)))
                return ad.mean(ad.mul(out, ad.constant(other))), xt
            elif op == "xent":
                return ad.softmax_cross_entropy(ad.matmul(xt, ad.constant(w)), t), xt
            elif op == "mse":
                return ad.mse(ad.matmul(xt, ad.constant(w)), other), xt
            elif op == "scale":
                out = ad.scale(ad.matmul(xt, ad.constant(w)), 0.37)
            else:
                raise AssertionError(op)
            return ad.mean(ad.mul(out, ad.constant(seed_m))), xt

        for op in ("matmul", "affine", "add", "sub", "mul", "relu", "softmax",
                   "xent", "mse", "scale"):
            loss, xt = build(x.ravel().copy(), op)
            loss.backward()
            analytic = xt.grad.copy()
            fd = ad.finite_diff_grad(
                lambda v, op=op: float(build(v, op)[0].data), x.ravel().copy())
            assert rel_err(analytic, fd.reshape(b, k)) < 1e-6, op
            checked += 1


# --------------------------------------------------------------- softmax-CE

def test_xent_uniform_logits_onehot():
    z = ad.constant(np.zeros((1, 4)))
    t = np.array([[1.0, 0.0, 0.0, 0.0]])
    loss = ad.softmax_cross_entropy(z, t)
    np.testing.assert_allclose(float(loss.data), np.log(4.0), rtol=1e-15)


def test_xent_matching_distribution_gives_entropy_and_zero_grad():
    rng = np.random.default_rng(3)
    t = random_dist_rows(rng, 2, 5)
    z = ad.Tensor(np.log(t) + 1.7, requires_grad=True)  # shift cancels in softmax
    loss = ad.softmax_cross_entropy(z, t)
    entropy = -(t * np.log(t)).sum(axis=1).mean()
    np.testing.assert_allclose(float(loss.data), entropy, rtol=1e-12)
    loss.backward()
    np.testing.assert_allclose(z.grad, np.zeros_like(t), atol=1e-15)


def test_xent_gradient_closed_form_exact():
    rng = np.random.default_rng(4)
    for _ in range(20):
        b, c = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        z = ad.Tensor(rng.normal(size=(b, c)), requires_grad=True)
        t = random_dist_rows(rng, b, c)
        loss = ad.softmax_cross_entropy(z, t)
        loss.backward()
        from softreplay import kernels
        p = kernels.softmax_rows(z.data)
        assert np.abs(z.grad - (p - t) / b).max() < 1e-12


def test_xent_rejects_bad_target_rows():
    z = ad.constant(np.zeros((2, 3)))
    with pytest.raises(TargetError):
        ad.softmax_cross_entropy(z, np.array([[0.5, 0.5, 0.5], [1.0, 0.0, 0.0]]))
    with pytest.raises(TargetError):
        ad.softmax_cross_entropy(z, np.array([[1.5, -0.5, 0.0], [1.0, 0.0, 0.0]]))


# ----------------------------------------------------------- finite-diff API

def test_finite_diff_basics():
    fd = ad.finite_diff_grad(lambda v: float((v ** 2).sum()), np.array([1.0, -1.0]))
    np.testing.assert_allclose(fd, [2.0, -2.0], atol=1e-8)
    fd0 = ad.finite_diff_grad(lambda v: 3.25, np.array([0.3, 0.4, 0.5]))
    np.testing.assert_allclose(fd0, np.zeros(3), atol=1e-10)
    with pytest.raises(GradError):
        ad.finite_diff_grad(lambda v: 0.0, np.zeros(2), eps=0.0)


# -------------------------------------------------------------- mixed partial

def _mixed_partial_setup(rng, b=2, d=3, c=3, alpha=0.7):
    theta = ad.ParameterSet.build([
        ("w0", rng.normal(size=(d, 4))),
        ("b0", rng.normal(size=4)),
        ("w1", rng.normal(size=(4, c))),
        ("b1", rng.normal(size=c)),
    ])
    x = rng.normal(size=(b, d))
    y_hard = np.eye(c)[rng.integers(0, c, size=b)]
    y_soft = random_dist_rows(rng, b, c)
    v = rng.normal(size=theta.total_len)
    return theta, x, y_hard, y_soft, v, alpha


def _inner_grad_dot(theta, x, y_hard, y_soft, alpha, v):
    leaves = theta.leaves()
    h = ad.relu(ad.affine(ad.constant(x), leaves["w0"], leaves["b0"]))
    z = ad.affine(h, leaves["w1"], leaves["b1"])
    loss = ad.add(ad.softmax_cross_entropy(z, y_hard),
                  ad.scale(ad.softmax_cross_entropy(z, y_soft, validate=False), alpha))
    loss.backward()
    return float(theta.gather_grad(leaves) @ v)


def test_mixed_partial_zero_vector_and_linearity():
    rng = np.random.default_rng(5)
    theta, x, y_hard, y_soft, v, alpha = _mixed_partial_setup(rng)
    leaves = theta.leaves()
    h = ad.relu(ad.affine(ad.constant(x), leaves["w0"], leaves["b0"]))
    z = ad.affine(h, leaves["w1"], leaves["b1"])

    zero = ad.mixed_partial_vjp(z, y_soft, theta, leaves, np.zeros(theta.total_len), alpha)
    np.testing.assert_array_equal(zero, np.zeros_like(zero))

    one = ad.mixed_partial_vjp(z, y_soft, theta, leaves, v, alpha)
    two = ad.mixed_partial_vjp(z, y_soft, theta, leaves, 2.0 * v, alpha)
    np.testing.assert_allclose(two, 2.0 * one, atol=1e-10)

    w = rng.normal(size=theta.total_len)
    both = ad.mixed_partial_vjp(z, y_soft, theta, leaves, v + w, alpha)
    sep = one + ad.mixed_partial_vjp(z, y_soft, theta, leaves, w, alpha)
    np.testing.assert_allclose(both, sep, atol=1e-10)


def test_mixed_partial_matches_finite_differences():
    rng = np.random.default_rng(6)
    for _ in range(5):
        theta, x, y_hard, y_soft, v, alpha = _mixed_partial_setup(rng)
        leaves = theta.leaves()
        h = ad.relu(ad.affine(ad.constant(x), leaves["w0"], leaves["b0"]))
        z = ad.affine(h, leaves["w1"], leaves["b1"])
        analytic = ad.mixed_partial_vjp(z, y_soft, theta, leaves, v, alpha)

        def f(soft_flat):
            return _inner_grad_dot(theta, x, y_hard,
                                   soft_flat.reshape(y_soft.shape), alpha, v)

        fd = ad.finite_diff_grad(f, y_soft.ravel().copy(), eps=1e-5)
        assert rel_err(analytic, fd.reshape(y_soft.shape)) < 1e-6


def test_mixed_partial_linear_classifier_closed_form():
    # single sample, z = W x: entry c is -(coeff) * <dz_c/dW, V> = -(V x)_c
    rng = np.random.default_rng(8)
    d, c = 3, 4
    theta = ad.ParameterSet.build([("w", rng.normal(size=(d, c)))])
    x = rng.normal(size=(1, d))
    v = rng.normal(size=theta.total_len)
    leaves = theta.leaves()
    z = ad.matmul(ad.constant(x), leaves["w"])
    alpha = 0.9
    out = ad.mixed_partial_vjp(z, np.full((1, c), 1.0 / c), theta, leaves, v, alpha)
    expected = -alpha * (x @ v.reshape(d, c))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_mixed_partial_rejects_target_dependent_logits():
    rng = np.random.default_rng(9)
    theta = ad.ParameterSet.build([("w", rng.normal(size=(3, 3)))])
    leaves = theta.leaves()
    t = ad.Tensor(random_dist_rows(rng, 2, 3), requires_grad=True)
    z = ad.add(ad.matmul(ad.constant(rng.normal(size=(2, 3))), leaves["w"]), t)
    with pytest.raises(GradError):
        ad.mixed_partial_vjp(z, t, theta, leaves, np.zeros(theta.total_len))


# ------------------------------------------------------------- parameter set

def test_parameter_set_layout_and_views():
    rng = np.random.default_rng(10)
    w = rng.normal(size=(2, 3))
    b = rng.normal(size=3)
    ps = ad.ParameterSet.build([("w", w), ("b", b)])
    assert ps.total_len == 9
    np.testing.assert_array_equal(ps.view("w"), w)
    np.testing.assert_array_equal(ps.view("b"), b)
    segs = ps.unflatten(np.arange(9.0))
    np.testing.assert_array_equal(segs["w"], np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(segs["b"], [6.0, 7.0, 8.0])


def test_untouched_parameters_get_zero_gradient():
    rng = np.random.default_rng(12)
    ps = ad.ParameterSet.build([("used", rng.normal(size=2)),
                                ("unused", rng.normal(size=3))])
    leaves = ps.leaves()
    loss = ad.mean(ad.mul(leaves["used"], leaves["used"]))
    loss.backward()
    g = ps.gather_grad(leaves)
    assert np.any(g[:2] != 0.0)
    np.testing.assert_array_equal(g[2:], np.zeros(3))


def test_parameter_copy_is_independent():
    ps = ad.ParameterSet.build([("w", np.ones(4))])
    cp = ps.copy()
    cp.values[0] = 99.0
    assert ps.values[0] == 1.0
