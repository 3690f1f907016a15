import numpy as np
import pytest

from compnet.tape import Parameter, Tape, backward, gradient_check


def rand(shape, seed, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


class TestBackwardBasics:
    def test_grad_of_sum_is_ones(self):
        t = Tape()
        x = t.leaf(rand((3, 4), 0))
        grads = backward(t, t.sum(x))
        assert np.array_equal(grads[x], np.ones((3, 4)))

    def test_grad_of_sum_of_squares(self):
        t = Tape()
        val = rand((5,), 1)
        x = t.leaf(val)
        grads = backward(t, t.sum(t.mul(x, x)))
        assert np.allclose(grads[x], 2 * val)

    def test_non_scalar_loss_rejected(self):
        t = Tape()
        x = t.leaf(rand((3,), 2))
        with pytest.raises(ValueError, match="scalar"):
            backward(t, x)

    def test_accumulation_across_two_uses(self):
        # a parameter feeding two branches receives the sum of both gradients
        w_val = rand((4,), 3)
        a_val, b_val = rand((4,), 4), rand((4,), 5)

        t = Tape()
        w = t.leaf(w_val)
        both = t.add(t.sum(t.mul(w, t.leaf(a_val))), t.sum(t.mul(w, t.leaf(b_val))))
        g_shared = backward(t, both)[w]

        t1 = Tape()
        w1 = t1.leaf(w_val)
        g1 = backward(t1, t1.sum(t1.mul(w1, t1.leaf(a_val))))[w1]
        t2 = Tape()
        w2 = t2.leaf(w_val)
        g2 = backward(t2, t2.sum(t2.mul(w2, t2.leaf(b_val))))[w2]
        assert np.array_equal(g_shared, g1 + g2)

    def test_relu_backward_uses_forward_sign(self):
        t = Tape()
        val = np.array([-2.0, 0.0, 3.0])
        x = t.leaf(val)
        grads = backward(t, t.sum(t.relu(x)))
        assert np.array_equal(grads[x], [0.0, 0.0, 1.0])

    def test_reachable_nodes_all_have_matching_grad_shapes(self):
        t = Tape()
        x = t.leaf(rand((4, 4, 2), 60))
        k = t.leaf(rand((3, 3, 2, 2), 61))
        b = t.leaf(rand((2,), 62))
        h = t.relu(t.conv2d(x, k, b))
        loss = t.sumsq(h)
        grads = backward(t, loss)
        for node in (x, k, b, h, loss):
            assert grads[node] is not None
            assert grads[node].shape == np.shape(t.value(node))

    def test_keep_intermediate_false_frees_op_outputs(self):
        t = Tape()
        x = t.leaf(rand((3,), 6))
        y = t.relu(x)
        loss = t.sum(y)
        grads = backward(t, loss, keep_intermediate=False)
        assert grads[x] is not None
        assert grads[y] is None and grads[loss] is None

    def test_guided_relu_gates_negative_upstream(self):
        val = np.array([1.0, 2.0, -1.0])
        up = np.array([1.0, -1.0, 1.0])
        plain = Tape()
        x = plain.leaf(val)
        g = backward(plain, plain.sum(plain.mul_const(plain.relu(x), up)))[x]
        assert np.array_equal(g, [1.0, -1.0, 0.0])
        guided = Tape(guided_relu=True)
        x = guided.leaf(val)
        g = backward(guided, guided.sum(guided.mul_const(guided.relu(x), up)))[x]
        assert np.array_equal(g, [1.0, 0.0, 0.0])


def _check_op(build, value_shapes, seed=0, tol=1e-4, offsets=None):
    """Gradient-check a single op: build(tape, nodes) -> scalar node."""
    params = {}
    for i, shape in enumerate(value_shapes):
        v = rand(shape, seed + i)
        if offsets is not None:
            v = v + offsets[i]
        params[f"p{i}"] = Parameter(f"p{i}", v)

    def loss(ps):
        t = Tape()
        nodes = [t.leaf(ps[f"p{i}"].value) for i in range(len(value_shapes))]
        return t, build(t, nodes), {f"p{i}": nodes[i] for i in range(len(value_shapes))}

    report = gradient_check(loss, params, eps=1e-5, tol=tol, max_coords=80, seed=seed)
    assert report.passed, report.format()


class TestPrimitiveGradients:
    def test_conv2d(self):
        _check_op(lambda t, n: t.sum(t.conv2d(n[0], n[1], n[2])),
                  [(6, 6, 2), (3, 3, 2, 3), (3,)])

    def test_conv2d_batched(self):
        _check_op(lambda t, n: t.sumsq(t.conv2d(n[0], n[1], n[2])),
                  [(3, 4, 4, 2), (3, 3, 2, 2), (2,)])

    def test_maxpool(self):
        # random values: exact pooling ties have probability zero
        _check_op(lambda t, n: t.sumsq(t.maxpool2d(n[0])), [(6, 6, 3)])

    def test_relu_away_from_kink(self):
        _check_op(lambda t, n: t.sumsq(t.relu(n[0])), [(5, 5)], offsets=[0.3])

    def test_affine(self):
        _check_op(lambda t, n: t.sumsq(t.affine(n[0], n[1], n[2])),
                  [(6,), (6, 4), (4,)])

    def test_mul_and_sub(self):
        _check_op(lambda t, n: t.sum(t.mul(t.sub(n[0], n[1]), n[2])),
                  [(4, 3), (4, 3), (4, 3)])

    def test_mul_const_broadcast(self):
        const = rand((3, 1, 2), 99)
        _check_op(lambda t, n: t.sumsq(t.mul_const(n[0], const)), [(3, 4, 2)])

    def test_scale_select_slice(self):
        _check_op(lambda t, n: t.scale(t.select(n[0], 2), 1.7), [(5,)])
        _check_op(lambda t, n: t.sumsq(t.batch_slice(n[0], 1, 3)), [(4, 2, 2, 1)])

    def test_flatten(self):
        _check_op(lambda t, n: t.sumsq(t.flatten(n[0])), [(3, 4, 2)])

    def test_softmax_cross_entropy(self):
        _check_op(lambda t, n: t.softmax_cross_entropy(n[0], 1), [(6,)])

    def test_sigmoid_cross_entropy(self):
        targets = np.array([1.0, 0.0, 0.0, 1.0])
        _check_op(lambda t, n: t.sigmoid_cross_entropy(n[0], targets), [(4,)])

    def test_batched_heads(self):
        labels = np.array([1, 0, 2])
        weights = np.array([0.2, 0.5, 0.3])
        _check_op(lambda t, n: t.softmax_cross_entropy_batch(n[0], labels, weights),
                  [(3, 4)])
        targets = (rand((3, 4), 50) > 0).astype(np.float64)
        _check_op(lambda t, n: t.sigmoid_cross_entropy_batch(n[0], targets, weights),
                  [(3, 4)])

    def test_dropout_fixed_rng(self):
        def build(t, n):
            return t.sumsq(t.dropout(n[0], 0.4, np.random.default_rng(17)))
        _check_op(build, [(8, 8)])

    def test_small_convnet_matches_finite_differences(self):
        # conv -> relu -> pool -> conv -> relu -> pool -> fc against central FD
        def build(t, n):
            x = t.leaf(rand((8, 8, 1), 123, lo=0.0, hi=1.0))
            h = t.maxpool2d(t.relu(t.conv2d(x, n[0], n[1])))
            h = t.maxpool2d(t.relu(t.conv2d(h, n[2], n[3])))
            return t.softmax_cross_entropy(t.affine(t.flatten(h), n[4], n[5]), 1)
        _check_op(build, [(3, 3, 1, 2), (2,), (3, 3, 2, 3), (3,), (12, 3), (3,)],
                  offsets=[0.0, 0.2, 0.0, 0.2, 0.0, 0.0])


class TestGradientCheckMachinery:
    def test_quadratic_loss_tight(self):
        params = {"w": Parameter("w", rand((6,), 9))}

        def build(ps):
            t = Tape()
            w = t.leaf(ps["w"].value)
            return t, t.sumsq(w), {"w": w}

        report = gradient_check(build, params, eps=1e-5, tol=1e-8)
        assert report.passed
        assert report.max_error <= 1e-8

    def test_dead_relu_region_absolute_fallback(self):
        # all-negative inputs: analytic and FD gradients are both zero
        params = {"w": Parameter("w", rand((5,), 10, lo=-2.0, hi=-1.0))}

        def build(ps):
            t = Tape()
            w = t.leaf(ps["w"].value)
            return t, t.sum(t.relu(w)), {"w": w}

        report = gradient_check(build, params, eps=1e-5, tol=1e-8)
        assert report.passed
        assert report.max_error <= 1e-8

    def test_nondeterministic_loss_detected(self):
        params = {"w": Parameter("w", rand((3,), 11))}
        state = {"n": 0}

        def build(ps):
            state["n"] += 1
            t = Tape()
            w = t.leaf(ps["w"].value)
            return t, t.scale(t.sumsq(w), 1.0 + 1e-9 * state["n"]), {"w": w}

        with pytest.raises(ValueError, match="not deterministic"):
            gradient_check(build, params)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError, match="eps"):
            gradient_check(lambda p: None, {}, eps=0.0)

    def test_report_format_lists_parameters(self):
        params = {"w": Parameter("w", rand((4,), 12))}

        def build(ps):
            t = Tape()
            w = t.leaf(ps["w"].value)
            return t, t.sumsq(w), {"w": w}

        report = gradient_check(build, params)
        text = report.format()
        assert "w" in text and "PASS" in text


class TestParameter:
    def test_grad_defaults_to_zeros(self):
        p = Parameter("a", np.ones((2, 3)))
        assert p.grad.shape == (2, 3) and not p.grad.any()

    def test_mismatched_grad_rejected(self):
        with pytest.raises(ValueError, match="grad shape"):
            Parameter("a", np.ones((2, 3)), grad=np.zeros((3, 2)))
