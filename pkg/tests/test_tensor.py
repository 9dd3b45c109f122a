import numpy as np
import pytest

from tempoflow import tensor as tc


def test_matmul_grads_match_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 2))

    r = tc.finite_difference_check(
        lambda t: tc.tsum(tc.matmul(t, tc.Tensor(b))), a)
    assert r["passed"]
    assert r["max_rel_err"] <= 1e-6  # central differences are exact on linear maps

    r = tc.finite_difference_check(
        lambda t: tc.tsum(tc.matmul(tc.Tensor(a), t)), b)
    assert r["max_rel_err"] <= 1e-6


def test_l1_at_exact_zero_flags_kink_and_uses_subgradient_zero():
    x = np.array([0.5, 0.0, -0.25])
    r = tc.finite_difference_check(lambda t: tc.tsum(tc.absolute(t)), x)
    assert (1,) in r["kinks"]
    assert r["grad"][1] == 0.0
    assert r["passed"]  # kink point excluded, smooth points still compared


def test_unreachable_leaf_gets_exact_zero_grad_and_flag():
    with tc.Tape():
        x = tc.Tensor(np.ones(3), requires_grad=True)
        other = tc.Tensor(np.ones(2), requires_grad=True)
        loss = tc.tsum(tc.multiply(x, x))
        grads, report = tc.grad(loss, [x, other], return_report=True)
    assert np.array_equal(grads[1].data, np.zeros(2))
    assert report["off_tape_leaves"] == [1]


def test_grad_off_tape_raises():
    x = tc.Tensor(np.ones(3), requires_grad=True)
    loss = tc.tsum(x)  # no tape active: nothing recorded
    with pytest.raises(tc.TapeError):
        tc.grad(loss, [x])


def test_grad_requires_scalar():
    with tc.Tape():
        x = tc.Tensor(np.ones(3), requires_grad=True)
        y = tc.multiply(x, 2.0)
        with pytest.raises(tc.TapeError):
            tc.grad(y, [x])


def test_gradients_are_linear_in_the_loss():
    rng = np.random.default_rng(1)
    xv = rng.normal(size=(5,))
    a, b = 2.5, -1.25

    def grads_of(fn):
        with tc.Tape():
            x = tc.Tensor(xv, requires_grad=True)
            g = tc.grad(fn(x), [x])[0].data
        return g

    gf = grads_of(lambda x: tc.tsum(tc.multiply(x, x)))
    gg = grads_of(lambda x: tc.tsum(tc.exp(x)))
    gmix = grads_of(lambda x: tc.add(tc.multiply(tc.tsum(tc.multiply(x, x)), a),
                                     tc.multiply(tc.tsum(tc.exp(x)), b)))
    assert np.abs(gmix - (a * gf + b * gg)).max() <= 1e-12


def test_backward_visits_each_node_once_in_reverse_append_order():
    visited = []
    with tc.Tape() as tape:
        x = tc.Tensor(np.array(2.0), requires_grad=True)
        y = tc.multiply(x, 3.0)
        z = tc.add(y, y)  # diamond: y consumed twice
        loss = tc.multiply(z, z)
        order = {id(n.out): i for i, n in enumerate(tape.nodes)}
        for n in tape.nodes:
            orig = n.bwd
            n.bwd = (lambda f, nn: lambda g: (visited.append(order[id(nn.out)]), f(g))[1])(orig, n)
        g = tc.grad(loss, [x])[0].data
    assert g == 2.0 * 12.0 * 3.0 * 2.0  # d(6x)^2/dx = 72x
    assert visited == sorted(visited, reverse=True)
    assert len(visited) == len(set(visited))


def test_stop_gradient_blocks_flow():
    with tc.Tape():
        x = tc.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = tc.multiply(tc.stop_gradient(tc.multiply(x, 3.0)), x)
        g = tc.grad(tc.tsum(y), [x])[0].data
    assert np.array_equal(g, np.array([3.0, 6.0]))  # only the direct factor


def test_elementwise_rejects_incompatible_shapes():
    a = tc.Tensor(np.ones((2, 3)))
    b = tc.Tensor(np.ones((3, 2)))
    with pytest.raises(ValueError):
        tc.add(a, b)


def test_trailing_axis_bias_add_backward():
    r = tc.finite_difference_check(
        lambda t: tc.tsum(tc.add(tc.Tensor(np.arange(12.0).reshape(2, 2, 3)), t)),
        np.array([0.3, -0.1, 0.4]))
    assert r["passed"]


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 5)) * 4.0
    s = tc.softmax(tc.Tensor(x), axis=-1).data
    assert np.abs(s.sum(axis=-1) - 1.0).max() <= 1e-12


def test_l2_norm_safe_at_zero():
    with tc.Tape():
        x = tc.Tensor(np.zeros(4), requires_grad=True)
        g = tc.grad(tc.l2_norm(x), [x])[0].data
    assert np.array_equal(g, np.zeros(4))


@pytest.mark.parametrize("seed", range(10))
def test_primitive_grads_match_fd_random_inputs(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4)) * 0.8 + 0.1
    checks = [
        lambda t: tc.tsum(tc.exp(t)),
        lambda t: tc.tsum(tc.sqrt(tc.add(tc.multiply(t, t), 0.5))),
        lambda t: tc.tsum(tc.softmax(t, axis=1)),
        lambda t: tc.tmean(tc.multiply(t, t)),
        lambda t: tc.l2_loss(t, tc.Tensor(np.ones_like(x))),
        lambda t: tc.tsum(tc.softplus(t)),
        lambda t: tc.tsum(tc.take(tc.multiply(t, t), (slice(1, 3), slice(0, 2)))),
        lambda t: tc.tsum(tc.mask_select(tc.multiply(t, t), x > 0.0)),
    ]
    for f in checks:
        r = tc.finite_difference_check(f, x)
        assert r["passed"], r["max_rel_err"]


def test_bilinear_sample_integer_coords_exact():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(5, 6, 2))
    coords = tc.identity_grid(5, 6)
    out = tc.bilinear_sample(tc.Tensor(m), tc.Tensor(coords)).data
    assert np.array_equal(out, m)


def test_bilinear_sample_midpoint_average():
    m = np.zeros((2, 2, 1))
    m[0, 0, 0], m[0, 1, 0], m[1, 0, 0], m[1, 1, 0] = 1.0, 2.0, 3.0, 4.0
    coords = np.full((1, 1, 2), 0.5)
    out = tc.bilinear_sample(tc.Tensor(m), tc.Tensor(coords)).data
    assert abs(out[0, 0, 0] - 2.5) <= 1e-15


def test_bilinear_sample_clamps_to_edge():
    m = np.arange(6.0).reshape(2, 3)[:, :, None]
    coords = np.array([[[-3.0, -5.0], [10.0, 99.0]]])
    out = tc.bilinear_sample(tc.Tensor(m), tc.Tensor(coords)).data
    assert out[0, 0, 0] == m[0, 0, 0]
    assert out[0, 1, 0] == m[-1, -1, 0]


def test_bilinear_sample_grads_match_fd():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(4, 5, 2))
    coords = rng.uniform(0.3, 2.7, size=(3, 3, 2))
    coords += 0.13  # keep away from integer kink lines
    w = rng.normal(size=(3, 3, 2))

    def loss_map(t):
        return tc.tsum(tc.multiply(tc.bilinear_sample(t, tc.Tensor(coords)), tc.Tensor(w)))

    def loss_coords(t):
        return tc.tsum(tc.multiply(tc.bilinear_sample(tc.Tensor(m), t), tc.Tensor(w)))

    assert tc.finite_difference_check(loss_map, m)["passed"]
    assert tc.finite_difference_check(loss_coords, coords)["passed"]


def test_tnsr_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    for shape in [(), (7,), (3, 4), (2, 3, 4, 2)]:
        a = rng.normal(size=shape)
        p = tmp_path / "t.tnsr"
        tc.write_tnsr(p, a)
        b = tc.read_tnsr(p)
        assert b.shape == a.shape
        assert np.array_equal(a, b)


def test_tnsr_rejects_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.tnsr"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(tc.TnsrError, match="bad.tnsr"):
        tc.read_tnsr(p)
    tc.write_tnsr(p, np.ones((4, 4)))
    data = p.read_bytes()
    p.write_bytes(data[:-8])
    with pytest.raises(tc.TnsrError, match="bad.tnsr"):
        tc.read_tnsr(p)
