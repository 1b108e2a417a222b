import numpy as np
import pytest

from symplex import autodiff as ad

from gradcheck import check

SEEDS = range(10)


def _r(rng, *shape):
    return rng.normal(size=shape)


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_and_reductions(seed):
    rng = np.random.default_rng(seed)
    a, b = _r(rng, 3, 4), _r(rng, 4)
    assert check(lambda x, y: ad.add(x, y), [a, b], seed) < 1e-4
    assert check(lambda x, y: ad.sub(x, y), [a, b], seed) < 1e-4
    assert check(lambda x, y: ad.mul(x, y), [a, b], seed) < 1e-4
    assert check(lambda x: ad.exp(x), [a], seed) < 1e-4
    assert check(lambda x: ad.log(ad.exp(x)), [a], seed) < 1e-4
    assert check(lambda x: ad.relu(x), [a + 0.05 * np.sign(a)], seed) < 1e-4
    assert check(lambda x: ad.sum(x, axis=0), [a], seed) < 1e-4
    assert check(lambda x: ad.mean(x, axis=-1, keepdims=True), [a], seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_and_shapes(seed):
    rng = np.random.default_rng(seed)
    assert check(ad.matmul, [_r(rng, 2, 3), _r(rng, 3, 2)], seed) < 1e-4
    assert check(ad.matmul, [_r(rng, 2, 2, 3), _r(rng, 3, 4)], seed) < 1e-4
    assert check(ad.matmul, [_r(rng, 2, 3, 2, 3), _r(rng, 2, 3, 3, 2)], seed) < 1e-4
    assert check(lambda x: ad.transpose(x, (1, 0, 2)), [_r(rng, 2, 3, 4)], seed) < 1e-4
    assert check(lambda x: ad.reshape(x, (6, 2)), [_r(rng, 3, 4)], seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_gather_and_take(seed):
    rng = np.random.default_rng(seed)
    idx = np.array([[0, 2, 2], [1, 0, 3]])
    assert check(lambda t: ad.gather_rows(t, idx), [_r(rng, 4, 5)], seed) < 1e-4
    take = rng.integers(0, 6, size=(2, 3, 4))
    assert check(lambda x: ad.take_along_last(x, take), [_r(rng, 2, 3, 6)], seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_and_softmax(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _r(rng, 3, 5), _r(rng, 5), _r(rng, 5)
    assert check(ad.layer_norm, [x, g, b], seed) < 1e-4
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    assert check(lambda z: ad.masked_softmax(z, mask), [x], seed) < 1e-4
    assert check(lambda z: ad.masked_log_softmax(z, mask), [x], seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_three_layer_network(seed):
    rng = np.random.default_rng(seed)
    x = _r(rng, 4, 3)

    def net(W1, W2, W3):
        h = ad.relu(ad.matmul(x, W1))
        h = ad.exp(ad.mul(ad.matmul(h, W2), 0.3))
        return ad.sum(ad.matmul(h, W3))

    assert check(net, [_r(rng, 3, 5), _r(rng, 5, 4), _r(rng, 4, 2)], seed) < 1e-4


def test_masked_softmax_example():
    out = ad.masked_softmax(ad.as_array(np.ones(3)), np.array([True, False, True]))
    np.testing.assert_array_equal(out.data, [0.5, 0.0, 0.5])


def test_masked_entries_get_zero_gradient():
    x = ad.parameter(np.array([0.3, -1.0, 2.0]))
    mask = np.array([True, False, True])
    ad.sum(ad.mul(ad.masked_softmax(x, mask), np.array([1.0, 5.0, -2.0]))).backward()
    assert x.grad[1] == 0.0


def test_layer_norm_constant_row():
    out = ad.layer_norm(ad.as_array(np.full((2, 4), 3.0)), ad.as_array(np.ones(4)), ad.as_array(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0)


def test_backward_sum_and_square():
    p = ad.parameter(np.array([1.0, -2.0, 3.0]))
    ad.sum(p).backward()
    np.testing.assert_array_equal(p.grad, 1.0)
    q = ad.parameter(np.array([1.0, -2.0, 3.0]))
    ad.sum(ad.mul(q, q)).backward()
    np.testing.assert_array_equal(q.grad, 2 * q.data)


def test_backward_contract_errors():
    p = ad.parameter(np.ones(3))
    with pytest.raises(ad.BackwardError):
        ad.mul(p, 2.0).backward()
    loss = ad.sum(p)
    loss.backward()
    with pytest.raises(ad.BackwardError):
        loss.backward()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        ad.add(ad.as_array(np.ones((2, 3))), ad.as_array(np.ones((4,))))


def test_shared_subexpression_visited_once():
    p = ad.parameter(np.array(2.0))
    y = ad.mul(p, p)
    ad.add(y, y).backward()
    assert p.grad == pytest.approx(8.0)


def test_clip_grad_norm():
    g = [np.array([6.0, 0.0]), np.array([8.0])]
    clipped = ad.clip_grad_norm(g, 5.0)
    np.testing.assert_allclose(clipped[0], [3.0, 0.0])
    np.testing.assert_allclose(clipped[1], [4.0])
    small = [np.array([3.0])]
    np.testing.assert_array_equal(ad.clip_grad_norm(small, 5.0)[0], small[0])


def test_clip_never_increases_norm(rng):
    for _ in range(50):
        g = [rng.normal(size=3) * rng.uniform(0, 10) for _ in range(3)]
        assert ad.global_norm(ad.clip_grad_norm(g, 5.0)) <= min(5.0, ad.global_norm(g)) + 1e-12


def test_adam_matches_reference():
    p = ad.parameter(np.array([1.0, -1.0]))
    opt = ad.Adam([p], lr=0.1)
    m = v = np.zeros(2)
    ref = p.data.copy()
    for step in range(1, 4):
        g = np.array([0.5, -2.0]) * step
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
        opt.step([g])
    np.testing.assert_allclose(p.data, ref, rtol=1e-14)


def test_plateau_decays_after_patience():
    opt = ad.Adam([ad.parameter(np.zeros(1))], lr=5e-4)
    sched = ad.ReduceLROnPlateau(opt, mode="max", factor=0.9, patience=10)
    sched.step(0.5)
    for _ in range(10):
        sched.step(0.5)
    assert opt.lr == 5e-4
    sched.step(0.5)
    assert opt.lr == pytest.approx(4.5e-4)


def test_plateau_resets_on_improvement():
    opt = ad.Adam([ad.parameter(np.zeros(1))], lr=1.0)
    sched = ad.ReduceLROnPlateau(opt, mode="max", factor=0.5, patience=2)
    for metric in (0.1, 0.1, 0.2, 0.2, 0.2):
        sched.step(metric)
    assert opt.lr == 1.0


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = _r(rng, 4, 3), _r(rng, 3, 3)
    a = ad.layer_norm(ad.matmul(ad.as_array(x), ad.as_array(w)), ad.as_array(np.ones(3)), ad.as_array(np.zeros(3)))
    b = ad.layer_norm(ad.matmul(ad.as_array(x), ad.as_array(w)), ad.as_array(np.ones(3)), ad.as_array(np.zeros(3)))
    assert np.array_equal(a.data, b.data)
