import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prunedistill import autodiff as ad
from prunedistill.autodiff import (
    Adam, AdamState, ContractError, NondeterminismError, NonFiniteError, ShapeError, Tensor,
    adam_step, grad_check, no_grad, parameter,
)


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


# ---------------------------------------------------------------- forward values

def test_matmul_identity_and_zero():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), a).data, a.data)
    assert np.array_equal(ad.matmul(a, Tensor([[0.0], [0.0]])).data, [[0.0], [0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_values():
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    out = ad.softmax(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1) < 1e-12 and abs(out[1]) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31))
def test_softmax_rows_are_distributions(m, n, seed):
    out = ad.softmax(Tensor(rand((m, n), seed, -50, 50))).data
    assert np.all(np.abs(out.sum(axis=-1) - 1) <= 1e-12)
    assert ((out >= 0) & (out <= 1)).all()


def test_layer_norm_values():
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.array_equal(ad.layer_norm(Tensor([[5.0, 5.0, 5.0]]), g, b).data, [[0.0, 0.0, 0.0]])
    out = ad.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-5)
    assert out[0, 0] == pytest.approx(1 / math.sqrt(1 + 1e-5), abs=1e-15)


def test_cross_entropy_values():
    assert ad.cross_entropy(Tensor(np.zeros((2, 4))), [1, 3]).item() == pytest.approx(math.log(4), abs=1e-15)
    big = np.full((1, 5), -1e3)
    big[0, 2] = 1e3
    assert ad.cross_entropy(Tensor(big), [2]).item() < 1e-12


def test_cross_entropy_matches_logsumexp():
    x = rand((3, 5), 1, -3, 3)
    t = [4, 0, 2]
    want = np.mean([math.log(sum(math.exp(v) for v in row)) - row[k] for row, k in zip(x, t)])
    assert abs(ad.cross_entropy(Tensor(x), t).item() - want) < 1e-12


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    x = parameter(rand((4, 6), 2))
    t = np.array([1, 0, 5, 3])
    ad.cross_entropy(x, t, ignore_id=0).backward()
    p = np.exp(x.data) / np.exp(x.data).sum(axis=1, keepdims=True)
    onehot = np.eye(6)[t]
    keep = (t != 0)[:, None]
    assert np.allclose(x.grad, keep * (p - onehot) / 3, atol=1e-15)


def test_cross_entropy_all_ignored():
    x = parameter(rand((2, 3), 3))
    loss = ad.cross_entropy(x, [0, 0], ignore_id=0)
    assert loss.item() == 0.0
    loss.backward()
    assert np.array_equal(x.grad, np.zeros((2, 3)))


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(ContractError):
        ad.cross_entropy(Tensor(np.zeros((1, 3))), [3])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor([1e4]))


# ---------------------------------------------------------------- backward semantics

def test_backward_examples():
    x = parameter(np.arange(4.0).reshape(2, 2))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 2)))
    y = parameter([[3.0]])
    (y * y).sum().backward()
    assert np.array_equal(y.grad, [[6.0]])


def test_backward_twice_doubles():
    x = parameter([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    assert np.array_equal(x.grad, [4.0, 8.0])


def test_backward_requires_scalar_and_graph():
    with pytest.raises(ContractError):
        (parameter([1.0, 2.0]) * 2.0).backward()
    with pytest.raises(ContractError):
        Tensor(3.0).backward()


def test_diamond_fan_out():
    # y = a*b + a*c with b = 2a, c = a^2  ->  dy/da = 4a + 3a^2
    a = parameter(1.5)
    b = a * 2.0
    c = a * a
    y = a * b + a * c
    y.backward()
    assert a.grad == pytest.approx(4 * 1.5 + 3 * 1.5**2, abs=1e-14)


def test_grads_only_on_leaves():
    x = parameter([1.0])
    h = x * 3.0
    (h * h).sum().backward()
    assert h.grad is None and x.grad is not None


def test_trace_is_topological():
    x = parameter(rand((2, 3)))
    w = parameter(rand((3, 2), 1))
    loss = ad.softmax(ad.matmul(x, w)).sum()
    nodes = ad.trace(loss)
    position = {n.id: i for i, n in enumerate(nodes)}
    assert all(position[i] < position[n.id] for n in nodes for i in n.inputs)
    assert [n.op for n in nodes][-3:] == ["matmul", "softmax", "sum"]


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["worker"] = ad.grad_enabled()

    with no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert (parameter([1.0]) * 2.0).requires_grad is False
    assert seen["worker"] is True
    assert ad.grad_enabled()


# ---------------------------------------------------------------- finite differences per op

def _check(build, *shapes, seed=0, tol=1e-6, **kw):
    params = [parameter(rand(s, seed + i)) for i, s in enumerate(shapes)]
    err = grad_check(lambda: build(*params), params, n_coords=None, **kw)
    assert err <= tol, err


def test_grad_matmul():
    _check(lambda a, b: (ad.matmul(a, b) * ad.matmul(a, b)).sum(), (3, 4), (4, 2))


def test_grad_batched_matmul():
    _check(lambda a, b: (ad.matmul(a, b) * ad.matmul(a, b)).sum(), (2, 3, 4), (4, 2))


def test_grad_softmax():
    w = rand((2, 5), 9)
    _check(lambda x: (ad.softmax(x) * w).sum(), (2, 5))


def test_grad_log_softmax():
    w = rand((3, 4), 8)
    _check(lambda x: (ad.log_softmax(x) * w).sum(), (3, 4))


def test_grad_layer_norm():
    w = rand((3, 6), 7)
    _check(lambda x, g, b: (ad.layer_norm(x, g, b) * w).sum(), (3, 6), (6,), (6,))


def test_grad_elementwise_and_structural():
    w = rand((4, 3), 5)
    _check(lambda a, b: ((a + b) * (a - b) * 0.5).sum(), (4, 3), (3,))
    _check(lambda a: (ad.gelu(a) * w).sum(), (4, 3))
    _check(lambda a: (ad.exp(a) * w).sum(), (4, 3))
    _check(lambda a: (ad.log(ad.exp(a) + 2.0) * w).sum(), (4, 3))
    _check(lambda a: (ad.reshape(a, (3, 4)) * w.T).sum(), (4, 3))
    _check(lambda a: (ad.transpose(a) * w.T).sum(), (4, 3))
    _check(lambda a: (a.mean(axis=0) * w[0]).sum() + (a.sum(axis=1) * w[:, 0]).sum(), (4, 3))
    _check(lambda a: (ad.take_rows(a, np.array([2, 0, 2])) * w[:3]).sum(), (4, 3))
    _check(lambda a: (ad.take_rows(a, slice(1, 3)) * w[1:3]).sum(), (4, 3))


def test_grad_relu_away_from_kink():
    x = parameter(np.array([-0.7, -0.2, 0.3, 0.9]))
    assert grad_check(lambda: (ad.relu(x) * x).sum(), [x], n_coords=None) <= 1e-6


def test_grad_embedding():
    ids = np.array([[0, 2], [2, 1]])
    w = rand((2, 2, 3), 4)
    _check(lambda t: (ad.embedding(t, ids) * w).sum(), (4, 3))


def test_grad_cross_entropy():
    _check(lambda x: ad.cross_entropy(x, [1, 0, 4], ignore_id=0), (3, 5))


def test_grad_check_scalar_square():
    x = parameter(3.0)
    assert grad_check(lambda: x * x, [x], n_coords=None) <= 1e-9


def test_grad_check_linear_layer():
    x = rand((5, 4), 11)
    w, b = parameter(rand((4, 3), 12)), parameter(rand((3,), 13))
    err = grad_check(lambda: (ad.matmul(Tensor(x), w) + b).sum() * 0.3 + (w * w).sum(), [w, b],
                     n_coords=None)
    assert err <= 1e-7


def test_grad_check_detects_nondeterminism():
    x = parameter([1.0])
    rng = np.random.default_rng(0)
    with pytest.raises(NondeterminismError):
        grad_check(lambda: (x * rng.normal()).sum(), [x])


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_leaves_params():
    p = {"w": rand((3,), 1)}
    before = p["w"].copy()
    adam_step(p, {"w": np.zeros(3)}, AdamState(lr=0.1))
    assert np.array_equal(p["w"], before)


def test_adam_all_zero_mask():
    p = {"w": rand((4,), 2)}
    st_ = AdamState(lr=0.1)
    mask = {"w": np.zeros(4, bool)}
    for k in range(5):
        adam_step(p, {"w": rand((4,), 10 + k)}, st_, mask)
    assert not p["w"].any() and not st_.m["w"].any() and not st_.v["w"].any()
    assert not np.signbit(p["w"]).any()


def test_adam_matches_hand_recurrence():
    p = {"w": np.array([0.5])}
    state = AdamState(lr=0.01)
    w, m, v = 0.5, 0.0, 0.0
    for t in range(1, 4):
        adam_step(p, {"w": np.array([0.2])}, state)
        m = 0.9 * m + 0.1 * 0.2
        v = 0.999 * v + 0.001 * 0.04
        w -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(p["w"][0] - w) < 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 20))
def test_masked_positions_stay_exact_zero(seed, steps):
    rng = np.random.default_rng(seed)
    mask = rng.random((5, 4)) < 0.5
    p = {"w": np.where(mask, rng.normal(size=(5, 4)), 0.0)}
    state = AdamState(lr=0.05)
    for _ in range(steps):
        adam_step(p, {"w": rng.normal(size=(5, 4))}, state, {"w": mask})
        assert np.all(p["w"][~mask] == 0.0) and not np.signbit(p["w"][~mask]).any()
        assert np.all(state.m["w"][~mask] == 0.0) and np.all(state.v["w"][~mask] == 0.0)


def test_adam_warmup_schedule():
    w = parameter([1.0])
    opt = Adam({"w": w}, lr=1e-2, warmup=4)
    rates = []
    for _ in range(6):
        rates.append(opt.current_lr())
        w.grad = np.array([1.0])
        opt.step()
    assert rates == pytest.approx([0.0025, 0.005, 0.0075, 0.01, 0.01, 0.01], abs=1e-18)
