import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idembed.core_types import IdKind, IdSpace, InvalidArgument, NumericError, ContractError, new_table
from idembed.loss_grad import (
    ContrastiveBatch,
    Temperature,
    assemble_batch,
    bce_forward_backward,
    contrastive_backward,
    contrastive_forward,
    in_batch_mask,
)

from gradcheck import max_rel_err, numeric_grad


def _batch(u, p, n, mask=None):
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    n = np.asarray(n, dtype=np.float64).reshape(-1, u.shape[1])
    if mask is None:
        mask = np.zeros((u.shape[0], u.shape[0]), dtype=bool)
    return ContrastiveBatch(u, p, n, mask)


def _loss(batch, tau=1.0):
    return contrastive_forward(batch, Temperature.from_tau(tau))[0]


# unit vectors chosen so u.p and u.n take the requested values
E1 = [1.0, 0.0]
E2 = [0.0, 1.0]


def test_two_way_uniform_softmax():
    assert _loss(_batch(E1, E2, [E2])) == pytest.approx(math.log(2), abs=1e-12)


def test_positive_margin_one():
    assert _loss(_batch(E1, E1, [E2])) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)
    assert _loss(_batch(E1, E1, [E2])) == pytest.approx(0.313262, abs=1e-6)


def test_halved_temperature_doubles_logits():
    assert _loss(_batch(E1, E1, [E2]), tau=0.5) == pytest.approx(
        math.log1p(math.exp(-2)), abs=1e-12
    )
    assert _loss(_batch(E1, E1, [E2]), tau=0.5) == pytest.approx(0.126928, abs=1e-6)


def test_no_negatives_gives_zero_loss_and_gradient():
    b = _batch(E1, E1, np.empty((0, 2)))
    loss, cache = contrastive_forward(b, Temperature())
    g = contrastive_backward(cache)
    assert loss == 0.0
    assert np.all(g.d_user == 0) and np.all(g.d_pos == 0) and g.d_theta == 0.0


def test_symmetric_softmax_gradients():
    # u.p = u.n = 0 with u != 0: dL/ds_pos = -0.5, dL/ds_neg = +0.5
    u, p, n = np.array([E1]), np.array([E2]), np.array([E2])
    _, cache = contrastive_forward(_batch(u, p, n), Temperature())
    assert cache.q_pos[0] - 1 == pytest.approx(-0.5)
    assert cache.q_un[0, 0] == pytest.approx(0.5)
    g = contrastive_backward(cache)
    np.testing.assert_allclose(g.d_user, -0.5 * p + 0.5 * n, atol=1e-15)
    np.testing.assert_allclose(g.d_pos, -0.5 * u)
    np.testing.assert_allclose(g.d_uniform_neg, 0.5 * u)


def test_softmax_gradient_rows_sum_to_zero():
    rng = np.random.default_rng(0)
    B, M, d = 4, 3, 5
    mask = in_batch_mask(np.array([0, 1, 1, 2]))
    b = ContrastiveBatch(rng.normal(size=(B, d)), rng.normal(size=(B, d)),
                         rng.normal(size=(M, d)), mask)
    _, cache = contrastive_forward(b, Temperature())
    total = (cache.q_pos - 1) + cache.q_ib.sum(1) + cache.q_un.sum(1)
    np.testing.assert_allclose(total, 0.0, atol=1e-14)


def test_zero_embeddings_give_zero_user_gradient():
    b = ContrastiveBatch(np.zeros((3, 4)), np.zeros((3, 4)), np.zeros((2, 4)),
                         in_batch_mask(np.arange(3)))
    _, cache = contrastive_forward(b, Temperature())
    g = contrastive_backward(cache)
    assert np.all(g.d_user == 0)
    assert _loss(b) == pytest.approx(math.log(5))


def test_no_overflow_for_large_logits():
    u = np.array([[700.0]])
    loss, cache = contrastive_forward(_batch(u, [[1.0]], [[-1.0]]), Temperature())
    assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-300)
    loss, _ = contrastive_forward(_batch(u, [[-1.0]], [[1.0]]), Temperature())
    assert loss == pytest.approx(1400.0)


def test_nonfinite_input_rejected():
    with pytest.raises(NumericError):
        contrastive_forward(_batch([[np.nan, 0.0]], [E1], [E2]), Temperature())


def test_cache_reuse_is_a_contract_error():
    _, cache = contrastive_forward(_batch(E1, E1, [E2]), Temperature())
    contrastive_backward(cache)
    with pytest.raises(ContractError):
        contrastive_backward(cache)
    with pytest.raises(ContractError):
        contrastive_backward(object())


def test_mask_diagonal_must_be_false():
    with pytest.raises(InvalidArgument):
        ContrastiveBatch(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((0, 2)),
                         np.ones((2, 2), dtype=bool))


def test_temperature_clamp_kills_theta_gradient():
    b = _batch([[1.0, 2.0]], [[0.5, 0.1]], [[0.3, -0.2]])
    for theta in (math.log(1e-4), math.log(100.0)):
        temp = Temperature(theta)
        assert temp.clamped and temp.tau_min <= temp.tau <= temp.tau_max
        _, cache = contrastive_forward(b, temp)
        assert contrastive_backward(cache).d_theta == 0.0


def _random_instance(rng):
    B = int(rng.integers(1, 5))
    M = int(rng.integers(0, 5))
    d = int(rng.integers(1, 9))
    ids = rng.integers(0, 3, size=B)
    return (rng.normal(size=(B, d)), rng.normal(size=(B, d)), rng.normal(size=(M, d)),
            in_batch_mask(ids), float(rng.uniform(-1.0, 1.0)))


def contrastive_gradcheck_error(rng) -> float:
    U, P, N, mask, theta = _random_instance(rng)
    theta_arr = np.array([theta])

    def f():
        b = ContrastiveBatch(U, P, N, mask)
        return contrastive_forward(b, Temperature(float(theta_arr[0])))[0]

    _, cache = contrastive_forward(ContrastiveBatch(U, P, N, mask), Temperature(theta))
    g = contrastive_backward(cache)
    errs = [
        max_rel_err(g.d_user, numeric_grad(f, U)),
        max_rel_err(g.d_pos, numeric_grad(f, P)),
        max_rel_err(g.d_uniform_neg, numeric_grad(f, N)),
        max_rel_err(np.array([g.d_theta]), numeric_grad(f, theta_arr)),
    ]
    return max(errs)


def bce_gradcheck_error(rng) -> float:
    n = int(rng.integers(1, 5))
    d = int(rng.integers(1, 9))
    U, V = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    y = rng.integers(0, 2, size=n)
    _, du, dv = bce_forward_backward(U, V, y)
    f = lambda: bce_forward_backward(U, V, y)[0]
    return max(max_rel_err(du, numeric_grad(f, U)), max_rel_err(dv, numeric_grad(f, V)))


def test_contrastive_gradients_match_finite_differences():
    rng = np.random.default_rng(123)
    assert max(contrastive_gradcheck_error(rng) for _ in range(30)) < 1e-4


def test_bce_gradients_match_finite_differences():
    rng = np.random.default_rng(321)
    assert max(bce_gradcheck_error(rng) for _ in range(30)) < 1e-4


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_loss_nonnegative_and_monotone_in_negatives(seed):
    rng = np.random.default_rng(seed)
    U, P, N, mask, theta = _random_instance(rng)
    temp = Temperature(theta)
    base = contrastive_forward(ContrastiveBatch(U, P, N, mask), temp)[0]
    assert base >= 0
    extra = np.vstack([N, rng.normal(size=(1, U.shape[1]))])
    more = contrastive_forward(ContrastiveBatch(U, P, extra, mask), temp)[0]
    assert more > base


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_negative_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    U, P, N, mask, theta = _random_instance(rng)
    perm = rng.permutation(N.shape[0])
    temp = Temperature(theta)
    l1, c1 = contrastive_forward(ContrastiveBatch(U, P, N, mask), temp)
    l2, c2 = contrastive_forward(ContrastiveBatch(U, P, N[perm], mask), temp)
    assert l1 == pytest.approx(l2, rel=1e-12, abs=1e-15)
    g1, g2 = contrastive_backward(c1), contrastive_backward(c2)
    np.testing.assert_allclose(g2.d_uniform_neg, g1.d_uniform_neg[perm], rtol=1e-10, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    U, P, N, mask, theta = _random_instance(rng)
    d = U.shape[1]
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    temp = Temperature(theta)
    l1 = contrastive_forward(ContrastiveBatch(U, P, N, mask), temp)[0]
    l2 = contrastive_forward(ContrastiveBatch(U @ Q, P @ Q, N @ Q, mask), temp)[0]
    assert l2 == pytest.approx(l1, rel=1e-10, abs=1e-12)


def explicit_negative_loss(U, P, N, mask, temp):
    """Oracle: row by row, pass the in-batch positives as explicit negatives."""
    total = 0.0
    for i in range(U.shape[0]):
        negs = np.vstack([P[mask[i]], N]) if N.size or mask[i].any() else np.empty((0, U.shape[1]))
        negs = negs.reshape(-1, U.shape[1])
        b = ContrastiveBatch(U[i : i + 1], P[i : i + 1], negs, np.zeros((1, 1), dtype=bool))
        total += contrastive_forward(b, temp)[0]
    return total / U.shape[0]


def test_in_batch_equals_explicit_negatives():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        U, P, N, mask, theta = _random_instance(rng)
        temp = Temperature(theta)
        a = contrastive_forward(ContrastiveBatch(U, P, N, mask), temp)[0]
        b = explicit_negative_loss(U, P, N, mask, temp)
        worst = max(worst, abs(a - b))
    assert worst <= 1e-12


def _tables(n_users, n_items, d=4, seed=0):
    return (new_table(IdSpace(IdKind.USER, n_users), d, 1.0, seed),
            new_table(IdSpace(IdKind.ITEM, n_items), d, 1.0, seed + 1))


def test_assemble_distinct_items_no_uniform():
    ut, it = _tables(5, 10)
    b = assemble_batch([0, 1], [3, 4], ut, it, 0, np.random.default_rng(0))
    np.testing.assert_array_equal(b.neg_count, [1, 1])


def test_assemble_identical_items_are_masked():
    ut, it = _tables(5, 10)
    b = assemble_batch([0, 1], [3, 3], ut, it, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(b.neg_count, [3, 3])
    assert not b.in_batch_mask.any()


def test_assemble_rejects_empty_batch():
    ut, it = _tables(5, 10)
    with pytest.raises(InvalidArgument):
        assemble_batch([], [], ut, it, 3, np.random.default_rng(0))


def test_assemble_is_deterministic_per_stream():
    ut, it = _tables(5, 10)
    a = assemble_batch([0, 1], [3, 4], ut, it, 6, np.random.default_rng(9))
    b = assemble_batch([0, 1], [3, 4], ut, it, 6, np.random.default_rng(9))
    np.testing.assert_array_equal(a.uniform_neg_ids, b.uniform_neg_ids)


def test_uniform_negative_collision_rate():
    # expected accidental positives per row = M / n_items = 128 / 10000
    ut, it = _tables(100, 10_000, d=2)
    rng = np.random.default_rng(17)
    data_rng = np.random.default_rng(18)
    hits = []
    for _ in range(1000):
        items = data_rng.integers(0, 10_000, size=64)
        b = assemble_batch(np.zeros(64, int), items, ut, it, 128, rng)
        hits.append((b.uniform_neg_ids[None, :] == items[:, None]).sum(1).mean())
    mean = float(np.mean(hits))
    # per-row count ~ Binomial(128, 1e-4); 64000 rows -> sd of the mean ~ 4.5e-4
    assert abs(mean - 0.0128) < 4 * math.sqrt(0.0128 / 64000)


def test_bce_values():
    loss, du, dv = bce_forward_backward([[0.0]], [[1.0]], [1])
    assert loss == pytest.approx(math.log(2))
    assert du[0, 0] == pytest.approx(-0.5)
    loss, du, _ = bce_forward_backward([[0.0]], [[1.0]], [0])
    assert loss == pytest.approx(math.log(2))
    assert du[0, 0] == pytest.approx(0.5)


def test_bce_saturated_is_accurate():
    loss, _, _ = bce_forward_backward([[20.0]], [[1.0]], [1])
    assert loss == pytest.approx(math.log1p(math.exp(-20)), rel=1e-12)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)
    loss, _, _ = bce_forward_backward([[700.0]], [[1.0]], [0])
    assert loss == pytest.approx(700.0)


def test_bce_rejects_bad_labels():
    with pytest.raises(InvalidArgument):
        bce_forward_backward([[1.0]], [[1.0]], [2])
