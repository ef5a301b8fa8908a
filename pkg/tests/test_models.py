import numpy as np
import pytest

from idembed.core_types import ContractError, EmbeddingTable, IdKind, IdSpace, new_table
from idembed.models import (
    DownstreamModel,
    EmbeddingMode,
    MlpParams,
    TwoTowerModel,
    ctr_backward,
    ctr_forward,
    ctr_logits,
    two_tower_score,
)

from gradcheck import max_rel_err, numeric_grad


def _table(kind, rows):
    rows = np.asarray(rows, dtype=np.float64)
    return EmbeddingTable(IdSpace(kind, rows.shape[0]), rows)


def test_two_tower_scores():
    zero = TwoTowerModel(_table(IdKind.USER, np.zeros((2, 3))), _table(IdKind.ITEM, np.zeros((4, 3))))
    assert np.all(two_tower_score(zero, [0, 1], [2, 3]) == 0)
    unit = TwoTowerModel(_table(IdKind.USER, [[1.0, 0.0]]), _table(IdKind.ITEM, [[1.0, 0.0]]))
    assert two_tower_score(unit, [0], [0])[0] == 1.0
    m = TwoTowerModel(_table(IdKind.USER, [[1.0, 2.0]]), _table(IdKind.ITEM, [[3.0, -1.0]]))
    assert two_tower_score(m, [0], [0])[0] == 1.0
    with pytest.raises(IndexError):
        two_tower_score(m, [0], [1])


def _downstream(n_users=3, n_items=5, d=4, hidden=(8, 4), seed=0, mode=EmbeddingMode.SCRATCH):
    rng = np.random.default_rng(seed)
    u = _table(IdKind.USER, rng.normal(size=(n_users, d)))
    p = _table(IdKind.ITEM, rng.normal(size=(n_items, d)))
    model = DownstreamModel.init(u, p, hidden, mode, seed=seed)
    for b in model.mlp.biases:
        b[:] = rng.normal(size=b.shape) * 0.1
    return model


def test_zero_tables_zero_bias_give_zero_logits():
    model = _downstream()
    model.user_table.rows[:] = 0
    model.item_table.rows[:] = 0
    for b in model.mlp.biases:
        b[:] = 0
    logits, _ = ctr_forward(model, [0, 1, 2], [0, 1, 4])
    assert np.all(logits == 0)


def test_pass_through_wiring():
    # hidden units copy the hadamard coordinate u[0]*p[0] forward
    d = 2
    u = _table(IdKind.USER, [[3.0, 1.0]])
    p = _table(IdKind.ITEM, [[0.5, 7.0]])
    w0 = np.zeros((3 * d, 2)); w0[2 * d, 0] = 1.0
    w1 = np.zeros((2, 2)); w1[0, 0] = 1.0
    w2 = np.zeros((2, 1)); w2[0, 0] = 1.0
    mlp = MlpParams([w0, w1, w2], [np.zeros(2), np.zeros(2), np.zeros(1)])
    model = DownstreamModel(u, p, mlp)
    logits, _ = ctr_forward(model, [0], [0])
    assert logits[0] == 3.0 * 0.5


def test_zero_upstream_gradient():
    model = _downstream()
    _, cache = ctr_forward(model, [0, 1], [2, 3])
    g = ctr_backward(cache, np.zeros(2))
    assert all(np.all(w == 0) for w in g.mlp.flat())
    assert np.all(g.d_user_rows == 0) and np.all(g.d_item_rows == 0)


def test_dead_rectifiers_zero_hidden_gradients():
    model = _downstream()
    model.mlp.biases[0][:] = -1e6
    _, cache = ctr_forward(model, [0, 1], [2, 3])
    g = ctr_backward(cache, np.ones(2))
    assert np.all(g.mlp.weights[0] == 0) and np.all(g.mlp.weights[1] == 0)
    assert np.all(g.d_user_rows == 0)


def test_mismatched_cache():
    model = _downstream()
    _, cache = ctr_forward(model, [0, 1], [2, 3])
    with pytest.raises(ContractError):
        ctr_backward(cache, np.ones(3))
    with pytest.raises(ContractError):
        ctr_backward(None, np.ones(2))


def test_frozen_mode_freezes_tables():
    model = _downstream(mode=EmbeddingMode.FROZEN)
    assert model.user_table.frozen and model.item_table.frozen


def test_logits_helper_matches_forward():
    model = _downstream()
    users = np.array([[0, 0], [1, 2]])
    items = np.array([[1, 4], [3, 0]])
    direct = ctr_logits(model, users, items)
    fwd, _ = ctr_forward(model, users.reshape(-1), items.reshape(-1))
    np.testing.assert_array_equal(direct.reshape(-1), fwd)


def ctr_gradcheck_error(rng) -> float:
    """One random d=4, h=(8,4) instance with batch <= 4, loss = sum(w * logits)."""
    seed = int(rng.integers(0, 2**31))
    model = _downstream(n_users=3, n_items=4, seed=seed)
    n = int(rng.integers(1, 5))
    users = rng.integers(0, 3, size=n)
    items = rng.integers(0, 4, size=n)
    w = rng.normal(size=n)
    f = lambda: float(w @ ctr_forward(model, users, items)[0])
    _, cache = ctr_forward(model, users, items)
    g = ctr_backward(cache, w)
    errs = []
    for param, grad in zip(model.mlp.flat(), g.mlp.flat()):
        errs.append(max_rel_err(grad, numeric_grad(f, param)))
    du = np.zeros_like(model.user_table.rows)
    np.add.at(du, users, g.d_user_rows)
    di = np.zeros_like(model.item_table.rows)
    np.add.at(di, items, g.d_item_rows)
    errs.append(max_rel_err(du, numeric_grad(f, model.user_table.rows)))
    errs.append(max_rel_err(di, numeric_grad(f, model.item_table.rows)))
    return max(errs)


def test_ctr_gradients_match_finite_differences():
    rng = np.random.default_rng(99)
    assert max(ctr_gradcheck_error(rng) for _ in range(20)) < 1e-4
