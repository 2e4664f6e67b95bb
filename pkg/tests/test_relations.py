import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vitdistill import tensor as tt
from vitdistill.relations import PAIRS, compute_relations, relation, relation_to_csv, scaled_product, stack_heads
from vitdistill.tensor import ShapeError, Tensor


def qkv(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return [Tensor((rng.standard_normal(shape) * scale).astype(np.float32)) for _ in range(3)]


def test_hand_oracle_single_head_two_tokens():
    q = Tensor(np.array([[[[1.0], [0.0]]]], np.float32))
    rel = compute_relations(q, q, q)
    e = math.e
    expected = [[e / (e + 1), 1 / (e + 1)], [0.5, 0.5]]
    np.testing.assert_allclose(rel.qq.data[0, 0], expected, atol=1e-6)
    np.testing.assert_allclose(rel.qq.data[0, 0], [[0.7311, 0.2689], [0.5, 0.5]], atol=1e-4)
    assert rel.scale == 1.0


def test_single_token_gives_unit_relations():
    rel = compute_relations(*qkv((1, 3, 1, 4)))
    for pair in PAIRS:
        np.testing.assert_array_equal(rel.get(pair).data, np.ones((1, 3, 1, 1), np.float32))


def test_equal_q_and_k_give_equal_qk_and_qq():
    q, _, v = qkv((2, 2, 5, 4))
    rel = compute_relations(q, q, v)
    assert np.array_equal(rel.qk.data, rel.qq.data)


def test_self_relations_are_symmetric_before_softmax():
    rel = compute_relations(*qkv((2, 3, 6, 4), scale=3), apply_softmax=False)
    for r in (rel.qq, rel.kk, rel.vv):
        assert np.array_equal(r.data, np.swapaxes(r.data, -1, -2))
    assert not rel.softmax_applied


def test_scale_compensates_a_scaled_query_exactly():
    q, k, _ = qkv((1, 2, 5, 4))
    a = relation(q, k, 0.5)
    b = relation(Tensor(q.data * 4), k, 0.5 / 4)
    assert np.array_equal(a.data, b.data)


def test_raw_relation_is_the_scaled_product():
    q, k, _ = qkv((1, 1, 3, 4))
    raw = scaled_product(q, k, 0.5).data
    np.testing.assert_allclose(raw, 0.5 * q.data @ np.swapaxes(k.data, -1, -2), rtol=1e-6)


def test_only_requested_pairs_are_computed():
    rel = compute_relations(*qkv((1, 2, 3, 2)), pairs=("QK", "VV"))
    assert rel.qq is None and rel.kk is None
    assert rel.heads == 2 and rel.tokens == 3
    with pytest.raises(KeyError):
        rel.get("QQ")


def test_excluding_the_class_token_drops_row_and_column_zero():
    q, k, v = qkv((1, 2, 5, 4))
    with_cls = compute_relations(q, k, v, apply_softmax=False)
    without = compute_relations(q, k, v, apply_softmax=False, exclude_cls=True)
    assert without.tokens == 4
    np.testing.assert_array_equal(without.qk.data, with_cls.qk.data[..., 1:, 1:])


def test_mismatched_shapes_raise():
    q, k, _ = qkv((1, 2, 5, 4))
    with pytest.raises(ShapeError):
        compute_relations(q, k, Tensor(np.zeros((1, 2, 4, 4), np.float32)))


def test_stack_heads_keeps_order():
    heads = [Tensor(np.full((3, 3), i, np.float32)) for i in range(4)]
    out = stack_heads(heads)
    assert out.shape == (4, 3, 3)
    assert [out.data[i, 0, 0] for i in range(4)] == [0, 1, 2, 3]
    assert np.array_equal(stack_heads(heads[:1]).data[0], heads[0].data)


def test_relation_csv_dump(tmp_path):
    rel = compute_relations(*qkv((1, 1, 3, 2)))
    relation_to_csv(rel.qk.data[0, 0], tmp_path / "r.csv")
    back = np.loadtxt(tmp_path / "r.csv", delimiter=",")
    np.testing.assert_allclose(back, rel.qk.data[0, 0], rtol=1e-7)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 6),
                                        st.integers(1, 4)),
                  elements=st.floats(-5, 5, width=32)))
def test_softmaxed_relations_are_row_stochastic(x):
    rng = np.random.default_rng(0)
    k = Tensor(rng.standard_normal(x.shape).astype(np.float32))
    rel = compute_relations(Tensor(x), k, Tensor(x[..., ::-1].copy()))
    for pair in PAIRS:
        r = rel.get(pair).data
        assert np.all(np.abs(r.sum(-1) - 1) <= 1e-6)
        assert np.all(r > 0) or r.shape[-1] == 1


def test_gradients_flow_to_q_k_and_v():
    q, k, v = [Tensor(t.data, requires_grad=True) for t in qkv((1, 2, 3, 2))]
    rel = compute_relations(q, k, v)
    w = np.random.default_rng(1).standard_normal(rel.qk.shape).astype(np.float32)
    tt.sum_all([(rel.get(p) * Tensor(w)).sum() for p in PAIRS]).backward()
    assert all(np.abs(t.grad).sum() > 0 for t in (q, k, v))
