import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attxnet import attx
from attxnet import numerics as nx
from attxnet.attx import TYPE_I, TYPE_II, TYPE_III, ConnectionType
from attxnet.errors import ConfigurationError
from attxnet.numerics import Tensor
from oracles import scalar_attx


def rand_z(rng, d, n, m, batch=()):
    return [Tensor(rng.standard_normal(batch + (n, m))) for _ in range(d)]


# --------------------------------------------------------------------------
# connection types


def test_type_strings_round_trip():
    assert str(TYPE_I) == "1->2"
    assert str(TYPE_II) == "2->1"
    assert str(TYPE_III) == "1<->2"
    for text in ("1->2", "2->1", "1<->2", "2->1,2->3", "1->3,2->3"):
        assert str(ConnectionType.parse(text)) == text
    assert ConnectionType.parse("II") == TYPE_II
    assert ConnectionType.parse("III") == TYPE_III


def test_type_rejects_empty_and_self_edges():
    with pytest.raises(ConfigurationError):
        ConnectionType(frozenset())
    with pytest.raises(ConfigurationError):
        ConnectionType.of((1, 1))
    with pytest.raises(ConfigurationError):
        ConnectionType.parse("1=>2")


def test_stage_strings():
    assert attx.format_stages({3, 1, 2}) == "[1,2,3]"
    assert attx.parse_stages("[1,3]") == frozenset({1, 3})
    assert attx.parse_stages("[]") == frozenset()


def test_enumerate_types():
    assert attx.enumerate_connection_types(2) == [TYPE_I, TYPE_II, TYPE_III]
    types3 = attx.enumerate_connection_types(3)
    assert len(types3) == 7 and len(set(types3)) == 7
    for d in (2, 3, 4):
        types = attx.enumerate_connection_types(d)
        assert len(types) == 2**d - 1
        for c in types:
            assert c.edges and all(s != t for s, t in c.edges)
    with pytest.raises(ConfigurationError):
        attx.enumerate_connection_types(1)


def test_greedy_candidates_follow_pair_winner():
    cands = attx.greedy_candidates(3, TYPE_II)
    assert [str(c) for c in cands] == ["2->1,2->3", "2->1,3->1"]
    calls = []

    def evaluate(c):
        calls.append(c)
        return 0.6 if c == cands[0] else 0.7

    assert attx.greedy_type_search(3, TYPE_II, evaluate) == cands[1]
    assert len(calls) == 2


def test_greedy_tie_prefers_fewer_edges():
    a = ConnectionType.parse("2->1,2->3")
    b = ConnectionType.parse("1<->2,2->3")
    assert attx.select_best([(b, 0.5), (a, 0.5)]) == a
    assert attx.select_best([(ConnectionType.parse("2->1,3->1"), 0.5), (a, 0.5)]) == ConnectionType.parse("2->1,2->3")


# --------------------------------------------------------------------------
# individual steps


def test_stack_shapes(rng):
    z = rand_z(rng, 2, 2, 3)
    s = attx.stack_modalities(z)
    assert s.shape == (2, 3, 2)
    np.testing.assert_array_equal(s.data[..., 0], z[0].data)
    assert attx.stack_modalities(rand_z(rng, 4, 2, 3)).shape[-1] == 4
    with pytest.raises(ConfigurationError, match="adapt_dimensions"):
        attx.stack_modalities([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))])


def test_project_examples(rng):
    s = Tensor(np.abs(rng.standard_normal((2, 3, 2))))
    np.testing.assert_array_equal(attx.project(s, Tensor(np.eye(2))).data, s.data)
    s = Tensor(rng.standard_normal((2, 3, 2)))
    np.testing.assert_array_equal(attx.project(s, Tensor(np.eye(2))).data, np.maximum(s.data, 0))
    u = attx.project(Tensor([[[1.0, 2.0]]]), Tensor([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(u.data, [[[2.0, 1.0]]])


def test_attention_weights_examples(rng):
    u_same = np.repeat(rng.standard_normal((2, 3, 1)), 3, axis=-1)
    theta = attx.attention_weights(Tensor(u_same), Tensor(rng.standard_normal(3)))
    assert theta.shape == (2, 3, 3)
    np.testing.assert_allclose(theta.data, 1 / 3, rtol=1e-15)
    theta = attx.attention_weights(Tensor(rng.standard_normal((2, 3, 2))), Tensor(np.zeros(3)))
    np.testing.assert_allclose(theta.data, 0.5, rtol=1e-15)
    theta = attx.attention_weights(Tensor([[[0.0, math.log(3)]]]), Tensor([1.0]))
    np.testing.assert_allclose(theta.data[0, :, 0], [0.25, 0.75], rtol=1e-15)


def test_extract_and_weight(rng):
    theta = attx.attention_weights(Tensor(rng.standard_normal((2, 4, 2))), Tensor(rng.standard_normal(4)))
    t0 = attx.extract_modality_weights(theta, 0)
    t1 = attx.extract_modality_weights(theta, 1)
    np.testing.assert_array_equal(t0.data, theta.data[:, 0, :])
    np.testing.assert_allclose(t0.data + t1.data, 1.0, atol=1e-15)
    np.testing.assert_array_equal(nx.stack([t0, t1], axis=1).data, theta.data)
    with pytest.raises(ConfigurationError):
        attx.extract_modality_weights(theta, 2)
    z = Tensor(rng.standard_normal((2, 4)))
    np.testing.assert_array_equal(attx.weight_modality(nx.ones((2, 4)), z).data, z.data)
    np.testing.assert_array_equal(attx.weight_modality(Tensor(np.full((2, 4), 0.5)), z).data, z.data / 2)
    np.testing.assert_array_equal(attx.weight_modality(t0, nx.zeros((2, 4))).data, 0.0)


def test_route_examples(rng):
    z = rand_z(rng, 2, 3, 5)
    zhat = [Tensor(rng.standard_normal((3, 5))) for _ in range(2)]
    out = attx.route(TYPE_I, z, zhat)
    assert out[0] is z[0]
    np.testing.assert_array_equal(out[1].data, np.concatenate([z[1].data, zhat[0].data]))
    out = attx.route(TYPE_III, z, zhat)
    np.testing.assert_array_equal(out[0].data, np.concatenate([z[0].data, zhat[1].data]))
    np.testing.assert_array_equal(out[1].data, np.concatenate([z[1].data, zhat[0].data]))
    with pytest.raises(ConfigurationError):
        attx.route(ConnectionType.parse("3->1"), z, zhat)


def test_route_channel_extent(rng):
    z = rand_z(rng, 3, 2, 4, batch=(5,))
    ctype = ConnectionType.parse("2->1,3->1,1->2")
    out = attx.route(ctype, z, {k: z[k] for k in range(3)})
    for i, x in enumerate(out):
        assert x.shape == (5, 2 * (1 + ctype.indegree(i)), 4)


# --------------------------------------------------------------------------
# full block


def test_forward_worked_example():
    z1, z2 = Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])
    out = attx.attx_forward(Tensor(np.eye(2)), Tensor([1.0, 1.0]), TYPE_II, [z1, z2])
    w_pos1 = math.exp(3) / (math.exp(1) + math.exp(3))
    w_pos2 = math.exp(4) / (math.exp(2) + math.exp(4))
    assert round(w_pos1, 4) == 0.8808
    np.testing.assert_allclose(out[0].data, [[1.0, 2.0], [w_pos1 * 3, w_pos2 * 4]], rtol=1e-15)
    assert out[1] is z2


def test_identical_inputs_halve(rng):
    # identical inputs only give identical logits when W's column sums agree
    z = Tensor(rng.standard_normal((3, 4)))
    a, b = rng.standard_normal(2)
    w = Tensor([[a, b], [b, a]])
    out = attx.attx_forward(w, Tensor(rng.standard_normal(4)), TYPE_III, [z, z])
    np.testing.assert_allclose(out[0].data[3:], z.data / 2, rtol=1e-15)


def _oracle_cases():
    for d in (2, 3):
        types = attx.enumerate_connection_types(d) + (
            [ConnectionType.parse("2->1,2->3"), ConnectionType.parse("2->1,3->1")] if d == 3 else []
        )
        for n, m in itertools.product((1, 2, 3), repeat=2):
            for ctype in types:
                yield d, n, m, ctype


def test_matches_scalar_oracle(rng):
    for d, n, m, ctype in _oracle_cases():
        w = rng.standard_normal((d, d))
        w_u = rng.standard_normal(m) * 2
        z = [rng.standard_normal((n, m)) for _ in range(d)]
        got = attx.attx_forward(Tensor(w), Tensor(w_u), ctype, [Tensor(v) for v in z])
        ref, _ = scalar_attx(w.tolist(), w_u.tolist(), ctype.edges, [v.tolist() for v in z])
        for g, r in zip(got, ref):
            np.testing.assert_allclose(g.data, np.array(r), rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), d=st.integers(2, 4), n=st.integers(1, 4), m=st.integers(1, 6))
def test_theta_normalised(seed, d, n, m):
    r = np.random.default_rng(seed)
    block = attx.AttXBlock(d, m, attx.enumerate_connection_types(d)[-1], 1, r)
    theta = block.attention([Tensor(r.standard_normal((2, n, m)) * 3) for _ in range(d)]).data
    assert theta.shape == (2, n, d, m)
    assert np.all(theta > 0) and np.all(theta < 1)
    np.testing.assert_allclose(theta.sum(axis=-2), 1.0, atol=1e-9)


def test_pass_through_is_bit_exact(rng):
    z = rand_z(rng, 3, 2, 4)
    out = attx.attx_forward(Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal(4)),
                            ConnectionType.parse("1->2"), z)
    assert out[0] is z[0] and out[2] is z[2]


@pytest.mark.parametrize("d", [2, 3])
def test_modality_permutation_symmetry(rng, d):
    for _ in range(5):
        perm = list(rng.permutation(d))
        inv = np.argsort(perm)
        w = rng.standard_normal((d, d))
        w_u = rng.standard_normal(4)
        z = [rng.standard_normal((2, 4)) for _ in range(d)]
        ctype = attx.enumerate_connection_types(d)[int(rng.integers(2**d - 1))]
        out = attx.attx_forward(Tensor(w), Tensor(w_u), ctype, [Tensor(v) for v in z])
        # new modality j is old modality perm[j]
        w_p = w[np.ix_(perm, perm)]
        edges_p = ConnectionType(frozenset((int(inv[s]), int(inv[t])) for s, t in ctype.edges))
        out_p = attx.attx_forward(Tensor(w_p), Tensor(w_u), edges_p, [Tensor(z[p]) for p in perm])
        for j, p in enumerate(perm):
            # channel blocks of 2 rows: own Z first, then one per source in
            # ascending index order, which the relabelling can reorder
            new_blocks = out_p[j].data.reshape(-1, 2, 4)
            old_blocks = out[p].data.reshape(-1, 2, 4)
            np.testing.assert_allclose(new_blocks[0], old_blocks[0], rtol=0, atol=1e-12)
            old_by_src = dict(zip(ctype.sources_for(p), old_blocks[1:]))
            new_by_src = {perm[s]: b for s, b in zip(edges_p.sources_for(j), new_blocks[1:])}
            assert old_by_src.keys() == new_by_src.keys()
            for s in old_by_src:
                np.testing.assert_allclose(new_by_src[s], old_by_src[s], rtol=0, atol=1e-12)


def test_type_consistency(rng):
    z = rand_z(rng, 2, 3, 5)
    w, w_u = Tensor(rng.standard_normal((2, 2))), Tensor(rng.standard_normal(5))
    o3 = attx.attx_forward(w, w_u, TYPE_III, z)
    o2 = attx.attx_forward(w, w_u, TYPE_II, z)
    o1 = attx.attx_forward(w, w_u, TYPE_I, z)
    np.testing.assert_array_equal(o3[0].data, o2[0].data)
    np.testing.assert_array_equal(o3[1].data, o1[1].data)


def test_block_gradients(rng):
    for ctype in (TYPE_I, TYPE_II, TYPE_III):
        w = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        w_u = Tensor(rng.standard_normal(4), requires_grad=True)
        z = [Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True) for _ in range(2)]
        weights = [rng.standard_normal((2, 3 * (1 + ctype.indegree(i)), 4)) for i in range(2)]

        def loss(w, w_u, z0, z1):
            outs = attx.attx_forward(w, w_u, ctype, [z0, z1])
            return nx.add(*[nx.tensor_sum(nx.mul(o, Tensor(r))) for o, r in zip(outs, weights)])

        nx.gradcheck(loss, [w, w_u, *z])


# --------------------------------------------------------------------------
# dimension adapter


def test_adapter_identity(rng):
    z = rand_z(rng, 2, 3, 5)
    adapter = attx.DimensionAdapter([(3, 5), (3, 5)], rng)
    assert adapter.is_identity and adapter.parameters() == []
    out = adapter(z)
    assert out[0] is z[0] and out[1] is z[1]


def test_adapter_shapes(rng):
    out = attx.adapt_dimensions([Tensor(rng.standard_normal((32, 100))), Tensor(rng.standard_normal((64, 100)))], rng)
    assert [o.shape for o in out] == [(64, 100), (64, 100)]
    out = attx.adapt_dimensions([Tensor(rng.standard_normal((32, 100))), Tensor(rng.standard_normal((32, 50)))], rng)
    assert [o.shape for o in out] == [(32, 100), (32, 100)]
    # nearest-neighbour doubling repeats each step
    np.testing.assert_array_equal(out[1].data[:, ::2], out[1].data[:, 1::2])


def test_gradients_through_adapter(rng):
    adapter = attx.DimensionAdapter([(2, 4), (3, 6)], rng)
    block = attx.AttXBlock(2, 6, TYPE_III, 1, rng)
    z0 = Tensor(rng.standard_normal((2, 2, 4)), requires_grad=True)
    z1 = Tensor(rng.standard_normal((2, 3, 6)), requires_grad=True)
    weights = rng.standard_normal((2, 6, 6))
    params = adapter.parameters() + block.parameters()

    def loss(z0, z1, *_):
        outs = block(adapter([z0, z1]))
        return nx.tensor_sum(nx.mul(nx.add(outs[0], outs[1]), Tensor(weights)))

    nx.gradcheck(loss, [z0, z1, *params])
