import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nai.errors import InputError
from nai.graph import build_graph, extend_graph
from nai.propagation import (
    feature_width,
    layered_support,
    precompute_stack,
    smoothness_distance,
    stationary_state,
    stationary_summary,
    update_summary,
)

from conftest import dense_operator, random_connected_graph, random_graph

P2 = build_graph([(0, 1)], 2)
K3 = build_graph([(0, 1), (1, 2), (0, 2)], 3)
P3 = build_graph([(0, 1), (1, 2)], 3)


class TestStack:
    def test_two_node_average_is_idempotent(self):
        s = precompute_stack(P2, 0.5, np.eye(2), 3, "sgc")
        for l in (1, 2, 3):
            np.testing.assert_allclose(s.features(l), 0.5, atol=1e-15)

    def test_sign_width(self, rng):
        g = random_graph(rng, 10, 0.3)
        s = precompute_stack(g, 0.5, rng.standard_normal((10, 4)), 2, "sign")
        assert s.features(2).shape == (10, 12)
        assert feature_width("sign", 4, 2) == 12

    @pytest.mark.parametrize("backend", ["sgc", "s2gc", "sign"])
    def test_isolated_node_keeps_its_features(self, backend):
        g = build_graph([], 1)
        x = np.array([[2.0, -3.0]])
        s = precompute_stack(g, 0.5, x, 3, backend)
        for l in (1, 2, 3):
            f = s.features(l)
            np.testing.assert_allclose(f.reshape(-1, 2), np.repeat(x, f.size // 2, axis=0))

    def test_hop_zero_is_raw_and_hops_chain(self, rng):
        g = random_graph(rng, 15, 0.2)
        x = rng.standard_normal((15, 3))
        s = precompute_stack(g, 0.3, x, 4, "sgc")
        np.testing.assert_array_equal(s.hops[0], x)
        a = dense_operator(g, 0.3)
        for l in range(1, 5):
            np.testing.assert_allclose(s.hops[l], a @ s.hops[l - 1], atol=1e-12)

    def test_s2gc_is_mean_of_hops_one_to_l(self, rng):
        g = random_graph(rng, 12, 0.25)
        s = precompute_stack(g, 0.5, rng.standard_normal((12, 3)), 5, "s2gc")
        for l in range(1, 6):
            np.testing.assert_allclose(s.features(l), np.mean(s.hops[1 : l + 1], axis=0), atol=1e-10)

    def test_sign_concatenates_zero_to_l(self, rng):
        g = random_graph(rng, 8, 0.3)
        s = precompute_stack(g, 0.5, rng.standard_normal((8, 2)), 3, "sign")
        np.testing.assert_array_equal(s.features(3), np.hstack(s.hops))

    def test_rows_subset(self, rng):
        g = random_graph(rng, 20, 0.2)
        s = precompute_stack(g, 0.5, rng.standard_normal((20, 3)), 2, "s2gc")
        rows = np.array([3, 7, 11])
        np.testing.assert_array_equal(s.features(2, rows), s.features(2)[rows])

    def test_errors(self):
        with pytest.raises(InputError):
            precompute_stack(P2, 0.5, np.eye(2), 0)
        with pytest.raises(InputError):
            precompute_stack(P2, 0.5, np.array([[np.nan, 0], [0, 1]]), 1)
        with pytest.raises(InputError):
            precompute_stack(P2, 0.5, np.eye(2), 1, "gamlp")
        with pytest.raises(InputError):
            precompute_stack(P2, 0.5, np.eye(2), 2).features(3)


class TestStationary:
    def test_two_node_summary(self):
        s = stationary_summary(P2, 0.5, np.eye(2))
        np.testing.assert_allclose(s.mass, [4.0])
        np.testing.assert_allclose(s.weighted_sum, [[np.sqrt(2), np.sqrt(2)]], rtol=1e-15)
        np.testing.assert_allclose(stationary_state(s, 0), [0.5, 0.5], rtol=1e-15)

    def test_single_node(self):
        v = np.array([[1.5, -2.0, 0.25]])
        s = stationary_summary(build_graph([], 1), 0.7, v)
        np.testing.assert_allclose(s.mass, [1.0])
        np.testing.assert_allclose(s.weighted_sum, v)
        np.testing.assert_allclose(stationary_state(s, 0), v[0])

    def test_triangle_transition(self):
        s = stationary_summary(K3, 1.0, np.eye(3))
        np.testing.assert_allclose(s.mass, [9.0])
        np.testing.assert_allclose(s.weighted_sum, [[1.0, 1.0, 1.0]])

    def test_triangle_symmetric(self):
        s = stationary_summary(K3, 0.5, np.eye(3))
        np.testing.assert_allclose(s.rows(np.arange(3)), 1.0 / 3.0, rtol=1e-14)

    def test_unknown_node(self):
        s = stationary_summary(P2, 0.5, np.eye(2))
        with pytest.raises(InputError):
            stationary_state(s, 2)

    @pytest.mark.parametrize("r", [0.0, 0.5, 1.0, 0.25])
    def test_rank_one_limit_matches_entrywise_matrix(self, rng, r):
        # limit operator entry (i, j) for i, j in the same component:
        # (d_i+1)^r (d_j+1)^(1-r) / (2 m_c + n_c)
        g = random_graph(rng, 24, 0.12)
        x = rng.uniform(-1, 1, (24, 5))
        dt = g.degrees + 1.0
        comps = g.components
        same = comps.labels[:, None] == comps.labels[None, :]
        limit = same * np.outer(dt**r, dt ** (1 - r)) / comps.mass()[comps.labels][:, None]
        s = stationary_summary(g, r, x)
        np.testing.assert_allclose(s.rows(np.arange(24)), limit @ x, atol=1e-10)

    def test_fixed_point(self, rng):
        g = random_connected_graph(rng, 30)
        x = rng.standard_normal((30, 3))
        for r in (0.0, 0.5, 1.0):
            x_inf = stationary_summary(g, r, x).rows(np.arange(30))
            np.testing.assert_allclose(dense_operator(g, r) @ x_inf, x_inf, atol=1e-12)

    def test_power_iteration(self, rng):
        g = random_connected_graph(rng, 20, 0.2)
        x = rng.uniform(-1, 1, (20, 4))
        for r in (0.0, 0.5, 1.0):
            power = np.linalg.matrix_power(dense_operator(g, r), 200) @ x
            np.testing.assert_allclose(stationary_summary(g, r, x).rows(np.arange(20)), power, atol=1e-6)


class TestUpdateSummary:
    def test_add_isolated_node(self):
        s = stationary_summary(P2, 0.5, np.eye(2))
        g2, delta = extend_graph(P2, 1, [])
        x = np.array([[1.0, 0.0], [0.0, 1.0], [4.0, 5.0]])
        u = update_summary(s, g2, delta, x)
        assert u.mass.tolist() == [4.0, 1.0]
        np.testing.assert_allclose(u.weighted_sum[1], [4.0, 5.0])

    def test_merge_two_singletons(self):
        g = build_graph([], 2)
        x = np.eye(2)
        s = stationary_summary(g, 0.5, x)
        g2, delta = extend_graph(g, 0, [(0, 1)])
        u = update_summary(s, g2, delta, x)
        np.testing.assert_allclose(u.mass, [4.0])
        np.testing.assert_allclose(u.weighted_sum, [[np.sqrt(2), np.sqrt(2)]], rtol=1e-15)
        scratch = stationary_summary(g2, 0.5, x)
        np.testing.assert_allclose(u.weighted_sum, scratch.weighted_sum, rtol=1e-15)

    def test_empty_delta(self):
        s = stationary_summary(K3, 0.5, np.eye(3))
        g2, delta = extend_graph(K3, 0, [])
        u = update_summary(s, g2, delta, np.eye(3))
        np.testing.assert_array_equal(u.weighted_sum, s.weighted_sum)
        np.testing.assert_array_equal(u.mass, s.mass)

    def test_mismatched_delta(self):
        s = stationary_summary(K3, 0.5, np.eye(3))
        _, delta = extend_graph(P2, 1, [(0, 2)])
        with pytest.raises(InputError):
            update_summary(s, K3, delta, np.eye(3))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.5, 1.0, 0.3]))
    def test_many_extensions_match_scratch(self, seed, r):
        rng = np.random.default_rng(seed)
        n, f = int(rng.integers(1, 8)), 3
        g = random_graph(rng, n, 0.3)
        x = rng.standard_normal((n, f))
        s = stationary_summary(g, r, x)
        for _ in range(10):
            add = int(rng.integers(0, 4))
            e = rng.integers(0, g.n + add, size=(int(rng.integers(0, 5)), 2)) if g.n + add else np.zeros((0, 2))
            x = np.vstack([x, rng.standard_normal((add, f))])
            g, delta = extend_graph(g, add, e)
            s = update_summary(s, g, delta, x)
        scratch = stationary_summary(g, r, x)
        np.testing.assert_array_equal(s.labels, scratch.labels)
        np.testing.assert_allclose(s.mass, scratch.mass, rtol=1e-12)
        np.testing.assert_allclose(s.weighted_sum, scratch.weighted_sum, rtol=1e-9, atol=1e-12)


class TestDistance:
    def test_identical(self):
        assert smoothness_distance(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0

    def test_orthogonal_units(self):
        np.testing.assert_allclose(smoothness_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])), np.sqrt(2))

    def test_two_node_one_hop_is_stationary(self):
        x1 = precompute_stack(P2, 0.5, np.eye(2), 1).features(1)
        x_inf = stationary_summary(P2, 0.5, np.eye(2)).rows(np.arange(2))
        np.testing.assert_allclose(smoothness_distance(x1, x_inf), 0.0, atol=1e-15)

    def test_row_wise(self, rng):
        a, b = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
        np.testing.assert_allclose(smoothness_distance(a, b), np.linalg.norm(a - b, axis=1))

    def test_normalized_ignores_scale(self, rng):
        a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        np.testing.assert_allclose(smoothness_distance(3 * a, 0.2 * b, normalize=True),
                                   smoothness_distance(a, b, normalize=True))

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            smoothness_distance(np.zeros(2), np.zeros(3))

    def test_converges_on_connected_graphs(self, rng):
        for _ in range(5):
            g = random_connected_graph(rng, int(rng.integers(5, 40)))
            x = rng.uniform(-1, 1, (g.n, 4))
            s = precompute_stack(g, 0.5, x, 100)
            x_inf = stationary_summary(g, 0.5, x).rows(np.arange(g.n))
            d1 = smoothness_distance(s.hops[1], x_inf)
            d100 = smoothness_distance(s.hops[100], x_inf)
            assert np.all(d100 <= 1e-6 * (d1 + 1e-12))


class TestSupport:
    def test_path_rings(self):
        s = layered_support(P3, [0], 2)
        assert [s[l].tolist() for l in (2, 1, 0)] == [[0], [0, 1], [0, 1, 2]]

    def test_isolated(self):
        s = layered_support(build_graph([], 3), [1], 5)
        assert all(layer.tolist() == [1] for layer in s.layers)

    def test_triangle(self):
        s = layered_support(K3, [0], 1)
        assert s[1].tolist() == [0] and s[0].tolist() == [0, 1, 2]

    def test_nested_and_closed(self, rng):
        g = random_graph(rng, 50, 0.05)
        s = layered_support(g, rng.choice(50, 4, replace=False), 4)
        for l in range(s.L):
            outer, inner = set(s[l].tolist()), set(s[l + 1].tolist())
            assert inner <= outer
            for i in inner:
                assert set(g.neighbors(i).tolist()) <= outer

    def test_errors(self):
        with pytest.raises(InputError):
            layered_support(P3, [], 2)
        with pytest.raises(InputError):
            layered_support(P3, [0], 0)
        with pytest.raises(InputError):
            layered_support(P3, [5], 1)
