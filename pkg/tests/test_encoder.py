import numpy as np
import pytest
import scipy.sparse as sp

from gilt import autodiff as ad
from gilt.encoder import encode, encoder_init, normalize_adjacency
from gilt.graphs import SyntheticSpec, make_synthetic


def dense_reference(node_count, edges):
    # independent dense construction of D^{-1/2} (A + I) D^{-1/2}
    a = np.eye(node_count)
    for s, d in edges:
        a[s, d] = 1.0
        a[d, s] = 1.0
    deg = a.sum(axis=1)
    dinv = np.diag(1.0 / np.sqrt(deg))
    return dinv @ a @ dinv


class TestNormalizedAdjacency:
    def test_path_graph_hand_values(self):
        # path 0-1-2; degrees with self-loops are [2, 3, 2]
        adj = normalize_adjacency(3, np.array([[0, 1], [1, 2]])).toarray()
        off = 1.0 / np.sqrt(6.0)
        expect = np.array([
            [0.5, off, 0.0],
            [off, 1.0 / 3.0, off],
            [0.0, off, 0.5],
        ])
        assert np.max(np.abs(adj - expect)) < 1e-12

    def test_isolated_node_keeps_unit_self_loop(self):
        adj = normalize_adjacency(3, np.array([[0, 1]])).toarray()
        assert adj[2, 2] == 1.0
        assert np.all(adj[2, :2] == 0.0)

    @pytest.mark.parametrize("seed", range(8))
    def test_sparse_matches_dense(self, seed):
        g = make_synthetic(SyntheticSpec(2, 15, 0.3, 0.1, 4, 1.0, 0.2, seed=seed))
        assert g.node_count <= 50
        sparse = normalize_adjacency(g.node_count, g.edges).toarray()
        assert np.max(np.abs(sparse - dense_reference(g.node_count, g.edges))) < 1e-12

    def test_symmetric(self):
        g = make_synthetic(SyntheticSpec(3, 10, 0.4, 0.1, 4, 1.0, 0.2, seed=3))
        adj = normalize_adjacency(g.node_count, g.edges).toarray()
        assert np.max(np.abs(adj - adj.T)) < 1e-15

    def test_returns_csr(self):
        adj = normalize_adjacency(4, np.array([[0, 1], [2, 3]]))
        assert sp.issparse(adj) and adj.format == "csr"


def tensor_params(arrays):
    return {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()}


class TestEncode:
    def setup_method(self):
        self.g = make_synthetic(SyntheticSpec(2, 10, 0.4, 0.1, 6, 1.0, 0.3, seed=1))
        self.adj = normalize_adjacency(self.g.node_count, self.g.edges)
        self.x = self.g.features

    def test_zero_layers_is_identity(self):
        h = encode(self.adj, self.x, {}, n_layers=0)
        assert np.array_equal(h.values, self.x)

    def test_rows_standardized_at_default_affine(self):
        params = tensor_params(encoder_init(6, 3))
        h = encode(self.adj, self.x, params, n_layers=3).values
        assert np.max(np.abs(h.mean(axis=1))) < 1e-10
        assert np.max(np.abs(h.var(axis=1) - 1.0)) < 1e-6

    def test_matches_numpy_reference(self):
        params = tensor_params(encoder_init(6, 2))
        h = encode(self.adj, self.x, params, n_layers=2).values

        ref = self.x.copy()
        dense = self.adj.toarray()
        for _ in range(2):
            ref = dense @ ref
            mu = ref.mean(axis=1, keepdims=True)
            var = ref.var(axis=1, keepdims=True)
            ref = (ref - mu) / np.sqrt(np.maximum(var, ad.LAYERNORM_EPS))
        assert np.max(np.abs(h - ref)) < 1e-10

    def test_affine_applied(self):
        arrays = encoder_init(6, 1)
        arrays["enc_ln0_gamma"] = np.full(6, 2.0)
        arrays["enc_ln0_beta"] = np.full(6, -1.0)
        base = encode(self.adj, self.x, tensor_params(encoder_init(6, 1)), 1).values
        scaled = encode(self.adj, self.x, tensor_params(arrays), 1).values
        assert np.max(np.abs(scaled - (2.0 * base - 1.0))) < 1e-12

    def test_gradients_reach_affines(self):
        # a plain sum of squares is blind to the trailing LayerNorm, so
        # weight the entries to give every affine a real gradient
        params = tensor_params(encoder_init(4, 2))
        adj = normalize_adjacency(5, np.array([[0, 1], [1, 2], [3, 4]]))
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 4))
        w = rng.standard_normal((5, 4))

        def loss():
            h = encode(adj, x, params, n_layers=2)
            return ad.sum_(ad.mul(ad.mul(h, h), w))

        report = ad.grad_check(loss, params, tol=1e-4)
        assert report.passed, report

    def test_nonlinear_variant_gradients(self):
        params = tensor_params(encoder_init(4, 1, variant="nonlinear"))
        # shift inputs positive so ReLU is locally smooth for the check
        adj = normalize_adjacency(4, np.array([[0, 1], [2, 3]]))
        rng = np.random.default_rng(1)
        x = np.abs(rng.standard_normal((4, 4))) + 0.5
        w = rng.standard_normal((4, 4))

        def loss():
            h = encode(adj, x, params, n_layers=1, variant="nonlinear")
            return ad.sum_(ad.mul(ad.mul(h, h), w))

        report = ad.grad_check(loss, params, tol=1e-4)
        assert report.passed, report

    def test_nonlinear_init_has_identity_weight(self):
        arrays = encoder_init(5, 2, variant="nonlinear")
        assert np.array_equal(arrays["enc_w0"], np.eye(5))
        assert "enc_w1" in arrays

    def test_edgeless_graph_encodes(self):
        adj = normalize_adjacency(4, np.empty((0, 2), dtype=np.int64))
        x = np.random.default_rng(2).standard_normal((4, 6))
        params = tensor_params(encoder_init(6, 2))
        h = encode(adj, x, params, n_layers=2).values
        assert h.shape == (4, 6)
        assert np.all(np.isfinite(h))

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            encoder_init(4, 1, variant="residual")
        with pytest.raises(ValueError, match="variant"):
            encode(self.adj, self.x, {}, 1, variant="gat")

    def test_deterministic(self):
        params = tensor_params(encoder_init(6, 2))
        a = encode(self.adj, self.x, params, 2).values
        b = encode(self.adj, self.x, params, 2).values
        assert a.tobytes() == b.tobytes()
