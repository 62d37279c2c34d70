import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from mal2gcn.fcg import Fcg, FunctionNode
from mal2gcn.featurize import Vocabulary
from mal2gcn.gcn import (
    ModelIOError,
    ModelParams,
    NormalizedAdjacency,
    build_normalized_adjacency,
    forward,
    input_gradient,
    load_model,
    loss_and_gradients,
    project_nonnegative,
    save_model,
)

from conftest import (
    brute_force_normalized_adjacency,
    fd_param_grads,
    make_safe_instance,
    random_params,
    rel_err,
)


def chain_graph(n, extra_edges=()):
    ids = [f"n{i}" for i in range(n)]
    nodes = tuple(FunctionNode(i) for i in ids)
    edges = tuple((ids[i], ids[i + 1]) for i in range(n - 1)) + tuple(extra_edges)
    return Fcg("g", None, ids[0], nodes, edges)


class TestNormalizedAdjacency:
    def test_single_node(self):
        adj = build_normalized_adjacency(chain_graph(1))
        assert adj.values.tolist() == [[1.0]]

    def test_two_nodes_one_edge(self):
        adj = build_normalized_adjacency(chain_graph(2))
        assert np.allclose(adj.values, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_three_node_path(self):
        adj = build_normalized_adjacency(chain_graph(3))
        expected = np.array(
            [
                [0.5, 1 / np.sqrt(6), 0.0],
                [1 / np.sqrt(6), 1 / 3, 1 / np.sqrt(6)],
                [0.0, 1 / np.sqrt(6), 0.5],
            ]
        )
        assert np.allclose(adj.values, expected, atol=1e-12)
        assert adj.values[0, 2] == 0.0

    def test_matches_brute_force_on_random_topologies(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            n = int(rng.integers(1, 7))
            edges = []
            for _ in range(int(rng.integers(0, 10))):
                edges.append((int(rng.integers(n)), int(rng.integers(n))))
            ids = [f"n{i}" for i in range(n)]
            g = Fcg(
                "g", None, ids[0], tuple(FunctionNode(i) for i in ids),
                tuple((ids[a], ids[b]) for a, b in edges if a != b),
            )
            mine = build_normalized_adjacency(g).values
            oracle = brute_force_normalized_adjacency(n, [(a, b) for a, b in edges if a != b])
            assert np.abs(mine - oracle).max() < 1e-12

    def test_symmetric_and_positive_diagonal(self):
        adj = build_normalized_adjacency(chain_graph(5, [("n0", "n3")]))
        assert np.allclose(adj.values, adj.values.T)
        assert (np.diag(adj.values) > 0).all()


def tiny_identity_model():
    return ModelParams(
        w_gcn1=np.ones((1, 1)),
        w_gcn2=np.ones((1, 1)),
        w_hidden=np.ones((1, 1)),
        b_hidden=np.zeros(1),
        w_out=np.ones(1),
        b_out=np.zeros(1),
    )


class TestForward:
    def test_zero_output_head_gives_half(self, rng):
        m = random_params(rng, d=3, h1=4, h2=3, hg=2)
        m.w_out[:] = 0.0
        m.b_out[:] = 0.0
        adj = build_normalized_adjacency(chain_graph(2))
        p, _ = forward(m, adj, np.ones((2, 3)))
        assert p == 0.5

    def test_hand_evaluated_composition(self):
        adj = NormalizedAdjacency(1, np.array([[1.0]]))
        p, _ = forward(tiny_identity_model(), adj, np.array([[2.0]]))
        assert p == pytest.approx(0.8807970779778823, abs=1e-15)

    def test_doubling_features_never_lowers_nonneg_score(self, rng):
        for _ in range(20):
            m = random_params(rng, d=5, h1=4, h2=3, hg=3, nonneg=True)
            g = chain_graph(4, [("n0", "n2")])
            adj = build_normalized_adjacency(g)
            x = rng.integers(0, 4, size=(4, 5)).astype(float)
            for readout in ("avg", "sum", "max"):
                p1, _ = forward(m, adj, x, readout)
                p2, _ = forward(m, adj, 2 * x, readout)
                assert p2 >= p1

    def test_dimension_mismatch_rejected(self, rng):
        m = random_params(rng, d=3, h1=2, h2=2, hg=2)
        adj = build_normalized_adjacency(chain_graph(2))
        with pytest.raises(ValueError):
            forward(m, adj, np.ones((2, 5)))
        with pytest.raises(ValueError):
            forward(m, adj, np.ones((3, 3)))

    def test_unknown_readout_rejected(self, rng):
        m = random_params(rng, d=2, h1=2, h2=2, hg=2)
        adj = build_normalized_adjacency(chain_graph(2))
        with pytest.raises(ValueError):
            forward(m, adj, np.ones((2, 2)), "median")

    def test_permutation_invariance(self, rng):
        for readout in ("avg", "sum", "max"):
            m = random_params(rng, d=4, h1=3, h2=3, hg=2)
            g = chain_graph(5, [("n4", "n1")])
            adj = build_normalized_adjacency(g)
            x = rng.normal(size=(5, 4)) ** 2
            p, _ = forward(m, adj, x, readout)
            perm = rng.permutation(5)
            adj_p = NormalizedAdjacency(5, adj.values[np.ix_(perm, perm)])
            p2, _ = forward(m, adj_p, x[perm], readout)
            assert p2 == pytest.approx(p, abs=1e-9)


class TestGradients:
    @pytest.mark.parametrize("readout", ["avg", "sum", "max"])
    def test_parameter_gradients_match_finite_differences(self, readout):
        for seed in range(4):
            m, adj, x, y = make_safe_instance(1000 + seed, readout)
            batch = [(adj, x, y)]
            _, analytic = loss_and_gradients(m, batch, readout)
            numeric = fd_param_grads(m, batch, readout)
            for name in analytic:
                err = rel_err(analytic[name], numeric[name])
                assert err.max() < 1e-4, f"{name} mismatch at {readout}: {err.max()}"

    def test_multi_sample_batch_gradients_match_finite_differences(self):
        m, adj1, x1, y1 = make_safe_instance(77, "avg")
        _, adj2, x2, y2 = make_safe_instance(78, "avg")
        if x2.shape[1] != x1.shape[1]:
            x2 = np.resize(x2, (x2.shape[0], x1.shape[1]))
        batch = [(adj1, x1, y1), (adj2, x2, y2)]
        _, analytic = loss_and_gradients(m, batch, "avg")
        numeric = fd_param_grads(m, batch, "avg")
        for name in analytic:
            assert rel_err(analytic[name], numeric[name]).max() < 1e-4

    def test_batch_grads_equal_mean_of_single_sample_grads(self, rng):
        m = random_params(rng, d=4, h1=3, h2=3, hg=2)
        samples = []
        for i in range(3):
            g = chain_graph(int(rng.integers(1, 5)))
            adj = build_normalized_adjacency(g)
            x = rng.integers(0, 4, size=(adj.n, 4)).astype(float)
            samples.append((adj, x, int(rng.integers(2))))
        _, batched = loss_and_gradients(m, samples, "avg")
        singles = [loss_and_gradients(m, [s], "avg")[1] for s in samples]
        for name in batched:
            mean = sum(s[name] for s in singles) / len(singles)
            assert np.allclose(batched[name], mean, atol=1e-12)

    def test_perfect_fit_has_tiny_loss_and_gradients(self, rng):
        m = random_params(rng, d=2, h1=2, h2=2, hg=2)
        m.w_out[:] = 0.0
        m.b_out[:] = 40.0  # p saturates at ~1
        adj = build_normalized_adjacency(chain_graph(2))
        x = np.ones((2, 2))
        loss, grads = loss_and_gradients(m, [(adj, x, 1)], "avg")
        assert loss < 1e-6
        for g in grads.values():
            assert np.abs(g).max() < 1e-6

    def test_half_probability_cross_entropy_is_ln2(self, rng):
        m = random_params(rng, d=2, h1=2, h2=2, hg=2)
        m.w_out[:] = 0.0
        m.b_out[:] = 0.0
        adj = build_normalized_adjacency(chain_graph(2))
        loss, _ = loss_and_gradients(m, [(adj, np.ones((2, 2)), 1)], "avg")
        assert loss == pytest.approx(np.log(2.0), abs=1e-15)


class TestInputGradient:
    def test_matches_finite_differences(self):
        for seed in (5, 6):
            m, adj, x, _ = make_safe_instance(seed, "avg")
            analytic = input_gradient(m, adj, x, "avg")
            step = 1e-4
            numeric = np.zeros_like(x)
            for i in range(x.shape[0]):
                for j in range(x.shape[1]):
                    xp = x.copy()
                    xp[i, j] += step
                    up, _ = forward(m, adj, xp, "avg")
                    xp[i, j] -= 2 * step
                    down, _ = forward(m, adj, xp, "avg")
                    numeric[i, j] = (up - down) / (2 * step)
            assert rel_err(analytic, numeric).max() < 1e-4

    def test_nonneg_model_has_nonneg_input_gradient(self, rng):
        for readout in ("avg", "sum", "max"):
            m = random_params(rng, d=5, h1=4, h2=3, hg=3, nonneg=True)
            adj = build_normalized_adjacency(chain_graph(4))
            x = rng.integers(0, 4, size=(4, 5)).astype(float)
            grad = input_gradient(m, adj, x, readout)
            assert grad.min() >= 0.0

    def test_zero_output_head_gives_zero_gradient(self, rng):
        m = random_params(rng, d=3, h1=2, h2=2, hg=2)
        m.w_out[:] = 0.0
        adj = build_normalized_adjacency(chain_graph(3))
        grad = input_gradient(m, adj, np.ones((3, 3)))
        assert np.abs(grad).max() == 0.0


class TestProjection:
    def test_clips_governed_matrices(self):
        m = tiny_identity_model()
        m.w_gcn1 = np.array([[-0.3, 0.2]])
        m.w_gcn2 = np.ones((2, 1))
        m.nonneg_gcn = True
        projected = project_nonnegative(m)
        assert projected.w_gcn1.tolist() == [[0.0, 0.2]]

    def test_identity_when_flags_off(self, rng):
        m = random_params(rng, d=3, h1=2, h2=2, hg=2)
        projected = project_nonnegative(m)
        for name, w in m.weights().items():
            assert np.array_equal(getattr(projected, name), w)

    def test_gclf_only_leaves_gcn_weights_alone(self, rng):
        m = random_params(rng, d=3, h1=2, h2=2, hg=2)
        m.nonneg_gclf = True
        projected = project_nonnegative(m)
        assert np.array_equal(projected.w_gcn1, m.w_gcn1)
        assert projected.w_hidden.min() >= 0.0
        assert projected.w_out.min() >= 0.0

    def test_biases_never_projected(self, rng):
        m = random_params(rng, d=3, h1=2, h2=2, hg=2)
        m.nonneg_gcn = True
        m.nonneg_gclf = True
        m.b_hidden[:] = -1.5
        m.b_out[:] = -2.0
        projected = project_nonnegative(m)
        assert projected.b_hidden.tolist() == [-1.5, -1.5]
        assert projected.b_out.tolist() == [-2.0]

    @given(st.integers(0, 2**32 - 1))
    def test_idempotent_and_entrywise_sound(self, seed):
        rng = np.random.default_rng(seed)
        m = random_params(rng, d=2, h1=2, h2=2, hg=2)
        m.nonneg_gcn = bool(rng.integers(2))
        m.nonneg_gclf = bool(rng.integers(2))
        once = project_nonnegative(m)
        twice = project_nonnegative(once)
        for name in m.weights():
            w0, w1, w2 = getattr(m, name), getattr(once, name), getattr(twice, name)
            assert np.array_equal(w1, w2)  # idempotent
            assert (w1 >= w0).all()  # clipping only moves entries up to zero
            assert (np.abs(w1) <= np.abs(w0)).all()  # and never grows magnitudes


class TestModelIO:
    @pytest.fixture()
    def vocab(self):
        return Vocabulary(("toka", "tokb"), ("long string",), (2.0, 1.0), (1.0,), 2, 1)

    def test_round_trip_is_lossless(self, tmp_path, rng, vocab):
        m = random_params(rng, d=3, h1=4, h2=3, hg=2)
        m.nonneg_gcn = True
        path = tmp_path / "model.txt"
        save_model(m, path, vocab)
        back = load_model(path, vocab)
        assert back.nonneg_gcn and not back.nonneg_gclf
        for name, w in m.weights().items():
            assert np.array_equal(getattr(back, name), w), name

    def test_wrong_vocabulary_rejected(self, tmp_path, rng, vocab):
        m = random_params(rng, d=3, h1=2, h2=2, hg=2)
        path = tmp_path / "model.txt"
        save_model(m, path, vocab)
        other = Vocabulary(("different",), ("long string",), (1.0,), (1.0,), 1, 1)
        with pytest.raises(ModelIOError, match="hash mismatch"):
            load_model(path, other)

    def test_truncated_file_rejected(self, tmp_path, rng, vocab):
        m = random_params(rng, d=3, h1=2, h2=2, hg=2)
        path = tmp_path / "model.txt"
        save_model(m, path, vocab)
        lines = path.read_text(encoding="utf-8").splitlines()
        path.write_text("\n".join(lines[: len(lines) // 2]) + "\n", encoding="utf-8")
        with pytest.raises(ModelIOError, match="truncated"):
            load_model(path, vocab)

    def test_bad_header_rejected(self, tmp_path, vocab):
        path = tmp_path / "model.txt"
        path.write_text("#some-other-format v9\n", encoding="utf-8")
        with pytest.raises(ModelIOError, match="header"):
            load_model(path, vocab)

    def test_corrupt_value_rejected(self, tmp_path, rng, vocab):
        m = random_params(rng, d=3, h1=2, h2=2, hg=2)
        path = tmp_path / "model.txt"
        save_model(m, path, vocab)
        text = path.read_text(encoding="utf-8").splitlines()
        text[5] = "not a number " + " ".join(text[5].split()[1:])
        path.write_text("\n".join(text) + "\n", encoding="utf-8")
        with pytest.raises(ModelIOError):
            load_model(path, vocab)
