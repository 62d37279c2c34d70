import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mal2gcn.fcg import Fcg, FunctionNode
from mal2gcn.synth import SynthConfig, generate_corpus

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=60
)
settings.load_profile("default")

tokens = st.text(max_size=40)


@st.composite
def fcgs(draw, max_nodes=6, require_label=False, max_tokens=4):
    """Structurally valid graphs (possibly with isolated nodes and self/dup edges)."""
    n = draw(st.integers(min_value=1, max_value=max_nodes))
    ids = [f"n{i}" for i in range(n)]
    nodes = []
    for i in range(n):
        apis = draw(st.lists(tokens, max_size=max_tokens))
        strings = draw(st.lists(tokens, max_size=max_tokens))
        nodes.append(FunctionNode(ids[i], tuple(apis), tuple(strings)))
    n_edges = draw(st.integers(min_value=0, max_value=2 * n))
    edges = []
    for _ in range(n_edges):
        a = ids[draw(st.integers(0, n - 1))]
        b = ids[draw(st.integers(0, n - 1))]
        edges.append((a, b))
    labels = ["malware", "benign"] if require_label else ["malware", "benign", None]
    label = draw(st.sampled_from(labels))
    return Fcg("g0", label, ids[0], tuple(nodes), tuple(edges))


@pytest.fixture(scope="session")
def small_corpus():
    """A quick separable corpus shared by training/attack tests."""
    cfg = SynthConfig(
        n_benign=60,
        n_malware=60,
        node_count_min=4,
        node_count_max=25,
        n_benign_apis=60,
        n_benign_strings=60,
        n_malicious_apis=60,
        n_malicious_strings=60,
        n_shared_apis=40,
        n_shared_strings=40,
        seed=11,
    )
    return generate_corpus(cfg)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


def random_params(rng, d, h1, h2, hg, nonneg=False, scale=1.0):
    """Random dense model; optionally projected to the non-negative orthant."""
    from mal2gcn.gcn import ModelParams, project_nonnegative

    params = ModelParams(
        w_gcn1=scale * rng.normal(size=(d, h1)),
        w_gcn2=scale * rng.normal(size=(h1, h2)),
        w_hidden=scale * rng.normal(size=(h2, hg)),
        b_hidden=scale * rng.normal(size=hg),
        w_out=scale * rng.normal(size=hg),
        b_out=scale * rng.normal(size=1),
        nonneg_gcn=nonneg,
        nonneg_gclf=nonneg,
    )
    return project_nonnegative(params) if nonneg else params


def hostile_model(d):
    """Claims non-negative flags but scores strictly decreasing in every feature.

    The small first-layer scale keeps scores in the sigmoid's sensitive range
    so the decrease is well above audit tolerance.
    """
    from mal2gcn.gcn import ModelParams

    return ModelParams(
        w_gcn1=np.full((d, 1), 0.01),
        w_gcn2=np.ones((1, 1)),
        w_hidden=np.ones((1, 1)),
        b_hidden=np.zeros(1),
        w_out=-np.ones(1),
        b_out=np.zeros(1),
        nonneg_gcn=True,
        nonneg_gclf=True,
    )


def brute_force_normalized_adjacency(n, undirected_edges):
    """Independent adjacency oracle: explicit A, self-loops, D, dense products."""
    a = np.zeros((n, n))
    for i, j in undirected_edges:
        if i != j:
            a[i, j] = 1.0
            a[j, i] = 1.0
    a_tilde = a + np.eye(n)
    d_tilde = np.diag(a_tilde.sum(axis=1))
    d_inv_sqrt = np.diag(1.0 / np.sqrt(np.diag(d_tilde)))
    return d_inv_sqrt @ a_tilde @ d_inv_sqrt


def fd_param_grads(m, batch, readout, step=1e-4):
    """Central finite differences of the batch loss for every parameter entry."""
    from mal2gcn.gcn import loss_and_gradients

    grads = {}
    for name, w in m.weights().items():
        g = np.zeros_like(w)
        flat = w.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up, _ = loss_and_gradients(m, batch, readout)
            flat[k] = orig - step
            down, _ = loss_and_gradients(m, batch, readout)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def make_safe_instance(seed, readout):
    """Random small instance with activations away from relu kinks and argmax ties."""
    from mal2gcn.gcn import build_normalized_adjacency, forward

    rng = np.random.default_rng(seed)
    for attempt in range(60):
        n = int(rng.integers(1, 6))
        d = int(rng.integers(1, 7))
        h1, h2, hg = (int(rng.integers(1, 5)) for _ in range(3))
        m = random_params(rng, d, h1, h2, hg, scale=0.8)
        ids = [f"n{i}" for i in range(n)]
        edges = []
        for _ in range(int(rng.integers(0, n + 2))):
            a, b = int(rng.integers(n)), int(rng.integers(n))
            if a != b:
                edges.append((ids[a], ids[b]))
        g = Fcg("g", None, ids[0], tuple(FunctionNode(i) for i in ids), tuple(edges))
        adj = build_normalized_adjacency(g)
        x = rng.integers(0, 5, size=(n, d)).astype(float)
        y = int(rng.integers(2))
        _, cache = forward(m, adj, x, readout)
        margin = min(
            np.abs(cache.z1).min(initial=1.0),
            np.abs(cache.z2).min(initial=1.0),
            np.abs(cache.z3).min(initial=1.0),
        )
        tie_gap = 1.0
        if readout == "max" and n > 1:
            top2 = np.sort(cache.h2, axis=0)[-2:]
            tie_gap = float((top2[1] - top2[0]).min(initial=1.0))
        if margin > 1e-2 and tie_gap > 1e-2 and 1e-5 < cache.p[0] < 1 - 1e-5:
            return m, adj, x, y
    raise AssertionError("could not build a kink-free instance")
