import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _util import hop_distance, path_arcs, random_arcs, random_static
from patchmgn.surrogate import (
    CheckpointError,
    Graph,
    NonFiniteInputError,
    SurrogateConfig,
    backward,
    flatten,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)


def small_params(m, latent=4, seed=0, **kw):
    cfg = SurrogateConfig(dim=2, mp_steps=m, latent_dim=latent, dtype="float64", decoder_output_gain=1.0, **kw)
    return init_params(seed, cfg)


def inputs(rng, n, senders, receivers):
    pos = rng.normal(size=(n, 2))
    fields = rng.normal(size=(n, 3))
    nodes = np.concatenate([fields, random_static(rng, n)], axis=1)
    d = pos[receivers] - pos[senders]
    edges = np.concatenate([d, np.linalg.norm(d, axis=1, keepdims=True)], axis=1)
    return nodes, edges


def test_m0_output_depends_only_on_own_node():
    rng = np.random.default_rng(0)
    s, r = path_arcs(6)
    g = Graph(6, s, r)
    p = small_params(0)
    nodes, edges = inputs(rng, 6, s, r)
    base = forward(p, g, nodes, edges)
    nodes2 = nodes.copy()
    nodes2[[0, 1, 3, 4, 5], :3] += 1.0
    out = forward(p, g, nodes2, edges)
    assert out[2].tobytes() == base[2].tobytes()


def test_m2_on_path_reaches_exactly_two_hops():
    rng = np.random.default_rng(1)
    s, r = path_arcs(7)
    g = Graph(7, s, r)
    p = small_params(2)
    nodes, edges = inputs(rng, 7, s, r)
    base = forward(p, g, nodes, edges)
    far = nodes.copy()
    far[3, :3] += 1.0
    assert forward(p, g, far, edges)[0].tobytes() == base[0].tobytes()
    near = nodes.copy()
    near[2, :3] += 1.0
    assert not np.array_equal(forward(p, g, near, edges)[0], base[0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40), m=st.integers(0, 4))
def test_locality_on_random_graphs(seed, n, m):
    rng = np.random.default_rng(seed)
    s, r = random_arcs(rng, n, 0.12)
    g = Graph(n, s, r)
    p = small_params(m, seed=seed % 1000)
    nodes, edges = inputs(rng, n, s, r)
    base = forward(p, g, nodes, edges)
    src = int(rng.integers(n))
    moved = nodes.copy()
    moved[src, :3] += rng.normal(size=3)
    out = forward(p, g, moved, edges)
    dist = hop_distance(n, s, r, [src])
    outside = (dist < 0) | (dist > m)
    assert out[outside].tobytes() == base[outside].tobytes()


def test_isomorphic_components_give_identical_outputs():
    rng = np.random.default_rng(2)
    s, r = random_arcs(rng, 10, 0.3)
    nodes, edges = inputs(rng, 10, s, r)
    g2 = Graph(20, np.r_[s, s + 10], np.r_[r, r + 10])
    out = forward(small_params(3), g2, np.vstack([nodes, nodes]), np.vstack([edges, edges]))
    assert out[:10].tobytes() == out[10:].tobytes()


def test_relabelling_permutes_outputs():
    rng = np.random.default_rng(3)
    n = 25
    s, r = random_arcs(rng, n, 0.2)
    nodes, edges = inputs(rng, n, s, r)
    p = small_params(3)
    base = forward(p, Graph(n, s, r), nodes, edges)
    perm = rng.permutation(n)  # old id -> new id
    inv = np.argsort(perm)
    out = forward(p, Graph(n, perm[s], perm[r]), nodes[inv], edges)
    assert out[perm].tobytes() == base.tobytes()


def test_rejects_non_finite_input():
    rng = np.random.default_rng(0)
    s, r = path_arcs(4)
    nodes, edges = inputs(rng, 4, s, r)
    nodes[1, 0] = np.nan
    with pytest.raises(NonFiniteInputError):
        forward(small_params(1), Graph(4, s, r), nodes, edges)
    nodes[1, 0] = 0.0
    edges[0, 0] = np.inf
    with pytest.raises(NonFiniteInputError):
        forward(small_params(1), Graph(4, s, r), nodes, edges)


def fd_relative_error(p, g, nodes, edges, upstream, eps=1e-6):
    grads = backward(p, g, nodes, edges, upstream)
    worst, scale = 0.0, 0.0
    for name, w in p.weights.items():
        an = grads[name]
        scale = max(scale, np.abs(an).max())
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + eps
            plus = np.sum(forward(p, g, nodes, edges) * upstream)
            w[idx] = orig - eps
            minus = np.sum(forward(p, g, nodes, edges) * upstream)
            w[idx] = orig
            worst = max(worst, abs((plus - minus) / (2 * eps) - an[idx]))
    return worst / scale


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    s, r = path_arcs(5)
    g = Graph(5, s, r)
    p = small_params(1, latent=3, seed=seed)
    assert p.n_weights() <= 500
    nodes, edges = inputs(rng, 5, s, r)
    upstream = rng.normal(size=(5, 3))
    assert fd_relative_error(p, g, nodes, edges, upstream) <= 1e-6


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(4)
    s, r = path_arcs(5)
    nodes, edges = inputs(rng, 5, s, r)
    grads = backward(small_params(2), Graph(5, s, r), nodes, edges, np.zeros((5, 3)))
    assert not np.any(flatten(grads))


def test_masked_loss_gradient_is_sum_of_per_node_gradients():
    rng = np.random.default_rng(5)
    s, r = random_arcs(rng, 12, 0.3)
    g = Graph(12, s, r)
    p = small_params(2)
    nodes, edges = inputs(rng, 12, s, r)
    u = rng.normal(size=(12, 3))
    S = [1, 4, 7, 8]
    mask = np.zeros((12, 1))
    mask[S] = 1
    total = flatten(backward(p, g, nodes, edges, u * mask))
    parts = np.zeros_like(total)
    for v in S:
        one = np.zeros((12, 1))
        one[v] = 1
        parts += flatten(backward(p, g, nodes, edges, u * one))
    np.testing.assert_allclose(total, parts, rtol=1e-12, atol=1e-12 * np.abs(total).max())


def test_repeated_runs_are_bit_identical():
    rng = np.random.default_rng(6)
    s, r = random_arcs(rng, 30, 0.15)
    g = Graph(30, s, r)
    p = small_params(3)
    nodes, edges = inputs(rng, 30, s, r)
    u = rng.normal(size=(30, 3))
    assert forward(p, g, nodes, edges).tobytes() == forward(p, g, nodes, edges).tobytes()
    assert flatten(backward(p, g, nodes, edges, u)).tobytes() == flatten(backward(p, g, nodes, edges, u)).tobytes()


def test_init_is_deterministic_per_seed():
    a, b, c = small_params(2, seed=1), small_params(2, seed=1), small_params(2, seed=2)
    assert flatten(a.weights).tobytes() == flatten(b.weights).tobytes()
    assert flatten(a.weights).tobytes() != flatten(c.weights).tobytes()
    # layer norms start as identity
    assert np.all(a.weights["enc_node.ln.g"] == 1) and np.all(a.weights["enc_node.ln.b"] == 0)


def test_checkpoint_round_trip(tmp_path):
    from patchmgn.normalizer import update_normalizer

    p = small_params(2, seed=3)
    p = p.replace(node_norm=update_normalizer(p.node_norm, np.random.default_rng(0).normal(size=(50, 11))))
    rng = np.random.default_rng(9)
    rng.random(3)
    save_checkpoint(tmp_path / "c.npz", p, arrays={"extra": np.arange(3.0)}, meta={"step": 7},
                    rng_state=rng.bit_generator.state)
    q, arrays, meta, state = load_checkpoint(tmp_path / "c.npz")
    assert q.config == p.config
    for k in p.weights:
        assert q.weights[k].dtype == p.weights[k].dtype
        assert q.weights[k].tobytes() == p.weights[k].tobytes()
    for which in ("node_norm", "edge_norm", "target_norm"):
        a, b = getattr(p, which), getattr(q, which)
        assert a.count == b.count and a.updates == b.updates and a.freeze_after == b.freeze_after
        assert a.mean.tobytes() == b.mean.tobytes() and a.m2.tobytes() == b.m2.tobytes()
    assert arrays["extra"].tolist() == [0.0, 1.0, 2.0] and meta == {"step": 7}
    r2 = np.random.default_rng()
    r2.bit_generator.state = state
    assert r2.random() == rng.random()


def test_checkpoint_rejects_other_files(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.npz")


def test_float32_default_runs():
    rng = np.random.default_rng(0)
    s, r = path_arcs(5)
    nodes, edges = inputs(rng, 5, s, r)
    cfg = SurrogateConfig(dim=2, mp_steps=2, latent_dim=8)
    out = forward(init_params(0, cfg), Graph(5, s, r), nodes, edges)
    assert out.dtype == np.float32 and out.shape == (5, 3)
