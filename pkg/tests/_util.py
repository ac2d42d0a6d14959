"""Shared builders for the test suite."""
import numpy as np

from patchmgn.mesh import N_NODE_TYPES
from patchmgn.normalizer import update_normalizer
from patchmgn.surrogate import Graph, SurrogateConfig, init_params


def fit_normalizers(params, traj):
    """Statistics of one trajectory, frozen."""
    f = traj.fields
    nodes = np.concatenate(
        [f[:-1].reshape(-1, f.shape[2]), np.tile(traj.mesh.static_features, (traj.n_frames - 1, 1))], axis=1
    )
    return params.replace(
        node_norm=update_normalizer(params.node_norm, nodes).freeze(),
        edge_norm=update_normalizer(params.edge_norm, traj.mesh.edge_features).freeze(),
        target_norm=update_normalizer(params.target_norm, (f[1:] - f[:-1]).reshape(-1, f.shape[2])).freeze(),
    )


def model(traj, m, latent=8, seed=0, dtype="float64", **kw):
    cfg = SurrogateConfig(dim=traj.mesh.dim, mp_steps=m, latent_dim=latent, dtype=dtype, **kw)
    return fit_normalizers(init_params(seed, cfg), traj)


def path_arcs(n):
    s = np.r_[np.arange(n - 1), np.arange(1, n)]
    r = np.r_[np.arange(1, n), np.arange(n - 1)]
    return s, r


def path_graph(n):
    return Graph(n, *path_arcs(n))


def random_arcs(rng, n, p):
    """Symmetric Erdos-Renyi arcs, sorted by (sender, receiver)."""
    upper = np.triu(rng.random((n, n)) < p, 1)
    a = upper | upper.T
    s, r = np.nonzero(a)
    return s, r


def random_static(rng, n):
    static = np.zeros((n, 1 + N_NODE_TYPES))
    static[:, 0] = rng.choice([-1.0, 33.5, 180.0], size=n)
    static[np.arange(n), 1 + rng.integers(0, N_NODE_TYPES, n)] = 1.0
    return static


class GraphView:
    """Minimal object with the attributes partition helpers read."""

    def __init__(self, n, senders, receivers):
        self.n_nodes = n
        self.senders = np.asarray(senders)
        self.receivers = np.asarray(receivers)


def hop_distance(n, senders, receivers, sources):
    """Dense BFS distances from a node set (oracle; -1 when unreachable)."""
    adj = [[] for _ in range(n)]
    for s, r in zip(senders, receivers):
        adj[s].append(r)
        adj[r].append(s)
    dist = np.full(n, -1)
    frontier = list(sources)
    for v in frontier:
        dist[v] = 0
    d = 0
    while frontier:
        d += 1
        nxt = []
        for v in frontier:
            for u in adj[v]:
                if dist[u] < 0:
                    dist[u] = d
                    nxt.append(u)
        frontier = nxt
    return dist
