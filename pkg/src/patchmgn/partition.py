"""Uniform spatial decomposition, k-hop ghost zones and patch construction."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh
from .surrogate import Graph


class PlanCoverageError(ValueError):
    pass


class EmptySubdomainError(ValueError):
    """Raised for an empty subdomain; callers treat it as "skip this cell"."""


@dataclass(frozen=True)
class PartitionPlan:
    counts: tuple
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 1 for c in counts):
            raise ValueError(f"cell counts must be >= 1, got {counts}")
        if len(counts) != len(self.lo) or len(counts) != len(self.hi):
            raise ValueError("counts and bounding box disagree in dimension")
        if np.any(np.asarray(self.hi) < np.asarray(self.lo)):
            raise ValueError("empty bounding box")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def for_mesh(cls, mesh: Mesh, counts) -> "PartitionPlan":
        lo, hi = mesh.bounding_box()
        counts = tuple(counts)
        if len(counts) != mesh.dim:
            raise ValueError(f"plan has {len(counts)} axes, mesh has {mesh.dim}")
        return cls(counts, np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64))

    @property
    def n_subdomains(self) -> int:
        return int(np.prod(self.counts))

    def edges(self, axis: int) -> np.ndarray:
        return np.linspace(self.lo[axis], self.hi[axis], self.counts[axis] + 1)


def parse_counts(text: str) -> tuple:
    """``"3x4"`` -> ``(3, 4)``."""
    try:
        return tuple(int(p) for p in text.lower().replace("×", "x").split("x"))
    except ValueError:
        raise ValueError(f"bad plan {text!r}; expected e.g. 3x4") from None


def assign_subdomains(mesh: Mesh, plan: PartitionPlan) -> np.ndarray:
    """Per-node cell id.  A node on a shared cell face goes to the lower-index cell."""
    pos = mesh.positions.astype(np.float64)
    if np.any(pos < plan.lo) or np.any(pos > plan.hi):
        raise PlanCoverageError("plan bounding box does not cover every node")
    cells = []
    for axis in range(mesh.dim):
        interior = plan.edges(axis)[1:-1]
        cells.append(np.searchsorted(interior, pos[:, axis], side="left"))
    return np.ravel_multi_index(cells, plan.counts).astype(np.int64)


def subdomain_members(assignment: np.ndarray, n_subdomains: int) -> list:
    order = np.argsort(assignment, kind="stable")
    bounds = np.searchsorted(assignment[order], np.arange(n_subdomains + 1))
    return [order[bounds[i] : bounds[i + 1]] for i in range(n_subdomains)]


def adjacency(graph) -> sp.csr_matrix:
    """Symmetric boolean node adjacency of a graph or mesh."""
    n = graph.n_nodes
    s, r = np.asarray(graph.senders), np.asarray(graph.receivers)
    a = sp.csr_matrix((np.ones(len(s), dtype=bool), (s, r)), shape=(n, n))
    return (a + a.T).tocsr()


def khop_ghost(graph, nodes, k: int, adj: sp.csr_matrix | None = None) -> np.ndarray:
    """Nodes within ``k`` hops of ``nodes`` but not in it, sorted."""
    if k < 0:
        raise ValueError("k must be >= 0")
    adj = adjacency(graph) if adj is None else adj
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    seen = np.zeros(graph.n_nodes, dtype=bool)
    seen[nodes] = True
    frontier = nodes
    for _ in range(k):
        if frontier.size == 0:
            break
        nbrs = np.unique(adj[frontier].indices)
        frontier = nbrs[~seen[nbrs]]
        seen[frontier] = True
    seen[nodes] = False
    return np.flatnonzero(seen)


@dataclass(eq=False)
class Patch:
    subdomain_id: int
    subdomain: np.ndarray
    ghosts: np.ndarray
    k: int
    nodes: np.ndarray  # local -> global
    global_to_local: np.ndarray  # -1 outside the patch
    arc_ids: np.ndarray
    graph: Graph
    owner: np.ndarray  # owning subdomain of each ghost

    @property
    def n_subdomain(self) -> int:
        return len(self.subdomain)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def static_features(self, mesh: Mesh) -> np.ndarray:
        return mesh.static_features[self.nodes]

    def edge_features(self, mesh: Mesh) -> np.ndarray:
        return mesh.edge_features[self.arc_ids]


def build_patch(mesh: Mesh, subdomain_nodes, k: int, *, assignment=None, subdomain_id=-1, adj=None) -> Patch:
    sub = np.unique(np.asarray(subdomain_nodes, dtype=np.int64))
    if sub.size == 0:
        raise EmptySubdomainError("empty subdomain")
    ghosts = khop_ghost(mesh, sub, k, adj)
    nodes = np.concatenate([sub, ghosts])
    g2l = np.full(mesh.n_nodes, -1, dtype=np.int64)
    g2l[nodes] = np.arange(len(nodes))
    inside = g2l >= 0
    arc_ids = np.flatnonzero(inside[mesh.senders] & inside[mesh.receivers])
    graph = Graph(len(nodes), g2l[mesh.senders[arc_ids]], g2l[mesh.receivers[arc_ids]])
    owner = assignment[ghosts] if assignment is not None else np.full(len(ghosts), -1, dtype=np.int64)
    return Patch(int(subdomain_id), sub, ghosts, int(k), nodes, g2l, arc_ids, graph, owner)


def build_patches(mesh: Mesh, plan: PartitionPlan, k: int) -> list:
    """Patches of every non-empty cell, in cell-id order."""
    assignment = assign_subdomains(mesh, plan)
    adj = adjacency(mesh)
    patches = []
    for sid, members in enumerate(subdomain_members(assignment, plan.n_subdomains)):
        if members.size:
            patches.append(build_patch(mesh, members, k, assignment=assignment, subdomain_id=sid, adj=adj))
    return patches


@dataclass(frozen=True)
class PatchSample:
    trajectory: int
    t: int
    patch: Patch


class PatchSampler:
    """Uniform draws over (trajectory, frame, non-empty cell) triples."""

    def __init__(self, trajectories, plan_counts, k: int):
        self.trajectories = list(trajectories)
        self.k = k
        self._patches = {}
        sizes = []
        for traj in self.trajectories:
            key = id(traj.mesh)
            if key not in self._patches:
                plan = PartitionPlan.for_mesh(traj.mesh, plan_counts)
                self._patches[key] = build_patches(traj.mesh, plan, k)
            sizes.append((traj.n_frames - 1) * len(self._patches[key]))
        self._cum = np.cumsum(sizes)

    def patches(self, traj_index: int) -> list:
        return self._patches[id(self.trajectories[traj_index].mesh)]

    def sample(self, rng, count: int) -> list:
        out = []
        for flat in rng.integers(0, self._cum[-1], size=count):
            i = int(np.searchsorted(self._cum, flat, side="right"))
            local = int(flat - (self._cum[i - 1] if i else 0))
            patches = self.patches(i)
            t, p = divmod(local, len(patches))
            out.append(PatchSample(i, t, patches[p]))
        return out


def sample_patches(rng, dataset, plan_counts, k: int, count: int) -> list:
    return PatchSampler(dataset, plan_counts, k).sample(rng, count)


def measure_patch_growth(mesh: Mesh, plan: PartitionPlan, k_range) -> list:
    """Rows of ``(k, mean_nodes, max_nodes)`` over non-empty cells."""
    assignment = assign_subdomains(mesh, plan)
    members = [m for m in subdomain_members(assignment, plan.n_subdomains) if m.size]
    adj = adjacency(mesh)
    rows = []
    for k in k_range:
        sizes = np.array([len(m) + len(khop_ghost(mesh, m, k, adj)) for m in members])
        rows.append((int(k), float(sizes.mean()), int(sizes.max())))
    return rows


def write_growth_csv(rows, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "mean_nodes", "max_nodes"])
        for k, mean, mx in rows:
            w.writerow([k, repr(mean), mx])
