"""Autoregressive inference on the full mesh or on patches with ghost refresh."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .integrators import StageNonFiniteError, step
from .mesh import NodeType, Trajectory
from .partition import PartitionPlan, build_patches
from .surrogate import NonFiniteInputError, SurrogateNet, SurrogateParams
from .trainer import full_patch

DEFAULT_BC_TYPES = (NodeType.LIQUID_INLET, NodeType.GAS_INLET)


class RolloutConfigError(ValueError):
    pass


@dataclass
class RolloutResult:
    frames: np.ndarray  # (T, n, C) predicted states after each step
    rmse: np.ndarray  # (T, C); NaN where no ground truth exists
    divergence_step: int | None
    truncated: bool = False

    @property
    def n_steps(self) -> int:
        return len(self.frames)


def score_rollout(predicted, truth) -> dict:
    """Per-step, per-channel RMSE and the mean squared error over the whole rollout."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    sq = (predicted - truth) ** 2
    return {"rmse": np.sqrt(sq.mean(axis=1)), "mse": float(sq.mean())}


def write_rollout_csv(result: RolloutResult, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"rmse_{c}" for c in range(result.rmse.shape[1])])
        for t, row in enumerate(result.rmse, start=1):
            w.writerow([t] + [repr(float(v)) for v in row])


def _bc_mask(traj: Trajectory, bc_types) -> np.ndarray:
    if not bc_types:
        return np.zeros(traj.mesh.n_nodes, dtype=bool)
    return np.isin(traj.mesh.node_type, [int(t) for t in bc_types])


def _check_steps(T):
    if T < 1:
        raise ValueError("T must be >= 1")


def _finish(frames, traj, threshold_factor, truncated):
    C = traj.fields.shape[2]
    frames = np.asarray(frames) if frames else np.empty((0, traj.mesh.n_nodes, C))
    rmse = np.full((len(frames), C), np.nan)
    avail = min(len(frames), traj.n_frames - 1)
    if avail:
        rmse[:avail] = score_rollout(frames[:avail], traj.fields[1 : avail + 1])["rmse"]
    limit = threshold_factor * traj.fields[0].std(axis=0)
    over = np.flatnonzero(np.any(rmse[:avail] > limit, axis=1))
    div = int(over[0]) + 1 if over.size else None
    if truncated and div is None:
        div = len(frames) + 1
    return RolloutResult(frames, rmse, div, truncated)


def rollout_full(
    params: SurrogateParams,
    kind,
    traj: Trajectory,
    T: int,
    bc_types=DEFAULT_BC_TYPES,
    threshold_factor: float = 10.0,
) -> RolloutResult:
    """Feed predictions back for ``T`` steps on the whole mesh.

    Nodes of the ``bc_types`` types are overwritten from the trajectory
    after every step while ground truth is available.
    """
    _check_steps(T)
    mesh = traj.mesh
    net = SurrogateNet(params, full_patch(mesh).graph, mesh.static_features, mesh.edge_features)
    bc = _bc_mask(traj, bc_types)
    y = traj.fields[0].astype(net.dtype)
    frames = []
    truncated = False
    for t in range(1, T + 1):
        try:
            y = step(kind, net, y).next
        except (StageNonFiniteError, NonFiniteInputError):
            truncated = True
            break
        if t < traj.n_frames:
            y[bc] = traj.fields[t][bc]
        frames.append(y.copy())
    return _finish(frames, traj, threshold_factor, truncated)


def refresh_ghosts(local_states, sources) -> None:
    """Copy each ghost row from the subdomain row of its owning patch (in place)."""
    for p, (rows, src_patch, src_rows) in enumerate(sources):
        for q in np.unique(src_patch):
            sel = src_patch == q
            local_states[p][rows[sel]] = local_states[q][src_rows[sel]]


def ghost_sources(patches):
    """Per patch: ghost rows, owning patch index and the owner's local row."""
    by_id = {p.subdomain_id: i for i, p in enumerate(patches)}
    out = []
    for p in patches:
        rows = np.arange(p.n_subdomain, p.n_nodes)
        src_patch = np.empty(len(p.ghosts), dtype=np.int64)
        src_rows = np.empty(len(p.ghosts), dtype=np.int64)
        for j, (g, owner) in enumerate(zip(p.ghosts, p.owner)):
            q = by_id.get(int(owner))
            if q is None:
                raise RolloutConfigError(f"ghost node {g} of patch {p.subdomain_id} has no owning patch")
            r = patches[q].global_to_local[g]
            if not 0 <= r < patches[q].n_subdomain:
                raise RolloutConfigError(f"patch {owner} does not own node {g}")
            src_patch[j], src_rows[j] = q, r
        out.append((rows, src_patch, src_rows))
    return out


def rollout_patched(
    params: SurrogateParams,
    kind,
    traj: Trajectory,
    plan_counts,
    k: int,
    T: int,
    bc_types=DEFAULT_BC_TYPES,
    threshold_factor: float = 10.0,
    patches=None,
) -> RolloutResult:
    """Rollout where every patch advances its own copy of the state.

    After all patches finish a step, ghost rows are refreshed once from
    their owners.  With ``k >= stages * mp_steps`` the result equals
    :func:`rollout_full` bit for bit.
    """
    _check_steps(T)
    mesh = traj.mesh
    if patches is None:
        patches = build_patches(mesh, PartitionPlan.for_mesh(mesh, plan_counts), k)
    sources = ghost_sources(patches)
    covered = np.zeros(mesh.n_nodes, dtype=int)
    for p in patches:
        covered[p.subdomain] += 1
    if np.any(covered != 1):
        raise RolloutConfigError("patch subdomains do not partition the mesh")
    nets = [SurrogateNet(params, p.graph, p.static_features(mesh), p.edge_features(mesh)) for p in patches]
    dtype = nets[0].dtype
    bc = _bc_mask(traj, bc_types)
    local = [traj.fields[0][p.nodes].astype(dtype) for p in patches]
    frames = []
    truncated = False
    for t in range(1, T + 1):
        try:
            new = [step(kind, net, y).next[: p.n_subdomain] for net, y, p in zip(nets, local, patches)]
        except (StageNonFiniteError, NonFiniteInputError):
            truncated = True
            break
        for y, sub in zip(local, new):
            y[: len(sub)] = sub
        refresh_ghosts(local, sources)
        if t < traj.n_frames:
            truth = traj.fields[t]
            for y, p in zip(local, patches):
                rows = bc[p.nodes]
                y[rows] = truth[p.nodes[rows]]
        out = np.empty((mesh.n_nodes, local[0].shape[1]), dtype=dtype)
        for y, p in zip(local, patches):
            out[p.subdomain] = y[: p.n_subdomain]
        frames.append(out)
    return _finish(frames, traj, threshold_factor, truncated)
