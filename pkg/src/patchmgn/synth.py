"""Desk-scale synthetic trajectories.

A liquid volume fraction is advected and diffused across a random Delaunay
mesh of the unit square.  Liquid enters through the left edge (Dirichlet
nodes), leaves through the right edge, and flows around two packing
obstacles.  The velocity field comes from an analytic stream function, and
edge fluxes are differences of that stream function on the median-dual
faces, so interior cells are exactly divergence-free up to round-off.  The
explicit upwind/diffusion update is then a convex combination of
neighbouring values, which keeps the fraction in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .delaunay import arcs_from_edges, delaunay_simplices, undirected_edges
from .mesh import BOUNDARY_INDEX, Mesh, NodeType, Trajectory, momentum_from_velocity

OBSTACLES = ((0.55, 0.35), (0.78, 0.68))
OBSTACLE_RADIUS = 0.09
_OBSTACLE_MIN_NODES = 400


class SynthParameterError(ValueError):
    pass


@dataclass(frozen=True)
class FlowParams:
    inlet_velocity: float
    swirl: float
    period: float
    phase: float
    tilt: float
    blobs: tuple[tuple[float, float, float], ...]


@dataclass(frozen=True, eq=False)
class SynthDiagnostics:
    volume: np.ndarray
    dirichlet: np.ndarray
    states: np.ndarray
    boundary_flux: np.ndarray
    substeps: int
    dt: float

    def mass(self) -> np.ndarray:
        """Liquid volume held by the non-Dirichlet cells at each frame."""
        free = ~self.dirichlet
        return self.states[:, free] @ self.volume[free]


def _boundary_points(m: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(m + 1) / m
    inner = t[1:-1]
    pts = np.concatenate(
        [
            np.stack([t, np.zeros_like(t)], 1),
            np.stack([t, np.ones_like(t)], 1),
            np.stack([np.zeros_like(inner), inner], 1),
            np.stack([np.ones_like(inner), inner], 1),
        ]
    )
    kind = np.full(len(pts), int(NodeType.SIDE_WALL))
    kind[pts[:, 0] == 0.0] = NodeType.LIQUID_INLET
    kind[pts[:, 0] == 1.0] = NodeType.OUTLET
    return pts, kind


def synth_mesh(seed: int, n_nodes: int) -> Mesh:
    """Random Delaunay mesh of the unit square with exactly ``n_nodes`` nodes."""
    if n_nodes < 8:
        raise SynthParameterError("n_nodes must be at least 8")
    rng = np.random.default_rng([seed, 0])
    spacing = 1.0 / math.sqrt(n_nodes)
    m = max(2, round(0.8 * math.sqrt(n_nodes)))
    m = min(m, n_nodes // 4)
    pts, kind = _boundary_points(m)
    blocks, kinds = [pts], [kind]
    obstacles = n_nodes >= _OBSTACLE_MIN_NODES
    if obstacles:
        q = max(6, round(0.8 * 2 * math.pi * OBSTACLE_RADIUS / spacing))
        for cx, cy in OBSTACLES:
            ang = 2 * math.pi * (np.arange(q) + rng.uniform(-0.2, 0.2, q)) / q
            rad = OBSTACLE_RADIUS * (1 + rng.uniform(-0.05, 0.05, q))
            blocks.append(np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], 1))
            kinds.append(np.full(q, int(NodeType.PACKING)))
    fixed = np.concatenate(blocks)
    n_free = n_nodes - len(fixed)
    if n_free < 0:
        raise SynthParameterError("too few nodes for the boundary")
    free = _dart_throw(rng, fixed, n_free, 0.55 * spacing, obstacles)
    pts = np.concatenate([fixed, free]).astype(np.float32)
    kind = np.concatenate(kinds + [np.full(n_free, int(NodeType.FLUID))])
    boundary = np.array([BOUNDARY_INDEX[2][NodeType(k)] for k in kind])
    arcs = arcs_from_edges(undirected_edges(delaunay_simplices(pts.astype(np.float64))))
    return Mesh(pts, boundary, arcs)


def _dart_throw(rng, fixed: np.ndarray, count: int, dmin: float, obstacles: bool) -> np.ndarray:
    accepted: list[tuple[float, float]] = []
    while True:
        grid: dict[tuple[int, int], list[tuple[float, float]]] = {}

        def cell(p):
            return int(p[0] // dmin), int(p[1] // dmin)

        for p in list(map(tuple, fixed)) + accepted:
            grid.setdefault(cell(p), []).append(p)
        cands = rng.uniform(0.0, 1.0, size=(8 * count + 64, 2))
        for x, y in cands:
            if len(accepted) == count:
                return np.array(accepted, dtype=np.float64).reshape(-1, 2)
            if x <= 0.0 or y <= 0.0:
                continue
            if obstacles and any(
                (x - cx) ** 2 + (y - cy) ** 2 < (OBSTACLE_RADIUS + 0.5 * dmin) ** 2 for cx, cy in OBSTACLES
            ):
                continue
            ci, cj = cell((x, y))
            ok = True
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    for px, py in grid.get((ci + di, cj + dj), ()):
                        if (px - x) ** 2 + (py - y) ** 2 < dmin * dmin:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                accepted.append((x, y))
                grid.setdefault((ci, cj), []).append((x, y))
        if len(accepted) == count:
            return np.array(accepted, dtype=np.float64).reshape(-1, 2)
        dmin *= 0.85


def random_flow(rng, inlet_velocity: float | None = None) -> FlowParams:
    u = float(rng.uniform(0.5, 1.5)) if inlet_velocity is None else float(inlet_velocity)
    blobs = tuple(
        (float(rng.uniform(0.2, 0.9)), float(rng.uniform(0.15, 0.85)), float(rng.uniform(0.05, 0.1)))
        for _ in range(2)
    )
    return FlowParams(
        inlet_velocity=u,
        swirl=float(rng.uniform(-0.2, 0.2)),
        period=float(rng.uniform(0.5, 1.5)),
        phase=float(rng.uniform(0.0, 2 * math.pi)),
        tilt=float(rng.uniform(0.0, 1.0)),
        blobs=blobs,
    )


def stream_function(x, y, flow: FlowParams, obstacles: bool = True):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def base(x, y):
        g = 3 * y**2 - 2 * y**3
        return flow.inlet_velocity * (g + flow.swirl * np.sin(np.pi * x) * np.sin(np.pi * y) ** 2)

    psi = base(x, y)
    if obstacles:
        width = 0.06
        for cx, cy in OBSTACLES:
            r = np.hypot(x - cx, y - cy)
            s = np.clip((r - OBSTACLE_RADIUS) / width, 0.0, 1.0)
            bump = 1.0 - s * s * (3 - 2 * s)
            psi = (1 - bump) * psi + bump * base(np.float64(cx), np.float64(cy))
    return psi


def inlet_profile(y, t: float, flow: FlowParams):
    return 0.5 * (1.0 + np.sin(2 * math.pi * t / flow.period + flow.phase + 2 * math.pi * flow.tilt * y))


def _dual_geometry(points: np.ndarray):
    tris = delaunay_simplices(points)
    p = points[tris]
    orient = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (
        p[:, 2, 0] - p[:, 0, 0]
    )
    tris = np.where((orient < 0)[:, None], tris[:, [0, 2, 1]], tris)
    area = 0.5 * np.abs(orient)
    centroid = points[tris].mean(axis=1)
    edges = undirected_edges(tris)
    n = len(points)
    key = edges[:, 0] * n + edges[:, 1]
    left = np.full(len(edges), -1)
    right = np.full(len(edges), -1)
    for a_col, b_col in ((0, 1), (1, 2), (2, 0)):
        a, b = tris[:, a_col], tris[:, b_col]
        fwd = a < b
        idx = np.searchsorted(key, np.minimum(a, b) * n + np.maximum(a, b))
        # ccw triangle lies left of a->b; left of b->a means right of min->max
        left[idx[fwd]] = np.flatnonzero(fwd)
        right[idx[~fwd]] = np.flatnonzero(~fwd)
    volume = np.zeros(n)
    np.add.at(volume, tris.ravel(), np.repeat(area / 3.0, 3))
    mid = 0.5 * (points[edges[:, 0]] + points[edges[:, 1]])
    cl = np.where((left >= 0)[:, None], centroid[np.maximum(left, 0)], mid)
    cr = np.where((right >= 0)[:, None], centroid[np.maximum(right, 0)], mid)
    return edges, cl, cr, mid, volume


def synth_trajectory(
    seed: int,
    n_nodes: int,
    n_frames: int,
    *,
    mesh: Mesh | None = None,
    flow: FlowParams | None = None,
    h: float = 0.05,
    diffusivity: float = 0.002,
    substeps: int | None = None,
    sim_id: int | None = None,
    return_diagnostics: bool = False,
):
    """Deterministic advection-diffusion trajectory on a random mesh.

    Raises :class:`SynthParameterError` when an explicit ``substeps`` breaks
    the stability (CFL) bound of the explicit scheme.
    """
    if n_frames < 2:
        raise SynthParameterError("n_frames must be at least 2")
    if mesh is None:
        mesh = synth_mesh(seed, n_nodes)
    elif mesh.n_nodes != n_nodes:
        raise SynthParameterError("mesh node count differs from n_nodes")
    if flow is None:
        flow = random_flow(np.random.default_rng([seed, 1]))
    pts = mesh.positions.astype(np.float64)
    obstacles = bool(np.any(mesh.node_type == NodeType.PACKING))
    edges, cl, cr, mid, volume = _dual_geometry(pts)
    psi_l = stream_function(cl[:, 0], cl[:, 1], flow, obstacles)
    psi_r = stream_function(cr[:, 0], cr[:, 1], flow, obstacles)
    q = psi_l - psi_r
    a, b = edges[:, 0], edges[:, 1]
    length = np.linalg.norm(pts[b] - pts[a], axis=1)
    face = np.linalg.norm(cl - mid, axis=1) + np.linalg.norm(mid - cr, axis=1)
    w = diffusivity * face / length
    n = mesh.n_nodes

    net_q = np.bincount(a, q, n) - np.bincount(b, q, n)
    dirichlet = mesh.node_type == NodeType.LIQUID_INLET
    outlet = mesh.node_type == NodeType.OUTLET
    out_rate = np.where(outlet, np.maximum(-net_q, 0.0), 0.0)
    scale = np.abs(q).max() if len(q) else 1.0
    if np.any(net_q[~dirichlet] > 1e-9 * scale):
        raise SynthParameterError("inflow at a non-Dirichlet node; geometry unsupported")
    outflow = np.bincount(a, np.maximum(q, 0), n) + np.bincount(b, np.maximum(-q, 0), n)
    wsum = np.bincount(a, w, n) + np.bincount(b, w, n)
    rate = (outflow + out_rate + wsum) / volume
    dt_max = 1.0 / rate[~dirichlet].max()
    if substeps is None:
        substeps = max(1, math.ceil(h / (0.9 * dt_max)))
    elif h / substeps > dt_max:
        raise SynthParameterError(
            f"CFL violated: dt={h / substeps:.3g} exceeds stable limit {dt_max:.3g}; use more substeps"
        )
    dt = h / substeps

    x, y = pts[:, 0], pts[:, 1]
    c = np.zeros(n)
    for bx, by, bw in flow.blobs:
        c = np.maximum(c, 0.8 * np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2 * bw * bw)))
    c[dirichlet] = inlet_profile(y[dirichlet], 0.0, flow)

    cross = dirichlet[a] != dirichlet[b]
    a_free = cross & ~dirichlet[a]
    b_free = cross & ~dirichlet[b]

    states = [c.copy()]
    fluxes = []
    free = ~dirichlet
    for f in range(1, n_frames):
        total = 0.0
        for s in range(substeps):
            transfer = np.maximum(q, 0) * c[a] + np.minimum(q, 0) * c[b] - w * (c[b] - c[a])
            net = np.bincount(b, transfer, n) - np.bincount(a, transfer, n)
            out = out_rate * c
            total += dt * (np.sum(transfer[b_free]) - np.sum(transfer[a_free]) - np.sum(out[free]))
            c = c + dt * (net - out) / volume
            t = ((f - 1) * substeps + s + 1) * dt
            c[dirichlet] = inlet_profile(y[dirichlet], t, flow)
        states.append(c.copy())
        fluxes.append(total)
    states = np.array(states)

    vel = np.stack(_velocity(x, y, flow, obstacles), axis=1)
    vf = states.astype(np.float32)
    mom = momentum_from_velocity(np.broadcast_to(vel, (n_frames, n, 2)), vf.astype(np.float64))
    traj = Trajectory(
        mesh,
        mom.astype(np.float32),
        vf,
        h,
        sim_id=seed if sim_id is None else sim_id,
        inlet_velocity=flow.inlet_velocity,
    )
    if not return_diagnostics:
        return traj
    diag = SynthDiagnostics(volume, dirichlet, states, np.array(fluxes), substeps, dt)
    return traj, diag


def _velocity(x, y, flow: FlowParams, obstacles: bool):
    d = 1e-6
    ux = (stream_function(x, y + d, flow, obstacles) - stream_function(x, y - d, flow, obstacles)) / (2 * d)
    uy = -(stream_function(x + d, y, flow, obstacles) - stream_function(x - d, y, flow, obstacles)) / (2 * d)
    return ux, uy


def synth_dataset(
    seed: int,
    n_nodes: int = 2000,
    n_trajectories: int = 40,
    n_frames: int = 30,
    **kwargs,
) -> list[Trajectory]:
    """Trajectories sharing one mesh, with inlet velocities spread over [0.5, 1.5]."""
    mesh = synth_mesh(seed, n_nodes)
    speeds = np.linspace(0.5, 1.5, n_trajectories)
    out = []
    for i, u in enumerate(speeds):
        flow = random_flow(np.random.default_rng([seed, 2, i]), inlet_velocity=float(u))
        out.append(
            synth_trajectory(seed, n_nodes, n_frames, mesh=mesh, flow=flow, sim_id=i, **kwargs)
        )
    return out


def split_by_inlet_velocity(trajs, n_slow: int = 3, n_fast: int = 3, n_mid: int = 2):
    """Hold out the slowest, fastest and some intermediate inlet velocities for validation."""
    order = sorted(range(len(trajs)), key=lambda i: trajs[i].inlet_velocity)
    held = set(order[:n_slow]) | set(order[len(order) - n_fast:])
    rest = order[n_slow: len(order) - n_fast]
    if n_mid:
        picks = np.linspace(0, len(rest) - 1, n_mid + 2)[1:-1].round().astype(int)
        held |= {rest[i] for i in picks}
    train = [t for i, t in enumerate(trajs) if i not in held]
    val = [t for i, t in enumerate(trajs) if i in held]
    return train, val


def synth_mesh_3d(seed: int, n_nodes: int) -> Mesh:
    """Random Delaunay mesh of the unit cube; nodes on the x = 0 slab are liquid inlets."""
    if n_nodes < 8:
        raise SynthParameterError("n_nodes must be at least 8")
    rng = np.random.default_rng([seed, 3])
    pts = rng.uniform(size=(n_nodes, 3)).astype(np.float32)
    kind = np.where(pts[:, 0] < 0.05, int(NodeType.LIQUID_INLET), int(NodeType.FLUID))
    boundary = np.array([BOUNDARY_INDEX[3][NodeType(k)] for k in kind])
    arcs = arcs_from_edges(undirected_edges(delaunay_simplices(pts.astype(np.float64))))
    return Mesh(pts, boundary, arcs)
