"""Static meshes, field frames and trajectories.

Node attributes follow the carbon-capture CFD export: a per-node boundary
index decides the node type and the wall contact angle, momentum is derived
from velocity and liquid volume fraction, and edges come from a Delaunay
triangulation of the node positions.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

RHO_LIQUID = 1010.0
RHO_GAS = 1.18415

# The export writes DBL_MAX for interior fluid nodes; printed with 15
# significant digits that literal overflows to +inf when re-parsed.
FLUID_SENTINEL = float(np.finfo(np.float64).max)
NO_CONTACT_ANGLE = -1.0


class NodeType(enum.IntEnum):
    FLUID = 0
    LIQUID_INLET = 1
    OUTLET = 2
    GAS_INLET = 3
    INLET_TO_OUTLET_WALL = 4
    SIDE_WALL = 5
    PACKING = 6


N_NODE_TYPES = len(NodeType)

# node type -> (2D index, 3D index, contact angle in degrees or None)
_TABLE = {
    NodeType.FLUID: (FLUID_SENTINEL, FLUID_SENTINEL, None),
    NodeType.LIQUID_INLET: (34.0, 47.0, None),
    NodeType.OUTLET: (31.0, 46.0, None),
    NodeType.GAS_INLET: (30.0, 45.0, None),
    NodeType.INLET_TO_OUTLET_WALL: (29.0, 44.0, 180.0),
    NodeType.SIDE_WALL: (28.0, 43.0, 33.5),
    NodeType.PACKING: (27.0, 42.0, 33.5),
}

BOUNDARY_INDEX = {
    dim: {t: row[dim - 2] for t, row in _TABLE.items()} for dim in (2, 3)
}
_LOOKUP = {
    dim: {row[dim - 2]: t for t, row in _TABLE.items() if t is not NodeType.FLUID}
    for dim in (2, 3)
}


class UnknownBoundaryIndexError(ValueError):
    def __init__(self, value: float, dim: int):
        super().__init__(f"boundary index {value!r} has no node type in {dim}D")
        self.value = value
        self.dim = dim


def _check_dim(dim: int) -> None:
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")


def node_type_from_boundary(boundary_index: float, dim: int) -> tuple[NodeType, float | None]:
    """Map one boundary index to ``(node_type, contact_angle)``.

    The contact angle is ``None`` where the table has no value.
    """
    _check_dim(dim)
    value = float(boundary_index)
    if value >= FLUID_SENTINEL:
        return NodeType.FLUID, None
    try:
        node_type = _LOOKUP[dim][value]
    except KeyError:
        raise UnknownBoundaryIndexError(value, dim) from None
    return node_type, _TABLE[node_type][2]


def node_types_from_boundary(boundary_index: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised lookup; absent contact angles are encoded as -1."""
    _check_dim(dim)
    bi = np.asarray(boundary_index, dtype=np.float64)
    types = np.full(bi.shape, -1, dtype=np.int8)
    angles = np.full(bi.shape, NO_CONTACT_ANGLE)
    types[bi >= FLUID_SENTINEL] = NodeType.FLUID
    for value, node_type in _LOOKUP[dim].items():
        hit = bi == value
        types[hit] = node_type
        angle = _TABLE[node_type][2]
        if angle is not None:
            angles[hit] = angle
    bad = np.flatnonzero(types < 0)
    if bad.size:
        raise UnknownBoundaryIndexError(float(bi[bad[0]]), dim)
    return types, angles


def momentum_from_velocity(velocity, alpha):
    """Momentum per unit volume, ``[a*rho_L + (1-a)*rho_G] * u``, componentwise.

    ``velocity`` has shape (..., d) and ``alpha`` the matching leading shape.
    """
    u = np.asarray(velocity, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a < 0.0) or np.any(a > 1.0) or not np.all(np.isfinite(a)):
        raise ValueError("volume fraction must lie in [0, 1]")
    rho = a * RHO_LIQUID + (1.0 - a) * RHO_GAS
    return rho[..., None] * u


class MeshInvariantError(ValueError):
    pass


class Mesh:
    """Immutable static geometry.

    ``positions`` are stored as float32 and ``boundary_index`` as float64 so
    that the on-disk format round-trips bit-exactly.  ``arcs`` holds directed
    (sender, receiver) pairs; every undirected edge appears in both
    directions.
    """

    def __init__(self, positions, boundary_index, arcs, *, validate: bool = True):
        pos = np.ascontiguousarray(positions, dtype=np.float32)
        if pos.ndim != 2:
            raise MeshInvariantError("positions must be (n_nodes, dim)")
        self.dim = pos.shape[1]
        _check_dim(self.dim)
        bi = np.ascontiguousarray(boundary_index, dtype=np.float64).reshape(-1)
        arcs = np.ascontiguousarray(arcs, dtype=np.int64).reshape(-1, 2)
        if bi.shape[0] != pos.shape[0]:
            raise MeshInvariantError("boundary_index length differs from node count")
        self.positions = pos
        self.boundary_index = bi
        self.arcs = arcs
        for arr in (pos, bi, arcs):
            arr.setflags(write=False)
        if validate:
            self._validate()

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def n_arcs(self) -> int:
        return self.arcs.shape[0]

    @property
    def senders(self) -> np.ndarray:
        return self.arcs[:, 0]

    @property
    def receivers(self) -> np.ndarray:
        return self.arcs[:, 1]

    def _validate(self) -> None:
        if not np.all(np.isfinite(self.positions)):
            raise MeshInvariantError("non-finite node position")
        n = self.n_nodes
        s, r = self.senders, self.receivers
        if self.n_arcs and (s.min() < 0 or r.min() < 0 or s.max() >= n or r.max() >= n):
            raise MeshInvariantError("arc endpoint out of range")
        if np.any(s == r):
            raise MeshInvariantError("self-loop arc")
        fwd = s * n + r
        rev = r * n + s
        if not np.all(np.isin(rev, fwd)):
            raise MeshInvariantError("arc without its reverse")
        # raises on unmapped indices
        self._types_and_angles

    @cached_property
    def _types_and_angles(self):
        types, angles = node_types_from_boundary(self.boundary_index, self.dim)
        types.setflags(write=False)
        angles.setflags(write=False)
        return types, angles

    @property
    def node_type(self) -> np.ndarray:
        return self._types_and_angles[0]

    @property
    def contact_angle(self) -> np.ndarray:
        return self._types_and_angles[1]

    @cached_property
    def edge_features(self) -> np.ndarray:
        """Per-arc ``[receiver - sender displacement, norm]`` in float64."""
        return edge_features(self.positions, self.arcs)

    @cached_property
    def static_features(self) -> np.ndarray:
        """Per-node ``[contact_angle, one-hot node type]`` in float64."""
        onehot = np.zeros((self.n_nodes, N_NODE_TYPES))
        onehot[np.arange(self.n_nodes), self.node_type] = 1.0
        return np.concatenate([self.contact_angle[:, None], onehot], axis=1)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.positions.astype(np.float64)
        return p.min(axis=0), p.max(axis=0)

    def same_as(self, other: "Mesh") -> bool:
        return (
            self.dim == other.dim
            and _bits_equal(self.positions, other.positions)
            and _bits_equal(self.boundary_index, other.boundary_index)
            and _bits_equal(self.arcs, other.arcs)
        )

    def __repr__(self) -> str:
        return f"Mesh(dim={self.dim}, n_nodes={self.n_nodes}, n_arcs={self.n_arcs})"


def edge_features(positions: np.ndarray, arcs: np.ndarray) -> np.ndarray:
    # Relative displacement plus its length; the one place to extend edge inputs.
    p = np.asarray(positions, dtype=np.float64)
    disp = p[arcs[:, 1]] - p[arcs[:, 0]]
    norm = np.sqrt(np.sum(disp * disp, axis=1))
    return np.concatenate([disp, norm[:, None]], axis=1)


def _bits_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    a = np.asarray(a)
    b = np.asarray(b)
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True, eq=False)
class FieldFrame:
    momentum: np.ndarray
    volume_fraction: np.ndarray
    pressure: np.ndarray | None = None


class Trajectory:
    """A mesh plus a time series of per-node fields sampled every ``h`` seconds.

    Fields are held stacked: ``momentum`` is (T, n, d), ``volume_fraction``
    and ``pressure`` are (T, n), all float32.
    """

    def __init__(
        self,
        mesh: Mesh,
        momentum,
        volume_fraction,
        h: float,
        sim_id: int = 0,
        inlet_velocity: float = 0.0,
        pressure=None,
    ):
        mom = np.ascontiguousarray(momentum, dtype=np.float32)
        vf = np.ascontiguousarray(volume_fraction, dtype=np.float32)
        if mom.ndim != 3 or mom.shape[1:] != (mesh.n_nodes, mesh.dim):
            raise ValueError(f"momentum must be (T, {mesh.n_nodes}, {mesh.dim}), got {mom.shape}")
        if vf.shape != mom.shape[:2]:
            raise ValueError("volume_fraction must be (T, n_nodes)")
        if mom.shape[0] < 2:
            raise ValueError("a trajectory needs at least 2 frames")
        if not (h > 0):
            raise ValueError("timestep h must be positive")
        if np.any(vf < 0) or np.any(vf > 1):
            raise ValueError("volume fraction outside [0, 1]; clamp at ingestion")
        if not (np.all(np.isfinite(mom)) and np.all(np.isfinite(vf))):
            raise ValueError("non-finite field values")
        if pressure is not None:
            pressure = np.ascontiguousarray(pressure, dtype=np.float32)
            if pressure.shape != vf.shape:
                raise ValueError("pressure must be (T, n_nodes)")
            pressure.setflags(write=False)
        for arr in (mom, vf):
            arr.setflags(write=False)
        self.mesh = mesh
        self.momentum = mom
        self.volume_fraction = vf
        self.pressure = pressure
        self.h = float(h)
        self.sim_id = int(sim_id)
        self.inlet_velocity = float(inlet_velocity)

    @property
    def n_frames(self) -> int:
        return self.momentum.shape[0]

    def frame(self, t: int) -> FieldFrame:
        p = None if self.pressure is None else self.pressure[t]
        return FieldFrame(self.momentum[t], self.volume_fraction[t], p)

    @property
    def frames(self) -> tuple[FieldFrame, ...]:
        return tuple(self.frame(t) for t in range(self.n_frames))

    @cached_property
    def fields(self) -> np.ndarray:
        """Model state per frame, ``[momentum, volume_fraction]``, (T, n, d+1) float64."""
        out = np.concatenate(
            [self.momentum.astype(np.float64), self.volume_fraction.astype(np.float64)[..., None]],
            axis=2,
        )
        out.setflags(write=False)
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.mesh.same_as(other.mesh)
            and _bits_equal(self.momentum, other.momentum)
            and _bits_equal(self.volume_fraction, other.volume_fraction)
            and _bits_equal(self.pressure, other.pressure)
            and np.float64(self.h).tobytes() == np.float64(other.h).tobytes()
            and self.sim_id == other.sim_id
            and np.float64(self.inlet_velocity).tobytes() == np.float64(other.inlet_velocity).tobytes()
        )

    __hash__ = None

    def __repr__(self) -> str:
        return (
            f"Trajectory(sim_id={self.sim_id}, frames={self.n_frames}, h={self.h}, "
            f"nodes={self.mesh.n_nodes})"
        )


def submesh(mesh: Mesh, nodes: np.ndarray) -> tuple[Mesh, np.ndarray]:
    """Induced sub-mesh on ``nodes`` (sorted); returns the mesh and the node ids kept."""
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    local = np.full(mesh.n_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(nodes.size)
    keep = (local[mesh.senders] >= 0) & (local[mesh.receivers] >= 0)
    arcs = local[mesh.arcs[keep]]
    return Mesh(mesh.positions[nodes], mesh.boundary_index[nodes], arcs), nodes


def subtrajectory(traj: Trajectory, nodes: np.ndarray) -> Trajectory:
    sub, kept = submesh(traj.mesh, nodes)
    p = None if traj.pressure is None else traj.pressure[:, kept]
    return Trajectory(
        sub,
        traj.momentum[:, kept],
        traj.volume_fraction[:, kept],
        traj.h,
        traj.sim_id,
        traj.inlet_velocity,
        pressure=p,
    )
