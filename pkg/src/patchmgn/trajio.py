"""Binary trajectory files and CSV ingestion.

Layout (all little-endian)::

    magic      8 bytes  b"MGTRAJ" + 2-digit format version ("01")
    header     u64 dim, u64 n_nodes, u64 n_arcs, u64 n_frames, u64 flags,
               f64 h, i64 sim_id, f64 inlet_velocity
    positions  f32[n_nodes, dim]
    boundary   f64[n_nodes]            (carries the DBL_MAX fluid sentinel)
    arcs       u32[n_arcs, 2]          (sender, receiver)
    momentum   f32[n_frames, n_nodes, dim]
    vol_frac   f32[n_frames, n_nodes]
    pressure   f32[n_frames, n_nodes]  (only when flags & 1)
    crc32      u32 over every preceding byte

CSV ingestion expects a node table with columns ``node_id, x, y[, z],
boundary_index`` and one field table per frame with columns ``node_id, u_x,
u_y[, u_z], alpha[, pressure]``.  Velocities are taken as raw SI values;
momentum is derived from them, and ``alpha`` is clamped to [0, 1].
"""
from __future__ import annotations

import csv
import struct
import zlib
from pathlib import Path

import numpy as np

from .delaunay import build_edges_delaunay
from .mesh import Mesh, Trajectory, momentum_from_velocity

MAGIC_PREFIX = b"MGTRAJ"
FORMAT_VERSION = 1
MAGIC = MAGIC_PREFIX + f"{FORMAT_VERSION:02d}".encode()
_HEADER = struct.Struct("<5Qdqd")
_FLAG_PRESSURE = 1


class TrajectoryFormatError(ValueError):
    pass


class BadMagicError(TrajectoryFormatError):
    pass


class VersionMismatchError(TrajectoryFormatError):
    pass


class TruncatedFileError(TrajectoryFormatError):
    pass


class ChecksumError(TrajectoryFormatError):
    pass


def encode_trajectory(traj: Trajectory) -> bytes:
    mesh = traj.mesh
    if mesh.n_nodes and mesh.n_arcs and mesh.arcs.max() >= 2**32:
        raise ValueError("node ids do not fit in 32 bits")
    flags = _FLAG_PRESSURE if traj.pressure is not None else 0
    parts = [
        MAGIC,
        _HEADER.pack(
            mesh.dim, mesh.n_nodes, mesh.n_arcs, traj.n_frames, flags,
            traj.h, traj.sim_id, traj.inlet_velocity,
        ),
        mesh.positions.astype("<f4").tobytes(),
        mesh.boundary_index.astype("<f8").tobytes(),
        mesh.arcs.astype("<u4").tobytes(),
        traj.momentum.astype("<f4").tobytes(),
        traj.volume_fraction.astype("<f4").tobytes(),
    ]
    if traj.pressure is not None:
        parts.append(traj.pressure.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_trajectory(data: bytes) -> Trajectory:
    if len(data) < len(MAGIC):
        if MAGIC.startswith(data) and data:
            raise TruncatedFileError("file ends inside the magic")
        raise BadMagicError("not a trajectory file")
    magic = data[: len(MAGIC)]
    if magic != MAGIC:
        if magic.startswith(MAGIC_PREFIX):
            raise VersionMismatchError(
                f"format version {magic[len(MAGIC_PREFIX):].decode(errors='replace')!r}, "
                f"expected {FORMAT_VERSION:02d}"
            )
        raise BadMagicError(f"bad magic {magic!r}")
    off = len(MAGIC)
    if len(data) < off + _HEADER.size:
        raise TruncatedFileError("file ends inside the header")
    dim, n, n_arcs, n_frames, flags, h, sim_id, inlet = _HEADER.unpack_from(data, off)
    off += _HEADER.size
    if dim not in (2, 3):
        raise TrajectoryFormatError(f"bad dimension {dim}")
    sizes = [
        ("<f4", (n, dim)),
        ("<f8", (n,)),
        ("<u4", (n_arcs, 2)),
        ("<f4", (n_frames, n, dim)),
        ("<f4", (n_frames, n)),
    ]
    if flags & _FLAG_PRESSURE:
        sizes.append(("<f4", (n_frames, n)))
    expected = off + sum(np.dtype(dt).itemsize * int(np.prod(shape)) for dt, shape in sizes) + 4
    if len(data) < expected:
        raise TruncatedFileError(f"file has {len(data)} bytes, header implies {expected}")
    if len(data) > expected:
        raise TrajectoryFormatError(f"{len(data) - expected} trailing bytes")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[: expected - 4]) != crc:
        raise ChecksumError("checksum mismatch")
    arrays = []
    for dt, shape in sizes:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        arrays.append(arr)
    positions, boundary, arcs, mom, vf = arrays[:5]
    pressure = arrays[5].astype(np.float32) if len(arrays) > 5 else None
    mesh = Mesh(positions.astype(np.float32), boundary.astype(np.float64), arcs.astype(np.int64))
    return Trajectory(
        mesh, mom.astype(np.float32), vf.astype(np.float32), h, sim_id, inlet, pressure=pressure
    )


def write_trajectory(traj: Trajectory, path) -> None:
    Path(path).write_bytes(encode_trajectory(traj))


def read_trajectory(path) -> Trajectory:
    return decode_trajectory(Path(path).read_bytes())


def _read_table(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            raise TrajectoryFormatError(f"{path}: empty CSV") from None
        rows = [r for r in reader if r]
    try:
        table = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    except ValueError as exc:
        raise TrajectoryFormatError(f"{path}: {exc}") from None
    return {name: table[:, i] for i, name in enumerate(header)}


def _require(table, names, path):
    missing = [c for c in names if c not in table]
    if missing:
        raise TrajectoryFormatError(f"{path}: missing columns {missing}")


def ingest_csv(
    node_csv,
    frame_csvs,
    h: float,
    sim_id: int = 0,
    inlet_velocity: float = 0.0,
) -> Trajectory:
    """Build a trajectory from a node table and per-frame field tables."""
    nodes = _read_table(node_csv)
    dim = 3 if "z" in nodes else 2
    axes = ["x", "y", "z"][:dim]
    _require(nodes, ["node_id", *axes, "boundary_index"], node_csv)
    order = np.argsort(nodes["node_id"], kind="stable")
    ids = nodes["node_id"][order]
    if not np.array_equal(ids, np.arange(len(ids))):
        raise TrajectoryFormatError(f"{node_csv}: node_id must be 0..n-1")
    positions = np.stack([nodes[a][order] for a in axes], axis=1)
    boundary = nodes["boundary_index"][order]
    positions32 = positions.astype(np.float32)
    arcs = build_edges_delaunay(positions32.astype(np.float64))
    mesh = Mesh(positions32, boundary, arcs)

    vel_cols = [f"u_{a}" for a in axes]
    momenta, alphas, pressures = [], [], []
    for path in frame_csvs:
        tab = _read_table(path)
        _require(tab, ["node_id", *vel_cols, "alpha"], path)
        o = np.argsort(tab["node_id"], kind="stable")
        if not np.array_equal(tab["node_id"][o], ids):
            raise TrajectoryFormatError(f"{path}: node ids differ from the node table")
        u = np.stack([tab[c][o] for c in vel_cols], axis=1)
        alpha = np.clip(tab["alpha"][o], 0.0, 1.0)
        momenta.append(momentum_from_velocity(u, alpha))
        alphas.append(alpha)
        pressures.append(tab["pressure"][o] if "pressure" in tab else None)
    has_p = all(p is not None for p in pressures)
    return Trajectory(
        mesh,
        np.stack(momenta),
        np.stack(alphas),
        h,
        sim_id,
        inlet_velocity,
        pressure=np.stack(pressures) if has_p else None,
    )
