import struct

import numpy as np
import pytest

from patchmgn.mesh import BOUNDARY_INDEX, FLUID_SENTINEL, Mesh, NodeType, Trajectory
from patchmgn.trajio import (
    MAGIC,
    BadMagicError,
    ChecksumError,
    TrajectoryFormatError,
    TruncatedFileError,
    VersionMismatchError,
    decode_trajectory,
    encode_trajectory,
    ingest_csv,
    read_trajectory,
    write_trajectory,
)

CHOICES = {d: [FLUID_SENTINEL] + [float(v) for v in BOUNDARY_INDEX[d].values() if v != FLUID_SENTINEL] for d in (2, 3)}


def random_trajectory(rng) -> Trajectory:
    dim = int(rng.choice([2, 3]))
    n = int(rng.integers(2, 12))
    pos = rng.normal(size=(n, dim)).astype(np.float32)
    boundary = rng.choice(CHOICES[dim], size=n)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]
    arcs = np.array([a for i, j in pairs for a in ((i, j), (j, i))], dtype=np.int64).reshape(-1, 2)
    T = int(rng.integers(2, 5))
    # raw bit patterns exercise signed zeros and subnormals
    mom = rng.normal(scale=10.0 ** rng.integers(-40, 30), size=(T, n, dim)).astype(np.float32)
    vf = rng.random((T, n)).astype(np.float32)
    p = rng.normal(size=(T, n)).astype(np.float32) if rng.random() < 0.5 else None
    return Trajectory(
        Mesh(pos, boundary, arcs), mom, vf, float(rng.uniform(1e-4, 1.0)),
        int(rng.integers(-2**40, 2**40)), float(rng.normal()), pressure=p,
    )


def assert_identical(a: Trajectory, b: Trajectory):
    for x, y in [
        (a.mesh.positions, b.mesh.positions),
        (a.mesh.boundary_index, b.mesh.boundary_index),
        (a.mesh.arcs, b.mesh.arcs),
        (a.momentum, b.momentum),
        (a.volume_fraction, b.volume_fraction),
    ]:
        assert x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()
    assert (a.pressure is None) == (b.pressure is None)
    if a.pressure is not None:
        assert a.pressure.tobytes() == b.pressure.tobytes()
    assert (a.h, a.sim_id, a.inlet_velocity) == (b.h, b.sim_id, b.inlet_velocity)


def test_fuzzed_round_trips():
    rng = np.random.default_rng(1234)
    for _ in range(1000):
        t = random_trajectory(rng)
        data = encode_trajectory(t)
        back = decode_trajectory(data)
        assert_identical(t, back)
        assert encode_trajectory(back) == data


def test_file_round_trip(tmp_path):
    t = random_trajectory(np.random.default_rng(5))
    write_trajectory(t, tmp_path / "a.mgtraj")
    assert_identical(t, read_trajectory(tmp_path / "a.mgtraj"))


@pytest.fixture
def blob():
    return encode_trajectory(random_trajectory(np.random.default_rng(9)))


def test_bad_magic(blob):
    with pytest.raises(BadMagicError):
        decode_trajectory(b"NOTATRAJ" + blob[8:])
    with pytest.raises(BadMagicError):
        decode_trajectory(b"")


def test_version_mismatch(blob):
    with pytest.raises(VersionMismatchError):
        decode_trajectory(MAGIC[:-2] + b"02" + blob[8:])


@pytest.mark.parametrize("cut", [3, 8, 20, -1, -5])
def test_truncation(blob, cut):
    with pytest.raises(TruncatedFileError):
        decode_trajectory(blob[:cut])


def test_checksum(blob):
    corrupt = bytearray(blob)
    corrupt[len(blob) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_trajectory(bytes(corrupt))


def test_trailing_bytes(blob):
    with pytest.raises(TrajectoryFormatError):
        decode_trajectory(blob + b"\0")


def test_error_kinds_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, TruncatedFileError, ChecksumError}
    assert all(issubclass(k, TrajectoryFormatError) for k in kinds)
    assert all(not issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_sentinel_survives_encoding():
    t = random_trajectory(np.random.default_rng(2))
    data = encode_trajectory(t)
    n = t.mesh.n_nodes
    off = len(MAGIC) + struct.calcsize("<5Qdqd") + 4 * n * t.mesh.dim
    raw = np.frombuffer(data, "<f8", n, off)
    np.testing.assert_array_equal(raw, t.mesh.boundary_index)


def _write_csv(path, header, rows):
    path.write_text(",".join(header) + "\n" + "\n".join(",".join(repr(v) for v in r) for r in rows) + "\n")


def test_ingest_csv(tmp_path):
    pts = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
    bidx = [FLUID_SENTINEL, 34.0, 31.0, 28.0]
    # rows deliberately out of id order
    order = [2, 0, 3, 1]
    _write_csv(tmp_path / "nodes.csv", ["node_id", "x", "y", "boundary_index"],
               [(i, *pts[i], bidx[i]) for i in order])
    frames = []
    for f in range(2):
        p = tmp_path / f"f{f}.csv"
        _write_csv(p, ["node_id", "u_x", "u_y", "alpha"],
                   [(i, 1.0 + f, 0.0, [0.0, 1.0, 1.7, -0.2][i]) for i in order])
        frames.append(p)
    t = ingest_csv(tmp_path / "nodes.csv", frames, h=0.01)
    assert t.mesh.node_type.tolist() == [NodeType.FLUID, NodeType.LIQUID_INLET, NodeType.OUTLET, NodeType.SIDE_WALL]
    assert t.volume_fraction[0].tolist() == [0.0, 1.0, 1.0, 0.0]
    assert t.momentum[1, 1, 0] == np.float32(2020.0)
    assert t.pressure is None
    assert t.mesh.n_arcs == 10


def test_ingest_missing_column(tmp_path):
    _write_csv(tmp_path / "nodes.csv", ["node_id", "x", "boundary_index"], [(0, 0.0, 34.0)])
    with pytest.raises(TrajectoryFormatError):
        ingest_csv(tmp_path / "nodes.csv", [], h=0.01)
