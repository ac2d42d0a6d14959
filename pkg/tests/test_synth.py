import numpy as np
import pytest

from patchmgn.mesh import NodeType
from patchmgn.synth import (
    SynthParameterError,
    split_by_inlet_velocity,
    synth_dataset,
    synth_mesh,
    synth_mesh_3d,
    synth_trajectory,
)
from patchmgn.trajio import encode_trajectory


@pytest.fixture(scope="module")
def run():
    return synth_trajectory(7, 500, 50, return_diagnostics=True)


def test_deterministic(run):
    again = synth_trajectory(7, 500, 50)
    assert encode_trajectory(run[0]) == encode_trajectory(again)


def test_fraction_in_unit_interval(run):
    traj, diag = run
    assert diag.states.min() >= 0.0 and diag.states.max() <= 1.0
    assert traj.volume_fraction.min() >= 0.0 and traj.volume_fraction.max() <= 1.0


def test_mass_balance(run):
    _, diag = run
    np.testing.assert_allclose(np.diff(diag.mass()), diag.boundary_flux, rtol=0, atol=1e-10)


def test_cfl_violation_is_an_error():
    with pytest.raises(SynthParameterError):
        synth_trajectory(7, 500, 3, substeps=1, h=1.0)


def test_too_few_nodes():
    with pytest.raises(SynthParameterError):
        synth_mesh(0, 5)


def test_mesh_has_requested_size_and_types():
    m = synth_mesh(3, 600)
    assert m.n_nodes == 600
    types = set(m.node_type.tolist())
    assert {NodeType.FLUID, NodeType.LIQUID_INLET, NodeType.OUTLET, NodeType.SIDE_WALL, NodeType.PACKING} <= types
    lo, hi = m.bounding_box()
    assert lo.min() >= 0 and hi.max() <= 1


def test_dataset_split_holds_out_extremes():
    trajs = synth_dataset(1, n_nodes=200, n_trajectories=12, n_frames=3)
    assert all(t.mesh is trajs[0].mesh for t in trajs)
    train, val = split_by_inlet_velocity(trajs)
    assert len(train) + len(val) == 12
    speeds = [t.inlet_velocity for t in train]
    assert min(t.inlet_velocity for t in val) < min(speeds)
    assert max(t.inlet_velocity for t in val) > max(speeds)


def test_mesh_3d():
    m = synth_mesh_3d(0, 300)
    assert m.dim == 3 and m.n_nodes == 300
    assert np.any(m.node_type == NodeType.LIQUID_INLET)
