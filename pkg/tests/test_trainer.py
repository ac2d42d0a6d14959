import math
import warnings

import numpy as np
import pytest

from _util import hop_distance, model
from patchmgn.partition import PartitionPlan, PatchSample, PatchSampler, build_patches
from patchmgn.surrogate import SurrogateConfig, flatten
from patchmgn.synth import synth_dataset, synth_trajectory
from patchmgn.trainer import (
    TrainConfig,
    TrainState,
    adam_update,
    default_noise,
    evaluate,
    full_patch,
    init_state,
    load_train_state,
    lr_schedule,
    plateaued,
    save_train_state,
    train,
    train_step,
    verify_full_equivalence,
)


def test_lr_schedule_points():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-3
    assert lr_schedule(2_000_000, cfg) == pytest.approx(1e-5, rel=1e-12)
    assert lr_schedule(4_000_000, cfg) == 1e-7
    assert lr_schedule(9_000_000, cfg) == 1e-7
    ts = np.linspace(0, 4_000_000, 50)
    lrs = [lr_schedule(t, cfg) for t in ts]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_end=1e-2)
    with pytest.raises(ValueError):
        TrainConfig(noise_std=(0.1, -1.0, 0.0))
    with pytest.raises(ValueError):
        TrainConfig(integrator="rk4")
    assert default_noise(2) == (0.02, 0.03, 0.05)
    assert default_noise(3) == (0.02, 0.02, 0.03, 0.05)


def test_ghost_width_check():
    TrainConfig(integrator="h2", k=6).check_ghost_width(3)
    with pytest.raises(ValueError):
        TrainConfig(integrator="h2", k=5, strict_equivalence=True).check_ghost_width(3)
    with pytest.warns(UserWarning):
        TrainConfig(integrator="fe", k=2).check_ghost_width(3)


def scalar_adam(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Element-by-element textbook Adam in plain Python floats."""
    w = list(w)
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t, g in enumerate(grads, start=1):
        for i in range(len(w)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            w[i] -= lr(t - 1) * mh / (math.sqrt(vh) + eps)
    return w


def test_adam_matches_reference():
    cfg = TrainConfig(lr_start=1e-2, lr_end=1e-4, decay_horizon=20)
    model_cfg = SurrogateConfig(dim=2, mp_steps=1, latent_dim=3, dtype="float64")
    state = init_state(cfg, model_cfg)
    w0 = flatten(state.params.weights)
    rng = np.random.default_rng(0)
    names = sorted(state.params.weights)
    grads_seq = []
    for _ in range(20):
        g = {k: rng.normal(size=state.params.weights[k].shape) for k in names}
        grads_seq.append(flatten(g))
        state = adam_update(state, g, cfg)
    ref = scalar_adam(w0, grads_seq, lambda t: lr_schedule(t, cfg))
    np.testing.assert_allclose(flatten(state.params.weights), ref, rtol=0, atol=1e-12)
    assert state.step == 20


@pytest.fixture(scope="module")
def data():
    return synth_dataset(0, n_nodes=300, n_trajectories=4, n_frames=5)


def _cfg(**kw):
    base = dict(plan=(2, 2), k=2, noise_std=(0.0, 0.0, 0.0), seed=3, lr_start=1e-3, lr_end=1e-5, decay_horizon=100)
    base.update(kw)
    return TrainConfig(**base)


def _model_cfg(m=2, **kw):
    return SurrogateConfig(dim=2, mp_steps=m, latent_dim=8, dtype="float64", **kw)


def test_noise_zero_changes_nothing(data):
    cfg = _cfg()
    state = init_state(cfg, _model_cfg())
    sampler = PatchSampler(data, cfg.plan, cfg.k)
    samples = sampler.sample(np.random.default_rng(0), 2)
    before = [r.bit_generator.state for r in state.worker_rngs]
    a, _ = train_step(state, samples, data, cfg)
    assert [r.bit_generator.state for r in state.worker_rngs] == before
    b, _ = train_step(init_state(cfg, _model_cfg()), samples, data, cfg)
    assert flatten(a.params.weights).tobytes() == flatten(b.params.weights).tobytes()


def test_single_cell_plan_equals_full_domain_step(data):
    cfg = _cfg(plan=(1, 1), k=5)
    state = init_state(cfg, _model_cfg())
    mesh = data[0].mesh
    patch = build_patches(mesh, PartitionPlan.for_mesh(mesh, (1, 1)), 5)[0]
    a, ia = train_step(state, [PatchSample(1, 2, patch)], data, cfg)
    b, ib = train_step(init_state(cfg, _model_cfg()), [PatchSample(1, 2, full_patch(mesh))], data, cfg)
    assert ia.loss == ib.loss
    assert flatten(a.params.weights).tobytes() == flatten(b.params.weights).tobytes()


def test_initial_loss_is_about_one():
    traj = synth_trajectory(4, 800, 6)
    params = model(traj, 2, latent=16)
    # fresh decoder output is ~0, so the normalised loss is the normalised target variance
    cfg = _cfg(plan=(1, 1), k=0)
    state = init_state(cfg, _model_cfg())
    state = TrainState(params, np.zeros(params.n_weights()), np.zeros(params.n_weights()), 0,
                       state.worker_rngs, state.sample_rng)
    patch = full_patch(traj.mesh)
    losses = [train_step(state, [PatchSample(0, t, patch)], [traj], cfg)[1].loss for t in range(5)]
    assert np.mean(losses) == pytest.approx(1.0, abs=0.1)


def test_resume_is_bit_identical(data, tmp_path):
    cfg = _cfg(noise_std=None, workers=2, patches_per_worker=1)
    straight = train(init_state(cfg, _model_cfg()), data, cfg, steps=6)
    half = train(init_state(cfg, _model_cfg()), data, cfg, steps=3)
    save_train_state(tmp_path / "s.npz", half, cfg)
    resumed, cfg2 = load_train_state(tmp_path / "s.npz")
    assert cfg2 == cfg
    resumed = train(resumed, data, cfg2, steps=3)
    assert flatten(straight.params.weights).tobytes() == flatten(resumed.params.weights).tobytes()
    assert straight.adam_m.tobytes() == resumed.adam_m.tobytes()
    assert straight.loss_history == resumed.loss_history
    assert straight.params.target_norm.mean.tobytes() == resumed.params.target_norm.mean.tobytes()


def test_non_finite_loss_aborts_without_change(data, caplog):
    cfg = _cfg()
    state = init_state(cfg, _model_cfg())
    bad = state.params.weights["dec.l2.b"].copy()
    bad[0] = np.inf
    state = TrainState(state.params.replace(weights={**state.params.weights, "dec.l2.b": bad}),
                       state.adam_m, state.adam_v, 0, state.worker_rngs, state.sample_rng)
    samples = PatchSampler(data, cfg.plan, cfg.k).sample(np.random.default_rng(0), 1)
    new, info = train_step(state, samples, data, cfg)
    assert info.aborted and new is state and new.step == 0
    assert len(state.incidents) == 1 and "aborted" in caplog.text


def test_worker_accumulation_order_is_fixed(data):
    cfg = _cfg(workers=3, patches_per_worker=2, noise_std=None)
    a = train(init_state(cfg, _model_cfg()), data, cfg, steps=2)
    b = train(init_state(cfg, _model_cfg()), data, cfg, steps=2)
    assert flatten(a.params.weights).tobytes() == flatten(b.params.weights).tobytes()


def test_plateau_detection():
    flat = [(i, 1e-3, 1.0) for i in range(20)]
    falling = [(i, 1e-3, 1.0 / (1 + i)) for i in range(20)]
    assert plateaued(flat, 10, 0.01)
    assert not plateaued(falling, 10, 0.01)
    assert not plateaued(flat[:5], 10, 0.01)


@pytest.fixture(scope="module")
def eq_traj():
    return synth_trajectory(11, 600, 3)


def test_equivalence_passes_with_enough_ghosts(eq_traj):
    rep = verify_full_equivalence(model(eq_traj, 2), eq_traj, (2, 2), 4, "h2")
    assert rep.passed and rep.forward_max_abs == 0.0, rep.summary()


def test_equivalence_failure_nodes_match_bfs(eq_traj):
    m, k = 3, 2
    rep = verify_full_equivalence(model(eq_traj, m), eq_traj, (2, 2), k, "fe")
    assert not rep.forward_pass
    mesh = eq_traj.mesh
    expected = set()
    for p in build_patches(mesh, PartitionPlan.for_mesh(mesh, (2, 2)), k):
        inside = np.zeros(mesh.n_nodes, bool)
        inside[p.nodes] = True
        dist = hop_distance(mesh.n_nodes, mesh.senders, mesh.receivers, np.flatnonzero(~inside))
        near = (dist[p.subdomain] >= 0) & (dist[p.subdomain] <= m)
        expected |= set(p.subdomain[near].tolist())
    assert set(rep.failing_nodes.tolist()) == expected


def test_evaluate_is_deterministic(data):
    params = model(data[0], 1)
    a = evaluate(params, data, "fe", n_samples=5, seed=1)
    b = evaluate(params, data, "fe", n_samples=5, seed=1)
    assert a.as_dict() == b.as_dict()
    assert set(a.as_dict()) == {"rmse_0", "rmse_1", "rmse_2", "normalized_mse", "relative_mse"}
