"""Named training experiments on the synthetic advection-diffusion dataset.

Each preset trains one or more model variants per seed and records
``(variant, seed, step, lr, train_mse, val_*)`` rows.  Validation uses
full-domain next-step predictions on trajectories whose inlet velocities
were held out of training.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .mesh import Trajectory, submesh
from .surrogate import SurrogateConfig
from .synth import synth_dataset, split_by_inlet_velocity
from .trainer import TrainConfig, evaluate, init_state, train_step
from .partition import PatchSampler


@dataclass(frozen=True)
class Variant:
    name: str
    integrator: str = "fe"
    mp_steps: int = 3
    plan: tuple = (3, 4)
    left_fraction: float | None = None  # train on nodes with x <= lo + fraction * width


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    variants: tuple
    seeds: tuple = (0, 1, 2, 3, 4)
    steps: int = 20_000
    eval_every: int = 5_000
    eval_samples: int = 96
    data_seed: int = 0
    n_nodes: int = 2000
    n_trajectories: int = 40
    n_frames: int = 30
    h: float = 0.05  # frame interval of the synthetic data
    latent_dim: int = 16
    k: int = 3
    patches_per_step: int = 1
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    noise_std: tuple = (0.02, 0.03, 0.005)
    normalizer_freeze_after: int = 10_000


PRESETS = {
    "integrators": ExperimentSpec(
        "integrators",
        (Variant("fe_m3", "fe", 3, (2, 2)), Variant("h2_m3", "h2", 3, (2, 2)), Variant("fe_m6", "fe", 6, (2, 2))),
    ),
    "integrators_h3": ExperimentSpec(
        "integrators_h3",
        (
            Variant("fe_m3", "fe", 3, (2, 2)),
            Variant("h2_m3", "h2", 3, (2, 2)),
            Variant("h3_m3", "h3", 3, (2, 2)),
            Variant("fe_m6", "fe", 6, (2, 2)),
        ),
    ),
    "subdomain_gap": ExperimentSpec(
        "subdomain_gap",
        (Variant("full", "fe", 3, (3, 4)), Variant("left_third", "fe", 3, (1, 4), 1.0 / 3.0)),
    ),
    "parity": ExperimentSpec(
        "parity",
        (Variant("patched", "fe", 3, (2, 2)), Variant("full", "fe", 3, (1, 1))),
        seeds=(0,),
        steps=200,
        eval_every=100,
    ),
}


def left_part(trajs, fraction: float):
    """Restrict trajectories (sharing one mesh) to nodes in the left ``fraction`` of the x extent."""
    mesh = trajs[0].mesh
    lo, hi = mesh.bounding_box()
    x = mesh.positions[:, 0].astype(np.float64)
    sub, kept = submesh(mesh, np.flatnonzero(x <= lo[0] + fraction * (hi[0] - lo[0])))
    return [
        Trajectory(
            sub,
            tr.momentum[:, kept],
            tr.volume_fraction[:, kept],
            tr.h,
            tr.sim_id,
            tr.inlet_velocity,
            pressure=None if tr.pressure is None else tr.pressure[:, kept],
        )
        for tr in trajs
    ]


@dataclass
class RunResult:
    variant: str
    seed: int
    rows: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    seconds: float = 0.0


def run_variant(preset: ExperimentSpec, variant: Variant, seed: int, train, val, log=None) -> RunResult:
    model = SurrogateConfig(
        dim=train[0].mesh.dim,
        mp_steps=variant.mp_steps,
        latent_dim=preset.latent_dim,
        normalizer_freeze_after=preset.normalizer_freeze_after,
    )
    cfg = TrainConfig(
        lr_start=preset.lr_start,
        lr_end=preset.lr_end,
        decay_horizon=preset.steps,
        max_steps=preset.steps,
        noise_std=preset.noise_std,
        patches_per_worker=preset.patches_per_step,
        integrator=variant.integrator,
        k=preset.k,
        plan=variant.plan,
        seed=seed,
    )
    data = left_part(train, variant.left_fraction) if variant.left_fraction else train
    state = init_state(cfg, model)
    sampler = PatchSampler(data, cfg.plan, cfg.k)
    result = RunResult(variant.name, seed)
    t0 = time.time()
    window = []
    for i in range(preset.steps):
        state, info = train_step(state, sampler.sample(state.sample_rng, cfg.batch_size), data, cfg)
        if not info.aborted:
            window.append(info.loss)
        done = state.step
        if done % preset.eval_every == 0 or done == preset.steps:
            m = evaluate(state.params, val, cfg.kind, preset.eval_samples, seed=preset.data_seed)
            row = {
                "variant": variant.name,
                "seed": seed,
                "step": done,
                "lr": info.lr,
                "train_mse": float(np.mean(window)) if window else float("nan"),
                **{f"val_{k}": v for k, v in m.as_dict().items()},
            }
            window = []
            result.rows.append(row)
            if log:
                log(row)
    result.final = result.rows[-1]
    result.seconds = time.time() - t0
    return result


def run_experiment(preset: ExperimentSpec | str, out_csv=None, log=None, **overrides) -> list:
    """Train every (variant, seed) of a preset; optionally write all rows as CSV."""
    if isinstance(preset, str):
        preset = PRESETS[preset]
    if overrides:
        preset = replace(preset, **overrides)
    trajs = synth_dataset(preset.data_seed, preset.n_nodes, preset.n_trajectories, preset.n_frames, h=preset.h)
    train, val = split_by_inlet_velocity(trajs)
    results = []
    for seed in preset.seeds:
        for v in preset.variants:
            results.append(run_variant(preset, v, seed, train, val, log))
    if out_csv is not None:
        write_rows(out_csv, [r for res in results for r in res.rows])
    return results


def write_rows(path, rows) -> None:
    if not rows:
        return
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
