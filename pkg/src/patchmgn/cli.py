"""Command-line entry point: ``patchmgn <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
Options can also come from a JSON file given with ``--config``; keys are the
long option names with dashes replaced by underscores, and explicit flags
win over the file.  Every run writes ``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .delaunay import DegenerateMeshError
from .integrators import ExponentialDecay, IntegratorKind, LinearOscillator, verify_order
from .mesh import MeshInvariantError, UnknownBoundaryIndexError
from .normalizer import update_normalizer
from .partition import (
    PartitionPlan,
    assign_subdomains,
    build_patches,
    measure_patch_growth,
    parse_counts,
    write_growth_csv,
)
from .rollout import RolloutConfigError, rollout_full, rollout_patched, write_rollout_csv
from .surrogate import CheckpointError, SurrogateConfig, init_params, load_checkpoint, save_checkpoint
from .synth import SynthParameterError, synth_dataset, synth_mesh_3d, synth_trajectory
from .trainer import (
    TrainConfig,
    evaluate,
    init_state,
    load_train_state,
    save_train_state,
    train,
    verify_full_equivalence,
)
from .trajio import TrajectoryFormatError, ingest_csv, read_trajectory, write_trajectory

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
DATA_ERRORS = (
    TrajectoryFormatError,
    MeshInvariantError,
    UnknownBoundaryIndexError,
    DegenerateMeshError,
    SynthParameterError,
    CheckpointError,
    RolloutConfigError,
    FileNotFoundError,
    IsADirectoryError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -------------------------------------------------------------------

def _write_manifest(out_dir: Path, command: str, config: dict) -> None:
    canonical = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "config": json.loads(canonical),
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": config.get("seed"),
        "versions": {
            "patchmgn": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path) -> list:
    p = Path(path)
    files = sorted(p.glob("*.mgtraj")) if p.is_dir() else [p]
    if not files:
        raise FileNotFoundError(f"no .mgtraj files in {p}")
    trajs = [read_trajectory(f) for f in files]
    # share a single Mesh object between trajectories on identical meshes
    meshes = []
    for i, tr in enumerate(trajs):
        for m in meshes:
            if m.same_as(tr.mesh):
                tr.mesh = m
                break
        else:
            meshes.append(tr.mesh)
    return trajs


def _model_config(a, dim) -> SurrogateConfig:
    latent = a.latent_dim if a.latent_dim is not None else (128 if dim == 2 else 150)
    return SurrogateConfig(dim=dim, mp_steps=a.mp_steps, latent_dim=latent, dtype=a.dtype)


def _fit_normalizers(params, trajs):
    """Single-pass statistics over every frame, then frozen."""
    nodes, edges, targets = [], [], []
    for tr in trajs:
        nodes.append(np.concatenate([tr.fields[:-1].reshape(-1, tr.fields.shape[2]),
                                     np.tile(tr.mesh.static_features, (tr.n_frames - 1, 1))], axis=1))
        edges.append(tr.mesh.edge_features)
        targets.append((tr.fields[1:] - tr.fields[:-1]).reshape(-1, tr.fields.shape[2]))
    return params.replace(
        node_norm=update_normalizer(params.node_norm, np.concatenate(nodes)).freeze(),
        edge_norm=update_normalizer(params.edge_norm, np.concatenate(edges)).freeze(),
        target_norm=update_normalizer(params.target_norm, np.concatenate(targets)).freeze(),
    )


# -- subcommands ---------------------------------------------------------------

def cmd_synth(a):
    out = _out_dir(a.out)
    trajs = synth_dataset(a.seed, a.nodes, a.trajectories, a.frames)
    for tr in trajs:
        write_trajectory(tr, out / f"traj_{tr.sim_id:04d}.mgtraj")
    print(f"wrote {len(trajs)} trajectories of {a.nodes} nodes to {out}")
    return EXIT_OK


def cmd_ingest(a):
    traj = ingest_csv(a.nodes, a.frames, a.h, a.sim_id, a.inlet_velocity)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectory(traj, out)
    print(f"wrote {traj} to {out}")
    return EXIT_OK


def cmd_partition(a):
    out = _out_dir(a.out)
    mesh = _load_dataset(a.data)[0].mesh
    plan = PartitionPlan.for_mesh(mesh, parse_counts(a.plan))
    assignment = assign_subdomains(mesh, plan)
    patches = {p.subdomain_id: p for p in build_patches(mesh, plan, a.k)}
    with open(out / "partition.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subdomain", "subdomain_nodes", "ghost_nodes", "patch_nodes", "patch_arcs"])
        for sid in range(plan.n_subdomains):
            p = patches.get(sid)
            if p is None:
                w.writerow([sid, 0, 0, 0, 0])
            else:
                w.writerow([sid, p.n_subdomain, len(p.ghosts), p.n_nodes, p.graph.n_arcs])
    np.save(out / "assignment.npy", assignment)
    print(f"{len(patches)} non-empty of {plan.n_subdomains} subdomains")
    return EXIT_OK


def cmd_train(a):
    out = _out_dir(a.out)
    trajs = _load_dataset(a.data)
    cfg = TrainConfig(
        max_steps=a.steps,
        workers=a.workers,
        patches_per_worker=a.patches_per_worker,
        integrator=a.integrator,
        k=a.k,
        plan=parse_counts(a.plan),
        seed=a.seed,
        lr_start=a.lr_start,
        lr_end=a.lr_end,
        decay_horizon=a.decay_horizon,
        loss_mask=a.loss_mask,
        **({"noise_std": tuple(a.noise_std)} if a.noise_std is not None else {}),
    )
    ckpt = out / "checkpoint.npz"
    if a.resume:
        state, cfg = load_train_state(a.resume)
        cfg = TrainConfig(**{**cfg.__dict__, "max_steps": a.steps})
    else:
        state = init_state(cfg, _model_config(a, trajs[0].mesh.dim))
    remaining = max(0, cfg.max_steps - state.step)
    state = train(state, trajs, cfg, steps=remaining)
    save_train_state(ckpt, state, cfg)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "train_mse"])
        for s, lr, loss in state.loss_history:
            w.writerow([s, repr(lr), repr(loss)])
    print(f"trained to step {state.step}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_evaluate(a):
    out = _out_dir(a.out)
    params, *_ = load_checkpoint(a.checkpoint)
    m = evaluate(params, _load_dataset(a.data), IntegratorKind.parse(a.integrator), a.samples, a.seed)
    (out / "metrics.json").write_text(json.dumps(m.as_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(m.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_rollout(a):
    out = _out_dir(a.out)
    params, *_ = load_checkpoint(a.checkpoint)
    traj = _load_dataset(a.data)[0]
    kind = IntegratorKind.parse(a.integrator)
    if a.plan:
        res = rollout_patched(params, kind, traj, parse_counts(a.plan), a.k, a.steps)
    else:
        res = rollout_full(params, kind, traj, a.steps)
    write_rollout_csv(res, out / "rollout.csv")
    np.save(out / "frames.npy", res.frames)
    print(f"{res.n_steps} steps; divergence step: {res.divergence_step}")
    return EXIT_OK


def _verification_problem(seed, nodes, m, dtype="float64", latent=32):
    traj = synth_trajectory(seed, nodes, 3)
    params = init_params(np.random.default_rng([seed, 7]), SurrogateConfig(dim=2, mp_steps=m, latent_dim=latent, dtype=dtype))
    return traj, _fit_normalizers(params, [traj])


def cmd_verify(a):
    traj, params = _verification_problem(a.seed, a.nodes, a.m)
    report = verify_full_equivalence(params, traj, parse_counts(a.plan), a.k, IntegratorKind.parse(a.integrator))
    out = _out_dir(a.out) if a.out else None
    if out is not None:
        (out / "verify.json").write_text(json.dumps({
            "passed": report.passed,
            "forward_max_abs": report.forward_max_abs,
            "failing_nodes": report.failing_nodes.tolist(),
            "grad_rel_l2": report.grad_rel_l2,
        }, indent=2) + "\n")
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_ode_order(a):
    kind = IntegratorKind.parse(a.kind)
    rhs, y0 = (ExponentialDecay(-1.0), np.array([1.0])) if a.rhs == "exp" else (LinearOscillator(1.0), np.array([1.0, 0.0]))
    fit = verify_order(kind, rhs, y0)
    expected = kind.stages + 1
    lines = ["kind,h,error"] + [f"{kind.value},{float(h)!r},{float(e)!r}" for h, e in zip(fit.h, fit.error)]
    text = "\n".join(lines) + "\n"
    if a.out:
        out = _out_dir(a.out)
        (out / "ode_order.csv").write_text(text)
    else:
        sys.stdout.write(text)
    ok = abs(fit.slope - expected) <= 0.1 * expected
    print(f"fitted slope {fit.slope:.4f} (expected {expected} +/- {0.1 * expected:.1f})", file=sys.stderr)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_patch_growth(a):
    if a.data:
        mesh = _load_dataset(a.data)[0].mesh
    else:
        mesh = synth_mesh_3d(a.seed, a.nodes)
    plan = PartitionPlan.for_mesh(mesh, parse_counts(a.plan) if a.plan else (4,) * mesh.dim)
    rows = measure_patch_growth(mesh, plan, range(0, a.kmax + 1))
    out = _out_dir(a.out)
    write_growth_csv(rows, out / "patch_growth.csv")
    for k, mean, mx in rows:
        print(f"k={k}: mean {mean:.1f}, max {mx}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="patchmgn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", help="JSON file of option values")
        sp.add_argument("--seed", type=int, default=0)
        return sp

    s = add("synth", cmd_synth, "generate the synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--nodes", type=int, default=2000)
    s.add_argument("--trajectories", type=int, default=40)
    s.add_argument("--frames", type=int, default=30)

    s = add("ingest", cmd_ingest, "convert CSV tables into a trajectory file")
    s.add_argument("--nodes", required=True, help="node table CSV")
    s.add_argument("--frames", required=True, nargs="+", help="per-frame field CSVs, in time order")
    s.add_argument("--h", type=float, required=True)
    s.add_argument("--sim-id", type=int, default=0)
    s.add_argument("--inlet-velocity", type=float, default=0.0)
    s.add_argument("--out", required=True)

    s = add("partition", cmd_partition, "partition a mesh and report patch sizes")
    s.add_argument("--data", required=True)
    s.add_argument("--plan", default="3x4")
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--out", required=True)

    s = add("train", cmd_train, "patch-train a surrogate")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=400_000)
    s.add_argument("--integrator", default="fe", choices=["fe", "h2", "h3"])
    s.add_argument("--mp-steps", type=int, default=15)
    s.add_argument("--latent-dim", type=int)
    s.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--plan", default="3x4")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--patches-per-worker", type=int, default=1)
    s.add_argument("--lr-start", type=float, default=1e-3)
    s.add_argument("--lr-end", type=float, default=1e-7)
    s.add_argument("--decay-horizon", type=int, default=4_000_000)
    s.add_argument("--noise-std", type=float, nargs="+")
    s.add_argument("--loss-mask", default="all", choices=["all", "fluid"])
    s.add_argument("--resume", help="checkpoint to continue from")

    s = add("evaluate", cmd_evaluate, "next-step errors of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--integrator", default="fe", choices=["fe", "h2", "h3"])
    s.add_argument("--samples", type=int)
    s.add_argument("--out", required=True)

    s = add("rollout", cmd_rollout, "autoregressive rollout of one trajectory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--integrator", default="fe", choices=["fe", "h2", "h3"])
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--plan", help="run patched with this plan, e.g. 2x2")
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--out", required=True)

    s = add("verify", cmd_verify, "check patched against full-domain execution")
    s.add_argument("--m", type=int, default=3)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--integrator", default="fe", choices=["fe", "h2", "h3"])
    s.add_argument("--plan", default="2x2")
    s.add_argument("--nodes", type=int, default=2000)
    s.add_argument("--out")

    s = add("ode-order", cmd_ode_order, "fit local error order on an analytic ODE")
    s.add_argument("--kind", default="fe", choices=["fe", "h2", "h3"])
    s.add_argument("--rhs", default="exp", choices=["exp", "osc"])
    s.add_argument("--out")

    s = add("patch-growth", cmd_patch_growth, "mean patch size against ghost width")
    s.add_argument("--data", help="trajectory file or directory (default: synthetic 3D mesh)")
    s.add_argument("--nodes", type=int, default=5000)
    s.add_argument("--plan")
    s.add_argument("--kmax", type=int, default=6)
    s.add_argument("--out", required=True)
    return p


def _apply_config(parser, sp_args, argv):
    """Fill options from ``--config`` unless given explicitly on the command line."""
    if not sp_args.config:
        return sp_args
    try:
        cfg = json.loads(Path(sp_args.config).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise UsageError(f"bad config file: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    explicit = {tok.split("=", 1)[0][2:].replace("-", "_") for tok in argv if tok.startswith("--")}
    known = vars(sp_args)
    for key, value in cfg.items():
        if key not in known or key in ("func", "command", "config"):
            raise UsageError(f"unknown config key {key!r}")
        if key not in explicit:
            setattr(sp_args, key, value)
    return sp_args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(parser, args, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    try:
        code = args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # bad option values that only surface once parsed (plans, dimensions, ...)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = getattr(args, "out", None)
    if out and Path(out).suffix == "":
        _write_manifest(_out_dir(out), args.command, config)
    elif out:
        _write_manifest(Path(out).parent, args.command, config)
    return code


if __name__ == "__main__":
    sys.exit(main())
