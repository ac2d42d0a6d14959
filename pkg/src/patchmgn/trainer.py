"""Patch training: masked loss, in-process workers, Adam and the equivalence verifier."""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .integrators import IntegratorKind, StageNonFiniteError, step
from .mesh import Mesh, NodeType, Trajectory
from .normalizer import update_normalizer
from .partition import PartitionPlan, Patch, PatchSampler, build_patch, build_patches
from .surrogate import (
    NonFiniteInputError,
    SurrogateConfig,
    SurrogateNet,
    SurrogateParams,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


def default_noise(dim: int) -> tuple:
    # horizontal momentum components, vertical (last axis) component, volume fraction
    return (0.02,) * (dim - 1) + (0.03, 0.05)


@dataclass(frozen=True)
class TrainConfig:
    lr_start: float = 1e-3
    lr_end: float = 1e-7
    decay_horizon: int = 4_000_000
    max_steps: int = 400_000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    noise_std: tuple | None = None  # None -> default_noise(dim)
    workers: int = 1
    patches_per_worker: int = 1
    integrator: str = "fe"
    k: int = 3
    plan: tuple = (3, 4)
    strict_equivalence: bool = False
    loss_mask: str = "all"
    plateau_window: int = 10_000
    plateau_rel: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_end < self.lr_start:
            raise ValueError("need 0 < lr_end < lr_start")
        if self.decay_horizon <= 0:
            raise ValueError("decay_horizon must be positive")
        if self.noise_std is not None and any(s < 0 for s in self.noise_std):
            raise ValueError("noise_std must be >= 0")
        if self.workers < 1 or self.patches_per_worker < 1:
            raise ValueError("workers and patches_per_worker must be >= 1")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.loss_mask not in ("all", "fluid"):
            raise ValueError("loss_mask must be 'all' or 'fluid'")
        IntegratorKind.parse(self.integrator)
        object.__setattr__(self, "plan", tuple(self.plan))
        if self.noise_std is not None:
            object.__setattr__(self, "noise_std", tuple(self.noise_std))

    @property
    def kind(self) -> IntegratorKind:
        return IntegratorKind.parse(self.integrator)

    @property
    def batch_size(self) -> int:
        return self.workers * self.patches_per_worker

    def noise_for(self, dim: int) -> np.ndarray:
        std = default_noise(dim) if self.noise_std is None else self.noise_std
        if len(std) != dim + 1:
            raise ValueError(f"noise_std needs {dim + 1} entries")
        return np.asarray(std, dtype=np.float64)

    def check_ghost_width(self, mp_steps: int) -> None:
        need = self.kind.stages * mp_steps
        if self.k >= need:
            return
        msg = f"ghost width k={self.k} < stages*mp_steps={need}; patch outputs near cell faces are approximate"
        if self.strict_equivalence:
            raise ValueError(msg)
        warnings.warn(msg, stacklevel=2)


def lr_schedule(t, cfg: TrainConfig = TrainConfig()) -> float:
    """Geometric decay from ``lr_start`` to ``lr_end`` over ``decay_horizon`` steps, then flat."""
    if t >= cfg.decay_horizon:
        return cfg.lr_end
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (t / cfg.decay_horizon)


@dataclass(eq=False)
class TrainState:
    params: SurrogateParams
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int
    worker_rngs: list
    sample_rng: np.random.Generator
    loss_history: list = field(default_factory=list)
    incidents: list = field(default_factory=list)


def init_state(config: TrainConfig, model: SurrogateConfig) -> TrainState:
    seq = np.random.SeedSequence(config.seed)
    init_seq, sample_seq, *worker_seqs = seq.spawn(2 + config.workers)
    params = init_params(np.random.default_rng(init_seq), model)
    n = params.n_weights()
    return TrainState(
        params,
        np.zeros(n),
        np.zeros(n),
        0,
        [np.random.default_rng(s) for s in worker_seqs],
        np.random.default_rng(sample_seq),
    )


def adam_update(state: TrainState, grads: dict, config: TrainConfig) -> TrainState:
    """One Adam step; moments are flat float64 vectors in weight-dict order."""
    lr = lr_schedule(state.step, config)
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    names = list(state.params.weights)
    g = np.concatenate([np.asarray(grads[k], dtype=np.float64).ravel() for k in names])
    w = np.concatenate([state.params.weights[k].astype(np.float64).ravel() for k in names])
    m = b1 * state.adam_m + (1.0 - b1) * g
    v = b2 * state.adam_v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    w = w - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    weights, off = {}, 0
    for k in names:
        old = state.params.weights[k]
        weights[k] = w[off : off + old.size].reshape(old.shape).astype(old.dtype)
        off += old.size
    return replace(state, params=state.params.replace(weights=weights), adam_m=m, adam_v=v, step=t)


# -- per-patch loss ------------------------------------------------------------

@dataclass
class PatchExample:
    """One training example restricted to a patch; rows ``loss_rows`` carry the loss."""

    patch: Patch
    static: np.ndarray
    edges: np.ndarray
    state: np.ndarray
    target: np.ndarray
    loss_rows: np.ndarray


def make_example(mesh: Mesh, patch: Patch, y, y_next, loss_mask="all", noise=None) -> PatchExample:
    y = np.asarray(y, dtype=np.float64)
    if noise is not None:
        y = y + noise
    rows = np.arange(patch.n_subdomain)
    if loss_mask == "fluid":
        rows = rows[mesh.node_type[patch.subdomain] == NodeType.FLUID]
    return PatchExample(
        patch,
        patch.static_features(mesh),
        patch.edge_features(mesh),
        y,
        np.asarray(y_next, dtype=np.float64) - y,
        rows,
    )


def example_sse(params: SurrogateParams, kind, ex: PatchExample, *, with_grad=True):
    """Sum of squared normalised-delta errors over ``ex.loss_rows`` and its weight gradients."""
    net = SurrogateNet(params, ex.patch.graph, ex.static, ex.edges, track=with_grad)
    y = ad.const(ex.state.astype(net.dtype))
    delta = step(kind, net, y).delta
    pred = net.normalized_delta(delta)
    target = ((ex.target - params.target_norm.mean) / params.target_norm.std).astype(net.dtype)
    sse = ad.sum_squared_error(pred, target, ex.loss_rows)
    if not with_grad:
        return float(sse.value), None
    ad.backward(sse)
    return float(sse.value), net.gradients()


def _sum_grads(grads_list):
    out = {k: np.array(v, dtype=np.float64) for k, v in grads_list[0].items()}
    for g in grads_list[1:]:
        for k in out:
            out[k] += g[k]
    return out


def _update_normalizers(params: SurrogateParams, examples) -> SurrogateParams:
    nodes, edges, targets = [], [], []
    for ex in examples:
        sub = ex.loss_rows
        nodes.append(np.concatenate([ex.state[sub], ex.static[sub]], axis=1))
        recv = ex.patch.graph.receivers
        edges.append(ex.edges[np.isin(recv, sub)])
        targets.append(ex.target[sub])
    return params.replace(
        node_norm=update_normalizer(params.node_norm, np.concatenate(nodes)),
        edge_norm=update_normalizer(params.edge_norm, np.concatenate(edges)),
        target_norm=update_normalizer(params.target_norm, np.concatenate(targets)),
    )


@dataclass
class StepInfo:
    loss: float
    lr: float
    aborted: bool = False
    reason: str = ""


def train_step(state: TrainState, samples, trajectories, config: TrainConfig):
    """One optimizer update from a batch of patch samples.

    Sample ``i`` is handled by worker ``i % workers``; worker sums are reduced
    in worker-id order.  Returns ``(new_state, StepInfo)``; on a non-finite
    loss the original state is returned untouched.
    """
    kind = config.kind
    lr = lr_schedule(state.step, config)
    workers = [[] for _ in range(config.workers)]
    for i, s in enumerate(samples):
        workers[i % config.workers].append(s)

    examples = []
    for w, batch in enumerate(workers):
        for s in batch:
            traj = trajectories[s.trajectory]
            nodes = s.patch.nodes
            y = traj.fields[s.t][nodes]
            std = config.noise_for(traj.mesh.dim)
            noise = None
            if np.any(std > 0):
                noise = state.worker_rngs[w].normal(size=y.shape) * std
            examples.append((w, make_example(traj.mesh, s.patch, y, traj.fields[s.t + 1][nodes], config.loss_mask, noise)))

    params = _update_normalizers(state.params, [ex for _, ex in examples])
    count = sum(len(ex.loss_rows) for _, ex in examples) * params.config.field_dim
    try:
        per_worker = [[] for _ in range(config.workers)]
        total = 0.0
        for w, ex in examples:
            sse, g = example_sse(params, kind, ex)
            total += sse
            per_worker[w].append(g)
        loss = total / max(count, 1)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite loss")
    except (FloatingPointError, NonFiniteInputError) as exc:
        reason = f"step {state.step}: {exc}"
        log.warning("training step aborted: %s", reason)
        state.incidents.append(reason)
        return state, StepInfo(float("nan"), lr, True, reason)

    grads = _sum_grads([_sum_grads(g) for g in per_worker if g])
    grads = {k: v / max(count, 1) for k, v in grads.items()}
    new = adam_update(replace(state, params=params), grads, config)
    new.loss_history = state.loss_history + [(state.step, lr, loss)]
    return new, StepInfo(loss, lr, False)


def plateaued(history, window: int, rel: float) -> bool:
    """True when the mean loss over the last window improved by less than ``rel`` on the one before."""
    if len(history) < 2 * window:
        return False
    losses = np.array([h[2] for h in history[-2 * window :]])
    prev, last = losses[:window].mean(), losses[window:].mean()
    return (prev - last) < rel * prev


def train(state, trajectories, config: TrainConfig, steps=None, callback=None):
    """Run up to ``steps`` (default ``max_steps``) updates or until the loss plateaus."""
    config.check_ghost_width(state.params.config.mp_steps)
    sampler = PatchSampler(trajectories, config.plan, config.k)
    n = config.max_steps if steps is None else steps
    for _ in range(n):
        samples = sampler.sample(state.sample_rng, config.batch_size)
        state, info = train_step(state, samples, trajectories, config)
        if callback is not None:
            callback(state, info)
        if plateaued(state.loss_history, config.plateau_window, config.plateau_rel):
            break
    return state


# -- checkpoints ---------------------------------------------------------------

def save_train_state(path, state: TrainState, config: TrainConfig) -> None:
    arrays = {"adam/m": state.adam_m, "adam/v": state.adam_v}
    meta = {
        "step": state.step,
        "train_config": asdict(config),
        "loss_history": [list(h) for h in state.loss_history],
        "incidents": list(state.incidents),
    }
    rng = {
        "sample": state.sample_rng.bit_generator.state,
        "workers": [r.bit_generator.state for r in state.worker_rngs],
    }
    save_checkpoint(path, state.params, arrays=arrays, meta=meta, rng_state=rng)


def _rng_from_state(s):
    rng = np.random.default_rng()
    rng.bit_generator.state = s
    return rng


def load_train_state(path):
    params, arrays, meta, rng = load_checkpoint(path)
    state = TrainState(
        params,
        arrays["adam/m"],
        arrays["adam/v"],
        int(meta["step"]),
        [_rng_from_state(s) for s in rng["workers"]],
        _rng_from_state(rng["sample"]),
        [tuple(h) for h in meta["loss_history"]],
        list(meta["incidents"]),
    )
    cfg = meta["train_config"]
    for key in ("plan", "noise_std"):
        if cfg.get(key) is not None:
            cfg[key] = tuple(cfg[key])
    return state, TrainConfig(**cfg)


# -- equivalence verifier ----------------------------------------------------

@dataclass
class EquivalenceReport:
    forward_max_abs: float
    failing_nodes: np.ndarray
    grad_rel_l2: float
    n_patches: int
    tolerance: float = 1e-12

    @property
    def forward_pass(self) -> bool:
        return self.forward_max_abs <= self.tolerance

    @property
    def gradient_pass(self) -> bool:
        return self.grad_rel_l2 <= self.tolerance

    @property
    def passed(self) -> bool:
        return self.forward_pass and self.gradient_pass

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict}: forward max|diff|={self.forward_max_abs:.3e} "
            f"({len(self.failing_nodes)} failing nodes), gradient rel L2={self.grad_rel_l2:.3e}, "
            f"{self.n_patches} patches"
        )


def full_patch(mesh: Mesh) -> Patch:
    return build_patch(mesh, np.arange(mesh.n_nodes), 0)


def verify_full_equivalence(params: SurrogateParams, traj: Trajectory, plan_counts, k: int, kind, t: int = 0) -> EquivalenceReport:
    """Compare patched and full-domain execution on frame ``t`` of ``traj``.

    Every non-empty patch is visited; the loss is masked to subdomain nodes
    and normalised by the total node count, as in strict patch training.
    """
    mesh = traj.mesh
    y, y_next = traj.fields[t], traj.fields[t + 1]
    count = mesh.n_nodes * params.config.field_dim

    fp = full_patch(mesh)
    full_net = SurrogateNet(params, fp.graph, mesh.static_features, mesh.edge_features)
    full_out = step(kind, full_net, y.astype(full_net.dtype)).next
    _, full_grads = example_sse(params, kind, make_example(mesh, fp, y, y_next))

    patches = build_patches(mesh, PartitionPlan.for_mesh(mesh, plan_counts), k)
    diff = np.zeros(mesh.n_nodes)
    grads = []
    for p in patches:
        net = SurrogateNet(params, p.graph, p.static_features(mesh), p.edge_features(mesh))
        out = step(kind, net, y[p.nodes].astype(net.dtype)).next[: p.n_subdomain]
        diff[p.subdomain] = np.abs(out - full_out[p.subdomain]).max(axis=1)
        grads.append(example_sse(params, kind, make_example(mesh, p, y[p.nodes], y_next[p.nodes]))[1])
    acc = _sum_grads(grads)
    num = sum(float(np.sum((acc[k_] / count - full_grads[k_] / count) ** 2)) for k_ in acc)
    den = sum(float(np.sum((full_grads[k_] / count) ** 2)) for k_ in acc)
    rel = float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))
    return EquivalenceReport(float(diff.max()), np.flatnonzero(diff != 0), rel, len(patches))


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalMetrics:
    rmse: np.ndarray  # per channel, raw units
    normalized_mse: float  # in the model's target normalisation
    relative_mse: float  # per-channel MSE over the variance of true deltas, averaged

    def as_dict(self) -> dict:
        out = {f"rmse_{i}": float(v) for i, v in enumerate(self.rmse)}
        out.update(normalized_mse=self.normalized_mse, relative_mse=self.relative_mse)
        return out


def evaluate(params: SurrogateParams, trajectories, kind, n_samples=None, seed: int = 0) -> EvalMetrics:
    """Full-domain next-step errors over ``n_samples`` random (trajectory, frame) pairs (all if None)."""
    pairs = [(i, t) for i, tr in enumerate(trajectories) for t in range(tr.n_frames - 1)]
    if n_samples is not None and n_samples < len(pairs):
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(pairs), size=n_samples, replace=False))
        pairs = [pairs[i] for i in idx]
    nets = {}
    preds, truths = [], []
    for i, t in pairs:
        tr = trajectories[i]
        key = id(tr.mesh)
        if key not in nets:
            g = full_patch(tr.mesh).graph
            nets[key] = SurrogateNet(params, g, tr.mesh.static_features, tr.mesh.edge_features)
        net = nets[key]
        y = tr.fields[t]
        preds.append(np.asarray(step(kind, net, y.astype(net.dtype)).delta, dtype=np.float64))
        truths.append(tr.fields[t + 1] - y)
    pred, truth = np.concatenate(preds), np.concatenate(truths)
    err = pred - truth
    mse = np.mean(err**2, axis=0)
    scale = np.maximum(np.var(truth, axis=0), 1e-30)
    norm_err = err / params.target_norm.std
    return EvalMetrics(np.sqrt(mse), float(np.mean(norm_err**2)), float(np.mean(mse / scale)))
