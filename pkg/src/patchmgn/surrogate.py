"""Encoder-processor-decoder message-passing surrogate.

The network maps a per-node field state (momentum components and liquid
volume fraction) plus static node and edge inputs to a per-node state delta
in raw units.  Node inputs are ``[momentum, volume_fraction, contact_angle,
one-hot node type]``; edge inputs are ``[displacement, length]``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .mesh import N_NODE_TYPES, Mesh
from .normalizer import Normalizer

CHECKPOINT_VERSION = 1


class NonFiniteInputError(ValueError):
    pass


@dataclass(frozen=True)
class SurrogateConfig:
    dim: int = 2
    mp_steps: int = 15
    latent_dim: int = 128
    mlp_hidden_layers: int = 2
    activation: str = "relu"
    dtype: str = "float32"
    decoder_output_gain: float = 0.01
    normalizer_freeze_after: int = 10_000
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.mp_steps < 0:
            raise ValueError("mp_steps must be >= 0")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        np.dtype(self.dtype)

    @property
    def field_dim(self) -> int:
        return self.dim + 1

    @property
    def static_dim(self) -> int:
        return 1 + N_NODE_TYPES

    @property
    def node_in_dim(self) -> int:
        return self.field_dim + self.static_dim

    @property
    def edge_in_dim(self) -> int:
        return self.dim + 1


def _incidence(index: np.ndarray, n_rows: int, dtype) -> sp.csr_matrix:
    # row r lists the positions of ``index == r`` in ascending order
    counts = np.bincount(index, minlength=n_rows)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    cols = np.argsort(index, kind="stable").astype(np.int64)
    data = np.ones(len(index), dtype=dtype)
    return sp.csr_matrix((data, cols, indptr), shape=(n_rows, len(index)))


class Graph:
    """Arc list plus the ordered aggregation operators used by message passing."""

    def __init__(self, n_nodes: int, senders, receivers):
        self.n_nodes = int(n_nodes)
        self.senders = np.ascontiguousarray(senders, dtype=np.int64)
        self.receivers = np.ascontiguousarray(receivers, dtype=np.int64)
        self._ops: dict = {}

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "Graph":
        return cls(mesh.n_nodes, mesh.senders, mesh.receivers)

    @property
    def n_arcs(self) -> int:
        return len(self.senders)

    def operators(self, dtype) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        key = np.dtype(dtype).str
        if key not in self._ops:
            self._ops[key] = (
                _incidence(self.receivers, self.n_nodes, dtype),
                _incidence(self.senders, self.n_nodes, dtype),
            )
        return self._ops[key]


def _mlp_layout(prefix, inputs, latent, hidden, out, ln):
    """Ordered (name, shape, fan_in) for an MLP whose first layer is split by input block."""
    fan_in = sum(d for _, d in inputs)
    widths = [latent] * hidden + [out]
    shapes = []
    for name, d in inputs:
        shapes.append((f"{prefix}.l0.{name}", (d, widths[0]), fan_in))
    shapes.append((f"{prefix}.l0.b", (widths[0],), fan_in))
    for i in range(1, len(widths)):
        shapes.append((f"{prefix}.l{i}.w", (widths[i - 1], widths[i]), widths[i - 1]))
        shapes.append((f"{prefix}.l{i}.b", (widths[i],), widths[i - 1]))
    if ln:
        shapes.append((f"{prefix}.ln.g", (out,), None))
        shapes.append((f"{prefix}.ln.b", (out,), None))
    return shapes


def param_layout(cfg: SurrogateConfig):
    L, H = cfg.latent_dim, cfg.mlp_hidden_layers
    layout = []
    layout += _mlp_layout("enc_node", [("w_field", cfg.field_dim), ("w_static", cfg.static_dim)], L, H, L, True)
    layout += _mlp_layout("enc_edge", [("w", cfg.edge_in_dim)], L, H, L, True)
    for i in range(cfg.mp_steps):
        layout += _mlp_layout(f"proc{i}.edge", [("w_edge", L), ("w_send", L), ("w_recv", L)], L, H, L, True)
        layout += _mlp_layout(f"proc{i}.node", [("w_node", L), ("w_agg", L)], L, H, L, True)
    layout += _mlp_layout("dec", [("w", L)], L, H, cfg.field_dim, False)
    return layout


Gradients = dict


@dataclass(frozen=True, eq=False)
class SurrogateParams:
    config: SurrogateConfig
    weights: dict
    node_norm: Normalizer
    edge_norm: Normalizer
    target_norm: Normalizer

    def replace(self, **kw) -> "SurrogateParams":
        return replace(self, **kw)

    def n_weights(self) -> int:
        return sum(w.size for w in self.weights.values())


def init_params(rng, config: SurrogateConfig) -> SurrogateParams:
    """Uniform fan-in scaled initialisation; layer-norm gains start at one."""
    rng = np.random.default_rng(rng)
    dtype = np.dtype(config.dtype)
    weights = {}
    last = f"dec.l{config.mlp_hidden_layers}."
    for name, shape, fan_in in param_layout(config):
        if name.endswith(".ln.g"):
            w = np.ones(shape)
        elif name.endswith(".ln.b"):
            w = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=shape)
            if name.startswith(last):
                w = w * config.decoder_output_gain
        weights[name] = w.astype(dtype)
    k = config.normalizer_freeze_after
    return SurrogateParams(
        config,
        weights,
        Normalizer.empty(config.node_in_dim, k),
        Normalizer.empty(config.edge_in_dim, k),
        Normalizer.empty(config.field_dim, k),
    )


def zeros_like_weights(params: SurrogateParams) -> Gradients:
    return {k: np.zeros_like(v) for k, v in params.weights.items()}


def add_gradients(a: Gradients, b: Gradients) -> Gradients:
    return {k: a[k] + b[k] for k in a}


def flatten(grads: Gradients) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in sorted(grads)])


def node_inputs(fields: np.ndarray, static: np.ndarray) -> np.ndarray:
    return np.concatenate([fields, static], axis=1)


class SurrogateNet:
    """The surrogate bound to one graph: a callable from field state to state delta.

    Calling it with an ndarray returns an ndarray.  Calling it with an
    :class:`autodiff.Var` records the computation so gradients can flow to
    the weights (when ``track=True``) and to the input state.
    """

    def __init__(self, params: SurrogateParams, graph: Graph, static_features, edge_features, *, track=False):
        cfg = params.config
        self.params = params
        self.config = cfg
        self.graph = graph
        self.dtype = np.dtype(cfg.dtype)
        dt = self.dtype
        c = cfg.field_dim
        static = np.asarray(static_features, dtype=np.float64)
        edges = np.asarray(edge_features, dtype=np.float64)
        if static.shape != (graph.n_nodes, cfg.static_dim):
            raise ValueError(f"static features must be ({graph.n_nodes}, {cfg.static_dim})")
        if edges.shape != (graph.n_arcs, cfg.edge_in_dim):
            raise ValueError(f"edge features must be ({graph.n_arcs}, {cfg.edge_in_dim})")
        if not (np.all(np.isfinite(static)) and np.all(np.isfinite(edges))):
            raise NonFiniteInputError("non-finite static or edge input")
        nn = params.node_norm
        self._field_mean = nn.mean[:c].astype(dt)
        self._field_std = nn.std[:c].astype(dt)
        self._static = ((static - nn.mean[c:]) / nn.std[c:]).astype(dt)
        self._edges = ((edges - params.edge_norm.mean) / params.edge_norm.std).astype(dt)
        self._target_mean = params.target_norm.mean.astype(dt)
        self._target_std = params.target_norm.std.astype(dt)
        self.track = track
        make = ad.param if track else ad.const
        self.pv = {k: make(v) for k, v in params.weights.items()}

    def __call__(self, y):
        if isinstance(y, ad.Var):
            if y.value.dtype != self.dtype:
                raise TypeError(f"state dtype {y.value.dtype} differs from model dtype {self.dtype}")
            self._check(y.value)
            return self.apply(y)
        y = np.asarray(y, dtype=self.dtype)
        self._check(y)
        return self.apply(ad.const(y)).value

    def _check(self, y):
        if y.shape != (self.graph.n_nodes, self.config.field_dim):
            raise ValueError(f"state must be ({self.graph.n_nodes}, {self.config.field_dim}), got {y.shape}")
        if not np.all(np.isfinite(y)):
            raise NonFiniteInputError("non-finite field input")

    def _mlp_tail(self, prefix, t, ln):
        p = self.pv
        layers = []
        i = 1
        while f"{prefix}.l{i}.w" in p:
            layers.append((p[f"{prefix}.l{i}.w"], p[f"{prefix}.l{i}.b"]))
            i += 1
        norm = (p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"]) if ln else None
        return ad.mlp_tail(t, layers, norm, self.config.layer_norm_eps)

    def apply(self, y: ad.Var) -> ad.Var:
        p = self.pv
        agg, send_scatter = self.graph.operators(self.dtype)
        senders, receivers = self.graph.senders, self.graph.receivers

        x = ad.standardize(y, self._field_mean, self._field_std)
        t = ad.affine_sum(
            [(x, p["enc_node.l0.w_field"], None, None), (self._static, p["enc_node.l0.w_static"], None, None)],
            p["enc_node.l0.b"],
        )
        v = self._mlp_tail("enc_node", t, True)
        t = ad.affine_sum([(self._edges, p["enc_edge.l0.w"], None, None)], p["enc_edge.l0.b"])
        e = self._mlp_tail("enc_edge", t, True)

        for i in range(self.config.mp_steps):
            pe, pn = f"proc{i}.edge", f"proc{i}.node"
            t = ad.affine_sum(
                [
                    (e, p[f"{pe}.l0.w_edge"], None, None),
                    (v, p[f"{pe}.l0.w_send"], senders, send_scatter),
                    (v, p[f"{pe}.l0.w_recv"], receivers, agg),
                ],
                p[f"{pe}.l0.b"],
            )
            e = ad.add(e, self._mlp_tail(pe, t, True))
            incoming = ad.segment_sum(e, agg, receivers)
            t = ad.affine_sum(
                [(v, p[f"{pn}.l0.w_node"], None, None), (incoming, p[f"{pn}.l0.w_agg"], None, None)],
                p[f"{pn}.l0.b"],
            )
            v = ad.add(v, self._mlp_tail(pn, t, True))

        t = ad.affine_sum([(v, p["dec.l0.w"], None, None)], p["dec.l0.b"])
        out = self._mlp_tail("dec", t, False)
        return ad.destandardize(out, self._target_mean, self._target_std)

    def zero_grad(self) -> None:
        for v in self.pv.values():
            v.grad = None

    def gradients(self) -> Gradients:
        return {
            k: (np.zeros_like(v.value) if v.grad is None else v.grad) for k, v in self.pv.items()
        }

    def normalized_delta(self, delta):
        """Raw delta -> normalised target units (differentiable for Vars)."""
        return ad.standardize(delta, self._target_mean, self._target_std)


def _split(params, node_features):
    c = params.config.field_dim
    nf = np.asarray(node_features, dtype=np.float64)
    if not np.all(np.isfinite(nf)):
        raise NonFiniteInputError("non-finite node input")
    return nf[:, :c], nf[:, c:]


def forward(params: SurrogateParams, graph: Graph, node_features, edge_features) -> np.ndarray:
    """Per-node deltas in raw units for one graph."""
    fields, static = _split(params, node_features)
    return SurrogateNet(params, graph, static, edge_features)(fields)


def backward(params: SurrogateParams, graph: Graph, node_features, edge_features, upstream) -> Gradients:
    """Weight gradients of ``sum(forward(...) * upstream)``."""
    fields, static = _split(params, node_features)
    net = SurrogateNet(params, graph, static, edge_features, track=True)
    out = net(ad.const(fields.astype(net.dtype)))
    ad.backward(out, np.asarray(upstream, dtype=net.dtype))
    return net.gradients()


# -- checkpoints -----------------------------------------------------------

def _norm_meta(n: Normalizer) -> dict:
    return {"count": n.count, "updates": n.updates, "freeze_after": n.freeze_after}


def params_to_arrays(params: SurrogateParams) -> tuple[dict, dict]:
    arrays = {f"w/{k}": v for k, v in params.weights.items()}
    meta = {"config": asdict(params.config), "weights": list(params.weights), "norms": {}}
    for which in ("node_norm", "edge_norm", "target_norm"):
        n = getattr(params, which)
        arrays[f"norm/{which}/mean"] = n.mean
        arrays[f"norm/{which}/m2"] = n.m2
        meta["norms"][which] = _norm_meta(n)
    return arrays, meta


def params_from_arrays(arrays, meta) -> SurrogateParams:
    cfg = SurrogateConfig(**meta["config"])
    weights = {k: np.array(arrays[f"w/{k}"]) for k in meta["weights"]}
    norms = {}
    for which, m in meta["norms"].items():
        norms[which] = Normalizer(
            m["count"],
            np.array(arrays[f"norm/{which}/mean"]),
            np.array(arrays[f"norm/{which}/m2"]),
            m["updates"],
            m["freeze_after"],
        )
    return SurrogateParams(cfg, weights, **norms)


def save_checkpoint(path, params: SurrogateParams, *, arrays=None, meta=None, rng_state=None) -> None:
    """Versioned ``.npz`` checkpoint; every array and scalar round-trips bit-exactly."""
    arr, pmeta = params_to_arrays(params)
    arr.update(arrays or {})
    full_meta = {"version": CHECKPOINT_VERSION, "params": pmeta, "extra": meta or {}, "rng": rng_state}
    blob = np.frombuffer(json.dumps(full_meta).encode(), dtype=np.uint8)
    with open(Path(path), "wb") as fh:
        np.savez(fh, __meta__=blob, **arr)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Returns ``(params, extra_arrays, extra_meta, rng_state)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        if "__meta__" not in z:
            raise CheckpointError("missing checkpoint metadata")
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    params = params_from_arrays(arrays, meta["params"])
    extra = {k: v for k, v in arrays.items() if not (k.startswith("w/") or k.startswith("norm/"))}
    return params, extra, meta["extra"], meta["rng"]
