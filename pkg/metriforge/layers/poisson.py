"""
One round of the recurrent Poisson layer.

encoder -> conductances -> damping/source heads -> K-field solve ->
dissipation and directional scans -> object layer -> decoder -> annealed
softmax feedback into the next round.
"""

from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import sparse

from metriforge.autodiff import tensor as T
from metriforge.autodiff.params import ModelParams
from metriforge.autodiff.tensor import Tensor, TensorLike
from metriforge.errors import DimensionError, UnsupportedError
from metriforge.graph.system import ScreenedSystem
from metriforge.graph.topology import GraphTopology, grid_topology
from metriforge.layers import multigrid
from metriforge.layers.mlp import init_mlp, mlp
from metriforge.layers.parameters import TAU_MAX, TAU_MIN, PoissonLayerParameters
from metriforge.solvers.cg import screened_solve

NORM_EPS = 1e-6

# (row step, col step); a scan along d sums the cells at i - t*d for t >= 1
SCAN_DIRECTIONS: Tuple[Tuple[str, Tuple[int, int]], ...] = (
    ("N", (-1, 0)),
    ("S", (1, 0)),
    ("E", (0, 1)),
    ("W", (0, -1)),
    ("NE", (-1, 1)),
    ("NW", (-1, -1)),
    ("SE", (1, 1)),
    ("SW", (1, -1)),
)


def symmetric_form(W_raw: TensorLike) -> Tensor:
    W_raw = T.as_tensor(W_raw)
    return T.relu((W_raw + T.transpose(W_raw)) * 0.5)


def conductances(h: TensorLike, W_raw: TensorLike, topology: GraphTopology) -> Tensor:
    """
    w_ij = softplus(h_i^T W_sym h_j) for every stored edge.

    Both orientations are evaluated and averaged so that swapping the
    endpoints gives bit-identical conductances.
    """
    h = T.as_tensor(h)
    if h.shape[0] != topology.n_nodes:
        raise DimensionError(f"h has {h.shape[0]} rows for {topology.n_nodes} nodes")
    W_sym = symmetric_form(W_raw)
    h_i = T.gather(h, topology.heads)
    h_j = T.gather(h, topology.tails)
    forward = T.tsum((h_i @ W_sym) * h_j, axis=1)
    backward = T.tsum((h_j @ W_sym) * h_i, axis=1)
    return T.softplus((forward + backward) * 0.5)


def edge_dissipation(topology: GraphTopology, w: TensorLike, psi: TensorLike) -> Tensor:
    """D_k(i) = sum over neighbours j of w_ij (psi_k(i) - psi_k(j))^2."""
    psi = T.as_tensor(psi)
    squeeze = psi.ndim == 1
    if squeeze:
        psi = psi.reshape(-1, 1)
    diff = T.gather(psi, topology.heads) - T.gather(psi, topology.tails)
    flow = T.as_tensor(w).reshape(-1, 1) * diff**2
    out = T.scatter_add(flow, topology.heads, topology.n_nodes) + T.scatter_add(
        flow, topology.tails, topology.n_nodes
    )
    return out.reshape(-1) if squeeze else out


def dissipation_readout(system: ScreenedSystem, psi: np.ndarray) -> np.ndarray:
    return edge_dissipation(system.topology, system.conductance, psi).numpy()


@lru_cache(maxsize=32)
def _scan_operators(height: int, width: int) -> Tuple[sparse.csr_matrix, ...]:
    index = np.arange(height * width).reshape(height, width)
    rows, cols = np.divmod(np.arange(height * width), width)
    operators = []
    for _, (dr, dc) in SCAN_DIRECTIONS:
        entries_r, entries_c = [], []
        step = 1
        while True:
            src_r, src_c = rows - step * dr, cols - step * dc
            inside = (src_r >= 0) & (src_r < height) & (src_c >= 0) & (src_c < width)
            if not inside.any():
                break
            entries_r.append(index.reshape(-1)[inside])
            entries_c.append(index[src_r[inside], src_c[inside]])
            step += 1
        r = np.concatenate(entries_r) if entries_r else np.zeros(0, dtype=int)
        c = np.concatenate(entries_c) if entries_c else np.zeros(0, dtype=int)
        operators.append(
            sparse.csr_matrix(
                (np.ones(len(r)), (r, c)), shape=(height * width, height * width)
            )
        )
    return tuple(operators)


def normalize_fields(psi: TensorLike) -> Tensor:
    """Zero mean, unit variance per field over all nodes."""
    psi = T.as_tensor(psi)
    centered = psi - T.mean(psi, axis=0, keepdims=True)
    variance = T.mean(centered**2, axis=0, keepdims=True)
    return centered / T.sqrt(variance + NORM_EPS)


def directional_scans(psi: TensorLike, topology: GraphTopology) -> Tensor:
    """Exclusive sums of the normalized fields along 8 directions, (n, 8K)."""
    if topology.grid_shape is None:
        raise UnsupportedError("directional scans need a grid topology")
    normalized = normalize_fields(psi)
    if normalized.ndim == 1:
        normalized = normalized.reshape(-1, 1)
    operators = _scan_operators(*topology.grid_shape)
    return T.concat([T.sparse_apply(op, normalized) for op in operators], axis=1)


def cross_field_statistics(psi: TensorLike) -> Tensor:
    """Per-node mean and variance across the K fields, (n, 2)."""
    psi = T.as_tensor(psi)
    mu = T.mean(psi, axis=1, keepdims=True)
    var = T.mean((psi - mu) ** 2, axis=1, keepdims=True)
    return T.concat([mu, var], axis=1)


def round_temperature(r: int, rounds: int, start: float = 1.0, end: float = 0.2) -> float:
    frac = round_fraction(r, rounds)
    return start * (1.0 - frac) + end * frac


def round_fraction(r: int, rounds: int) -> float:
    return 0.0 if rounds <= 1 else r / (rounds - 1)


class RoundState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    psi: Tensor
    prev_soft_pred: Tensor
    round_index: int
    rounds: int
    tau: float
    h: Optional[Tensor] = None
    logits: Optional[Tensor] = None
    objects: Optional[Tensor] = None
    assignment: Optional[Tensor] = None
    conductance: Optional[Tensor] = None
    damping: Optional[Tensor] = None

    @model_validator(mode="after")
    def _check(self):
        if not 0 <= self.round_index < self.rounds:
            raise ValueError(f"round {self.round_index} outside [0, {self.rounds})")
        if not TAU_MIN <= self.tau <= TAU_MAX:
            raise ValueError(f"feedback temperature {self.tau} outside [{TAU_MIN}, {TAU_MAX}]")
        sums = self.prev_soft_pred.numpy().sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError("prev_soft_pred rows must sum to 1")
        return self


def initial_state(n_nodes: int, cfg: PoissonLayerParameters) -> RoundState:
    """Cold start: zero fields, uniform class beliefs, no object features."""
    return RoundState(
        psi=T.Tensor(np.zeros((n_nodes, cfg.fields))),
        prev_soft_pred=T.Tensor(np.full((n_nodes, cfg.classes), 1.0 / cfg.classes)),
        round_index=0,
        rounds=cfg.rounds,
        tau=cfg.feedback.tau_start,
        objects=T.Tensor(np.zeros((n_nodes, cfg.object_dim))) if cfg.objects else None,
    )


class LayerHeads:
    """Parameter view of one Poisson layer; weights are shared across rounds."""

    def __init__(self, view: Dict[str, Tensor], cfg: PoissonLayerParameters):
        self.view = view
        self.cfg = cfg

    def __getitem__(self, name: str) -> Tensor:
        return self.view[name]

    def run(self, prefix: str, x: TensorLike) -> Tensor:
        return mlp(self.view, prefix, x, self.cfg.activation)


def init_layer_params(cfg: PoissonLayerParameters, seed: int = 0) -> ModelParams:
    params = ModelParams(seed=seed)
    hidden = list(cfg.hidden_widths)
    d_h = cfg.feature_dim
    init_mlp(params, "encoder", [cfg.input_dim + cfg.classes + 3, *hidden, d_h], "encoder")
    params.normal("W_raw", (d_h, d_h), 1.0 / d_h, "conductance")
    init_mlp(params, "damping", [cfg.rich_dim, *hidden, cfg.fields], "heads")
    init_mlp(params, "source", [cfg.rich_dim, *hidden, cfg.fields], "heads")
    if cfg.objects:
        multigrid.init_object_params(params, cfg, d_h + cfg.fields)
    init_mlp(params, "decoder", [cfg.decoder_dim, *hidden, cfg.classes], "decoder", zero_last=True)
    return params


def _positions(topology: GraphTopology) -> np.ndarray:
    if topology.positions is None:
        return np.zeros((topology.n_nodes, 2))
    return topology.positions


def run_round(
    state: RoundState,
    heads: LayerHeads,
    topology: GraphTopology,
    cfg: PoissonLayerParameters,
    x: TensorLike,
) -> RoundState:
    """Execute round ``state.round_index`` and return the state it produces."""
    n = topology.n_nodes
    p = _positions(topology)
    r, rounds = state.round_index, state.rounds
    frac = np.full((n, 1), round_fraction(r, rounds))

    h = heads.run("encoder", T.concat([x, state.prev_soft_pred, p, frac], axis=1))
    w = conductances(h, heads["W_raw"], topology)

    if r == 0:
        previous = T.Tensor(np.zeros((n, cfg.fields + cfg.scan_dim + 2)))
    else:
        previous = T.concat(
            [
                state.psi,
                directional_scans(state.psi, topology),
                cross_field_statistics(state.psi),
            ],
            axis=1,
        )
    parts = [h, p, previous]
    if cfg.objects:
        parts.append(state.objects if r > 0 else np.zeros((n, cfg.object_dim)))
    rich = T.concat(parts, axis=1)

    damping = T.softplus(heads.run("damping", rich))
    if cfg.lambda_over_n:
        damping = damping / float(n)
    source = heads.run("source", rich)
    psi = screened_solve(topology, w, damping, source, cfg.solver, cfg.threads)

    dissipation = edge_dissipation(topology, w, psi)
    scans = directional_scans(psi, topology)

    objects, rho = None, None
    decoder_parts = [psi, dissipation, h, p, scans]
    if cfg.objects:
        rho = multigrid.assign(heads.view, normalize_fields(psi), p, cfg.activation)
        objects = multigrid.vcycle(
            rho,
            T.concat([h, psi], axis=1),
            heads.view,
            cfg.solver,
            cfg.normalize_restriction,
            cfg.activation,
        )
        decoder_parts.append(objects)

    logits = heads.run("decoder", T.concat(decoder_parts, axis=1))
    tau = round_temperature(r, rounds, cfg.feedback.tau_start, cfg.feedback.tau_end)
    return RoundState(
        psi=psi,
        prev_soft_pred=T.softmax(logits / tau, axis=1),
        round_index=r,
        rounds=rounds,
        tau=tau,
        h=h,
        logits=logits,
        objects=objects,
        assignment=rho,
        conductance=w,
        damping=damping,
    )


def run_rounds(
    heads: LayerHeads,
    topology: GraphTopology,
    cfg: PoissonLayerParameters,
    x: TensorLike,
    state: Optional[RoundState] = None,
) -> List[RoundState]:
    """All R rounds from a cold start; returns the state produced by each round."""
    state = state or initial_state(topology.n_nodes, cfg)
    states = []
    for r in range(cfg.rounds):
        state = run_round(
            state.model_copy(update={"round_index": r}), heads, topology, cfg, x
        )
        states.append(state)
    return states


def layer_topology(height: int, width: int, cfg: PoissonLayerParameters) -> GraphTopology:
    return grid_topology(height, width, cfg.connectivity)
