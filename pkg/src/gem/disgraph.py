"""Bidirectional weighted attribute graph and its unsupervised refinement.

The graph holds an asymmetric adjacency A in [0,1]^{n x n} over attribute
nodes, sketched from averaged impact scores and refined during training: a
small graph-convolution stack embeds the nodes, pairwise embedding similarity
proposes new weights, and the result is blended with the frozen prior.  The
decoder consumes latents propagated through A + I so an empty graph is a
strict no-op.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DataError, ShapeError
from .numcore import ParameterSet, Rng, Tensor


@dataclass
class DisGraph:
    """Attribute relation graph: current adjacency, frozen prior, blend mix."""

    n: int
    adjacency: np.ndarray
    prior: np.ndarray
    node_names: tuple[str, ...] = ()
    eta: float = 0.5

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64).copy()
        self.prior = np.asarray(self.prior, dtype=np.float64).copy()
        for name, m in (("adjacency", self.adjacency), ("prior", self.prior)):
            if m.shape != (self.n, self.n):
                raise ShapeError(f"{name} must be {self.n}x{self.n}, got {m.shape}")
            if np.any(m < 0.0) or np.any(m > 1.0):
                raise DataError(f"{name} entries must lie in [0, 1]")
            np.fill_diagonal(m, 0.0)
        if not self.node_names:
            self.node_names = tuple(f"attr_{i}" for i in range(self.n))
        if len(self.node_names) != self.n:
            raise ShapeError("node name count does not match n")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")


class GraphLearner:
    """Stack of square graph-convolution layers over the augmented adjacency."""

    def __init__(self, n: int, n_layers: int = 2, nonlinearity: str = "tanh",
                 rng: Rng | None = None):
        if n_layers < 1:
            raise ConfigError("need at least one layer")
        if nonlinearity not in ("tanh", "identity"):
            raise ConfigError(f"unsupported nonlinearity {nonlinearity!r}")
        self.n = n
        self.n_layers = n_layers
        self.nonlinearity = nonlinearity
        self.params = ParameterSet("gcn")
        for layer in range(n_layers):
            init = nc.glorot_uniform(rng, n, n) if rng is not None else np.eye(n)
            self.params.add(f"omega_{layer}", init)


def init_graph(relation_matrices, node_names=(), eta: float = 0.5) -> DisGraph:
    """Sketch the graph from one or more signed relation matrices.

    The prior is the magnitude of the entry-wise mean, clamped to [0, 1];
    the live adjacency starts as a copy of the prior.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in relation_matrices]
    if not mats:
        raise DataError("need at least one relation matrix")
    n = mats[0].shape[0]
    for m in mats:
        if m.shape != (n, n):
            raise ShapeError("relation matrices disagree on shape")
        if np.any(np.isnan(m)):
            raise DataError("relation matrix has missing pair estimates")
    prior = np.clip(np.abs(np.mean(mats, axis=0)), 0.0, 1.0)
    np.fill_diagonal(prior, 0.0)
    return DisGraph(n=n, adjacency=prior.copy(), prior=prior,
                    node_names=tuple(node_names), eta=eta)


def augment_normalize(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric degree-normalized propagation operator with self-loops.

    Adds the identity, symmetrizes (the propagation operator presumes an
    undirected graph; the stored adjacency itself stays directed), and scales
    by inverse square-root degrees.  Spectral radius is at most 1.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise DataError("adjacency entries must lie in [0, 1]")
    aug = a + np.eye(a.shape[0])
    sym = 0.5 * (aug + aug.T)
    degree = sym.sum(axis=1)
    scale = 1.0 / np.sqrt(degree)
    return sym * np.outer(scale, scale)


def gcn_forward(learner: GraphLearner, graph: DisGraph, t0) -> Tensor:
    """Propagate node embeddings T0 through the layer stack.

    Hidden layers apply the learner's nonlinearity; the last layer is linear.
    """
    t0 = t0 if isinstance(t0, Tensor) else nc.constant(t0)
    if t0.shape != (graph.n, graph.n):
        raise ShapeError(f"T0 must be {graph.n}x{graph.n}, got {t0.shape}")
    operator = nc.constant(augment_normalize(graph.adjacency))
    t = t0
    for layer in range(learner.n_layers):
        t = nc.matmul(nc.matmul(operator, t), learner.params[f"omega_{layer}"])
        if layer < learner.n_layers - 1 and learner.nonlinearity == "tanh":
            t = nc.tanh(t)
    return t


def refined_adjacency_node(graph: DisGraph, t: Tensor) -> Tensor:
    """Tracked refined adjacency: blend of the prior with embedding similarity."""
    n = graph.n
    sim = nc.affine(nc.matmul(t, nc.transpose(t)), 1.0 / np.sqrt(n))
    proposal = nc.mul(nc.sigmoid(sim), nc.constant(1.0 - np.eye(n)))
    return nc.add(nc.affine(proposal, 1.0 - graph.eta),
                  nc.constant(graph.eta * graph.prior))


def refine_adjacency(graph: DisGraph, t: np.ndarray) -> DisGraph:
    """Pure refinement step: returns the graph with a new adjacency."""
    t_node = t if isinstance(t, Tensor) else nc.constant(np.asarray(t))
    if t_node.shape != (graph.n, graph.n):
        raise ShapeError(f"T must be {graph.n}x{graph.n}, got {t_node.shape}")
    new_a = refined_adjacency_node(graph, t_node).value
    return DisGraph(n=graph.n, adjacency=new_a, prior=graph.prior,
                    node_names=graph.node_names, eta=graph.eta)


def relation_aware(graph: DisGraph, z: np.ndarray) -> np.ndarray:
    """Propagate latent rows through the graph: z (A + I), keeping self-influence."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != graph.n:
        raise ShapeError(f"latents must have {graph.n} columns, got {z.shape}")
    return z @ (graph.adjacency + np.eye(graph.n))


def relation_aware_node(graph_adjacency: Tensor, z: Tensor) -> Tensor:
    """Tracked version of relation_aware for the training path."""
    n = graph_adjacency.shape[0]
    if z.cols != n:
        raise ShapeError(f"latents must have {n} columns, got {z.shape}")
    return nc.matmul(z, nc.add(graph_adjacency, nc.constant(np.eye(n))))


# ---------------------------------------------------------------------------
# graph file: adjacency CSV plus key-value sidecar


def write_graph(graph: DisGraph, base_path: str, extra: dict | None = None) -> None:
    from .relranker import write_relation_csv

    write_relation_csv(graph.adjacency, base_path + ".csv")
    write_relation_csv(graph.prior, base_path + ".prior.csv")
    lines = [
        f"n = {graph.n}",
        f"names = {','.join(graph.node_names)}",
        f"eta = {graph.eta!r}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    with open(base_path + ".meta", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_graph(base_path: str) -> DisGraph:
    from .relranker import read_relation_csv

    adjacency = read_relation_csv(base_path + ".csv")
    try:
        prior = read_relation_csv(base_path + ".prior.csv")
    except FileNotFoundError:
        prior = adjacency.copy()
    kv: dict[str, str] = {}
    try:
        with open(base_path + ".meta") as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    key, _, value = line.partition("=")
                    kv[key.strip()] = value.strip()
    except FileNotFoundError:
        pass
    n = adjacency.shape[0]
    names = tuple(kv["names"].split(",")) if "names" in kv else ()
    return DisGraph(n=n, adjacency=adjacency, prior=prior, node_names=names,
                    eta=float(kv.get("eta", "0.5")))
