"""Message passing (GCN, GIN, GraphSAGE, GAT) with typed edges, and attention readout.

Graphs are given as mirrored edge lists: every dependence edge appears once
forward (direction bit 0) and once reversed (direction bit 1).  The message
from ``u`` to ``v`` along edge ``e`` is ``H[u] + T[type_e] + rev_e * T[4]``
where ``T`` is the layer's 5-row edge table.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from depvec import numerics as nx
from depvec.numerics import ShapeError, Tensor

ARCHITECTURES = ("gcn", "gin", "sage", "gat")
N_EDGE_ROWS = 5
DIRECTION_ROW = 4
# GIN sums over all neighbours (about four per node in mirrored dependence graphs), so its
# MLP starts with a damped first layer to keep activations O(1) through a deep stack
GIN_INIT_GAIN = 0.25
# edge embeddings start on the per-coordinate scale of the lexical node features
EDGE_INIT_STD = 0.01


@dataclass
class GraphView:
    """Mirrored edge arrays of one graph (or a disjoint union of graphs)."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    etype: np.ndarray
    rev: np.ndarray

    @classmethod
    def from_edges(cls, n_nodes: int, src, dst, etype, rev) -> "GraphView":
        arr = lambda a: np.asarray(a, dtype=np.int64).reshape(-1)  # noqa: E731
        return cls(int(n_nodes), arr(src), arr(dst), arr(etype), arr(rev))

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes).astype(np.float64)

    def edge_attributes(self) -> np.ndarray:
        A = np.zeros((self.n_edges, N_EDGE_ROWS))
        A[np.arange(self.n_edges), self.etype] = 1.0
        A[:, DIRECTION_ROW] += self.rev
        return A

    def permuted(self, perm: np.ndarray) -> "GraphView":
        """Relabel node ``i`` as ``perm[i]``; edge order is kept."""
        perm = np.asarray(perm)
        return GraphView(self.n_nodes, perm[self.src], perm[self.dst], self.etype.copy(), self.rev.copy())


@dataclass
class GnnLayer:
    arch: str
    index: int
    params: dict[str, Tensor]
    dropout: float = 0.2
    prefix: str = "gnn"

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{self.index}.{name}"]

    @property
    def width(self) -> int:
        return self.p("edge").shape[1]


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_layer(arch: str, index: int, width: int, rng: np.random.Generator, dropout: float = 0.2,
               prefix: str = "gnn") -> GnnLayer:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown GNN architecture {arch!r}; choose from {ARCHITECTURES}")
    shapes: dict[str, tuple[int, int]] = {"edge": (N_EDGE_ROWS, width)}
    if arch == "gcn":
        shapes["W"] = (width, width)
    elif arch == "gin":
        shapes.update(eps=(1, 1), W1=(width, width), b1=(1, width), W2=(width, width), b2=(1, width))
    elif arch == "sage":
        shapes["W"] = (2 * width, width)
    else:
        shapes.update(W=(width, width), a_dst=(width, 1), a_src=(width, 1))
    params = {}
    for name, shape in shapes.items():
        key = f"{prefix}.{index}.{name}"
        if name in ("eps", "b1", "b2"):
            value = np.zeros(shape)
        elif name == "edge":
            value = rng.normal(0.0, EDGE_INIT_STD, size=shape)
        else:
            value = _glorot(rng, shape)
            if arch == "gin" and name == "W1":
                value *= GIN_INIT_GAIN
        params[key] = Tensor(value, requires_grad=True, name=key)
    return GnnLayer(arch, index, params, dropout, prefix)


def init_stack(arch: str, layers: int, width: int, seed: int = 0, dropout: float = 0.2,
               prefix: str = "gnn") -> list[GnnLayer]:
    if layers < 1:
        raise ValueError("a GNN stack needs at least one layer")
    rng = np.random.default_rng(seed)
    return [init_layer(arch, k, width, rng, dropout, prefix) for k in range(layers)]


def _messages(layer: GnnLayer, graph: GraphView, H: Tensor, self_loops: bool):
    src, dst = graph.src, graph.dst
    A = graph.edge_attributes()
    if self_loops:
        loop = np.arange(graph.n_nodes)
        src = np.concatenate([src, loop])
        dst = np.concatenate([dst, loop])
        A = np.concatenate([A, np.zeros((graph.n_nodes, N_EDGE_ROWS))])
    m = nx.add(nx.gather_rows(H, src), nx.matmul(Tensor(A), layer.p("edge")))
    return m, src, dst


def segment_softmax(scores: Tensor, segment: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of a column of scores within each segment id."""
    top = np.full(n_segments, -np.inf)
    np.maximum.at(top, segment, scores.data[:, 0])
    shifted = nx.sub(scores, Tensor(top[segment][:, None]))
    ex = nx.exp(shifted)
    denom = nx.scatter_add_rows(ex, segment, n_segments)
    return nx.div(ex, nx.gather_rows(denom, segment))


def gat_attention(layer: GnnLayer, graph: GraphView, H: Tensor) -> tuple[Tensor, np.ndarray, Tensor]:
    """Attention weights over N(v) plus v, the segment ids and the projected messages W m_u."""
    loop = np.arange(graph.n_nodes)
    src = np.concatenate([graph.src, loop])
    dst = np.concatenate([graph.dst, loop])
    A = np.concatenate([graph.edge_attributes(), np.zeros((graph.n_nodes, N_EDGE_ROWS))])
    W = layer.p("W")
    Wh = nx.matmul(H, W)
    # W (H_u + e) == (H W)_u + e W, so project nodes and the edge table once
    Wm = nx.add(nx.gather_rows(Wh, src), nx.matmul(Tensor(A), nx.matmul(layer.p("edge"), W)))
    score = nx.add(nx.gather_rows(nx.matmul(Wh, layer.p("a_dst")), dst), nx.matmul(Wm, layer.p("a_src")))
    alpha = segment_softmax(nx.leaky_relu(score, 0.2), dst, graph.n_nodes)
    return alpha, dst, Wm


def message_pass(layer: GnnLayer, graph: GraphView, H: Tensor, train: bool = False,
                 seed: int = 0, step: int = 0) -> Tensor:
    if H.shape[0] != graph.n_nodes:
        raise ShapeError(f"message_pass: {H.shape[0]} feature rows for {graph.n_nodes} nodes")
    if H.shape[1] != layer.width:
        raise ShapeError(f"message_pass: feature width {H.shape[1]} does not match layer width {layer.width}")
    n = graph.n_nodes
    deg = graph.degree()
    if layer.arch == "gcn":
        m, src, dst = _messages(layer, graph, H, self_loops=True)
        coef = 1.0 / np.sqrt((deg[dst] + 1.0) * (deg[src] + 1.0))
        agg = nx.scatter_add_rows(nx.mul(m, Tensor(coef[:, None])), dst, n)
        out = nx.relu(nx.matmul(agg, layer.p("W")))
    elif layer.arch == "gin":
        m, _, dst = _messages(layer, graph, H, self_loops=False)
        agg = nx.scatter_add_rows(m, dst, n)
        z = nx.add(nx.mul(H, nx.add(layer.p("eps"), 1.0)), agg)
        hidden = nx.relu(nx.add(nx.matmul(z, layer.p("W1")), layer.p("b1")))
        out = nx.add(nx.matmul(hidden, layer.p("W2")), layer.p("b2"))
    elif layer.arch == "sage":
        m, _, dst = _messages(layer, graph, H, self_loops=False)
        agg = nx.scatter_add_rows(m, dst, n)
        mean = nx.mul(agg, Tensor((1.0 / np.maximum(deg, 1.0))[:, None]))
        out = nx.relu(nx.matmul(nx.concat([H, mean], axis=1), layer.p("W")))
    else:
        alpha, dst, Wm = gat_attention(layer, graph, H)
        out = nx.scatter_add_rows(nx.mul(Wm, alpha), dst, n)
    stream = zlib.crc32(layer.prefix.encode())
    return nx.dropout(out, layer.dropout, train, key=(seed, stream, layer.index, step))


def encode_graph(stack: Sequence[GnnLayer], graph: GraphView, X: Tensor, train: bool = False,
                 seed: int = 0, step: int = 0) -> Tensor:
    if not stack:
        raise ValueError("encode_graph: the layer stack is empty")
    if graph.n_nodes < 1:
        raise ValueError("encode_graph: graph has no nodes")
    H = X
    for layer in stack:
        H = message_pass(layer, graph, H, train=train, seed=seed, step=step)
    return H


# ---------------------------------------------------------------- readout


def init_readout(width: int, out_width: int, seed: int = 0, prefix: str = "readout") -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    values = {
        "w_g": _glorot(rng, (width, 1)),
        "b_g": np.zeros((1, 1)),
        "W_t": _glorot(rng, (width, out_width)),
    }
    return {f"{prefix}.{k}": Tensor(v, requires_grad=True, name=f"{prefix}.{k}") for k, v in values.items()}


def attention_readout(params: dict[str, Tensor], H: Tensor, graph_index: np.ndarray | None = None,
                      n_graphs: int = 1, prefix: str = "readout") -> Tensor:
    """sum_v sigmoid(w_g.H_v + b_g) * (H_v W_t), one row per graph."""
    if H.shape[0] < 1:
        raise ValueError("attention_readout: no nodes")
    if graph_index is None:
        graph_index = np.zeros(H.shape[0], dtype=np.int64)
    gate = nx.sigmoid(nx.add(nx.matmul(H, params[f"{prefix}.w_g"]), params[f"{prefix}.b_g"]))
    values = nx.matmul(H, params[f"{prefix}.W_t"])
    return nx.scatter_add_rows(nx.mul(values, gate), graph_index, n_graphs)
