"""The full code-embedding model: lexical half plus dependence half."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from depvec import numerics as nx
from depvec.depgraph import ProgramGraph, build_program_graph, method_as_program_graph
from depvec.gnn import GnnLayer, GraphView, attention_readout, encode_graph, init_readout, init_stack
from depvec.lexical import SubwordVocab, encode_sequences, init_bilstm, tokenize_instruction
from depvec.mir import Method, Program
from depvec.numerics import Tensor

MODES = ("both", "lexical", "dependence")


@dataclass
class ModelConfig:
    gnn: str = "gat"
    layers: int = 5
    dropout: float = 0.2
    embed_dim: int = 100
    hidden: int = 150
    readout_width: int = 300
    seed: int = 0

    @property
    def width(self) -> int:
        return 2 * self.hidden

    @property
    def embedding_width(self) -> int:
        return self.width + self.readout_width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def as_graph(scope: Program | Method | ProgramGraph) -> ProgramGraph:
    if isinstance(scope, ProgramGraph):
        return scope
    if isinstance(scope, Method):
        return method_as_program_graph(scope)
    return build_program_graph(scope)


class GraphBatch:
    """Disjoint union of program graphs with de-duplicated instruction token sequences."""

    def __init__(self, graphs: Sequence[ProgramGraph], vocab: SubwordVocab):
        if not graphs:
            raise ValueError("GraphBatch: no graphs")
        self.graphs = list(graphs)
        seq_ids: dict[tuple[int, ...], int] = {}
        node_seq, graph_of, kinds, lex_nodes = [], [], [], []
        srcs, dsts, types, revs = [], [], [], []
        base = 0
        for gi, g in enumerate(self.graphs):
            instrs = g.node_instruction()
            local_lex = []
            for local, ins in enumerate(instrs):
                if ins is None:
                    node_seq.append(-1)
                    kinds.append(-1)
                else:
                    key = tuple(tokenize_instruction(ins, vocab))
                    node_seq.append(seq_ids.setdefault(key, len(seq_ids)))
                    kinds.append(int(ins.kind))
                    local_lex.append((ins.text, local))
                graph_of.append(gi)
            lex_nodes.extend(base + local for _, local in sorted(local_lex))
            s, d, t, r = g.message_edges()
            srcs.append(s + base)
            dsts.append(d + base)
            types.append(t)
            revs.append(r)
            base += len(instrs)
        self.seqs = [list(k) for k in seq_ids]
        node_seq = np.array(node_seq, dtype=np.int64)
        node_seq[node_seq < 0] = len(self.seqs)  # zero row appended after the encodings
        self.node_seq = node_seq
        self.graph_of = np.array(graph_of, dtype=np.int64)
        self.kinds = np.array(kinds, dtype=np.int64)
        self.lex_nodes = np.array(lex_nodes, dtype=np.int64)
        self.view = GraphView.from_edges(base, np.concatenate(srcs), np.concatenate(dsts),
                                         np.concatenate(types), np.concatenate(revs))

    @property
    def n_graphs(self) -> int:
        return len(self.graphs)

    @property
    def n_nodes(self) -> int:
        return self.view.n_nodes

    @property
    def instruction_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.kinds >= 0)


class CodeEmbedder:
    def __init__(self, config: ModelConfig, vocab: SubwordVocab, params: dict[str, Tensor]):
        self.config = config
        self.vocab = vocab
        self.params = params
        self.stack: list[GnnLayer] = [
            GnnLayer(config.gnn, k, params, config.dropout) for k in range(config.layers)
        ]

    @classmethod
    def create(cls, config: ModelConfig, vocab: SubwordVocab, E: np.ndarray | None = None) -> "CodeEmbedder":
        rng = np.random.default_rng(config.seed)
        if E is None:
            d = config.embed_dim
            E = rng.uniform(-0.5 / d, 0.5 / d, size=(len(vocab), d))
        E = np.asarray(E, dtype=np.float64)
        if E.shape != (len(vocab), config.embed_dim):
            raise ValueError(f"embedding matrix shape {E.shape} does not match vocab {len(vocab)} x {config.embed_dim}")
        params: dict[str, Tensor] = {"lexical.E": Tensor(E, requires_grad=True, name="lexical.E")}
        params.update(init_bilstm(config.embed_dim, config.hidden, seed=config.seed + 1))
        for layer in init_stack(config.gnn, config.layers, config.width, seed=config.seed + 2,
                                dropout=config.dropout):
            params.update(layer.params)
        params.update(init_readout(config.width, config.readout_width, seed=config.seed + 3))
        return cls(config, vocab, params)

    # -------------------------------------------------------------- forward

    def node_features(self, batch: GraphBatch) -> Tensor:
        enc = encode_sequences(self.params, batch.seqs, self.params["lexical.E"])
        table = nx.concat([enc, Tensor(np.zeros((1, self.config.width)))], axis=0)
        return nx.gather_rows(table, batch.node_seq)

    def lexical(self, batch: GraphBatch, X: Tensor) -> Tensor:
        rows = nx.gather_rows(X, batch.lex_nodes)
        return nx.scatter_add_rows(rows, batch.graph_of[batch.lex_nodes], batch.n_graphs)

    def forward(self, batch: GraphBatch, train: bool = False, step: int = 0, mode: str = "both"):
        """Returns (lexical rows, dependence rows, final node states or None)."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        X = self.node_features(batch)
        if mode == "dependence":
            lex = Tensor(np.zeros((batch.n_graphs, self.config.width)))
        else:
            lex = self.lexical(batch, X)
        if mode == "lexical":
            return lex, Tensor(np.zeros((batch.n_graphs, self.config.readout_width))), None
        H = encode_graph(self.stack, batch.view, X, train=train, seed=self.config.seed, step=step)
        dep = attention_readout(self.params, H, batch.graph_of, batch.n_graphs)
        return lex, dep, H

    def embed_graphs(self, graphs: Sequence[ProgramGraph], mode: str = "both", batch_size: int = 64) -> np.ndarray:
        out = []
        for start in range(0, len(graphs), batch_size):
            batch = GraphBatch(graphs[start:start + batch_size], self.vocab)
            lex, dep, _ = self.forward(batch, mode=mode)
            out.append(np.concatenate([lex.data, dep.data], axis=1))
        return np.concatenate(out, axis=0)

    def embed(self, scopes: Sequence[Program | Method], mode: str = "both") -> np.ndarray:
        return self.embed_graphs([as_graph(s) for s in scopes], mode=mode)

    # -------------------------------------------------------------- bookkeeping

    def trainable(self) -> dict[str, Tensor]:
        return dict(self.params)

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def copy(self) -> "CodeEmbedder":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return CodeEmbedder(copy.deepcopy(self.config), self.vocab, params)


def code_embedding(scope: Program | Method | ProgramGraph, model: CodeEmbedder, mode: str = "both") -> np.ndarray:
    """concat(lexical sum, attention readout of the dependence graph)."""
    return model.embed_graphs([as_graph(scope)], mode=mode)[0]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
