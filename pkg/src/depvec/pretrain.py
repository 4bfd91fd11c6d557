"""Self-supervised objectives (node classification, context prediction, VGAE) and checkpoints."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from depvec import numerics as nx
from depvec.depgraph import ProgramGraph, build_program_graph
from depvec.gnn import GnnLayer, GraphView, encode_graph, init_stack
from depvec.lexical import SubwordVocab, tokenize_instruction, train_bpe, train_sgns
from depvec.mir import Kind, Program
from depvec.model import CodeEmbedder, GraphBatch, ModelConfig
from depvec.numerics import Tensor

log = logging.getLogger(__name__)

STRATEGIES = ("node", "context", "vgae")
N_KINDS = len(Kind)


@dataclass
class PretrainConfig:
    strategy: str = "context"
    epochs: int = 1
    seed: int = 0
    batch_size: int = 1  # one graph per step
    k_hops: int = 2
    ring_inner: int = 1
    ring_outer: int = 3
    negatives: int = 1
    latent: int = 64

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not (self.ring_inner < self.k_hops and self.ring_inner < self.ring_outer):
            raise ValueError("context radii need ring_inner < k_hops and ring_inner < ring_outer")


@dataclass
class PretrainResult:
    model: CodeEmbedder
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    skipped: int = 0


def _batches(items: Sequence, size: int, rng: np.random.Generator):
    order = rng.permutation(len(items))
    for start in range(0, len(order), size):
        yield [items[i] for i in order[start:start + size]]


def log_softmax(logits: Tensor) -> Tensor:
    top = logits.data.max(axis=1, keepdims=True)
    shifted = nx.sub(logits, Tensor(top))
    return nx.sub(shifted, nx.log(nx.sum_(nx.exp(shifted), axis=1, keepdims=True)))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """-(1/n) sum_i sum_j y_ij log yhat_ij with one-hot ``y``."""
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return nx.scalar_mul(nx.sum_(nx.mul(log_softmax(logits), Tensor(onehot))), -1.0 / len(labels))


# ---------------------------------------------------------------- node classification


def init_node_head(width: int, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (width + N_KINDS))
    return {
        "nodehead.W": Tensor(rng.uniform(-bound, bound, (width, N_KINDS)), requires_grad=True, name="nodehead.W"),
        "nodehead.b": Tensor(np.zeros((1, N_KINDS)), requires_grad=True, name="nodehead.b"),
    }


def node_classification_loss(stack: Sequence[GnnLayer], head: dict[str, Tensor], graph: GraphView, X: Tensor,
                             nodes: np.ndarray, kinds: np.ndarray, train: bool = False, seed: int = 0,
                             step: int = 0) -> tuple[Tensor, np.ndarray]:
    H = encode_graph(stack, graph, X, train=train, seed=seed, step=step)
    logits = nx.add(nx.matmul(nx.gather_rows(H, nodes), head["nodehead.W"]), head["nodehead.b"])
    return cross_entropy(logits, kinds), logits.data.argmax(axis=1)


def pretrain_node_classification(graphs: Sequence[ProgramGraph], model: CodeEmbedder,
                                 cfg: PretrainConfig) -> PretrainResult:
    if not graphs:
        raise ValueError("pretrain_node_classification: empty corpus")
    rng = np.random.default_rng(cfg.seed)
    head = init_node_head(model.config.width, cfg.seed)
    opt = nx.Adam({**model.params, **head})
    result = PretrainResult(model)
    step = 0
    for _ in range(cfg.epochs):
        total, count, correct = 0.0, 0, 0
        for group in _batches(graphs, cfg.batch_size, rng):
            batch = GraphBatch(group, model.vocab)
            nodes = batch.instruction_nodes
            with nx.Tape() as tape:
                X = model.node_features(batch)
                loss, pred = node_classification_loss(model.stack, head, batch.view, X, nodes,
                                                      batch.kinds[nodes], train=True,
                                                      seed=model.config.seed, step=step)
            nx.backward(loss, tape)
            opt.step()
            step += 1
            total += loss.item() * len(nodes)
            count += len(nodes)
            correct += int((pred == batch.kinds[nodes]).sum())
        result.losses.append(total / count)
        result.accuracies.append(correct / count)
    return result


# ---------------------------------------------------------------- context prediction


def adjacency(graph: GraphView) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(graph.n_nodes)]
    for s, d in zip(graph.src.tolist(), graph.dst.tolist()):
        adj[s].append(d)
        adj[d].append(s)
    return adj


def hop_distances(adj: list[list[int]], source: int, limit: int) -> dict[int, int]:
    """Undirected BFS distances from ``source`` up to ``limit`` hops."""
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        if dist[u] == limit:
            continue
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def neighborhood(graph: GraphView, center: int, k: int, adj: list[list[int]] | None = None) -> list[int]:
    dist = hop_distances(adj or adjacency(graph), center, k)
    return sorted(v for v, d in dist.items() if d <= k)


def ring(graph: GraphView, center: int, inner: int, outer: int, adj: list[list[int]] | None = None) -> list[int]:
    dist = hop_distances(adj or adjacency(graph), center, outer)
    return sorted(v for v, d in dist.items() if inner <= d <= outer)


def induced_union(graph: GraphView, node_sets: Sequence[Sequence[int]]) -> tuple[GraphView, np.ndarray, list[np.ndarray]]:
    """Disjoint union of induced subgraphs.

    Returns the union view, the parent node id of every union node and, per
    subgraph, the union ids of its nodes (in the order given).
    """
    parents: list[np.ndarray] = []
    src, dst, typ, rev = [], [], [], []
    positions: list[np.ndarray] = []
    local = np.full(graph.n_nodes, -1, dtype=np.int64)
    base = 0
    for nodes in node_sets:
        nodes = np.asarray(nodes, dtype=np.int64)
        local[nodes] = base + np.arange(len(nodes))
        keep = (local[graph.src] >= 0) & (local[graph.dst] >= 0)
        src.append(local[graph.src[keep]])
        dst.append(local[graph.dst[keep]])
        typ.append(graph.etype[keep])
        rev.append(graph.rev[keep])
        parents.append(nodes)
        positions.append(base + np.arange(len(nodes)))
        local[nodes] = -1
        base += len(nodes)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)  # noqa: E731
    view = GraphView.from_edges(base, cat(src), cat(dst), cat(typ), cat(rev))
    return view, cat(parents), positions


def context_pairs(graph: GraphView, anchors: Sequence[int], cfg: PretrainConfig):
    """Neighbourhood and ring node lists for anchors whose ring is non-empty."""
    adj = adjacency(graph)
    kept, hoods, rings, skipped = [], [], [], 0
    for a in anchors:
        dist = hop_distances(adj, a, max(cfg.k_hops, cfg.ring_outer))
        r = sorted(v for v, d in dist.items() if cfg.ring_inner <= d <= cfg.ring_outer)
        if not r:
            skipped += 1
            continue
        kept.append(a)
        hoods.append([a] + sorted(v for v, d in dist.items() if 0 < d <= cfg.k_hops))  # center first
        rings.append(r)
    return kept, hoods, rings, skipped


def context_prediction_loss(stack_s: Sequence[GnnLayer], stack_c: Sequence[GnnLayer], graph: GraphView, X: Tensor,
                            hoods: Sequence[Sequence[int]], rings: Sequence[Sequence[int]], negative: np.ndarray,
                            train: bool = False, seed: int = 0, step: int = 0) -> Tensor:
    """-log s(s.c+) - log s(-s.c-), averaged over anchors.

    ``negative[i]`` is the anchor whose context is used as the negative for anchor ``i``.
    """
    view_s, par_s, pos_s = induced_union(graph, hoods)
    view_c, par_c, pos_c = induced_union(graph, rings)
    Hs = encode_graph(stack_s, view_s, nx.gather_rows(X, par_s), train=train, seed=seed, step=step)
    Hc = encode_graph(stack_c, view_c, nx.gather_rows(X, par_c), train=train, seed=seed, step=step)
    s = nx.gather_rows(Hs, np.array([p[0] for p in pos_s]))
    owner = np.concatenate([np.full(len(p), i) for i, p in enumerate(pos_c)])
    sizes = np.array([len(p) for p in pos_c], dtype=np.float64)
    c = nx.mul(nx.scatter_add_rows(Hc, owner, len(pos_c)), Tensor((1.0 / sizes)[:, None]))
    pos = nx.sum_(nx.mul(s, c), axis=1)
    neg = nx.sum_(nx.mul(s, nx.gather_rows(c, negative)), axis=1)
    total = nx.add(nx.sum_(nx.log_sigmoid(pos)), nx.sum_(nx.log_sigmoid(nx.scalar_mul(neg, -1.0))))
    return nx.scalar_mul(total, -1.0 / len(hoods))


def sample_negatives(n: int, rng: np.random.Generator) -> np.ndarray:
    """For each anchor a uniformly drawn different anchor (itself when alone)."""
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    draw = rng.integers(0, n - 1, size=n)
    return draw + (draw >= np.arange(n))


def pretrain_context_prediction(graphs: Sequence[ProgramGraph], model: CodeEmbedder,
                                cfg: PretrainConfig) -> PretrainResult:
    if not graphs:
        raise ValueError("pretrain_context_prediction: empty corpus")
    if any(g.n_nodes < 2 for g in graphs):
        raise ValueError("pretrain_context_prediction: every graph needs at least 2 nodes")
    rng = np.random.default_rng(cfg.seed)
    c = model.config
    ctx_stack = init_stack(c.gnn, c.layers, c.width, seed=cfg.seed + 17, dropout=c.dropout, prefix="ctx")
    ctx_params = {k: v for layer in ctx_stack for k, v in layer.params.items()}
    opt = nx.Adam({**model.params, **ctx_params})
    result = PretrainResult(model)
    step = 0
    for _ in range(cfg.epochs):
        total, count = 0.0, 0
        for group in _batches(graphs, cfg.batch_size, rng):
            batch = GraphBatch(group, model.vocab)
            anchors, hoods, rings, skipped = context_pairs(batch.view, range(batch.n_nodes), cfg)
            result.skipped += skipped
            if not anchors:
                continue
            negative = sample_negatives(len(anchors), rng)
            with nx.Tape() as tape:
                X = model.node_features(batch)
                loss = context_prediction_loss(model.stack, ctx_stack, batch.view, X, hoods, rings, negative,
                                               train=True, seed=c.seed, step=step)
            nx.backward(loss, tape)
            opt.step()
            step += 1
            total += loss.item() * len(anchors)
            count += len(anchors)
        result.losses.append(total / max(count, 1))
    if result.skipped:
        log.info("context prediction skipped %d anchors with empty rings", result.skipped)
    return result


# ---------------------------------------------------------------- VGAE


def init_vgae_heads(width: int, latent: int, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (width + latent))
    out = {}
    for name in ("mu", "logvar"):
        out[f"vgae.{name}.W"] = Tensor(rng.uniform(-bound, bound, (width, latent)), requires_grad=True,
                                       name=f"vgae.{name}.W")
        out[f"vgae.{name}.b"] = Tensor(np.zeros((1, latent)), requires_grad=True, name=f"vgae.{name}.b")
    return out


def reconstruction_pairs(graph: GraphView, graph_of: np.ndarray, rng: np.random.Generator):
    """Type-blind positive pairs and an equal number of sampled non-adjacent pairs per graph."""
    adjacent = {(min(s, d), max(s, d)) for s, d in zip(graph.src.tolist(), graph.dst.tolist()) if s != d}
    positives = sorted(adjacent)
    negatives: list[tuple[int, int]] = []
    by_graph: dict[int, list[int]] = {}
    for v, g in enumerate(graph_of.tolist()):
        by_graph.setdefault(g, []).append(v)
    pos_count: dict[int, int] = {}
    for u, _ in positives:
        pos_count[int(graph_of[u])] = pos_count.get(int(graph_of[u]), 0) + 1
    for g, nodes in sorted(by_graph.items()):
        want = pos_count.get(g, 0)
        candidates = [(u, v) for i, u in enumerate(nodes) for v in nodes[i + 1:] if (u, v) not in adjacent]
        if want and candidates:
            pick = rng.choice(len(candidates), size=min(want, len(candidates)), replace=False)
            negatives.extend(candidates[i] for i in sorted(pick))
    return np.array(positives, dtype=np.int64).reshape(-1, 2), np.array(negatives, dtype=np.int64).reshape(-1, 2)


def vgae_loss(stack: Sequence[GnnLayer], heads: dict[str, Tensor], graph: GraphView, X: Tensor,
              positives: np.ndarray, negatives: np.ndarray, eta: np.ndarray, train: bool = False,
              seed: int = 0, step: int = 0) -> tuple[Tensor, float, float]:
    """Mean pair BCE of sigmoid(z_u.z_v) plus per-node KL to N(0, I).

    Returns the loss and its (reconstruction, KL) parts as floats.
    """
    H = encode_graph(stack, graph, X, train=train, seed=seed, step=step)
    mu = nx.add(nx.matmul(H, heads["vgae.mu.W"]), heads["vgae.mu.b"])
    logvar = nx.add(nx.matmul(H, heads["vgae.logvar.W"]), heads["vgae.logvar.b"])
    z = nx.add(mu, nx.mul(nx.exp(nx.scalar_mul(logvar, 0.5)), Tensor(eta)))
    kl_rows = nx.sum_(nx.sub(nx.add(nx.mul(mu, mu), nx.exp(logvar)), nx.add(logvar, 1.0)), axis=1)
    kl = nx.scalar_mul(nx.sum_(kl_rows), 0.5 / graph.n_nodes)
    n_pairs = len(positives) + len(negatives)
    if n_pairs == 0:
        return kl, 0.0, kl.item()
    terms = []
    if len(positives):
        score = nx.sum_(nx.mul(nx.gather_rows(z, positives[:, 0]), nx.gather_rows(z, positives[:, 1])), axis=1)
        terms.append(nx.sum_(nx.log_sigmoid(score)))
    if len(negatives):
        score = nx.sum_(nx.mul(nx.gather_rows(z, negatives[:, 0]), nx.gather_rows(z, negatives[:, 1])), axis=1)
        terms.append(nx.sum_(nx.log_sigmoid(nx.scalar_mul(score, -1.0))))
    bce = nx.scalar_mul(terms[0] if len(terms) == 1 else nx.add(*terms), -1.0 / n_pairs)
    return nx.add(bce, kl), bce.item(), kl.item()


def pretrain_vgae(graphs: Sequence[ProgramGraph], model: CodeEmbedder, cfg: PretrainConfig) -> PretrainResult:
    if not graphs:
        raise ValueError("pretrain_vgae: empty corpus")
    rng = np.random.default_rng(cfg.seed)
    heads = init_vgae_heads(model.config.width, cfg.latent, cfg.seed)
    opt = nx.Adam({**model.params, **heads})
    result = PretrainResult(model)
    step = 0
    for _ in range(cfg.epochs):
        total, count = 0.0, 0
        for group in _batches(graphs, cfg.batch_size, rng):
            batch = GraphBatch(group, model.vocab)
            for g in group:
                if g.n_nodes == 1:
                    log.info("graph %s has a single node; only the KL term applies", g.name)
            positives, negatives = reconstruction_pairs(batch.view, batch.graph_of, rng)
            eta = rng.standard_normal((batch.n_nodes, cfg.latent))
            with nx.Tape() as tape:
                X = model.node_features(batch)
                loss, _, _ = vgae_loss(model.stack, heads, batch.view, X, positives, negatives, eta,
                                       train=True, seed=model.config.seed, step=step)
            nx.backward(loss, tape)
            opt.step()
            step += 1
            total += loss.item() * batch.n_graphs
            count += batch.n_graphs
        result.losses.append(total / count)
    return result


PRETRAINERS = {
    "node": pretrain_node_classification,
    "context": pretrain_context_prediction,
    "vgae": pretrain_vgae,
}


def pretrain(graphs: Sequence[ProgramGraph], model: CodeEmbedder, cfg: PretrainConfig) -> PretrainResult:
    return PRETRAINERS[cfg.strategy](graphs, model, cfg)


# ---------------------------------------------------------------- model bootstrap


def build_vocab_and_embeddings(programs: Sequence[Program], config: ModelConfig, vocab_size: int = 400,
                               sgns_epochs: int = 20, seed: int = 0):
    """BPE vocabulary and SGNS subword matrix for a program corpus."""
    texts = [ins.text for p in programs for ins in p.instructions()]
    vocab = train_bpe(texts, vocab_size)
    seqs = [tokenize_instruction(t, vocab) for t in texts]
    emb = train_sgns(seqs, len(vocab), d=config.embed_dim, window=8, negatives=5, epochs=sgns_epochs, seed=seed)
    return vocab, emb


def initial_model(programs: Sequence[Program], config: ModelConfig, vocab_size: int = 400,
                  sgns_epochs: int = 20) -> CodeEmbedder:
    vocab, emb = build_vocab_and_embeddings(programs, config, vocab_size, sgns_epochs, seed=config.seed)
    return CodeEmbedder.create(config, vocab, emb.E.data)


def graphs_of(programs: Sequence[Program]) -> list[ProgramGraph]:
    return [build_program_graph(p) for p in programs]


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = "DEPVEC-CKPT"
CHECKPOINT_VERSION = "v1"
SUPPORTED_VERSIONS = (CHECKPOINT_VERSION,)


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _fp32_text(values: np.ndarray) -> str:
    return " ".join(f"{v:.9g}" for v in values.astype(np.float32).reshape(-1).tolist())


def save_checkpoint(model: CodeEmbedder, path: str | Path, strategy: str = "none") -> None:
    """Write a text checkpoint.  Parameters are snapped to fp32 in place first."""
    for t in model.params.values():
        t.data[...] = t.data.astype(np.float32).astype(np.float64)
    vocab_lines = model.vocab.dumps().splitlines()
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        "config " + json.dumps(model.config.to_dict(), sort_keys=True),
        f"strategy {strategy}",
        f"vocab {len(vocab_lines)}",
        *vocab_lines,
        f"tensors {len(model.params)}",
    ]
    for name, t in model.params.items():
        dims = "x".join(str(d) for d in t.shape) or "scalar"
        lines.append(f"{name} {dims} {_fp32_text(t.data)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> CodeEmbedder:
    model, _ = load_checkpoint_with_meta(path)
    return model


def load_checkpoint_with_meta(path: str | Path) -> tuple[CodeEmbedder, dict]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    it = iter(enumerate(lines, start=1))

    def take(what: str) -> str:
        try:
            return next(it)[1]
        except StopIteration:
            raise CheckpointTruncatedError(f"{path}: file ends before {what}") from None

    header = take("the header").split()
    if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_MAGIC} file")
    if header[1] not in SUPPORTED_VERSIONS:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint version {header[1]!r}; supported: {', '.join(SUPPORTED_VERSIONS)}")
    config_line = take("the config")
    if not config_line.startswith("config "):
        raise CheckpointError(f"{path}: missing config record")
    config = ModelConfig.from_dict(json.loads(config_line[len("config "):]))
    strategy_line = take("the strategy")
    strategy = strategy_line.split(" ", 1)[1] if " " in strategy_line else "none"
    vocab_head = take("the vocab").split()
    if len(vocab_head) != 2 or vocab_head[0] != "vocab":
        raise CheckpointError(f"{path}: missing vocab record")
    vocab_lines = [take(f"vocab line {i + 1} of {vocab_head[1]}") for i in range(int(vocab_head[1]))]
    vocab = SubwordVocab.loads("\n".join(vocab_lines))
    tensor_head = take("the tensor table").split()
    if len(tensor_head) != 2 or tensor_head[0] != "tensors":
        raise CheckpointTruncatedError(f"{path}: tensor table missing or vocab length field is wrong")
    expected = CodeEmbedder.create(config, vocab).params
    params: dict[str, Tensor] = {}
    for i in range(int(tensor_head[1])):
        fields = take(f"tensor {i + 1} of {tensor_head[1]}").split(" ")
        name, dims, values = fields[0], fields[1], fields[2:]
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        if name not in expected:
            raise CheckpointShapeError(f"{path}: unexpected tensor {name!r}")
        if shape != expected[name].shape:
            raise CheckpointShapeError(f"{path}: tensor {name!r} has shape {shape}, model expects "
                                       f"{expected[name].shape}")
        if len(values) < int(np.prod(shape)):
            raise CheckpointTruncatedError(f"{path}: tensor {name!r} holds {len(values)} of "
                                           f"{int(np.prod(shape))} values")
        if len(values) > int(np.prod(shape)):
            raise CheckpointShapeError(f"{path}: tensor {name!r} holds extra values")
        data = np.array(values, dtype=np.float32).astype(np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointTruncatedError(f"{path}: missing tensors {sorted(missing)}")
    ordered = {k: params[k] for k in expected}
    return CodeEmbedder(config, vocab, ordered), {"strategy": strategy, "version": header[1]}
