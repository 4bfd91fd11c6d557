"""Oracle suites: finite-difference gradients, brute-force graph analyses, structural invariants.

Each suite returns a list of :class:`Check` results; :func:`run_all` runs the
three of them and is what ``depvec selfcheck`` executes.
"""

from __future__ import annotations

import tempfile
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from depvec import numerics as nx
from depvec.depgraph import ENTRY, reaching_definitions
from depvec.gnn import ARCHITECTURES, GraphView, gat_attention, attention_readout, encode_graph, init_readout, \
    init_stack, message_pass
from depvec.lexical import encode_sequences, init_bilstm, lexical_embedding, sgns_loss, train_bpe
from depvec.mir import Kind, Method, parse_program, successors
from depvec.numerics import Tensor

GRAD_TOLERANCE = 1e-4
# central differences at h=1e-5 resolve gradients only down to about 1e-10 on O(1) losses;
# below this magnitude the relative error is taken against the floor instead
GRAD_FLOOR = 1e-6
SEEDS = range(5)


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}: {self.name}" + (f" ({self.detail})" if self.detail else "")


# ---------------------------------------------------------------- gradient oracle


def gradient_error(loss_fn: Callable[[], Tensor], params: dict[str, Tensor]) -> dict[str, float]:
    """Relative error between backward() and central differences for every tensor in ``params``."""
    for p in params.values():
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)
    with nx.Tape() as tape:
        loss = loss_fn()
    nx.backward(loss, tape)
    analytic = {k: p.grad.copy() for k, p in params.items()}

    def value() -> float:
        return float(loss_fn().data.reshape(-1)[0])

    return {k: nx.relative_error(analytic[k], nx.finite_difference_gradient(value, p), floor=GRAD_FLOOR)
            for k, p in params.items()}


def _check_grad(suite: str, name: str, loss_fn, params) -> Check:
    errors = gradient_error(loss_fn, params)
    worst = max(errors, key=errors.get)
    ok = errors[worst] < GRAD_TOLERANCE
    return Check(suite, name, ok, f"max rel err {errors[worst]:.2e} on {worst}")


def _projection(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """Per primitive: a function of input tensors and their random input values."""
    n, m, k = (int(v) for v in rng.integers(2, 5, size=3))
    idx = rng.integers(0, n, size=n + 2)
    key = tuple(int(v) for v in rng.integers(0, 1000, size=3))
    return {
        "matmul": (lambda a, b: nx.matmul(a, b), [rng.normal(size=(n, m)), rng.normal(size=(m, k))]),
        "add": (lambda a, b: nx.add(a, b), [rng.normal(size=(n, m)), rng.normal(size=(1, m))]),
        "sub": (lambda a, b: nx.sub(a, b), [rng.normal(size=(n, m)), rng.normal(size=(n, 1))]),
        "mul": (lambda a, b: nx.mul(a, b), [rng.normal(size=(n, m)), rng.normal(size=(n, m))]),
        "div": (lambda a, b: nx.div(a, b), [rng.normal(size=(n, m)), rng.uniform(0.5, 2.0, size=(n, m))]),
        "scalar_mul": (lambda a: nx.scalar_mul(a, 1.7), [rng.normal(size=(n, m))]),
        "concat": (lambda a, b: nx.concat([a, b], axis=1), [rng.normal(size=(n, m)), rng.normal(size=(n, k))]),
        "slice": (lambda a: nx.slice_(a, 1, m, axis=1), [rng.normal(size=(n, m))]),
        "sum": (lambda a: nx.sum_(a, axis=0, keepdims=True), [rng.normal(size=(n, m))]),
        "mean": (lambda a: nx.mean(a, axis=1, keepdims=True), [rng.normal(size=(n, m))]),
        "exp": (lambda a: nx.exp(a), [rng.normal(size=(n, m))]),
        "log": (lambda a: nx.log(a), [rng.uniform(0.5, 2.0, size=(n, m))]),
        "tanh": (lambda a: nx.tanh(a), [rng.normal(size=(n, m))]),
        "sigmoid": (lambda a: nx.sigmoid(a), [rng.normal(size=(n, m))]),
        "log_sigmoid": (lambda a: nx.log_sigmoid(a), [rng.normal(size=(n, m)) * 3]),
        "relu": (lambda a: nx.relu(a), [_away_from_zero(rng, (n, m))]),
        "leaky_relu": (lambda a: nx.leaky_relu(a, 0.2), [_away_from_zero(rng, (n, m))]),
        "abs": (lambda a: nx.abs_(a), [_away_from_zero(rng, (n, m))]),
        "softmax": (lambda a: nx.softmax(a, axis=1), [rng.normal(size=(n, m))]),
        "dropout": (lambda a: nx.dropout(a, 0.3, True, key=key), [rng.normal(size=(n, m))]),
        "gather_rows": (lambda a: nx.gather_rows(a, idx), [rng.normal(size=(n, m))]),
        "scatter_add_rows": (lambda a: nx.scatter_add_rows(a, idx, n), [rng.normal(size=(len(idx), m))]),
        "reshape": (lambda a: nx.reshape(a, (-1,)), [rng.normal(size=(n, m))]),
    }


def _random_graph(rng: np.random.Generator, n_nodes: int, n_edges: int) -> GraphView:
    src = rng.integers(0, n_nodes, size=n_edges)
    dst = rng.integers(0, n_nodes, size=n_edges)
    etype = rng.integers(0, 4, size=n_edges)
    # mirrored, as every dependence graph is
    return GraphView.from_edges(n_nodes, np.concatenate([src, dst]), np.concatenate([dst, src]),
                                np.concatenate([etype, etype]), np.concatenate([np.zeros(n_edges), np.ones(n_edges)]))


def gradient_suite(seeds: Iterable[int] = SEEDS) -> list[Check]:
    from depvec.pretrain import (PretrainConfig, context_pairs, context_prediction_loss, init_node_head,
                                 init_vgae_heads, node_classification_loss, reconstruction_pairs, vgae_loss)

    out: list[Check] = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for op, (fn, values) in primitive_cases(rng).items():
            inputs = [Tensor(v.copy()) for v in values]
            proj = _projection(rng, fn(*inputs).shape)
            out.append(_check_grad("gradient", f"primitive {op} seed {seed}",
                                   lambda fn=fn, inputs=inputs, proj=proj: nx.sum_(nx.mul(fn(*inputs), proj)),
                                   {f"in{i}": t for i, t in enumerate(inputs)}))

        # BiLSTM over a few short sequences, padding included
        d, hidden, vocab = 3, 2, 6
        params = init_bilstm(d, hidden, seed=seed)
        E = Tensor(rng.normal(size=(vocab, d)))
        seqs = [[2, 3, 4], [5, 2], [3]]
        proj = _projection(rng, (len(seqs), 2 * hidden))
        out.append(_check_grad("gradient", f"bilstm seed {seed}",
                               lambda: nx.sum_(nx.mul(encode_sequences(params, seqs, E), proj)),
                               {**params, "E": E}))

        # SGNS objective
        Es, Os = Tensor(rng.normal(size=(4, 3)) * 0.5), Tensor(rng.normal(size=(4, 3)) * 0.5)
        centers, contexts = np.array([0, 1, 2]), np.array([1, 2, 0])
        negs = rng.integers(0, 4, size=(3, 2))
        out.append(_check_grad("gradient", f"sgns seed {seed}",
                               lambda: sgns_loss(Es, Os, centers, contexts, negs), {"E": Es, "O": Os}))

        # every GNN architecture, 2 layers, dropout on, graphs of at most 8 nodes
        width = 4
        n_nodes = int(rng.integers(4, 9))
        graph = _random_graph(rng, n_nodes, int(rng.integers(3, 8)))
        for arch in ARCHITECTURES:
            stack = init_stack(arch, 2, width, seed=seed, dropout=0.2)
            for layer in stack:  # non-zero biases and epsilon exercise every path
                for name, p in layer.params.items():
                    if name.endswith((".eps", ".b1", ".b2")):
                        p.data[...] = rng.normal(size=p.shape) * 0.3
            X = Tensor(rng.normal(size=(n_nodes, width)))
            params = {k: v for layer in stack for k, v in layer.params.items()}
            proj = _projection(rng, (n_nodes, width))
            out.append(_check_grad(
                "gradient", f"gnn {arch} seed {seed}",
                lambda stack=stack, X=X, proj=proj: nx.sum_(nx.mul(
                    encode_graph(stack, graph, X, train=True, seed=seed, step=1), proj)),
                {**params, "X": X}))

        readout = init_readout(width, 3, seed=seed)
        readout["readout.b_g"].data[...] = 0.3
        H = Tensor(rng.normal(size=(n_nodes, width)))
        owner = np.sort(rng.integers(0, 2, size=n_nodes))
        proj = _projection(rng, (2, 3))
        out.append(_check_grad("gradient", f"readout seed {seed}",
                               lambda: nx.sum_(nx.mul(attention_readout(readout, H, owner, 2), proj)),
                               {**readout, "H": H}))

        # pre-training objectives on small graphs
        small = _random_graph(rng, int(rng.integers(3, 6)), 4)
        stack = init_stack("gat", 2, width, seed=seed)
        X = Tensor(rng.normal(size=(small.n_nodes, width)))
        gparams = {k: v for layer in stack for k, v in layer.params.items()}
        head = init_node_head(width, seed)
        nodes = np.arange(small.n_nodes)
        kinds = rng.integers(0, len(Kind), size=small.n_nodes)
        out.append(_check_grad("gradient", f"node classification seed {seed}",
                               lambda: node_classification_loss(stack, head, small, X, nodes, kinds)[0],
                               {**gparams, **head, "X": X}))

        chain = GraphView.from_edges(6, [0, 1, 2, 3, 4, 1, 2, 3, 4, 5], [1, 2, 3, 4, 5, 0, 1, 2, 3, 4],
                                     [0, 1, 0, 2, 3] * 2, [0] * 5 + [1] * 5)
        ctx = init_stack("gat", 2, width, seed=seed + 1, prefix="ctx")
        cparams = {k: v for layer in ctx for k, v in layer.params.items()}
        Xc = Tensor(rng.normal(size=(6, width)) * 0.5)
        anchors, hoods, rings, _ = context_pairs(chain, range(6), PretrainConfig())
        negative = np.roll(np.arange(len(anchors)), 1)
        out.append(_check_grad("gradient", f"context prediction seed {seed}",
                               lambda: context_prediction_loss(stack, ctx, chain, Xc, hoods, rings, negative),
                               {**gparams, **cparams, "X": Xc}))

        heads = init_vgae_heads(width, 3, seed)
        pos, neg = reconstruction_pairs(small, np.zeros(small.n_nodes, dtype=np.int64), rng)
        eta = rng.normal(size=(small.n_nodes, 3))
        out.append(_check_grad("gradient", f"vgae seed {seed}",
                               lambda: vgae_loss(stack, heads, small, X, pos, neg, eta)[0],
                               {**gparams, **heads, "X": X}))
    return out


# ---------------------------------------------------------------- graph oracles

_VARS = ("a", "b", "c")


def random_method(rng: np.random.Generator, n_instructions: int) -> Method:
    """A random well-formed method over variables a, b, c (parameter a) with labelled jumps."""
    labels = [f"L{i}" for i in range(n_instructions)]
    lines = []
    for i in range(n_instructions):
        kind = int(rng.integers(0, 6)) if i < n_instructions - 1 else 5
        v = _VARS[int(rng.integers(3))]
        w = _VARS[int(rng.integers(3))]
        target = labels[int(rng.integers(n_instructions))]
        if kind == 0:
            stmt = f"{v} = {w}"
        elif kind == 1:
            stmt = f"{v} = {w} + {_VARS[int(rng.integers(3))]}"
        elif kind == 2:
            stmt = f"if {v} < {w} goto {target}"
        elif kind == 3:
            stmt = f"goto {target}"
        elif kind == 4:
            stmt = f"{v} = call g({w})"
        else:
            stmt = f"return {v}"
        lines.append(f"{labels[i]}: {stmt};")
    return parse_program("method f(a) {\n" + "\n".join(lines) + "\n}").method_list()[0]


def reaching_definitions_by_paths(m: Method) -> set[tuple[int, int]]:
    """Enumerate CFG paths from the method entry, tracking the last definition of every variable.

    States (instruction, last-def map) are explored exhaustively; two paths reaching the same
    state have identical futures, so deduplicating them loses no pair.
    """
    succ = successors(m)
    if not m.instructions:
        return set()
    start = tuple(sorted((p, ENTRY) for p in m.params))
    pairs: set[tuple[int, int]] = set()
    seen = set()
    queue = deque([(0, start)])
    while queue:
        i, last = queue.popleft()
        if (i, last) in seen:
            continue
        seen.add((i, last))
        ins = m.instructions[i]
        defs = dict(last)
        for v in ins.uses:
            if v in defs:
                pairs.add((defs[v], i))
        for v in ins.defs:
            defs[v] = i
        state = tuple(sorted(defs.items()))
        for j in succ[i]:
            queue.append((j, state))
    return pairs


def hop_matrix(graph: GraphView) -> np.ndarray:
    """All-pairs undirected hop distances by repeated boolean matrix products (inf if unreachable)."""
    n = graph.n_nodes
    A = np.zeros((n, n), dtype=bool)
    A[graph.src, graph.dst] = True
    A |= A.T
    dist = np.full((n, n), np.inf)
    reach = np.eye(n, dtype=bool)
    dist[reach] = 0
    for k in range(1, n):
        reach = reach | (reach.astype(np.int64) @ A.astype(np.int64) > 0)
        dist[reach & np.isinf(dist)] = k
    return dist


def graph_oracle_suite(n_methods: int = 200, n_graphs: int = 100, seed: int = 0) -> list[Check]:
    from depvec.pretrain import neighborhood, ring

    rng = np.random.default_rng(seed)
    bad = []
    for t in range(n_methods):
        m = random_method(rng, int(rng.integers(1, 7)))
        if reaching_definitions(m) != reaching_definitions_by_paths(m):
            bad.append(t)
    out = [Check("graph", f"reaching definitions on {n_methods} random methods of <=6 instructions", not bad,
                 f"mismatches at {bad[:5]}" if bad else "")]
    bad = []
    for t in range(n_graphs):
        n = int(rng.integers(1, 11))
        g = _random_graph(rng, n, int(rng.integers(0, 2 * n)))
        D = hop_matrix(g)
        for c in range(n):
            for k in (1, 2, 3):
                if neighborhood(g, c, k) != [v for v in range(n) if D[c, v] <= k]:
                    bad.append((t, c, "hood", k))
            if ring(g, c, 1, 3) != [v for v in range(n) if 1 <= D[c, v] <= 3]:
                bad.append((t, c, "ring"))
    out.append(Check("graph", f"context neighborhoods and rings on {n_graphs} graphs of <=10 nodes", not bad,
                     f"mismatches {bad[:5]}" if bad else ""))
    return out


# ---------------------------------------------------------------- invariants


def invariant_suite(seed: int = 0) -> list[Check]:
    from depvec.model import CodeEmbedder, ModelConfig
    from depvec.pretrain import load_checkpoint, save_checkpoint

    rng = np.random.default_rng(seed)
    out: list[Check] = []
    width = 6
    n = 8
    graph = _random_graph(rng, n, 10)
    H = Tensor(rng.normal(size=(n, width)))
    perm = rng.permutation(n)
    inv = np.argsort(perm)

    readout = init_readout(width, 4, seed=seed)
    r0 = attention_readout(readout, H, None, 1).data
    r1 = attention_readout(readout, Tensor(H.data[inv]), None, 1).data
    out.append(Check("invariant", "readout permutation invariance", bool(np.allclose(r0, r1, rtol=1e-12, atol=1e-12)),
                     f"max diff {np.abs(r0 - r1).max():.1e}"))

    ok = True
    for arch in ARCHITECTURES:
        layer = init_stack(arch, 1, width, seed=seed)[0]
        a = message_pass(layer, graph, H).data
        # node i becomes perm[i]; rows of the permuted input are placed accordingly
        b = message_pass(layer, graph.permuted(perm), Tensor(H.data[inv])).data
        ok &= bool(np.array_equal(a[inv], b))
    out.append(Check("invariant", "message passing permutation equivariance (bit-exact, all architectures)", ok))

    layer = init_stack("gat", 1, width, seed=seed)[0]
    alpha, dst, _ = gat_attention(layer, graph, H)
    sums = np.bincount(dst, weights=alpha.data[:, 0], minlength=n)
    out.append(Check("invariant", "GAT attention rows sum to 1", bool(np.abs(sums - 1.0).max() <= 1e-12),
                     f"max dev {np.abs(sums - 1.0).max():.1e}"))

    m = random_method(rng, 6)
    instrs = list(m.instructions)
    vocab = train_bpe([ins.text for ins in instrs], 40)
    params = init_bilstm(4, 3, seed=seed)
    E = Tensor(rng.normal(size=(len(vocab), 4)))
    e0 = lexical_embedding(instrs, params, E, vocab).data
    e1 = lexical_embedding([instrs[i] for i in rng.permutation(len(instrs))], params, E, vocab).data
    out.append(Check("invariant", "lexical sum order invariance (bit-exact)", bool(np.array_equal(e0, e1))))

    model = CodeEmbedder.create(ModelConfig(gnn="gat", layers=2, embed_dim=4, hidden=3, readout_width=5, seed=seed),
                                vocab)
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = Path(tmp) / "a.ckpt", Path(tmp) / "b.ckpt"
        save_checkpoint(model, p1, "context")
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2, "context")
        same_params = all(np.array_equal(model.params[k].data, loaded.params[k].data) for k in model.params)
        same_bytes = p1.read_bytes() == p2.read_bytes()
    out.append(Check("invariant", "checkpoint round trip bit identity", same_params and same_bytes))
    return out


def run_all(seeds: Iterable[int] = SEEDS) -> list[Check]:
    return gradient_suite(seeds) + graph_oracle_suite() + invariant_suite()


def main(report: Callable[[str], None] = print) -> bool:
    start = time.perf_counter()
    checks = run_all()
    for c in checks:
        if not c.passed:
            report(c.line())
    passed = sum(c.passed for c in checks)
    report(f"selfcheck: {passed}/{len(checks)} checks passed in {time.perf_counter() - start:.1f}s")
    return passed == len(checks)
