"""Method and program dependence graphs.

Node layout of a method graph with ``n`` instructions: ids ``0..n-1`` are the
instructions, ``n`` is ENTRY and ``n+1`` is EXIT.  A program graph stacks the
method graphs in definition order and adds CALL / CALL_RETURN edges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable

import numpy as np

from depvec.mir import Instruction, Kind, Method, Program, successors

ENTRY = -1  # pseudo-definition site for parameters in reaching_definitions


class EdgeType(IntEnum):
    CONTROL = 0
    DATA = 1
    CALL = 2
    CALL_RETURN = 3


Edge = tuple[int, int, int]


def build_cfg(m: Method) -> dict[int, list[int]]:
    return successors(m)


def reaching_definitions(m: Method) -> set[tuple[int, int]]:
    """(def site, use site) pairs; parameter definitions use the ENTRY site."""
    n = len(m.instructions)
    succ = build_cfg(m)
    preds: dict[int, list[int]] = {i: [] for i in range(n)}
    for i, ss in succ.items():
        for s in ss:
            preds[s].append(i)
    # a definition is (site, var)
    defs_of: dict[str, set[tuple[int, str]]] = {}
    for v in m.params:
        defs_of.setdefault(v, set()).add((ENTRY, v))
    for ins in m.instructions:
        for v in ins.defs:
            defs_of.setdefault(v, set()).add((ins.index, v))
    entry_out = {(ENTRY, v) for v in m.params}
    # dead code defines nothing that can reach a use
    live: set[int] = set()
    stack = [0] if n else []
    while stack:
        i = stack.pop()
        if i not in live:
            live.add(i)
            stack.extend(succ[i])

    def transfer(i: int, into: set) -> set:
        ins = m.instructions[i]
        if not ins.defs:
            return into
        killed = set().union(*(defs_of[v] for v in ins.defs))
        return (into - killed) | {(i, v) for v in ins.defs}

    in_sets: list[set] = [set() for _ in range(n)]
    out_sets: list[set] = [set() for _ in range(n)]
    changed = True
    while changed:
        changed = False
        for i in range(n):
            if i not in live:
                continue
            new_in = set(entry_out) if i == 0 else set()
            for p in preds[i]:
                new_in |= out_sets[p]
            new_out = transfer(i, new_in)
            if new_in != in_sets[i] or new_out != out_sets[i]:
                in_sets[i], out_sets[i] = new_in, new_out
                changed = True
    pairs: set[tuple[int, int]] = set()
    for ins in m.instructions:
        for site, v in in_sets[ins.index]:
            if v in ins.uses:
                pairs.add((site, ins.index))
    return pairs


@dataclass
class MethodGraph:
    name: str
    instructions: tuple[Instruction, ...]
    edges: list[Edge]
    X: np.ndarray | None = None

    @property
    def n_instructions(self) -> int:
        return len(self.instructions)

    @property
    def entry(self) -> int:
        return len(self.instructions)

    @property
    def exit(self) -> int:
        return len(self.instructions) + 1

    @property
    def n_nodes(self) -> int:
        return len(self.instructions) + 2

    @property
    def K(self) -> np.ndarray:
        return np.array([t for _, _, t in self.edges], dtype=np.int64)


def build_method_graph(m: Method, encoder: Callable[[list[Instruction]], np.ndarray] | None = None) -> MethodGraph:
    """Typed dependence edges for one method; ``encoder`` fills the feature rows."""
    n = len(m.instructions)
    entry, exit_ = n, n + 1
    edges: list[Edge] = [(entry, 0, EdgeType.CONTROL)]
    for i, ss in sorted(build_cfg(m).items()):
        edges.extend((i, s, EdgeType.CONTROL) for s in ss)
    for ins in m.instructions:
        if ins.kind == Kind.RETURN:
            edges.append((ins.index, exit_, EdgeType.CONTROL))
    for d, u in sorted(reaching_definitions(m)):
        edges.append((entry if d == ENTRY else d, u, EdgeType.DATA))
    edges = [(s, d, int(t)) for s, d, t in edges]
    X = None
    if encoder is not None:
        rows = np.asarray(encoder(list(m.instructions)))
        X = np.zeros((n + 2, rows.shape[1]))
        X[:n] = rows
    return MethodGraph(m.name, m.instructions, edges, X)


@dataclass
class ProgramGraph:
    name: str
    methods: list[MethodGraph]
    offsets: list[int]
    edges: list[Edge]
    X: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return sum(g.n_nodes for g in self.methods)

    def node_instruction(self) -> list[Instruction | None]:
        """Instruction per global node id, None for ENTRY/EXIT."""
        out: list[Instruction | None] = []
        for g in self.methods:
            out.extend(g.instructions)
            out.extend([None, None])
        return out

    def node_kinds(self) -> list[str]:
        out: list[str] = []
        for g in self.methods:
            out.extend(ins.kind.name for ins in g.instructions)
            out.extend(["ENTRY", "EXIT"])
        return out

    @property
    def K(self) -> np.ndarray:
        return np.array([t for _, _, t in self.edges], dtype=np.int64)

    def message_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return mirrored(self.edges)

    def to_json(self) -> str:
        nodes = [{"id": i, "kind": k} for i, k in enumerate(self.node_kinds())]
        src, dst, typ, rev = self.message_edges()
        edges = sorted(zip(src.tolist(), dst.tolist(), typ.tolist(), rev.tolist()))
        return json.dumps({
            "nodes": nodes,
            "edges": [{"src": s, "dst": d, "type": t, "reversed": bool(r)} for s, d, t, r in edges],
        }, sort_keys=True)


def mirrored(edges: list[Edge]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Each edge plus a reversed copy with the same type and direction bit 1."""
    e = np.array(edges, dtype=np.int64).reshape(-1, 3)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    typ = np.concatenate([e[:, 2], e[:, 2]])
    rev = np.concatenate([np.zeros(len(e), np.int64), np.ones(len(e), np.int64)])
    return src, dst, typ, rev


def build_program_graph(p: Program, encoder: Callable[[list[Instruction]], np.ndarray] | None = None) -> ProgramGraph:
    methods = [build_method_graph(m, encoder) for m in p.methods.values()]
    offsets, base = [], 0
    for g in methods:
        offsets.append(base)
        base += g.n_nodes
    where = {g.name: (off, g) for off, g in zip(offsets, methods)}
    edges: list[Edge] = []
    for off, g in zip(offsets, methods):
        edges.extend((s + off, d + off, t) for s, d, t in g.edges)
    for off, g in zip(offsets, methods):
        for ins in g.instructions:
            if ins.kind == Kind.CALL and ins.callee in where:
                t_off, tg = where[ins.callee]
                site = off + ins.index
                edges.append((site, t_off + tg.entry, int(EdgeType.CALL)))
                edges.append((t_off + tg.exit, site, int(EdgeType.CALL_RETURN)))
    X = None
    if encoder is not None:
        X = np.concatenate([g.X for g in methods], axis=0)
    return ProgramGraph(p.name, methods, offsets, edges, X)


def method_as_program_graph(m: Method, encoder=None) -> ProgramGraph:
    g = build_method_graph(m, encoder)
    return ProgramGraph(m.name, [g], [0], list(g.edges), g.X)
