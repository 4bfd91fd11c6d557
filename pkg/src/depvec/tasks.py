"""Downstream tasks: fine-tuning heads, metrics, clone scoring, subtoken F1 and probing.

Three tasks share one decision layer design (a single affine map):

* ``SOLUTION_CLASS``: which problem a program solves (softmax cross-entropy).
* ``CLONE``: whether two programs are clones, fed as ``[e1; e2; |e1-e2|; e1*e2]``
  (sigmoid binary cross-entropy, F1 on the positive class).
* ``NAME_PRED``: the subtokens of a method's name, multi-label with threshold 0.5
  (per-subtoken binary cross-entropy, micro F1 over subtokens).

Held-out splits come from a stable hash of each example id, so a dataset is
always split the same way regardless of order or seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from depvec import numerics as nx
from depvec.depgraph import ProgramGraph, build_program_graph, method_as_program_graph
from depvec.lexical import split_identifier
from depvec.mir import Program, Record
from depvec.model import MODES, CodeEmbedder, GraphBatch, as_graph, cosine
from depvec.numerics import Tensor

TRAIN_PERCENT = 80
NAME_THRESHOLD = 0.5


class TaskKind(str, Enum):
    SOLUTION_CLASS = "solution_class"
    CLONE = "clone"
    NAME_PRED = "name_pred"


class DatasetError(ValueError):
    """Degenerate or inconsistent labelled data."""


# ---------------------------------------------------------------- examples and splits


@dataclass(frozen=True)
class Example:
    """One labelled input: a single scope, or a pair of scopes for CLONE."""

    id: str
    graphs: tuple[ProgramGraph, ...]
    target: str | int | frozenset


def split_bucket(example_id: str) -> int:
    return int.from_bytes(hashlib.sha256(example_id.encode("utf-8")).digest()[:8], "big") % 100


def is_train(example_id: str) -> bool:
    return split_bucket(example_id) < TRAIN_PERCENT


def split_examples(examples: Sequence[Example]) -> tuple[list[Example], list[Example]]:
    train = [e for e in examples if is_train(e.id)]
    test = [e for e in examples if not is_train(e.id)]
    return train, test


def name_subtokens(name: str) -> frozenset[str]:
    return frozenset(p.lower() for p in split_identifier(name))


def _method_scope(program: Program, name: str):
    for m in program.method_list():
        if m.name == name:
            return m
    raise DatasetError(f"program {program.name!r} has no method named {name!r}")


def classification_examples(records: Sequence[Record]) -> list[Example]:
    out = []
    for r in records:
        if r.label is None:
            raise DatasetError(f"record {r.id!r} has no label")
        out.append(Example(r.id, (build_program_graph(r.program),), str(r.label)))
    return out


def name_examples(records: Sequence[Record]) -> list[Example]:
    """Method-scope examples; the record label names the method to predict."""
    out = []
    for r in records:
        if not r.label:
            raise DatasetError(f"record {r.id!r} has no method-name label")
        m = _method_scope(r.program, r.label)
        out.append(Example(r.id, (method_as_program_graph(m),), name_subtokens(r.label)))
    return out


def clone_examples(records: Sequence[Record], seed: int = 0) -> list[Example]:
    """Positive pairs within a group, an equal number of cross-group negatives.

    Records sharing ``group`` are clones of one another (the same problem).
    """
    by_group: dict[str, list[Record]] = {}
    for r in records:
        if r.group is None:
            raise DatasetError(f"record {r.id!r} has no clone group")
        by_group.setdefault(r.group, []).append(r)
    graphs = {r.id: build_program_graph(r.program) for r in records}
    positives = []
    for members in by_group.values():
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                positives.append((members[i], members[j]))
    rng = np.random.default_rng(seed)
    negatives, seen = [], set()
    if len(by_group) > 1:
        while len(negatives) < len(positives):
            a, b = rng.integers(len(records), size=2)
            ra, rb = records[int(a)], records[int(b)]
            key = (ra.id, rb.id)
            if ra.group == rb.group or key in seen:
                continue
            seen.add(key)
            negatives.append((ra, rb))
    out = [Example(f"{a.id}|{b.id}", (graphs[a.id], graphs[b.id]), 1) for a, b in positives]
    out += [Example(f"{a.id}|{b.id}", (graphs[a.id], graphs[b.id]), 0) for a, b in negatives]
    return out


def build_examples(task: TaskKind | str, records: Sequence[Record], seed: int = 0) -> list[Example]:
    task = TaskKind(task)
    if task is TaskKind.SOLUTION_CLASS:
        return classification_examples(records)
    if task is TaskKind.CLONE:
        return clone_examples(records, seed)
    return name_examples(records)


def label_space(task: TaskKind | str, examples: Sequence[Example]) -> list[str]:
    task = TaskKind(task)
    if task is TaskKind.CLONE:
        return ["distinct", "clone"]
    if task is TaskKind.NAME_PRED:
        return sorted({t for e in examples for t in e.target})
    return sorted({str(e.target) for e in examples})


def _example_labels(task: TaskKind, e: Example) -> list[str]:
    if task is TaskKind.NAME_PRED:
        return sorted(e.target)
    if task is TaskKind.CLONE:
        return ["clone" if e.target else "distinct"]
    return [str(e.target)]


def check_dataset(task: TaskKind, train: Sequence[Example], test: Sequence[Example]) -> None:
    if not train or not test:
        raise DatasetError(f"split left {len(train)} training and {len(test)} held-out examples")
    seen = {lab for e in train for lab in _example_labels(task, e)}
    if task is not TaskKind.NAME_PRED and len(seen) < 2:
        raise DatasetError(f"degenerate label space: only {sorted(seen)} in the training split")
    missing = sorted({lab for e in test for lab in _example_labels(task, e)} - seen)
    if missing:
        raise DatasetError(f"labels absent from the training split: {', '.join(missing)}")


# ---------------------------------------------------------------- heads


@dataclass
class TaskHead:
    """Single affine decision layer over (pair) code embeddings."""

    task: TaskKind
    labels: list[str]
    params: dict[str, Tensor]
    # fixed feature standardisation folded into the affine map: ((f - shift) / scale) W + b
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None

    @classmethod
    def create(cls, task: TaskKind | str, labels: Sequence[str], embedding_width: int = 600,
               seed: int = 0) -> "TaskHead":
        task = TaskKind(task)
        labels = list(labels)
        if task is not TaskKind.NAME_PRED and len(labels) < 2:
            raise DatasetError(f"degenerate label space {labels}")
        width = 4 * embedding_width if task is TaskKind.CLONE else embedding_width
        n_out = 1 if task is TaskKind.CLONE else len(labels)
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / (width + n_out))
        params = {
            "head.W": Tensor(rng.uniform(-bound, bound, (width, n_out)), requires_grad=True, name="head.W"),
            "head.b": Tensor(np.zeros((1, n_out)), requires_grad=True, name="head.b"),
        }
        return cls(task, labels, params)

    @property
    def in_width(self) -> int:
        return self.params["head.W"].shape[0]

    def fit_standardization(self, features: np.ndarray) -> None:
        self.shift = features.mean(axis=0, keepdims=True)
        sd = features.std(axis=0, keepdims=True)
        self.scale = np.where(sd < 1e-12, 1.0, sd)

    def logits(self, features: Tensor) -> Tensor:
        if self.shift is not None:
            features = nx.mul(nx.sub(features, Tensor(self.shift)), Tensor(1.0 / self.scale))
        return nx.add(nx.matmul(features, self.params["head.W"]), self.params["head.b"])


def pair_features(e1: Tensor, e2: Tensor) -> Tensor:
    return nx.concat([e1, e2, nx.abs_(nx.sub(e1, e2)), nx.mul(e1, e2)], axis=1)


def _features(model: CodeEmbedder, head: TaskHead, examples: Sequence[Example], mode: str,
              train: bool = False, step: int = 0) -> Tensor:
    index: dict[int, int] = {}
    graphs: list[ProgramGraph] = []
    for e in examples:
        for g in e.graphs:
            if id(g) not in index:
                index[id(g)] = len(graphs)
                graphs.append(g)
    batch = GraphBatch(graphs, model.vocab)
    lex, dep, _ = model.forward(batch, train=train, step=step, mode=mode)
    Z = nx.concat([lex, dep], axis=1)
    if head.task is TaskKind.CLONE:
        a = np.array([index[id(e.graphs[0])] for e in examples])
        b = np.array([index[id(e.graphs[1])] for e in examples])
        return pair_features(nx.gather_rows(Z, a), nx.gather_rows(Z, b))
    rows = np.array([index[id(e.graphs[0])] for e in examples])
    return nx.gather_rows(Z, rows)


def _targets(head: TaskHead, examples: Sequence[Example]) -> np.ndarray:
    if head.task is TaskKind.SOLUTION_CLASS:
        pos = {lab: i for i, lab in enumerate(head.labels)}
        return np.array([pos[str(e.target)] for e in examples], dtype=np.int64)
    if head.task is TaskKind.CLONE:
        return np.array([[float(e.target)] for e in examples])
    pos = {lab: i for i, lab in enumerate(head.labels)}
    Y = np.zeros((len(examples), len(head.labels)))
    for r, e in enumerate(examples):
        for t in e.target:
            if t in pos:
                Y[r, pos[t]] = 1.0
    return Y


def binary_cross_entropy_logits(z: Tensor, y: np.ndarray) -> Tensor:
    """mean of -(y log sigma(z) + (1-y) log sigma(-z))."""
    pos = nx.mul(nx.log_sigmoid(z), Tensor(y))
    neg = nx.mul(nx.log_sigmoid(nx.scalar_mul(z, -1.0)), Tensor(1.0 - y))
    return nx.scalar_mul(nx.sum_(nx.add(pos, neg)), -1.0 / y.size)


def task_loss(head: TaskHead, logits: Tensor, targets: np.ndarray) -> Tensor:
    if head.task is TaskKind.SOLUTION_CLASS:
        from depvec.pretrain import cross_entropy

        return cross_entropy(logits, targets)
    return binary_cross_entropy_logits(logits, targets)


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    task: str
    mode: str
    precision: float
    recall: float
    f1: float
    accuracy: float | None = None
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    seed: int = 0
    checkpoint: str | None = None
    n_train: int = 0
    n_test: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["accuracy"] is None:
            del d["accuracy"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self) -> str:
        lines = [f"task={self.task} mode={self.mode} seed={self.seed} train={self.n_train} test={self.n_test}",
                 f"{'class':<24}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}"]
        for name, row in self.per_class.items():
            lines.append(f"{name:<24}{row['precision']:>10.4f}{row['recall']:>10.4f}{row['f1']:>10.4f}"
                         f"{int(row['support']):>9d}")
        lines.append(f"{'micro':<24}{self.precision:>10.4f}{self.recall:>10.4f}{self.f1:>10.4f}")
        if self.accuracy is not None:
            lines.append(f"accuracy {self.accuracy:.4f}")
        return "\n".join(lines)


def prf(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    """``C[t, p]`` counts examples of true class ``t`` predicted as ``p``."""
    C = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(C, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return C


def per_class_table(C: np.ndarray, labels: Sequence[str]) -> dict[str, dict[str, float]]:
    out = {}
    for k, lab in enumerate(labels):
        tp = float(C[k, k])
        p, r, f = prf(tp, float(C[:, k].sum()) - tp, float(C[k, :].sum()) - tp)
        out[lab] = {"precision": p, "recall": r, "f1": f, "support": float(C[k, :].sum())}
    return out


def micro_from_confusion(C: np.ndarray) -> tuple[float, float, float]:
    tp = float(np.trace(C))
    total = float(C.sum())
    return prf(tp, total - tp, total - tp)


def multilabel_counts(Y_true: np.ndarray, Y_pred: np.ndarray) -> tuple[float, float, float]:
    Y_true, Y_pred = Y_true.astype(bool), Y_pred.astype(bool)
    return (float((Y_true & Y_pred).sum()), float((~Y_true & Y_pred).sum()), float((Y_true & ~Y_pred).sum()))


def subtoken_f1(predicted: Sequence[str], true: Sequence[str]) -> tuple[float, float, float]:
    """Set-based subtoken precision, recall, F1.  An empty prediction scores (0, 0, 0)."""
    pred, gold = set(predicted), set(true)
    if not pred or not gold:
        return 0.0, 0.0, 0.0
    hit = len(pred & gold)
    p, r = hit / len(pred), hit / len(gold)
    return p, r, (2 * p * r / (p + r) if p + r > 0 else 0.0)


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneResult:
    model: CodeEmbedder
    head: TaskHead
    report: MetricsReport
    losses: list[float] = field(default_factory=list)


def _chunks(items: Sequence, size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def predict(model: CodeEmbedder, head: TaskHead, examples: Sequence[Example], mode: str = "both",
            batch_size: int = 64) -> np.ndarray:
    """Class ids (SOLUTION_CLASS, CLONE) or a 0/1 label matrix (NAME_PRED)."""
    out = []
    for chunk in _chunks(list(examples), batch_size):
        z = head.logits(_features(model, head, chunk, mode)).data
        if head.task is TaskKind.SOLUTION_CLASS:
            out.append(z.argmax(axis=1))
        elif head.task is TaskKind.CLONE:
            out.append((z[:, 0] >= 0.0).astype(np.int64))  # sigma(z) >= 0.5
        else:
            out.append((z >= np.log(NAME_THRESHOLD / (1.0 - NAME_THRESHOLD))).astype(np.int64))
    return np.concatenate(out, axis=0)


def evaluate(model: CodeEmbedder, head: TaskHead, examples: Sequence[Example], mode: str = "both",
             seed: int = 0, checkpoint: str | None = None) -> MetricsReport:
    pred = predict(model, head, examples, mode)
    targets = _targets(head, examples)
    base = dict(task=head.task.value, mode=mode, seed=seed, checkpoint=checkpoint, n_test=len(examples))
    if head.task is TaskKind.NAME_PRED:
        tp, fp, fn = multilabel_counts(targets, pred)
        p, r, f = prf(tp, fp, fn)
        table = {}
        for k, lab in enumerate(head.labels):
            ck = multilabel_counts(targets[:, k], pred[:, k])
            pk, rk, fk = prf(*ck)
            table[lab] = {"precision": pk, "recall": rk, "f1": fk, "support": float(targets[:, k].sum())}
        return MetricsReport(precision=p, recall=r, f1=f, per_class=table, **base)
    y = targets if head.task is TaskKind.SOLUTION_CLASS else targets[:, 0].astype(np.int64)
    C = confusion_matrix(y, pred, len(head.labels))
    table = per_class_table(C, head.labels)
    accuracy = float(np.trace(C)) / max(float(C.sum()), 1.0)
    if head.task is TaskKind.CLONE:
        row = table["clone"]
        p, r, f = row["precision"], row["recall"], row["f1"]
    else:
        p, r, f = micro_from_confusion(C)
    return MetricsReport(precision=p, recall=r, f1=f, accuracy=accuracy, per_class=table, **base)


def finetune(examples: Sequence[Example], model: CodeEmbedder, head: TaskHead, mode: str = "both",
             epochs: int = 10, seed: int = 0, batch_size: int = 16, lr: float = 0.001,
             checkpoint: str | None = None, standardize: bool = True) -> FinetuneResult:
    """Train model and head together on the hash-selected 80% and report on the rest.

    With ``standardize`` the head first fixes a per-feature shift and scale from the
    training features of the incoming model; the decision layer stays one affine map.

    ``model`` is updated in place; pass ``model.copy()`` to keep the original.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    train, test = split_examples(examples)
    check_dataset(head.task, train, test)
    expected = 4 * model.config.embedding_width if head.task is TaskKind.CLONE else model.config.embedding_width
    if head.in_width != expected:
        raise ValueError(f"head input width {head.in_width} does not match {expected}")
    if standardize:
        head.fit_standardization(np.concatenate(
            [_features(model, head, chunk, mode).data for chunk in _chunks(train, 64)], axis=0))
    rng = np.random.default_rng(seed)
    opt = nx.Adam({**model.params, **head.params}, lr=lr)
    losses = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for chunk in _chunks(order, batch_size):
            batch = [train[i] for i in chunk]
            with nx.Tape() as tape:
                logits = head.logits(_features(model, head, batch, mode, train=True, step=step))
                loss = task_loss(head, logits, _targets(head, batch))
            nx.backward(loss, tape)
            opt.step()
            step += 1
            total += loss.item() * len(batch)
        losses.append(total / len(train))
    report = evaluate(model, head, test, mode, seed=seed, checkpoint=checkpoint)
    report.n_train = len(train)
    return FinetuneResult(model, head, report, losses)


def finetune_task(task: TaskKind | str, records: Sequence[Record], model: CodeEmbedder, mode: str = "both",
                  epochs: int = 10, seed: int = 0, **kw) -> FinetuneResult:
    """Build examples, a fresh head over the training label space, and fine-tune."""
    task = TaskKind(task)
    examples = build_examples(task, records, seed)
    train, _ = split_examples(examples)
    labels = label_space(task, train if task is TaskKind.NAME_PRED else examples)
    head = TaskHead.create(task, labels, model.config.embedding_width, seed=seed)
    return finetune(examples, model, head, mode=mode, epochs=epochs, seed=seed, **kw)


# ---------------------------------------------------------------- clone scoring


def clone_score(p1: Program | ProgramGraph, p2: Program | ProgramGraph, model: CodeEmbedder,
                head: TaskHead | None = None, mode: str = "both") -> float:
    """Cosine of the two code embeddings, or the supervised clone probability with a CLONE head."""
    g1, g2 = as_graph(p1), as_graph(p2)
    if head is None:
        Z = model.embed_graphs([g1, g2], mode=mode)
        return cosine(Z[0], Z[1])
    if head.task is not TaskKind.CLONE:
        raise ValueError(f"clone_score needs a CLONE head, got {head.task.value}")
    z = head.logits(_features(model, head, [Example("pair", (g1, g2), 0)], mode)).data[0, 0]
    return float(1.0 / (1.0 + np.exp(-z)))


# ---------------------------------------------------------------- probing

FEATURES = ("lexical", "dependence", "both")


@dataclass
class ProbeReport:
    feature: str
    accuracy: float
    width: int
    hash_before: str
    hash_after: str
    n_train: int
    n_test: int


def feature_columns(model: CodeEmbedder, feature: str) -> slice:
    w = model.config.width
    if feature == "lexical":
        return slice(0, w)
    if feature == "dependence":
        return slice(w, model.config.embedding_width)
    if feature == "both":
        return slice(0, model.config.embedding_width)
    raise ValueError(f"feature must be one of {FEATURES}, got {feature!r}")


def train_linear_probe(Xtr: np.ndarray, ytr: np.ndarray, n_classes: int, seed: int = 0, epochs: int = 300,
                       lr: float = 0.01) -> dict[str, Tensor]:
    """Softmax regression on fixed features, full batch Adam."""
    from depvec.pretrain import cross_entropy

    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (Xtr.shape[1] + n_classes))
    params = {
        "probe.W": Tensor(rng.uniform(-bound, bound, (Xtr.shape[1], n_classes)), requires_grad=True, name="probe.W"),
        "probe.b": Tensor(np.zeros((1, n_classes)), requires_grad=True, name="probe.b"),
    }
    opt = nx.Adam(params, lr=lr)
    X = Tensor(Xtr)
    for _ in range(epochs):
        with nx.Tape() as tape:
            loss = cross_entropy(nx.add(nx.matmul(X, params["probe.W"]), params["probe.b"]), ytr)
        nx.backward(loss, tape)
        opt.step()
    return params


def probe(model: CodeEmbedder, records: Sequence[Record], feature: str = "both", seed: int = 0,
          epochs: int = 300, lr: float = 0.01) -> ProbeReport:
    """Held-out accuracy of a linear classifier on frozen embedding features."""
    cols = feature_columns(model, feature)
    before = model.parameter_hash()
    examples = classification_examples(records)
    train, test = split_examples(examples)
    check_dataset(TaskKind.SOLUTION_CLASS, train, test)
    labels = label_space(TaskKind.SOLUTION_CLASS, examples)
    pos = {lab: i for i, lab in enumerate(labels)}
    Z = model.embed_graphs([e.graphs[0] for e in examples])[:, cols]
    is_tr = np.array([is_train(e.id) for e in examples])
    y = np.array([pos[str(e.target)] for e in examples])
    mu = Z[is_tr].mean(axis=0)
    sd = Z[is_tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = (Z - mu) / sd
    params = train_linear_probe(Z[is_tr], y[is_tr], len(labels), seed=seed, epochs=epochs, lr=lr)
    scores = Z[~is_tr] @ params["probe.W"].data + params["probe.b"].data
    accuracy = float((scores.argmax(axis=1) == y[~is_tr]).mean())
    after = model.parameter_hash()
    if after != before:
        raise RuntimeError("probe changed the model parameters")
    return ProbeReport(feature, accuracy, cols.stop - cols.start, before, after, int(is_tr.sum()),
                       int((~is_tr).sum()))
