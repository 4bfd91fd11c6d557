"""Lexical embedding: subword vocabulary, SGNS subword vectors, BiLSTM instruction encoder."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from depvec import numerics as nx
from depvec.mir import Instruction
from depvec.numerics import Tensor

UNK_TOKEN = "<unk>"
PAD_TOKEN = "<pad>"
UNK, PAD = 0, 1

_ATOM_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|\d+|<=|>=|==|!=|\S")
_CAMEL_RE = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+")


def split_identifier(name: str) -> list[str]:
    """camelCase / snake_case pieces, case preserved."""
    pieces: list[str] = []
    for part in name.split("_"):
        pieces.extend(_CAMEL_RE.findall(part))
    return pieces


def pre_tokenize(text: str) -> list[str]:
    """Lower-cased pieces of an instruction text, before any merges."""
    out: list[str] = []
    for atom in _ATOM_RE.findall(text):
        if atom[0].isalpha() or atom[0] == "_":
            out.extend(p.lower() for p in split_identifier(atom))
        else:
            out.append(atom)
    return out


def _apply_merges(symbols: list[str], ranks: dict[tuple[str, str], int]) -> list[str]:
    while len(symbols) > 1:
        best, best_rank = None, None
        for pair in zip(symbols, symbols[1:]):
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best, best_rank = pair, r
        if best is None:
            break
        merged: list[str] = []
        i = 0
        while i < len(symbols):
            if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == best:
                merged.append(symbols[i] + symbols[i + 1])
                i += 2
            else:
                merged.append(symbols[i])
                i += 1
        symbols = merged
    return symbols


@dataclass
class SubwordVocab:
    merges: list[tuple[str, str]]
    tokens: list[str]
    _index: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _cache: dict[str, list[int]] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        if self.tokens[:2] != [UNK_TOKEN, PAD_TOKEN] or len(self._index) != len(self.tokens):
            raise ValueError("vocab must start with <unk>, <pad> and hold unique tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode_piece(self, piece: str) -> list[int]:
        hit = self._cache.get(piece)
        if hit is not None:
            return hit
        ids: list[int] = []
        for sym in _apply_merges(list(piece), self._ranks):
            i = self._index.get(sym, UNK)
            if i == UNK and ids and ids[-1] == UNK:
                continue
            ids.append(i)
        self._cache[piece] = ids
        return ids

    def encode_text(self, text: str) -> list[int]:
        ids: list[int] = []
        for piece in pre_tokenize(text):
            ids.extend(self.encode_piece(piece))
        return ids or [UNK]

    def dumps(self) -> str:
        lines = [f"{r}\t{a}\t{b}" for r, (a, b) in enumerate(self.merges)]
        lines += [f"{i}\t{t}" for i, t in enumerate(self.tokens)]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SubwordVocab":
        merges: list[tuple[str, str]] = []
        tokens: list[str] = []
        for line in text.splitlines():
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) == 3:
                if int(fields[0]) != len(merges):
                    raise ValueError(f"merge ranks must be dense and increasing, got {fields[0]}")
                merges.append((fields[1], fields[2]))
            elif len(fields) == 2:
                if int(fields[0]) != len(tokens):
                    raise ValueError(f"token ids must be dense, got {fields[0]}")
                tokens.append(fields[1])
            else:
                raise ValueError(f"malformed vocab line: {line!r}")
        return cls(merges, tokens)


def train_bpe(corpus: Iterable[str], target_size: int) -> SubwordVocab:
    """Byte-pair merges over camel/snake-split, lower-cased pieces.

    Stops at ``target_size`` tokens or when no pair occurs twice.  Ties go to
    the lexicographically smaller pair.
    """
    words = Counter()
    for text in corpus:
        words.update(pre_tokenize(text))
    if not words:
        raise ValueError("train_bpe: empty corpus")
    alphabet = sorted({ch for w in words for ch in w})
    if target_size < len(alphabet) + 2:
        raise ValueError(f"train_bpe: target_size {target_size} below alphabet size {len(alphabet)} + 2")
    tokens = [UNK_TOKEN, PAD_TOKEN] + alphabet
    known = set(tokens)
    merges: list[tuple[str, str]] = []
    split = {w: list(w) for w in words}
    while len(tokens) < target_size:
        counts: Counter = Counter()
        for w, freq in words.items():
            syms = split[w]
            for pair in zip(syms, syms[1:]):
                counts[pair] += freq
        if not counts:
            break
        best = min(counts, key=lambda p: (-counts[p], p))
        if counts[best] < 2:
            break
        merges.append(best)
        ranks = {best: 0}
        for w in words:
            if len(split[w]) > 1:
                split[w] = _apply_merges(split[w], ranks)
        new = best[0] + best[1]
        if new not in known:
            tokens.append(new)
            known.add(new)
    return SubwordVocab(merges, tokens)


def tokenize_instruction(instr: Instruction | str, vocab: SubwordVocab) -> list[int]:
    text = instr if isinstance(instr, str) else instr.text
    return vocab.encode_text(text)


# ---------------------------------------------------------------- SGNS


@dataclass
class EmbeddingMatrix:
    E: Tensor
    O: Tensor | None = None
    losses: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.E.shape[1]


def skipgram_pairs(seqs: Sequence[Sequence[int]], window: int) -> np.ndarray:
    """(center, context) id pairs; windows never cross sequence boundaries."""
    pairs: list[tuple[int, int]] = []
    for seq in seqs:
        for t, w in enumerate(seq):
            lo, hi = max(0, t - window), min(len(seq), t + window + 1)
            pairs.extend((w, seq[p]) for p in range(lo, hi) if p != t)
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def sgns_loss(E: Tensor, O: Tensor, centers, contexts, negatives) -> Tensor:
    """Mean over pairs of -log s(e.o+) - sum_i log s(-e.o_i)."""
    centers = np.asarray(centers)
    negatives = np.asarray(negatives).reshape(len(centers), -1)
    k = negatives.shape[1]
    et = nx.gather_rows(E, centers)
    pos = nx.sum_(nx.mul(et, nx.gather_rows(O, contexts)), axis=1)
    total = nx.sum_(nx.log_sigmoid(pos))
    if k:
        etk = nx.gather_rows(E, np.repeat(centers, k))
        neg = nx.sum_(nx.mul(etk, nx.gather_rows(O, negatives.reshape(-1))), axis=1)
        total = nx.add(total, nx.sum_(nx.log_sigmoid(nx.scalar_mul(neg, -1.0))))
    return nx.scalar_mul(total, -1.0 / len(centers))


def train_sgns(seqs: Sequence[Sequence[int]], vocab_size: int, d: int = 100, window: int = 8,
               negatives: int = 5, epochs: int = 5, seed: int = 0, batch_size: int = 512,
               lr: float = 0.001) -> EmbeddingMatrix:
    total_tokens = sum(len(s) for s in seqs)
    if total_tokens < 2:
        raise ValueError("train_sgns: corpus needs at least 2 tokens")
    rng = np.random.default_rng(seed)
    E = Tensor(rng.uniform(-0.5 / d, 0.5 / d, size=(vocab_size, d)), requires_grad=True, name="sgns.E")
    O = Tensor(rng.uniform(-0.5 / d, 0.5 / d, size=(vocab_size, d)), requires_grad=True, name="sgns.O")
    pairs = skipgram_pairs(seqs, window)
    counts = np.bincount(np.concatenate([np.asarray(s, dtype=np.int64) for s in seqs]), minlength=vocab_size)
    noise = counts.astype(np.float64) ** 0.75
    noise /= noise.sum()
    opt = nx.Adam({"E": E, "O": O}, lr=lr)
    emb = EmbeddingMatrix(E, O)
    if len(pairs) == 0:
        return emb
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = pairs[order[start:start + batch_size]]
            negs = rng.choice(vocab_size, size=(len(batch), negatives), p=noise)
            with nx.Tape() as tape:
                loss = sgns_loss(E, O, batch[:, 0], batch[:, 1], negs)
            nx.backward(loss, tape)
            opt.step()
            epoch_loss += loss.item() * len(batch)
            seen += len(batch)
        emb.losses.append(epoch_loss / seen)
    return emb


def nearest_neighbors(token: str, k: int, E: Tensor | np.ndarray, vocab: SubwordVocab) -> list[tuple[str, float]]:
    if token not in vocab:
        raise KeyError(f"nearest_neighbors: {token!r} is not in the vocabulary")
    M = E.data if isinstance(E, Tensor) else np.asarray(E)
    q = vocab.id(token)
    norms = np.linalg.norm(M, axis=1)
    sims = (M @ M[q]) / np.maximum(norms * norms[q], 1e-300)
    order = sorted((i for i in range(len(M)) if i != q), key=lambda i: (-sims[i], i))
    return [(vocab.tokens[i], float(sims[i])) for i in order[:max(k, 0)]]


# ---------------------------------------------------------------- BiLSTM


def init_bilstm(d: int = 100, hidden: int = 150, seed: int = 0, prefix: str = "lstm") -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(hidden)
    params = {}
    for direction in ("fwd", "bwd"):
        for name, shape in (("Wx", (d, 4 * hidden)), ("Wh", (hidden, 4 * hidden)), ("b", (1, 4 * hidden))):
            key = f"{prefix}.{direction}.{name}"
            value = rng.uniform(-bound, bound, size=shape)
            if name == "b":
                value[...] = 0.0
                value[:, hidden:2 * hidden] = 1.0  # forget-gate bias
            params[key] = Tensor(value, requires_grad=True, name=key)
    return params


def _run_lstm(Wx: Tensor, Wh: Tensor, b: Tensor, E: Tensor, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
    n, steps = ids.shape
    H = Wh.shape[0]
    h = Tensor(np.zeros((n, H)))
    c = Tensor(np.zeros((n, H)))
    for t in range(steps):
        x = nx.gather_rows(E, ids[:, t])
        gates = nx.add(nx.add(nx.matmul(x, Wx), nx.matmul(h, Wh)), b)
        i = nx.sigmoid(nx.slice_(gates, 0, H, axis=1))
        f = nx.sigmoid(nx.slice_(gates, H, 2 * H, axis=1))
        g = nx.tanh(nx.slice_(gates, 2 * H, 3 * H, axis=1))
        o = nx.sigmoid(nx.slice_(gates, 3 * H, 4 * H, axis=1))
        c_new = nx.add(nx.mul(f, c), nx.mul(i, g))
        h_new = nx.mul(o, nx.tanh(c_new))
        live = (lengths > t).astype(np.float64)[:, None]
        if live.all():
            h, c = h_new, c_new
        else:
            h = nx.add(nx.mul(h_new, live), nx.mul(h, 1.0 - live))
            c = nx.add(nx.mul(c_new, live), nx.mul(c, 1.0 - live))
    return h


def encode_sequences(params: dict[str, Tensor], seqs: Sequence[Sequence[int]], E: Tensor,
                     prefix: str = "lstm", shared: bool = False) -> Tensor:
    """Final forward and backward hidden states, concatenated, one row per sequence."""
    if not seqs or any(len(s) == 0 for s in seqs):
        raise ValueError("encode_instruction: every subword sequence must be non-empty")
    lengths = np.array([len(s) for s in seqs])
    steps = int(lengths.max())
    fwd = np.full((len(seqs), steps), PAD, dtype=np.int64)
    bwd = np.full((len(seqs), steps), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        fwd[r, :len(s)] = s
        bwd[r, :len(s)] = s[::-1]
    p = lambda d, n: params[f"{prefix}.{d}.{n}"]  # noqa: E731
    back = "fwd" if shared else "bwd"
    hf = _run_lstm(p("fwd", "Wx"), p("fwd", "Wh"), p("fwd", "b"), E, fwd, lengths)
    hb = _run_lstm(p(back, "Wx"), p(back, "Wh"), p(back, "b"), E, bwd, lengths)
    return nx.concat([hf, hb], axis=1)


def encode_instruction(params: dict[str, Tensor], ids: Sequence[int], E: Tensor, **kw) -> Tensor:
    return nx.reshape(encode_sequences(params, [list(ids)], E, **kw), (-1,))


def lexical_embedding(instructions: Sequence[Instruction], params: dict[str, Tensor], E: Tensor,
                      vocab: SubwordVocab) -> Tensor:
    """Element-wise sum of instruction encodings, in canonical (text, index) order."""
    if not instructions:
        raise ValueError("lexical_embedding: scope has no instructions")
    order = sorted(range(len(instructions)), key=lambda i: (instructions[i].text, i))
    seqs = [tokenize_instruction(instructions[i], vocab) for i in order]
    rows = encode_sequences(params, seqs, E)
    return nx.reshape(nx.scatter_add_rows(rows, np.zeros(len(seqs), dtype=np.int64), 1), (-1,))
