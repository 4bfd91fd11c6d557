"""Deterministic desk-scale corpora in the JSON-Lines corpus format.

Every program comes from a small library of problem templates written in the
mini-IR with ``$placeholders``.  Placeholders ``m``/``m2`` are method
names, ``L<digits>`` labels, everything else variables.  Loop templates tag their
accumulator initialisation (``# @init``) and loop header (``# @header``) so
structure mutants can move the one after the other without touching tokens.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from string import Template

import numpy as np

from depvec.mir import parse_program, write_corpus

VARIABLES = [
    "a", "b", "c", "i", "j", "k", "n", "m", "p", "q", "x", "y", "z", "t", "u", "w",
    "acc", "total", "count", "idx", "pos", "val", "tmp", "res", "cur", "prev", "nxt",
    "num", "size", "limit", "step", "flag", "best", "result", "answer", "value", "index",
    "counter", "accum", "left", "right", "first", "second", "base", "exp", "digit",
    "rest", "quot", "rem", "part", "item", "elem", "data", "input", "output", "state",
    "minVal", "maxVal", "tempVal", "runSum", "loopVar", "outVal", "inVal", "lhs", "rhs",
]

THEMES = {
    "finance": ["price", "amount", "tax", "cost", "fee", "balance", "rate", "payment", "profit", "budget"],
    "geometry": ["width", "height", "area", "side", "radius", "angle", "edge", "corner", "volume", "length"],
    "time": ["hours", "minutes", "seconds", "days", "weeks", "delay", "timer", "clock", "tick", "epoch"],
    "text": ["chars", "words", "lines", "letter", "token", "glyph", "text", "symbol", "phrase", "parag"],
}


@dataclass(frozen=True)
class ProblemTemplate:
    name: str
    method_names: tuple[str, ...]
    source: str
    refactored: str

    @property
    def has_loop(self) -> bool:
        return "# @init" in self.source and "# @header" in self.source


TEMPLATES: list[ProblemTemplate] = [
    ProblemTemplate("sum_to", ("sumTo", "sumUpTo", "computeSum", "totalTo", "addUpTo"), """
method $m($n) {
  $acc = 0; # @init
  $i = 1;
  $L0: if $i > $n goto $L1; # @header
  $acc = $acc + $i;
  $i = $i + 1;
  goto $L0;
  $L1: return $acc;
}""", """
method $m($n) {
  $acc = 0;
  $i = $n;
  $L0: if $i <= 0 goto $L1;
  $acc = $acc + $i;
  $i = $i - 1;
  goto $L0;
  $L1: return $acc;
}"""),
    ProblemTemplate("max3", ("maxOfThree", "largest", "findMax", "maxValue", "pickMax"), """
method $m($a, $b, $c) {
  $r = $a;
  if $b <= $r goto $L0;
  $r = $b;
  $L0: if $c <= $r goto $L1;
  $r = $c;
  $L1: return $r;
}""", """
method $m($a, $b, $c) {
  if $a < $b goto $L0;
  $r = $a;
  goto $L1;
  $L0: $r = $b;
  $L1: if $r >= $c goto $L2;
  $r = $c;
  $L2: return $r;
}"""),
    ProblemTemplate("gcd", ("gcd", "greatestCommonDivisor", "computeGcd", "findGcd", "commonFactor"), """
method $m($a, $b) {
  $L0: if $b == 0 goto $L1;
  $t = $a % $b;
  $a = $b;
  $b = $t;
  goto $L0;
  $L1: return $a;
}""", """
method $m($a, $b) {
  $x = $a;
  $y = $b;
  $L0: if $y != 0 goto $L2;
  return $x;
  $L2: $t = $x % $y;
  $x = $y;
  $y = $t;
  goto $L0;
}"""),
    ProblemTemplate("factorial", ("factorial", "fact", "computeFactorial", "productTo", "factOf"), """
method $m($n) {
  $acc = 1; # @init
  $i = 2;
  $L0: if $i > $n goto $L1; # @header
  $acc = $acc * $i;
  $i = $i + 1;
  goto $L0;
  $L1: return $acc;
}""", """
method $m($n) {
  $acc = 1;
  $L0: if $n <= 1 goto $L1;
  $acc = $acc * $n;
  $n = $n - 1;
  goto $L0;
  $L1: return $acc;
}"""),
    ProblemTemplate("count_digits", ("countDigits", "numDigits", "digitCount", "lengthOfNumber", "digitsIn"), """
method $m($n) {
  $c = 0; # @init
  $L0: if $n == 0 goto $L1; # @header
  $n = $n / 10;
  $c = $c + 1;
  goto $L0;
  $L1: return $c;
}""", """
method $m($n) {
  $c = 1;
  $L0: if $n < 10 goto $L1;
  $c = $c + 1;
  $n = $n / 10;
  goto $L0;
  $L1: return $c;
}"""),
    ProblemTemplate("power", ("power", "pow", "raiseTo", "computePower", "expBy"), """
method $m($b, $e) {
  $r = 1; # @init
  $L0: if $e <= 0 goto $L1; # @header
  $r = $r * $b;
  $e = $e - 1;
  goto $L0;
  $L1: return $r;
}""", """
method $m($b, $e) {
  $r = 1;
  $k = 0;
  $L0: if $k >= $e goto $L1;
  $r = $b * $r;
  $k = $k + 1;
  goto $L0;
  $L1: return $r;
}"""),
    ProblemTemplate("fibonacci", ("fib", "fibonacci", "nthFib", "computeFib", "fibNumber"), """
method $m($n) {
  $x = 0; # @init
  $y = 1;
  $i = 0;
  $L0: if $i >= $n goto $L1; # @header
  $t = $x + $y;
  $x = $y;
  $y = $t;
  $i = $i + 1;
  goto $L0;
  $L1: return $x;
}""", """
method $m($n) {
  $x = 0;
  $y = 1;
  $L0: if $n <= 0 goto $L1;
  $y = $x + $y;
  $x = $y - $x;
  $n = $n - 1;
  goto $L0;
  $L1: return $x;
}"""),
    ProblemTemplate("abs", ("abs", "absolute", "absValue", "magnitude", "nonNegative"), """
method $m($x) {
  if $x >= 0 goto $L0;
  $r = 0 - $x;
  return $r;
  $L0: return $x;
}""", """
method $m($x) {
  $r = $x;
  if $r > 0 goto $L0;
  $r = 0 - $r;
  $L0: return $r;
}"""),
    ProblemTemplate("clamp", ("clamp", "bound", "limitTo", "clip", "restrictRange"), """
method $m($x, $lo, $hi) {
  if $x >= $lo goto $L0;
  return $lo;
  $L0: if $x <= $hi goto $L1;
  return $hi;
  $L1: return $x;
}""", """
method $m($x, $lo, $hi) {
  $r = $x;
  if $r > $lo goto $L0;
  $r = $lo;
  $L0: if $r < $hi goto $L1;
  $r = $hi;
  $L1: return $r;
}"""),
    ProblemTemplate("is_prime", ("isPrime", "checkPrime", "primeTest", "testPrime", "isPrimeNumber"), """
method $m($n) {
  if $n < 2 goto $L2;
  $d = 2;
  $L0: $s = $d * $d;
  if $s > $n goto $L1;
  $r = $n % $d;
  if $r == 0 goto $L2;
  $d = $d + 1;
  goto $L0;
  $L1: return 1;
  $L2: return 0;
}""", """
method $m($n) {
  if $n >= 2 goto $L3;
  return 0;
  $L3: $d = 2;
  $L0: if $d >= $n goto $L1;
  $r = $n % $d;
  if $r != 0 goto $L4;
  return 0;
  $L4: $d = $d + 1;
  goto $L0;
  $L1: return 1;
}"""),
    ProblemTemplate("lower_bound", ("lowerBound", "searchLowerBound", "findLowerBound", "getLowerBound",
                                    "binarySearch"), """
method $m($arr, $n, $key) {
  $lo = 0; # @init
  $hi = $n;
  $L0: if $lo >= $hi goto $L1; # @header
  $s = $lo + $hi;
  $mid = $s / 2;
  $v = call get($arr, $mid);
  if $v < $key goto $L2;
  $hi = $mid;
  goto $L0;
  $L2: $lo = $mid + 1;
  goto $L0;
  $L1: return $lo;
}""", """
method $m($arr, $n, $key) {
  $lo = 0;
  $hi = $n;
  $L0: if $lo < $hi goto $L3;
  return $lo;
  $L3: $d = $hi - $lo;
  $h = $d / 2;
  $mid = $lo + $h;
  $v = call get($arr, $mid);
  if $v >= $key goto $L2;
  $lo = $mid + 1;
  goto $L0;
  $L2: $hi = $mid;
  goto $L0;
}"""),
    ProblemTemplate("sum_digits", ("sumDigits", "digitSum", "addDigits", "sumOfDigits", "crossSum"), """
method $m($n) {
  $acc = 0; # @init
  $L0: if $n <= 0 goto $L1; # @header
  $d = $n % 10;
  $acc = $acc + $d;
  $n = $n / 10;
  goto $L0;
  $L1: return $acc;
}""", """
method $m($n) {
  $acc = 0;
  $L0: if $n == 0 goto $L1;
  $q = $n / 10;
  $p = $q * 10;
  $d = $n - $p;
  $acc = $acc + $d;
  $n = $q;
  goto $L0;
  $L1: return $acc;
}"""),
    ProblemTemplate("reverse_number", ("reverseNumber", "reverseDigits", "flipNumber", "mirrorNumber",
                                       "reversed"), """
method $m($n) {
  $r = 0; # @init
  $L0: if $n == 0 goto $L1; # @header
  $d = $n % 10;
  $t = $r * 10;
  $r = $t + $d;
  $n = $n / 10;
  goto $L0;
  $L1: return $r;
}""", """
method $m($n) {
  $r = 0;
  $L0: if $n <= 0 goto $L1;
  $t = $r * 10;
  $d = $n % 10;
  $r = $d + $t;
  $n = $n / 10;
  goto $L0;
  $L1: return $r;
}"""),
    ProblemTemplate("collatz", ("collatzSteps", "stepsToOne", "collatzLength", "hailstone", "countSteps"), """
method $m($n) {
  $c = 0; # @init
  $L0: if $n <= 1 goto $L1; # @header
  $r = $n % 2;
  if $r == 0 goto $L2;
  $t = $n * 3;
  $n = $t + 1;
  goto $L3;
  $L2: $n = $n / 2;
  $L3: $c = $c + 1;
  goto $L0;
  $L1: return $c;
}""", """
method $m($n) {
  $c = 0;
  $L0: if $n > 1 goto $L4;
  return $c;
  $L4: $c = $c + 1;
  $r = $n % 2;
  if $r != 0 goto $L2;
  $n = $n / 2;
  goto $L0;
  $L2: $t = $n * 3;
  $n = $t + 1;
  goto $L0;
}"""),
    ProblemTemplate("sign", ("sign", "signum", "signOf", "compareZero", "polarity"), """
method $m($x) {
  if $x > 0 goto $L0;
  if $x < 0 goto $L1;
  return 0;
  $L0: return 1;
  $L1: $r = 0 - 1;
  return $r;
}""", """
method $m($x) {
  $r = 0;
  if $x == 0 goto $L1;
  $r = 1;
  if $x > 0 goto $L1;
  $r = 0 - 1;
  $L1: return $r;
}"""),
    ProblemTemplate("sum_squares", ("sumOfSquares", "squareSum", "sumSquares", "addSquares", "squaresTotal"), """
method $m($n) {
  $acc = 0; # @init
  $i = 1;
  $L0: if $i > $n goto $L1; # @header
  $s = call $m2($i);
  $acc = $acc + $s;
  $i = $i + 1;
  goto $L0;
  $L1: return $acc;
}
method $m2($x) {
  $y = $x * $x;
  return $y;
}""", """
method $m($n) {
  $acc = 0;
  $L0: if $n <= 0 goto $L1;
  $s = $n * $n;
  $acc = $acc + $s;
  $n = $n - 1;
  goto $L0;
  $L1: return $acc;
}"""),
    ProblemTemplate("polynomial", ("evalPoly", "polynomial", "quadratic", "evalQuadratic", "polyValue"), """
method $m($x, $a, $b, $c) {
  $s = $x * $x;
  $p = $a * $s;
  $q = $b * $x;
  $t = $p + $q;
  $r = $t + $c;
  return $r;
}""", """
method $m($x, $a, $b, $c) {
  $p = $a * $x;
  $q = $p + $b;
  $t = $q * $x;
  $r = $t + $c;
  return $r;
}"""),
    ProblemTemplate("min_of_range", ("minInRange", "smallestUpTo", "rangeMin", "findMin", "minimumOf"), """
method $m($arr, $n) {
  $best = call get($arr, 0); # @init
  $i = 1;
  $L0: if $i >= $n goto $L1; # @header
  $v = call get($arr, $i);
  if $v >= $best goto $L2;
  $best = $v;
  $L2: $i = $i + 1;
  goto $L0;
  $L1: return $best;
}""", """
method $m($arr, $n) {
  $i = $n - 1;
  $best = call get($arr, $i);
  $L0: if $i <= 0 goto $L1;
  $i = $i - 1;
  $v = call get($arr, $i);
  if $best <= $v goto $L0;
  $best = $v;
  goto $L0;
  $L1: return $best;
}"""),
]

TEMPLATE_BY_NAME = {t.name: t for t in TEMPLATES}
CLASSIFICATION_PROBLEMS = ("sum_to", "max3", "gcd", "count_digits", "lower_bound")
MOTIVATING_PROBLEM = "lower_bound"
CONTROL_PROBLEMS = ("max3", "gcd", "factorial", "count_digits", "abs", "clamp", "is_prime",
                    "collatz", "sign", "polynomial")

_PLACEHOLDER = re.compile(r"\$(\w+)")


def _is_method(p: str) -> bool:
    return p in ("m", "m2")


def _is_label(p: str) -> bool:
    return re.fullmatch(r"L\d+", p) is not None


def placeholders(text: str) -> list[str]:
    seen: list[str] = []
    for name in _PLACEHOLDER.findall(text):
        if name not in seen:
            seen.append(name)
    return seen


def instantiate(text: str, rng: np.random.Generator, method_names=("f",), pool=VARIABLES,
                fixed: dict[str, str] | None = None) -> str:
    """Fill placeholders with random distinct names drawn from ``pool``."""
    mapping = dict(fixed or {})
    names = placeholders(text)
    variables = [p for p in names if not _is_method(p) and not _is_label(p) and p not in mapping]
    chosen = rng.choice(len(pool), size=len(variables), replace=False)
    mapping.update({p: pool[i] for p, i in zip(variables, chosen)})
    if "m" not in mapping:
        mapping["m"] = method_names[int(rng.integers(len(method_names)))]
    if "m2" in names and "m2" not in mapping:
        mapping["m2"] = mapping["m"] + "Helper"
    # labels are numbered in order of first appearance, like a bytecode-to-IR lifter would
    labels = [p for p in names if _is_label(p) and p not in mapping]
    mapping.update({p: f"L{k}" for k, p in enumerate(labels, start=1)})
    return Template(text).substitute(mapping).strip() + "\n"


def mutate_structure(code: str) -> str:
    """Move the tagged initialisation to just after the loop header.

    Instruction texts are unchanged, so the token multiset is preserved.
    """
    lines = code.splitlines()
    init = next(i for i, ln in enumerate(lines) if "# @init" in ln)
    moved = lines.pop(init)
    header = next(i for i, ln in enumerate(lines) if "# @header" in ln)
    if ":" in moved.split("=")[0]:
        raise ValueError("labelled initialisations cannot be moved")
    lines.insert(header + 1, moved)
    return "\n".join(lines) + "\n"


def instruction_multiset(code: str) -> Counter:
    prog = parse_program(code)
    return Counter(ins.text for ins in prog.instructions())


def _record(rid: str, code: str, label: str | None = None, group: str | None = None, **extra) -> dict:
    parse_program(code)  # every generated record must parse
    rec = {"id": rid, "code": code}
    if label is not None:
        rec["label"] = label
    if group is not None:
        rec["group"] = group
    rec.update(extra)
    return rec


def pretrain_corpus(rng: np.random.Generator, size: int = 50) -> list[dict]:
    out = []
    for k in range(size):
        t = TEMPLATES[k % len(TEMPLATES)]
        text = t.source if rng.random() < 0.5 else t.refactored
        out.append(_record(f"pre-{k:03d}", instantiate(text, rng, t.method_names)))
    return out


def classification_set(rng: np.random.Generator, per_class: int = 40) -> list[dict]:
    out = []
    for name in CLASSIFICATION_PROBLEMS:
        t = TEMPLATE_BY_NAME[name]
        for k in range(per_class):
            text = t.source if k % 2 == 0 else t.refactored
            out.append(_record(f"cls-{name}-{k:02d}", instantiate(text, rng, t.method_names), label=name))
    return out


def clone_set(rng: np.random.Generator, instances: int = 2) -> list[dict]:
    """(source, rename, refactor) triples; ``group`` is the problem, so cross-group pairs are unrelated."""
    out = []
    for t in TEMPLATES:
        for k in range(instances):
            src = instantiate(t.source, rng, t.method_names)
            ren = instantiate(t.source, rng, t.method_names)
            ref = instantiate(t.refactored, rng, t.method_names)
            for kind, code in (("source", src), ("rename", ren), ("refactor", ref)):
                out.append(_record(f"clone-{t.name}-{k}-{kind}", code, label=kind, group=t.name))
    return out


def motivating_set(rng: np.random.Generator) -> list[dict]:
    t = TEMPLATE_BY_NAME[MOTIVATING_PROBLEM]
    base = {"arr": "arr", "n": "n", "key": "key", "lo": "lo", "hi": "hi", "s": "s", "mid": "mid", "v": "v"}
    renamed = {"arr": "items", "n": "size", "key": "target", "lo": "low", "hi": "high", "s": "total",
               "mid": "middle", "v": "value"}
    out = [
        _record("original", instantiate(t.source, rng, fixed={"m": "lowerBound", **base}), label="original"),
        _record("rename", instantiate(t.source, rng, fixed={"m": "findLowerBound", **renamed}), label="rename"),
        _record("refactor", instantiate(t.refactored, rng, fixed={"m": "getLowerBound", **base, "d": "diff",
                                                                  "h": "half"}), label="refactor"),
    ]
    for name in CONTROL_PROBLEMS:
        c = TEMPLATE_BY_NAME[name]
        out.append(_record(f"control-{name}", instantiate(c.source, rng, c.method_names), label="control"))
    return out


def name_set(rng: np.random.Generator, per_name: int = 4) -> list[dict]:
    out = []
    for t in TEMPLATES:
        for mname in t.method_names:
            for k in range(per_name):
                text = t.source if k % 2 == 0 else t.refactored
                code = instantiate(text, rng, fixed={"m": mname})
                out.append(_record(f"name-{t.name}-{mname}-{k}", code, label=mname))
    return out


def token_probe_set(rng: np.random.Generator, per_class: int = 50) -> list[dict]:
    """Classes are vocabulary themes; every class draws from the same structures."""
    out = []
    for theme, pool in THEMES.items():
        widened = [f"{w}{s}" for w in pool for s in ("", "Val", "Tmp")]
        for k in range(per_class):
            t = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
            code = instantiate(t.source, rng, ("run",), pool=widened)
            out.append(_record(f"ptok-{theme}-{k:02d}", code, label=theme))
    return out


def structure_probe_set(rng: np.random.Generator, per_class: int = 60) -> list[dict]:
    """Originals vs token-preserving mutants of the loop templates."""
    loops = [t for t in TEMPLATES if t.has_loop]
    out = []
    for k in range(per_class):
        t = loops[k % len(loops)]
        code = instantiate(t.source, rng, t.method_names)
        mutant = mutate_structure(code)
        out.append(_record(f"pstr-{k:03d}-orig", code, label="original", group=f"p{k}"))
        out.append(_record(f"pstr-{k:03d}-mut", mutant, label="mutant", group=f"p{k}"))
    return out


CORPORA = ("pretrain", "classify", "clone", "motivating", "names", "probe_token", "probe_struct")


def generate_desk_corpora(seed: int = 0, out_dir: str | Path | None = None) -> dict[str, list[dict]]:
    rng = np.random.default_rng(seed)
    corpora = {
        "pretrain": pretrain_corpus(rng),
        "classify": classification_set(rng),
        "clone": clone_set(rng),
        "motivating": motivating_set(rng),
        "names": name_set(rng),
        "probe_token": token_probe_set(rng),
        "probe_struct": structure_probe_set(rng),
    }
    for rec_o, rec_m in zip(corpora["probe_struct"][::2], corpora["probe_struct"][1::2]):
        assert instruction_multiset(rec_o["code"]) == instruction_multiset(rec_m["code"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, records in corpora.items():
            write_corpus(out / f"{name}.jsonl", records)
    return corpora
