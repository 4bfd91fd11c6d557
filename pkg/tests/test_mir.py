from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depvec.mir import (CorpusError, Kind, ParseError, Program, load_corpus, parse_program, print_program,
                        structurally_equal, successors, validate)
from depvec.selfcheck import random_method

MIN = "method min(a,b){ if a < b goto L1; r = b; return r; L1: r = a; return r; }"


def test_parse_min():
    m = parse_program(MIN).methods["min"]
    assert m.params == ("a", "b")
    assert [i.kind for i in m.instructions] == [Kind.BRANCH, Kind.ASSIGN, Kind.RETURN, Kind.ASSIGN, Kind.RETURN]
    assert m.labels == {"L1": 3}


def test_parse_identity():
    m = parse_program("method id(x){ return x; }").methods["id"]
    assert len(m) == 1
    assert m.instructions[0].kind == Kind.RETURN
    assert m.instructions[0].uses == ("x",)


def test_unresolved_label():
    with pytest.raises(ParseError, match="NOPE"):
        parse_program("method bad(){ goto NOPE; }")


@pytest.mark.parametrize("text", [
    "method f(a){ r = a + ; return r; }",
    "method f(a){ return a }",
    "method f(a) return a; }",
    "method f(a){ L: r = a; L: return r; }",
    "method f(a){ }",
])
def test_syntax_errors(text):
    with pytest.raises(ParseError):
        parse_program(text)


def test_parse_error_has_position():
    with pytest.raises(ParseError) as info:
        parse_program("method f(a){\n  r = a +;\n  return r;\n}")
    assert info.value.line == 2


def test_every_kind_parses():
    text = """
    method f(a, b) {
      x = a;
      y = a * b;
      if x >= y goto L;
      z = call g(x, y);
      goto L;
      L: return z;
    }
    """
    kinds = {i.kind for i in parse_program(text).methods["f"].instructions}
    assert kinds == {Kind.ASSIGN, Kind.ARITH, Kind.BRANCH, Kind.CALL, Kind.JUMP, Kind.RETURN}
    assert parse_program("method g(){ c = 1 < 2; return c; }").methods["g"].instructions[0].kind == Kind.COMPARE


def test_validate_clean():
    assert validate(parse_program(MIN)) == []


def test_validate_use_before_def():
    diags = validate(parse_program("method f(a){ r = q + 1; return r; }"))
    assert len(diags) == 1 and "'q'" in diags[0]


def test_validate_missing_return():
    diags = validate(parse_program("method f(a){ r = a; }"))
    assert len(diags) == 1 and "without return" in diags[0]


def test_successors():
    m = parse_program("method f(a){ b = a; c = b; return c; }").methods["f"]
    assert successors(m) == {0: [1], 1: [2], 2: []}
    assert set(successors(parse_program(MIN).methods["min"])[0]) == {1, 3}
    loop = parse_program("method f(i){ L: goto L; }").methods["f"]
    assert successors(loop) == {0: [0]}


def test_print_parse_fixed_point_on_min():
    p = parse_program(MIN)
    again = parse_program(print_program(p), name=p.name)
    assert structurally_equal(p, again)
    assert print_program(again) == print_program(p)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9))
def test_print_parse_fixed_point_random(seed, n):
    m = random_method(np.random.default_rng(seed), n)
    p = Program("program", {"f": m})
    text = print_program(p)
    q = parse_program(text)
    assert structurally_equal(p, q)
    assert print_program(q) == text


def test_print_parse_fixed_point_on_corpora(corpora):
    for recs in corpora.values():
        for r in recs:
            again = parse_program(print_program(r.program))
            assert structurally_equal(r.program, again), r.id


def _write(path, rows):
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def test_load_corpus(tmp_path):
    rows = [json.dumps({"id": f"p{i}", "code": "method id(x){ return x; }", "label": "a"}) for i in range(3)]
    _write(tmp_path / "c.jsonl", rows)
    assert [r.id for r in load_corpus(tmp_path / "c.jsonl")] == ["p0", "p1", "p2"]


def test_load_corpus_ignores_unknown_fields(tmp_path):
    _write(tmp_path / "c.jsonl", [json.dumps({"id": "p", "code": "method id(x){ return x; }", "extra": [1]})])
    (r,) = load_corpus(tmp_path / "c.jsonl")
    assert r.label is None and r.program.methods["id"]


def test_load_corpus_names_bad_record(tmp_path):
    rows = [json.dumps({"id": "ok", "code": "method id(x){ return x; }"}),
            json.dumps({"id": "broken", "code": "method id(x){ return x }"})]
    _write(tmp_path / "c.jsonl", rows)
    with pytest.raises(CorpusError, match="record 2"):
        load_corpus(tmp_path / "c.jsonl")


def test_load_corpus_malformed_json(tmp_path):
    _write(tmp_path / "c.jsonl", ["{not json"])
    with pytest.raises(CorpusError, match="line 1"):
        load_corpus(tmp_path / "c.jsonl")
