from __future__ import annotations

from collections import Counter

from depvec.corpora import generate_desk_corpora, instruction_multiset
from depvec.depgraph import build_program_graph
from depvec.mir import validate


def test_generation_is_deterministic():
    assert generate_desk_corpora(seed=3) == generate_desk_corpora(seed=3)
    assert generate_desk_corpora(seed=3) != generate_desk_corpora(seed=4)


def test_sizes(corpora):
    assert len(corpora["pretrain"]) >= 50
    assert len(corpora["motivating"]) == 13


def test_classification_set_is_balanced(corpora):
    counts = Counter(r.label for r in corpora["classify"])
    assert len(counts) == 5 and set(counts.values()) == {40}


def test_every_program_validates(corpora):
    for name, recs in corpora.items():
        for r in recs:
            assert validate(r.program) == [], (name, r.id)


def test_structure_mutants_keep_instruction_multiset(corpora):
    recs = corpora["probe_struct"]
    for orig, mut in zip(recs[::2], recs[1::2]):
        assert orig.group == mut.group
        assert (orig.label, mut.label) == ("original", "mutant")
        assert instruction_multiset(orig.code) == instruction_multiset(mut.code)
        assert build_program_graph(orig.program).edges != build_program_graph(mut.program).edges


def test_rename_clones_are_graph_isomorphic(corpora):
    by_key = {}
    for r in corpora["clone"]:
        stem, kind = r.id.rsplit("-", 1)
        by_key.setdefault(stem, {})[kind] = r
    assert by_key
    for triple in by_key.values():
        src = build_program_graph(triple["source"].program)
        ren = build_program_graph(triple["rename"].program)
        assert sorted(src.edges) == sorted(ren.edges)
        assert src.node_kinds() == ren.node_kinds()


def test_motivating_set_layout(corpora):
    recs = corpora["motivating"]
    assert [r.label for r in recs[:3]] == ["original", "rename", "refactor"]
    assert all(r.label == "control" for r in recs[3:])
    assert len({r.id for r in recs[3:]}) == 10
