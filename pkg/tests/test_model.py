from __future__ import annotations

import numpy as np
import pytest

from depvec.lexical import lexical_embedding
from depvec.mir import parse_program
from depvec.model import ModelConfig, code_embedding, cosine
from depvec.pretrain import initial_model

PROGRAMS = [
    parse_program("method f(a){ b = a + 1; c = b * a; return c; }", name="p0"),
    parse_program("method g(x, y){ if x < y goto L; return y; L: return x; }", name="p1"),
    parse_program("method h(n){ r = call sq(n); return r; } method sq(v){ w = v * v; return w; }", name="p2"),
]


@pytest.fixture(scope="module")
def model():
    return initial_model(PROGRAMS, ModelConfig(gnn="gat", layers=2, seed=0), vocab_size=80, sgns_epochs=2)


def test_embedding_width(model):
    z = code_embedding(PROGRAMS[0], model)
    assert z.shape == (600,)
    assert model.config.width == 300 and model.config.embedding_width == 600


def test_lexical_half_is_instruction_sum(model):
    p = PROGRAMS[2]
    want = lexical_embedding(list(p.instructions()), model.params, model.params["lexical.E"], model.vocab).data
    np.testing.assert_allclose(code_embedding(p, model)[:300], want, rtol=0, atol=1e-12)


def test_lexical_mode_zeroes_dependence(model):
    full = code_embedding(PROGRAMS[1], model)
    lex = code_embedding(PROGRAMS[1], model, mode="lexical")
    np.testing.assert_array_equal(lex[:300], full[:300])
    np.testing.assert_array_equal(lex[300:], np.zeros(300))


def test_dependence_mode_zeroes_lexical(model):
    full = code_embedding(PROGRAMS[1], model)
    dep = code_embedding(PROGRAMS[1], model, mode="dependence")
    np.testing.assert_array_equal(dep[:300], np.zeros(300))
    np.testing.assert_array_equal(dep[300:], full[300:])


def test_unknown_mode(model):
    with pytest.raises(ValueError):
        code_embedding(PROGRAMS[0], model, mode="syntax")


def test_embedding_is_deterministic(model):
    np.testing.assert_array_equal(code_embedding(PROGRAMS[2], model), code_embedding(PROGRAMS[2], model))


def test_batched_equals_single(model):
    Z = model.embed(PROGRAMS)
    for p, z in zip(PROGRAMS, Z):
        np.testing.assert_allclose(z, code_embedding(p, model), rtol=0, atol=1e-12)


def test_method_scope(model):
    m = PROGRAMS[2].methods["sq"]
    assert code_embedding(m, model).shape == (600,)


def test_copy_is_independent(model):
    twin = model.copy()
    assert twin.parameter_hash() == model.parameter_hash()
    twin.params["readout.W_t"].data[0, 0] += 1.0
    assert twin.parameter_hash() != model.parameter_hash()


def test_cosine():
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0
    assert abs(cosine(np.array([1.0, 2.0]), np.array([2.0, 4.0])) - 1.0) < 1e-15
    assert cosine(np.zeros(2), np.ones(2)) == 0.0
