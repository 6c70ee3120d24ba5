import io
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atlmetric.text_semantics import (
    DegenerateSum,
    MarginConfig,
    MarginTable,
    NoResolvedTokens,
    WordVectorFormatError,
    WordVectorTable,
    adaptive_margin,
    embed_description,
    hashed_word_vector,
    hashed_word_vectors,
    load_word_vectors,
    semantic_distance,
    tokenize,
)

E1 = np.array([1.0, 0.0])
E2 = np.array([0.0, 1.0])


class TestLoadWordVectors:
    def test_parses_records(self):
        table = load_word_vectors(b"red 1 0\ndress 0 1")
        assert len(table) == 2
        assert table.dim == 2
        np.testing.assert_array_equal(table["dress"], [0.0, 1.0])

    def test_last_duplicate_wins(self):
        table = load_word_vectors(b"red 1 0\nred 0 1")
        assert len(table) == 1
        np.testing.assert_array_equal(table["red"], [0.0, 1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(WordVectorFormatError, match="dimension"):
            load_word_vectors(b"red 1\ndress 0 1")

    def test_malformed_line_reports_number(self):
        with pytest.raises(WordVectorFormatError, match="line 2"):
            load_word_vectors(b"red 1 0\ndress x 1")

    def test_zero_vector_rejected(self):
        with pytest.raises(WordVectorFormatError, match="zero"):
            load_word_vectors(b"red 0 0")

    def test_text_stream_and_dump_roundtrip(self):
        table = hashed_word_vectors(["a", "b", "c"], dim=5, seed=3)
        buf = io.StringIO()
        table.dump(buf)
        again = load_word_vectors(io.StringIO(buf.getvalue()))
        for tok in ("a", "b", "c"):
            np.testing.assert_array_equal(again[tok], table[tok])


def test_tokenize_lowercases_and_splits():
    assert tokenize("Red  Floral\tDRESS") == ("red", "floral", "dress")


def test_hashed_vectors_deterministic_and_unit():
    v1 = hashed_word_vector("floral", 16, seed=4)
    v2 = hashed_word_vector("floral", 16, seed=4)
    assert v1.tobytes() == v2.tobytes()
    assert abs(np.linalg.norm(v1) - 1.0) < 1e-12
    assert not np.allclose(v1, hashed_word_vector("floral", 16, seed=5))


class TestEmbedDescription:
    def test_single_vector(self):
        table = WordVectorTable({"red": E1})
        np.testing.assert_array_equal(embed_description(["red"], table), E1)

    def test_two_orthogonal(self):
        table = WordVectorTable({"red": E1, "dress": E2})
        np.testing.assert_allclose(embed_description(["red", "dress"], table),
                                   [0.70710678, 0.70710678], atol=1e-8)

    def test_degenerate_sum(self):
        table = WordVectorTable({"red": E1, "blue": -E1})
        with pytest.raises(DegenerateSum):
            embed_description(["red", "blue"], table)

    def test_no_resolved_tokens(self):
        table = WordVectorTable({"red": E1})
        with pytest.raises(NoResolvedTokens):
            embed_description(["green"], table)

    def test_unknown_tokens_skipped_and_multiplicity_kept(self):
        table = WordVectorTable({"red": E1, "dress": E2})
        g = embed_description(["red", "red", "dress", "zzz"], table)
        np.testing.assert_allclose(g, np.array([2.0, 1.0]) / np.sqrt(5.0), atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 12))
    def test_unit_norm_fuzz(self, seed, ntok, dim):
        rng = np.random.default_rng(seed)
        vocab = {f"t{i}": rng.standard_normal(dim) + 0.01 for i in range(10)}
        table = WordVectorTable(vocab)
        tokens = [f"t{i}" for i in rng.integers(0, 10, size=ntok)]
        try:
            g = embed_description(tokens, table)
        except DegenerateSum:
            return
        assert abs(np.linalg.norm(g) - 1.0) < 1e-9


class TestSemanticDistance:
    @pytest.mark.parametrize("mode", ["literal", "range_consistent"])
    def test_identical_is_zero(self, mode):
        g = np.array([0.6, 0.8])
        assert semantic_distance(g, g, MarginConfig(0.1, mode)) == 0.0

    def test_antipodal_literal(self):
        d = semantic_distance(E1, -E1, MarginConfig(0.1, "literal"))
        assert d == pytest.approx(4 / 3.9, abs=1e-12)
        assert d == pytest.approx(1.02564, abs=1e-5)

    def test_orthogonal_range_consistent(self):
        d = semantic_distance(E1, E2, MarginConfig(0.1, "range_consistent"))
        assert d == pytest.approx(1.95, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["literal", "range_consistent"]),
           st.sampled_from([0.05, 0.1, 0.5, 2.0]))
    def test_symmetry_and_dot_product_form(self, seed, mode, beta):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((2, 7))
        a /= np.linalg.norm(a)
        b /= np.linalg.norm(b)
        cfg = MarginConfig(beta, mode)
        d = semantic_distance(a, b, cfg)
        assert d == semantic_distance(b, a, cfg)
        scale = 1 / (4 - beta) if mode == "literal" else (4 - beta) / 4
        dot = sum(x * y for x, y in zip(a.tolist(), b.tolist()))
        assert abs(d - scale * (2.0 - 2.0 * dot)) < 1e-12


def test_margin_config_validation():
    with pytest.raises(ValueError):
        MarginConfig(0.0)
    with pytest.raises(ValueError):
        MarginConfig(4.0)
    with pytest.raises(ValueError):
        MarginConfig(0.1, "cosine")


class TestAdaptiveMargin:
    def setup_method(self):
        self.table = WordVectorTable({"red": E1, "dress": E2})

    def test_identical_descriptions_give_beta(self):
        assert adaptive_margin(["red", "dress"], ["red", "dress"], self.table, MarginConfig(0.1)) == 0.1

    def test_orthogonal_literal(self):
        m = adaptive_margin(["red"], ["dress"], self.table, MarginConfig(0.1, "literal"))
        assert m == pytest.approx(0.1 + 2 / 3.9, abs=1e-12)
        assert m == pytest.approx(0.61282, abs=1e-5)

    def test_fallback_counted(self):
        diag = Counter()
        m = adaptive_margin(["red"], ["unknown"], self.table, MarginConfig(0.1), diag)
        assert m == 0.1
        assert diag["margin_fallback"] == 1

    def test_margin_table_matches_function(self):
        descs = [("red",), ("dress",), ("red", "dress"), ("nothing",)]
        cfg = MarginConfig(0.1, "literal")
        mt = MarginTable(descs, self.table, cfg)
        for i in range(4):
            for j in range(4):
                assert mt.margin(i, j) == adaptive_margin(descs[i], descs[j], self.table, cfg)
        assert mt.diagnostics["unembeddable_products"] == 1
        assert mt.diagnostics["margin_fallback"] == 7
