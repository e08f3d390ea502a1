import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttt_omics import autodiff as ad
from ttt_omics import embedding as emb
from ttt_omics.errors import ContractError, DimensionError, ParseError


@pytest.fixture
def small_table(tmp_path):
    path = tmp_path / "order.tsv"
    path.write_text(
        "gene_symbol\tchromosome\tstart_position\n"
        "TP53\tchr17\t7668401\n"
        "BRCA1\tchr17\t43044294\n"
        "CD19\tchr16\t28931939\n"
    )
    return emb.load_gene_order(path)


class TestGeneOrderTable:
    def test_empty_table(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("gene_symbol\tchromosome\tstart_position\n")
        table = emb.load_gene_order(path)
        assert len(table) == 0

    def test_rank_by_position_within_chromosome(self, small_table):
        assert small_table.rank("CD19") == 0  # chr16 before chr17
        assert small_table.rank("TP53") == 1
        assert small_table.rank("BRCA1") == 2

    def test_duplicate_symbol_rejected(self, tmp_path):
        path = tmp_path / "dup.tsv"
        path.write_text(
            "gene_symbol\tchromosome\tstart_position\n"
            "TP53\tchr17\t1\nTP53\tchr17\t2\n")
        with pytest.raises(ParseError) as exc:
            emb.load_gene_order(path)
        assert "TP53" in str(exc.value)

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text(
            "gene_symbol\tchromosome\tstart_position\n"
            "TP53\tchr17\t10\nBRCA1\tchr17\n")
        with pytest.raises(ParseError) as exc:
            emb.load_gene_order(path)
        assert ":3" in str(exc.value)

    def test_non_integer_start_reports_line(self, tmp_path):
        path = tmp_path / "bad2.tsv"
        path.write_text("gene_symbol\tchromosome\tstart_position\nTP53\tchr17\tabc\n")
        with pytest.raises(ParseError) as exc:
            emb.load_gene_order(path)
        assert ":2" in str(exc.value)

    def test_chromosome_natural_order(self):
        rows = [("A", "chr2", 5), ("B", "chr10", 1), ("C", "chrX", 1),
                ("D", "chrY", 1), ("E", "chrM", 1), ("F", "chrUn_gl000220", 1),
                ("G", "chr1", 99)]
        table = emb.GeneOrderTable.from_rows(rows)
        assert [e[0] for e in table.entries] == ["G", "A", "B", "C", "D", "E", "F"]


class TestSortFeatures:
    def test_unmapped_at_top_then_rank_order(self, small_table):
        ordering = emb.sort_features(["BRCA1", "XYZ9", "TP53"], small_table)
        assert ordering.sorted_names == ["XYZ9", "TP53", "BRCA1"]
        assert ordering.unmapped_count == 1
        # permutation maps input index -> sorted position
        np.testing.assert_array_equal(ordering.permutation, [2, 0, 1])

    def test_all_unmapped_is_identity(self, small_table):
        ordering = emb.sort_features(["AA", "BB", "CC"], small_table)
        np.testing.assert_array_equal(ordering.permutation, [0, 1, 2])
        assert ordering.sorted_names == ["AA", "BB", "CC"]

    def test_reverse_mode(self, small_table):
        ordering = emb.sort_features(["BRCA1", "XYZ9", "TP53"], small_table, mode="reverse")
        assert ordering.sorted_names == ["BRCA1", "TP53", "XYZ9"]

    def test_shuffled_deterministic(self, small_table):
        names = [f"G{i}" for i in range(20)]
        a = emb.sort_features(names, small_table, mode="shuffled", seed=7)
        b = emb.sort_features(names, small_table, mode="shuffled", seed=7)
        np.testing.assert_array_equal(a.permutation, b.permutation)
        c = emb.sort_features(names, small_table, mode="shuffled", seed=8)
        assert not np.array_equal(a.permutation, c.permutation)

    def test_empty_rejected(self, small_table):
        with pytest.raises(ContractError):
            emb.sort_features([], small_table)

    def test_apply_then_invert_roundtrip(self, small_table):
        ordering = emb.sort_features(["BRCA1", "XYZ9", "TP53"], small_table)
        values = np.array([10.0, 20.0, 30.0])
        sorted_vals = ordering.apply(values)
        np.testing.assert_array_equal(sorted_vals, [20.0, 30.0, 10.0])
        np.testing.assert_array_equal(ordering.invert(sorted_vals), values)

    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 30))
    @settings(max_examples=25, deadline=None)
    def test_shuffled_is_bijection(self, seed, n):
        table = emb.GeneOrderTable.from_rows([])
        names = [f"G{i}" for i in range(n)]
        ordering = emb.sort_features(names, table, mode="shuffled", seed=seed)
        np.testing.assert_array_equal(np.sort(ordering.permutation), np.arange(n))


class TestSortProteins:
    def test_rank_inheritance(self, small_table):
        ordering = emb.sort_proteins(["pCD19", "pTP53"],
                                     {"pCD19": "CD19", "pTP53": "TP53"}, small_table)
        assert ordering.sorted_names == ["pCD19", "pTP53"]

    def test_unmapped_gene_goes_to_top(self, small_table):
        ordering = emb.sort_proteins(["pTP53", "pNOPE"],
                                     {"pTP53": "TP53", "pNOPE": "UNKNOWN_GENE"}, small_table)
        assert ordering.sorted_names == ["pNOPE", "pTP53"]
        assert ordering.unmapped_count == 1

    def test_same_gene_tie_broken_by_input_order(self, small_table):
        ordering = emb.sort_proteins(["pA", "pB"], {"pA": "TP53", "pB": "TP53"}, small_table)
        assert ordering.sorted_names == ["pA", "pB"]
        ordering2 = emb.sort_proteins(["pB", "pA"], {"pA": "TP53", "pB": "TP53"}, small_table)
        assert ordering2.sorted_names == ["pB", "pA"]

    def test_protein_map_loader_errors(self, tmp_path):
        bad = tmp_path / "map.tsv"
        bad.write_text("protein\tgene_symbol\npX\tTP53\textra\tcols\n")
        with pytest.raises(ParseError):
            emb.load_protein_map(bad)
        dup = tmp_path / "dup.tsv"
        dup.write_text("protein\tgene_symbol\npX\tTP53\npX\tBRCA1\n")
        with pytest.raises(ParseError):
            emb.load_protein_map(dup)


def make_embed(tape, n, d, seed=0):
    arrays = emb.init_embedding_arrays(n, d, np.random.default_rng(seed))
    return arrays, emb.bind_embedding(tape, arrays)


def identity_ordering(n):
    return emb.FeatureOrdering(permutation=np.arange(n), unmapped_count=n,
                               sorted_names=[f"F{i}" for i in range(n)])


class TestBuildTokens:
    def test_zero_expression_gives_symbol_rows(self):
        t = ad.Tape()
        _, params = make_embed(t, 4, 3)
        tokens = emb.build_tokens(np.zeros(4), identity_ordering(4), params)
        np.testing.assert_array_equal(tokens.combined.values, params.symbol.values)

    def test_shape_contract(self):
        t = ad.Tape()
        _, params = make_embed(t, 5, 3)
        tokens = emb.build_tokens(np.arange(5.0), identity_ordering(5), params)
        assert tokens.combined.values.shape == (5, 3)
        batch = emb.build_tokens(np.arange(10.0).reshape(2, 5), identity_ordering(5), params)
        assert batch.combined.values.shape == (2, 5, 3)

    def test_permutation_equivariance(self, small_table):
        # permuting input features while keeping the ordering consistent
        # must land every feature on the same sorted row
        names = ["BRCA1", "XYZ9", "TP53"]
        expr = np.array([1.0, 2.0, 3.0])
        t = ad.Tape()
        _, params = make_embed(t, 3, 4, seed=2)
        ordering = emb.sort_features(names, small_table)
        tokens = emb.build_tokens(expr, ordering, params)

        shuffled = [names[2], names[0], names[1]]
        expr_shuffled = np.array([expr[2], expr[0], expr[1]])
        ordering2 = emb.sort_features(shuffled, small_table)
        tokens2 = emb.build_tokens(expr_shuffled, ordering2, params)
        np.testing.assert_array_equal(tokens.combined.values, tokens2.combined.values)

    def test_length_mismatch(self):
        t = ad.Tape()
        _, params = make_embed(t, 4, 3)
        with pytest.raises(DimensionError):
            emb.build_tokens(np.zeros(5), identity_ordering(5), params)

    def test_symbol_rows_tied_across_cells(self):
        t = ad.Tape()
        _, params = make_embed(t, 4, 3)
        a = emb.build_tokens(np.ones(4), identity_ordering(4), params)
        b = emb.build_tokens(np.full(4, 2.0), identity_ordering(4), params)
        assert a.symbol_embedding is b.symbol_embedding


class TestApplyMask:
    def test_count_is_floor(self):
        plan = emb.make_mask_plan(100, 0.15, seed=1)
        assert plan.masked_indices.size == 15

    def test_ratio_zero(self):
        t = ad.Tape()
        _, params = make_embed(t, 6, 3)
        tokens = emb.build_tokens(np.arange(6.0), identity_ordering(6), params)
        visible, record = emb.apply_mask(tokens, emb.make_mask_plan(6, 0.0, seed=0))
        np.testing.assert_array_equal(visible.values, tokens.combined.values)
        assert record.masked_positions.size == 0
        assert record.masked_symbols is None

    def test_same_seed_same_plan(self):
        a = emb.make_mask_plan(50, 0.3, seed=9)
        b = emb.make_mask_plan(50, 0.3, seed=9)
        np.testing.assert_array_equal(a.masked_indices, b.masked_indices)

    def test_ratio_one_rejected(self):
        with pytest.raises(ContractError):
            emb.make_mask_plan(10, 1.0, seed=0)

    def test_visible_are_unmasked_in_order(self):
        t = ad.Tape()
        _, params = make_embed(t, 10, 2)
        tokens = emb.build_tokens(np.arange(10.0), identity_ordering(10), params)
        plan = emb.make_mask_plan(10, 0.3, seed=4)
        visible, record = emb.apply_mask(tokens, plan)
        np.testing.assert_array_equal(record.visible_positions,
                                      np.setdiff1d(np.arange(10), plan.masked_indices))
        np.testing.assert_array_equal(
            visible.values, tokens.combined.values[record.visible_positions])

    def test_masked_positions_refer_to_sorted_indices(self, small_table):
        # masking happens after sorting: record positions index the sorted
        # sequence, and their symbols are the sorted-position rows
        names = ["BRCA1", "XYZ9", "TP53", "CD19"]
        ordering = emb.sort_features(names, small_table)
        t = ad.Tape()
        _, params = make_embed(t, 4, 3)
        tokens = emb.build_tokens(np.arange(4.0), ordering, params)
        plan = emb.make_mask_plan(4, 0.5, seed=2)
        _, record = emb.apply_mask(tokens, plan)
        np.testing.assert_array_equal(
            record.masked_symbols.values, params.symbol.values[record.masked_positions])

    def test_plan_length_mismatch(self):
        t = ad.Tape()
        _, params = make_embed(t, 6, 3)
        tokens = emb.build_tokens(np.arange(6.0), identity_ordering(6), params)
        with pytest.raises(DimensionError):
            emb.apply_mask(tokens, emb.make_mask_plan(7, 0.2, seed=0))


@given(st.integers(0, 10 ** 6), st.integers(1, 40), st.floats(0.0, 0.99))
@settings(max_examples=40, deadline=None)
def test_mask_plan_properties(seed, n, ratio):
    plan = emb.make_mask_plan(n, ratio, seed)
    assert plan.masked_indices.size == int(np.floor(ratio * n))
    assert np.all(np.diff(plan.masked_indices) > 0)
    assert plan.visible_indices.size + plan.masked_indices.size == n
