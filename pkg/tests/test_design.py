import itertools

import numpy as np
import pytest

from ibdinfer.design import (
    DesignError,
    build_design,
    check_bibd,
    conditional_probs,
    from_dict,
    incidence,
    load_design,
    reference_design_5_3,
    save_design,
    to_dict,
    unreduced_catalog,
)


class TestBuildDesign:
    def test_reference_catalog_is_valid(self, table1):
        assert table1.n_blocks == 10
        assert table1.n_treatments == 5
        assert table1.treatments_per_block == 3
        assert all(len(w) == 3 for w in table1.catalog)

    def test_minimal_pair_design(self, design48):
        assert design48.catalog == ((1, 2), (1, 3), (2, 3))
        assert design48.n_units == 6

    def test_subsets_normalized_sorted(self):
        d = build_design(3, 3, 2, [(2, 1), (3, 1), (3, 2)], (1, 1, 1), (2, 2, 2))
        assert d.catalog == ((1, 2), (1, 3), (2, 3))

    def test_block_size_not_divisible(self):
        with pytest.raises(DesignError, match="multiple of t"):
            build_design(3, 3, 2, [(1, 2), (1, 3), (2, 3)], (1, 1, 1), (3, 2, 2))

    def test_reps_must_sum_to_block_count(self):
        with pytest.raises(DesignError, match="reps sum"):
            build_design(4, 3, 2, [(1, 2), (1, 3), (2, 3)], (1, 1, 1), (2,) * 4)

    def test_wrong_subset_size(self):
        with pytest.raises(DesignError, match="distinct treatments"):
            build_design(2, 4, 2, [(1, 2, 3), (1, 4)], (1, 1), (2, 2))

    def test_uncovered_treatment(self):
        with pytest.raises(DesignError, match="appear in no catalog subset"):
            build_design(2, 4, 2, [(1, 2), (1, 3)], (1, 1), (2, 2))

    def test_too_few_treatments(self):
        with pytest.raises(DesignError, match="at least 3 treatments"):
            build_design(2, 2, 2, [(1, 2)], (2,), (2, 2))

    def test_subset_size_bounds(self):
        with pytest.raises(DesignError, match="2 <= t < T"):
            build_design(2, 3, 3, [(1, 2, 3)], (2,), (3, 3))
        with pytest.raises(DesignError, match="2 <= t < T"):
            build_design(2, 3, 1, [(1,), (2,)], (1, 1), (1, 1))

    def test_duplicate_subsets_rejected(self):
        with pytest.raises(DesignError, match="duplicate"):
            build_design(3, 3, 2, [(1, 2), (2, 1), (2, 3)], (1, 1, 1), (2, 2, 2))

    def test_single_subset_catalog_cannot_cover_treatments(self):
        # t < T forces at least one treatment outside any single subset.
        with pytest.raises(DesignError, match="appear in no catalog subset"):
            build_design(4, 3, 2, [(1, 2)], (4,), (2,) * 4)

    def test_unreduced_catalog(self):
        cat = unreduced_catalog(5, 3)
        assert len(cat) == 10
        assert all(len(w) == 3 for w in cat)
        d = build_design(10, 5, 3, cat, (1,) * 10, (3,) * 10)
        assert check_bibd(d).is_bibd


class TestIncidence:
    def test_reference_counts(self, table1):
        inc = incidence(table1)
        assert np.all(inc.treatment_counts == 6)
        off = inc.pair_counts[~np.eye(5, dtype=bool)]
        assert np.all(off == 3)
        assert np.all(np.diag(inc.pair_counts) == 6)

    def test_two_subset_direct_count(self):
        d = build_design(2, 3, 2, [(1, 2), (1, 3)], (1, 1), (2, 2))
        inc = incidence(d)
        assert inc.treatment_counts.tolist() == [2, 1, 1]
        assert inc.pair_counts[1, 2] == 0
        assert inc.pair_counts[0, 1] == 1

    def test_doubling_reps_doubles_counts(self):
        d = build_design(6, 3, 2, [(1, 2), (1, 3), (2, 3)], (2, 2, 2), (2,) * 6)
        inc = incidence(d)
        assert np.all(inc.treatment_counts == 4)
        assert inc.pair_counts[0, 1] == 2

    def test_total_count_identity(self, table1, design48, design5760):
        for d in (table1, design48, design5760):
            inc = incidence(d)
            assert inc.treatment_counts.sum() == d.treatments_per_block * d.n_blocks

    def test_probabilities(self, table1):
        inc = incidence(table1)
        assert np.allclose(inc.marginal_probs, 0.6)
        assert np.all(inc.pair_probs <= np.minimum.outer(inc.marginal_probs,
                                                         inc.marginal_probs) + 1e-15)

    def test_depends_only_on_catalog_and_reps(self, table1):
        resized = build_design(10, 5, 3, table1.catalog, table1.reps, (30,) * 10)
        a, b = incidence(table1), incidence(resized)
        assert np.array_equal(a.pair_counts, b.pair_counts)


class TestCheckBibd:
    def test_reference_is_bibd(self, table1):
        status = check_bibd(table1)
        assert status.is_bibd
        assert status.common_treatment_count == 6
        assert status.common_pair_count == 3
        # TL = tK and l(T-1) = L(t-1)
        assert 5 * 6 == 3 * 10
        assert 3 * 4 == 6 * 2

    def test_scaled_reference(self):
        d = reference_design_5_3(rep=2)
        status = check_bibd(d)
        assert status.is_bibd
        assert status.common_treatment_count == 12
        assert status.common_pair_count == 6

    def test_disjoint_pairs_not_bibd(self):
        d = build_design(2, 4, 2, [(1, 2), (3, 4)], (1, 1), (2, 2))
        status = check_bibd(d)
        assert not status.is_bibd
        assert "pair counts" in status.violation

    def test_two_pair_incomplete_design_not_bibd(self):
        # two pairs over three treatments (37/38 split), shared treatment overrepresented
        d = build_design(75, 3, 2, [(1, 2), (1, 3)], (37, 38), (2,) * 75)
        status = check_bibd(d)
        assert not status.is_bibd
        assert status.violation is not None
        even = build_design(74, 3, 2, [(1, 2), (1, 3)], (37, 37), (2,) * 74)
        status = check_bibd(even)
        assert not status.is_bibd
        assert "treatment counts" in status.violation

    def test_unequal_reps_not_bibd(self):
        d = build_design(4, 3, 2, [(1, 2), (1, 3), (2, 3)], (2, 1, 1), (2,) * 4)
        assert not check_bibd(d).is_bibd

    def test_pairwise_identity_for_all_bibds(self):
        for rep in (1, 3):
            d = reference_design_5_3(rep=rep)
            status = check_bibd(d)
            inc = incidence(d)
            T, t = d.n_treatments, d.treatments_per_block
            for z, z2 in itertools.combinations(range(T), 2):
                assert inc.pair_counts[z, z2] * (T - 1) == \
                    inc.treatment_counts[z] * (t - 1)
            assert status.is_bibd


class TestConditionalProbs:
    def test_reference_values(self, table1):
        tab = conditional_probs(table1, 1, 2)
        assert tab.subset_count == 3
        assert tab.co_prob[2] == pytest.approx(2 / 3)
        assert tab.co_pair_prob[2, 3] == pytest.approx(1 / 3)
        assert tab.co_prob[0] == 0 and tab.co_prob[1] == 0

    def test_three_treatment_degenerate(self, design48):
        tab = conditional_probs(design48, 1, 2)
        assert tab.co_prob[2] == pytest.approx(1.0)
        assert np.all(tab.co_pair_prob == 0)

    def test_same_treatment_rejected(self, table1):
        with pytest.raises(DesignError, match="must differ"):
            conditional_probs(table1, 2, 2)

    def test_non_bibd_rejected(self):
        d = build_design(2, 3, 2, [(1, 2), (1, 3)], (1, 1), (2, 2))
        with pytest.raises(DesignError, match="BIBD"):
            conditional_probs(d, 1, 2)

    def test_invariant_under_rep_scaling(self, table1):
        scaled = reference_design_5_3(rep=4)
        a = conditional_probs(table1, 1, 2)
        b = conditional_probs(scaled, 1, 2)
        assert a.subset_count == b.subset_count
        assert np.array_equal(a.co_prob, b.co_prob)
        assert np.array_equal(a.co_pair_prob, b.co_pair_prob)

    def test_entries_are_subset_count_ratios(self, table1):
        tab = conditional_probs(table1, 4, 5)
        for z in (1, 2, 3):
            assert (tab.co_prob[z - 1] * tab.subset_count) == pytest.approx(
                round(tab.co_prob[z - 1] * tab.subset_count))
        assert np.all(tab.co_pair_prob <= np.minimum.outer(tab.co_prob, tab.co_prob) + 1e-15)


class TestDesignFiles:
    def test_round_trip(self, tmp_path, table1):
        path = tmp_path / "design.json"
        save_design(table1, path)
        loaded = load_design(path)
        assert loaded == table1

    def test_missing_field(self):
        with pytest.raises(DesignError, match="missing field"):
            from_dict({"K": 3, "T": 3})

    def test_dict_round_trip(self, design48):
        assert from_dict(to_dict(design48)) == design48
