import numpy as np
import pytest

from oracles import brute_force_shapley, random_cover_tree
from vetpv.boosting import GbdtParams, fit_gbdt
from vetpv.explain import (
    ExplainError,
    SpeciesGroupMap,
    aggregate_shap,
    group_rows,
    model_margin,
    shap_summary,
    species_of_rows,
    tree_shap,
    tree_shap_batch,
)
from vetpv.forest import ForestParams, fit_forest
from vetpv.matrix import DEATH, RECOVERED, ColumnMeta, FeatureMatrix
from vetpv.trees import DecisionTreeModel, TreeNode, TreeParams, flatten_tree


def single_tree_model(root, n_features=2):
    return DecisionTreeModel(root, [f"f{j}" for j in range(n_features)], TreeParams())


class TestTreeShap:
    def test_single_leaf_has_zero_attributions(self):
        model = single_tree_model(TreeNode(value=0.8, cover=10.0))
        vec = tree_shap(model, np.array([1.0, 2.0]))
        assert np.allclose(vec.phi, 0.0)
        assert vec.base_value == pytest.approx(0.8)

    def test_worked_stump_example(self):
        root = TreeNode(feature=0, threshold=0.5, cover=100.0)
        root.left = TreeNode(value=0.0, cover=50.0)
        root.right = TreeNode(value=1.0, cover=50.0)
        model = single_tree_model(root, n_features=1)
        vec = tree_shap(model, np.array([0.7]))
        assert vec.base_value == pytest.approx(0.5)
        assert vec.phi[0] == pytest.approx(0.5)

    def test_matches_exhaustive_subset_oracle_on_random_trees(self, rng):
        for _ in range(40):
            root = random_cover_tree(rng, n_features=4, max_depth=3)
            model = single_tree_model(root, n_features=4)
            flat = flatten_tree(root)
            for _ in range(4):
                x = rng.uniform(size=4)
                vec = tree_shap(model, x)
                oracle = brute_force_shapley(flat, x, 4)
                assert np.allclose(vec.phi, oracle, atol=1e-9)

    def test_local_accuracy_on_fixture_gbdt(self, separable_matrix):
        model = fit_gbdt(separable_matrix, GbdtParams(n_rounds=30, max_depth=3))
        margins = model_margin(model, separable_matrix.values)
        for i in range(0, separable_matrix.n_rows, 5):
            vec = tree_shap(model, separable_matrix.values[i])
            assert vec.base_value + vec.phi.sum() == pytest.approx(margins[i], abs=1e-9)

    def test_local_accuracy_on_forest(self, separable_matrix):
        model = fit_forest(separable_matrix, ForestParams(n_trees=10, max_depth=3, seed=2))
        margins = model_margin(model, separable_matrix.values)
        for i in range(0, 40, 4):
            vec = tree_shap(model, separable_matrix.values[i])
            assert vec.base_value + vec.phi.sum() == pytest.approx(margins[i], abs=1e-9)

    def test_dummy_feature_gets_zero(self, rng):
        # trees that never split on feature 3
        for _ in range(10):
            root = random_cover_tree(rng, n_features=3, max_depth=3)
            model = single_tree_model(root, n_features=4)
            x = rng.uniform(size=4)
            vec = tree_shap(model, x)
            assert vec.phi[3] == 0.0

    def test_repeated_feature_on_path_handled(self, rng):
        root = TreeNode(feature=0, threshold=0.6, cover=90.0)
        inner = TreeNode(feature=0, threshold=0.3, cover=60.0)
        inner.left = TreeNode(value=1.0, cover=20.0)
        inner.right = TreeNode(value=2.0, cover=40.0)
        root.left = inner
        root.right = TreeNode(value=5.0, cover=30.0)
        model = single_tree_model(root, n_features=2)
        flat = flatten_tree(root)
        for x0 in (0.1, 0.45, 0.9):
            x = np.array([x0, 0.5])
            vec = tree_shap(model, x)
            assert np.allclose(vec.phi, brute_force_shapley(flat, x, 2), atol=1e-12)

    def test_row_width_checked(self, separable_matrix):
        model = fit_gbdt(separable_matrix, GbdtParams(n_rounds=2))
        with pytest.raises(ExplainError):
            tree_shap(model, np.zeros(separable_matrix.n_cols + 2))


def grouped_matrix():
    """Matrix with a species categorical and two AE indicator columns."""
    columns = [
        ColumnMeta(name="age_years", kind="numeric", source_field="age_years"),
        ColumnMeta(
            name="species",
            kind="encoded_categorical",
            category_map={"Dog": 1, "Cattle": 2, "Chicken": 3},
            source_field="species",
        ),
        ColumnMeta(name="ae_terms=Heart disorders", kind="multi_hot",
                   source_vocabulary=("Heart disorders", "Rash"), source_field="ae_terms"),
        ColumnMeta(name="ae_terms=Rash", kind="multi_hot",
                   source_vocabulary=("Heart disorders", "Rash"), source_field="ae_terms"),
        ColumnMeta(name="ae_terms=OTHER", kind="multi_hot",
                   source_vocabulary=("Heart disorders", "Rash"), source_field="ae_terms"),
        ColumnMeta(name="ingredients=DrugX", kind="multi_hot",
                   source_vocabulary=("DrugX",), source_field="ingredients"),
        ColumnMeta(name="ingredients=OTHER", kind="multi_hot",
                   source_vocabulary=("DrugX",), source_field="ingredients"),
    ]
    values = np.array(
        [
            # age, species, heart, rash, other, drugx, other
            [2.0, 1, 1, 0, 0, 1, 0],
            [4.0, 1, 0, 1, 0, 0, 0],
            [1.0, 2, 1, 0, 0, 1, 0],
            [3.0, 3, 0, 0, 0, 0, 0],
        ]
    )
    labels = np.array([DEATH, RECOVERED, DEATH, RECOVERED], dtype=np.int8)
    return FeatureMatrix(values=values, columns=columns, keys=["a", "b", "c", "d"], labels=labels)


def vectors_for(matrix, phis):
    from vetpv.explain import ShapVector

    return [
        ShapVector(key=matrix.keys[i], phi=np.asarray(phis[i], dtype=float), base_value=0.0)
        for i in range(matrix.n_rows)
    ]


class TestAggregation:
    def test_worked_single_active_indicator(self):
        matrix = grouped_matrix()
        phis = [
            [0.1, 0.0, -0.4, 0.0, 0.0, 0.2, 0.0],
            [0.2, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0],
            [0.0, 0.0, -0.6, 0.0, 0.0, 0.1, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ]
        groups = SpeciesGroupMap.load()
        rankings = aggregate_shap(vectors_for(matrix, phis), matrix, groups, "ae_term")
        companion = rankings["Companion"]
        heart = [e for e in companion.entries if e.name == "Heart disorders"][0]
        assert heart.mean_signed_shap == pytest.approx(-0.4)
        assert heart.support == 1
        rash = [e for e in companion.entries if e.name == "Rash"][0]
        assert rash.mean_signed_shap == pytest.approx(0.3)
        # mean |phi| runs over every group row
        assert heart.mean_abs_shap == pytest.approx(0.2)

    def test_inactive_indicator_excluded(self):
        matrix = grouped_matrix()
        phis = [[0.0] * 7] * 4
        groups = SpeciesGroupMap.load()
        rankings = aggregate_shap(vectors_for(matrix, phis), matrix, groups, "ae_term")
        poultry = rankings["Poultry"]  # row d has no active AE indicators
        assert poultry.entries == []

    def test_other_column_left_out_of_term_rankings(self):
        matrix = grouped_matrix()
        phis = [[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]] * 4
        groups = SpeciesGroupMap.load()
        rankings = aggregate_shap(vectors_for(matrix, phis), matrix, groups, "ingredient")
        names = [e.name for e in rankings["Companion"].entries]
        assert "OTHER" not in names

    def test_matches_group_by_oracle(self, rng):
        matrix = grouped_matrix()
        phis = rng.normal(size=(4, 7))
        groups = SpeciesGroupMap.load()
        rankings = aggregate_shap(vectors_for(matrix, phis), matrix, groups, "ae_term")
        # independent recomputation for the Companion group (rows 0 and 1)
        rows = [0, 1]
        heart_active = [i for i in rows if matrix.values[i, 2] == 1.0]
        expected_signed = float(np.mean([phis[i][2] for i in heart_active]))
        expected_abs = float(np.mean([abs(phis[i][2]) for i in rows]))
        heart = [e for e in rankings["Companion"].entries if e.name == "Heart disorders"][0]
        assert heart.mean_signed_shap == pytest.approx(expected_signed)
        assert heart.mean_abs_shap == pytest.approx(expected_abs)
        signed = [e.mean_signed_shap for e in rankings["Companion"].entries]
        assert signed == sorted(signed, reverse=True)

    def test_empty_group_omitted_with_warning(self, caplog):
        matrix = grouped_matrix()
        matrix.values[3, 1] = 1  # move the only poultry row to Dog
        phis = [[0.0] * 6 + [0.0]] * 4
        with caplog.at_level("WARNING"):
            rankings = aggregate_shap(
                vectors_for(matrix, phis), matrix, SpeciesGroupMap.load(), "ae_term"
            )
        assert "Poultry" not in rankings
        assert "no rows" in caplog.text

    def test_species_not_in_map_is_an_error(self):
        matrix = grouped_matrix()
        matrix.columns[1].category_map["Llama"] = 4
        matrix.values[3, 1] = 4
        groups = SpeciesGroupMap.load()
        with pytest.raises(ExplainError) as err:
            group_rows(matrix, groups)
        assert "Llama" in str(err.value)

    def test_species_recovery_and_unknown_code(self):
        matrix = grouped_matrix()
        matrix.values[3, 1] = 0  # UNKNOWN code
        names = species_of_rows(matrix)
        assert names == ["Dog", "Dog", "Cattle", "UNKNOWN"]
        by_group = group_rows(matrix, SpeciesGroupMap.load())
        assert list(by_group["Poultry"]) == []


class TestSummary:
    def test_top_k_clamped_and_sorted_by_mean_abs(self, rng):
        matrix = grouped_matrix()
        phis = rng.normal(size=(4, 7))
        vectors = vectors_for(matrix, phis)
        rows = np.array([0, 1, 2, 3])
        summary = shap_summary(vectors, matrix, rows, top_k=50)
        assert len(summary) == 7  # clamped to the feature count
        means = np.abs(phis).mean(axis=0)
        expected_order = [matrix.columns[j].name for j in np.argsort(-means, kind="stable")]
        assert [name for name, _ in summary] == expected_order

    def test_constant_feature_normalizes_to_midpoint(self):
        matrix = grouped_matrix()
        phis = [[1.0, 0, 0, 0, 0, 0, 0]] * 4
        vectors = vectors_for(matrix, phis)
        summary = shap_summary(vectors, matrix, np.array([0, 1]), top_k=1)
        name, points = summary[0]
        assert name == "age_years"
        # phi constant across rows
        assert {p[1] for p in points} == {1.0}

    def test_small_group_warns_but_emits(self, caplog):
        matrix = grouped_matrix()
        vectors = vectors_for(matrix, [[0.0] * 7] * 4)
        with caplog.at_level("WARNING"):
            summary = shap_summary(vectors, matrix, np.array([0]), top_k=2)
        assert len(summary) == 2
        assert "fewer than 2 rows" in caplog.text


class TestGroupMap:
    def test_bundled_map_loads(self):
        groups = SpeciesGroupMap.load()
        assert groups.group_of("dog") == "Companion"
        assert groups.group_of("Cattle") == "Livestock"
        assert groups.group_of("turkey") == "Poultry"

    def test_unknown_group_name_rejected(self, tmp_path):
        bad = tmp_path / "groups.tsv"
        bad.write_text("species\tgroup\nDog\tMarsupial\n")
        with pytest.raises(ExplainError):
            SpeciesGroupMap.load(bad)

    def test_validate_covers_lists_missing(self):
        groups = SpeciesGroupMap.load()
        with pytest.raises(ExplainError) as err:
            groups.validate_covers(["Dog", "Llama", "Alpaca"])
        assert "Alpaca" in str(err.value) and "Llama" in str(err.value)


def test_batch_explanation_aligns_keys(separable_matrix):
    model = fit_gbdt(separable_matrix, GbdtParams(n_rounds=5, max_depth=2))
    subset = separable_matrix.take_rows(np.arange(7))
    vectors = tree_shap_batch(model, subset)
    assert [v.key for v in vectors] == subset.keys
