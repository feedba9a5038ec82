import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abds.metrics import LabeledScores, auc_pr, f1_star, from_map


def flat(scores, labels, ids=None, shape=None):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if ids is None:
        ids = labels.copy()
    return LabeledScores(scores, labels, np.asarray(ids), shape=shape)


class TestLabeledScores:
    def test_validation(self):
        with pytest.raises(ValueError):
            flat([0.1, 0.2], [0, 1, 1])
        with pytest.raises(ValueError):
            LabeledScores(np.array([0.1]), np.array([2]), np.array([1]))
        with pytest.raises(ValueError):
            LabeledScores(np.array([0.1]), np.array([1]), np.array([0]))
        with pytest.raises(ValueError):
            LabeledScores(np.array([0.1, 0.2]), np.array([0, 1]), np.array([0, 1]), shape=(3, 1))

    def test_from_map(self):
        grid = np.array([[0.1, 0.9], [0.2, 0.3]])
        mask = np.array([[0, 1], [0, 0]])
        ls = from_map(grid, mask)
        assert ls.shape == (2, 2)
        np.testing.assert_array_equal(ls.labels, [0, 1, 0, 0])


class TestAucPr:
    def test_perfect_separation(self):
        ls = flat([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert auc_pr(ls) == 1.0

    def test_constant_scores_give_prevalence(self):
        ls = flat([0.5] * 10, [1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
        assert auc_pr(ls) == pytest.approx(0.3)

    def test_hand_example(self):
        ls = flat([0.9, 0.8, 0.7], [1, 0, 1])
        assert auc_pr(ls) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, abs=1e-10)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            auc_pr(flat([0.1, 0.2], [1, 1]))
        with pytest.raises(ValueError):
            auc_pr(flat([0.1, 0.2], [0, 0]))

    @settings(max_examples=30, derandomize=True, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 40))
        scores = rng.normal(size=n)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0], labels[-1] = 0, 1
        base = auc_pr(flat(scores, labels))
        for f in (lambda s: 3 * s + 1, np.exp, lambda s: s**3):
            assert auc_pr(flat(f(scores), labels)) == pytest.approx(base, abs=1e-12)

    @settings(max_examples=25, derandomize=True, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        n = 30
        scores = rng.choice([0.1, 0.4, 0.4, 0.7, 0.9], size=n)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0], labels[-1] = 0, 1
        perm = rng.permutation(n)
        a = auc_pr(flat(scores, labels))
        b = auc_pr(flat(scores[perm], labels[perm]))
        assert a == pytest.approx(b, abs=1e-14)

    def test_tie_blocks_against_bruteforce_average(self):
        # grouped ties must equal the average AP over all tie-consistent orderings
        import itertools

        scores = np.array([0.9, 0.5, 0.5, 0.5, 0.1])
        labels = np.array([0, 1, 0, 1, 0])

        def ap_of_order(order):
            tp = fp = 0
            n_pos = labels.sum()
            ap = 0.0
            prev_r = 0.0
            for i in order:
                if labels[i]:
                    tp += 1
                else:
                    fp += 1
                r = tp / n_pos
                ap += (r - prev_r) * (tp / (tp + fp))
                prev_r = r
            return ap

        tie_block = [1, 2, 3]
        aps = []
        for perm in itertools.permutations(tie_block):
            aps.append(ap_of_order([0, *perm, 4]))
        got = auc_pr(flat(scores, labels))
        assert got == pytest.approx(np.mean(aps), abs=1e-12)


class TestF1Star:
    def test_perfect_map(self):
        # anomaly fraction kept below the smallest interior quantile level
        grid = np.zeros((10, 10))
        mask = np.zeros((10, 10), dtype=int)
        grid[0, :5] = 1.0
        mask[0, :5] = 1
        assert f1_star(from_map(grid, mask)) == 1.0

    def test_all_zero_prediction(self):
        grid = np.zeros((10, 10))
        mask = np.zeros((10, 10), dtype=int)
        mask[2, 3] = 1
        assert f1_star(from_map(grid, mask)) == 0.0

    def test_size_normalization_two_components(self):
        # sizes 1 and 99; only the large one detected at every threshold
        scores = np.zeros(1000)
        labels = np.zeros(1000, dtype=int)
        ids = np.zeros(1000, dtype=int)
        labels[:99] = 1
        ids[:99] = 1       # large component, detected
        labels[99] = 1
        ids[99] = 2        # small component, missed
        scores[:99] = 1.0
        ls = LabeledScores(scores, labels, ids)
        assert f1_star(ls) == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_no_components_rejected(self):
        with pytest.raises(ValueError):
            f1_star(flat([0.5, 0.6], [0, 0]))

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        grid = rng.uniform(size=(8, 8))
        mask = np.zeros((8, 8), dtype=int)
        mask[2:4, 2:4] = 1
        base = f1_star(from_map(grid, mask))
        assert f1_star(from_map(grid * 7 + 2, mask)) == pytest.approx(base, abs=1e-12)
        assert f1_star(from_map(np.exp(grid), mask)) == pytest.approx(base, abs=1e-12)

    @settings(max_examples=20, derandomize=True, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_invariance_flat(self, seed):
        rng = np.random.default_rng(seed)
        n = 50
        scores = rng.uniform(size=n)
        labels = np.zeros(n, dtype=int)
        ids = np.zeros(n, dtype=int)
        labels[:4] = 1
        ids[:4] = [1, 1, 2, 2]
        perm = rng.permutation(n)
        a = f1_star(LabeledScores(scores, labels, ids))
        b = f1_star(LabeledScores(scores[perm], labels[perm], ids[perm]))
        assert a == pytest.approx(b, abs=1e-12)

    def test_fp_weighting_uses_predicted_components(self):
        # one detected GT pixel plus a 3-pixel spurious blob: with the grid
        # shape the blob is one component (FP weight 1), flat it counts 3
        grid = np.zeros((5, 5))
        mask = np.zeros((5, 5), dtype=int)
        mask[0, 0] = 1
        grid[0, 0] = 1.0
        grid[3, 1:4] = 1.0
        spatial = f1_star(from_map(grid, mask), n_thresholds=1)
        flat_ls = LabeledScores(
            grid.ravel(), (mask > 0).astype(int).ravel(), mask.ravel()
        )
        flat_score = f1_star(flat_ls, n_thresholds=1)
        assert spatial == pytest.approx(2 / (2 + 1), abs=1e-12)
        assert flat_score == pytest.approx(2 / (2 + 3), abs=1e-12)

    def test_threshold_count_validation(self):
        with pytest.raises(ValueError):
            f1_star(flat([0.5], [1], [1]), n_thresholds=0)
