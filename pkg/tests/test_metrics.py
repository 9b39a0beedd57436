import numpy as np
import pytest

from patchnf.errors import DataError
from patchnf.metrics import aupro, auroc, confusion, label_regions, pro_curve, roc_curve


# -- independent oracles -------------------------------------------------------


def pairwise_auroc_oracle(scores, labels):
    """Brute-force Mann-Whitney: count anomalous-beats-normal pairs, ties 0.5."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def flood_fill_labels(mask):
    """8-connectivity component labeling by explicit flood fill."""
    mask = np.asarray(mask) > 0
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=int)
    current = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx]:
                continue
            current += 1
            stack = [(sy, sx)]
            labels[sy, sx] = current
            while stack:
                y, x = stack.pop()
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                            labels[ny, nx] = current
                            stack.append((ny, nx))
    return labels, current


def aupro_oracle(maps, masks, fpr_limit=0.3):
    """Exhaustive sweep: recompute every operating point from scratch at every
    distinct threshold, then integrate under the shared curve convention
    (linear between points, constant left of the first, trapezoid to the cap)."""
    all_values = np.unique(np.concatenate([np.asarray(m).ravel() for m in maps]))[::-1]
    points = []
    for v in all_values:
        overlaps = []
        fired_neg = 0
        total_neg = 0
        for amap, mask in zip(maps, masks):
            amap = np.asarray(amap, dtype=np.float64)
            binary = np.asarray(mask) > 0
            pred = amap >= v
            labels, n = flood_fill_labels(binary)
            for r in range(1, n + 1):
                region = labels == r
                overlaps.append(np.logical_and(pred, region).sum() / region.sum())
            fired_neg += np.logical_and(pred, ~binary).sum()
            total_neg += (~binary).sum()
        points.append((fired_neg / total_neg, float(np.mean(overlaps))))
    # deduplicate by fpr, keeping the highest pro
    dedup = {}
    for f, p in points:
        dedup[f] = max(p, dedup.get(f, 0.0))
    fprs = sorted(dedup)
    pros = [dedup[f] for f in fprs]
    if fprs[0] > 0:
        fprs = [0.0] + fprs
        pros = [pros[0]] + pros
    fprs = np.array(fprs)
    pros = np.array(pros)
    if fpr_limit <= fprs[0]:
        return float(pros[0])
    if fpr_limit < fprs[-1]:
        pro_at = float(np.interp(fpr_limit, fprs, pros))
        inside = fprs <= fpr_limit
        fprs = np.r_[fprs[inside], fpr_limit]
        pros = np.r_[pros[inside], pro_at]
    return float(np.trapezoid(pros, fprs)) / fpr_limit


# -- AUROC --------------------------------------------------------------------


class TestAuroc:
    def test_spec_example(self):
        # pairs: (0.35 vs 0.1) win, (0.35 vs 0.4) loss, (0.8 vs both) wins -> 3/4
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_perfect_separation(self):
        assert auroc([1, 2, 10, 11], [0, 0, 1, 1]) == 1.0

    def test_all_ties(self):
        assert auroc([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            auroc([1, 2], [1, 1])

    def test_matches_pairwise_oracle(self):
        gen = np.random.default_rng(0)
        for _ in range(50):
            n = int(gen.integers(4, 120))
            scores = np.round(gen.normal(size=n), 2)  # rounding forces ties
            labels = gen.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            got = auroc(scores, labels)
            want = pairwise_auroc_oracle(scores.tolist(), labels.tolist())
            n_pos = int(labels.sum())
            n_neg = n - n_pos
            # both values are multiples of 0.5/(n_pos*n_neg); compare numerators
            assert round(got * 2 * n_pos * n_neg) == round(want * 2 * n_pos * n_neg)

    def test_invariant_under_monotone_transform(self):
        gen = np.random.default_rng(1)
        scores = gen.normal(size=50)
        labels = gen.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        base = auroc(scores, labels)
        assert auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert auroc(3 * scores + 7, labels) == pytest.approx(base, abs=1e-12)

    def test_label_flip_complement(self):
        gen = np.random.default_rng(2)
        scores = gen.normal(size=40)  # continuous, no ties
        labels = gen.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        assert auroc(scores, labels) + auroc(scores, 1 - labels) == pytest.approx(1.0)

    def test_curve_endpoints_monotone(self):
        gen = np.random.default_rng(3)
        curve = roc_curve(gen.normal(size=30), gen.integers(0, 2, size=30) | np.r_[1, np.zeros(29, int)])
        assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
        assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0
        assert np.all(np.diff(curve.fpr) >= 0)
        assert np.all(np.diff(curve.tpr) >= 0)


# -- AUPRO --------------------------------------------------------------------


def toy_case(seed, h=8, w=8):
    gen = np.random.default_rng(seed)
    amap = np.round(gen.uniform(size=(h, w)), 1)
    mask = np.zeros((h, w))
    y, x = int(gen.integers(0, h - 2)), int(gen.integers(0, w - 2))
    mask[y : y + 2, x : x + 2] = 1
    return amap, mask


class TestAupro:
    def test_perfect_detector(self):
        mask = np.zeros((8, 8))
        mask[2:4, 3:5] = 1
        assert aupro([mask.copy()], [mask]) == pytest.approx(1.0)

    def test_constant_map(self):
        mask = np.zeros((8, 8))
        mask[1:3, 1:3] = 1
        assert aupro([np.full((8, 8), 0.4)], [mask]) == pytest.approx(1.0)

    def test_toy_case_matches_exhaustive_oracle(self):
        amap, mask = toy_case(4)
        assert aupro([amap], [mask]) == pytest.approx(aupro_oracle([amap], [mask]), abs=1e-9)

    def test_random_toys_match_oracle(self):
        for seed in range(8):
            amap1, mask1 = toy_case(seed * 3 + 10)
            amap2, mask2 = toy_case(seed * 3 + 11)
            mask2[:] = 0  # second image defect-free
            got = aupro([amap1, amap2], [mask1, mask2])
            want = aupro_oracle([amap1, amap2], [mask1, mask2])
            assert got == pytest.approx(want, abs=1e-9)

    def test_no_region_rejected(self):
        with pytest.raises(DataError):
            aupro([np.ones((4, 4))], [np.zeros((4, 4))])

    def test_nonbinary_mask_rejected(self):
        with pytest.raises(DataError):
            aupro([np.ones((4, 4))], [np.full((4, 4), 0.5)])

    def test_pro_curve_values_bounded(self):
        amap, mask = toy_case(99)
        curve = pro_curve([amap], [mask])
        assert np.all(curve.pro >= 0) and np.all(curve.pro <= 1)
        assert 0 <= curve.aupro <= 1


class TestComponents:
    def test_labeling_matches_flood_fill(self):
        gen = np.random.default_rng(5)
        for _ in range(10):
            mask = gen.uniform(size=(12, 12)) > 0.7
            ours, n_ours = label_regions(mask)
            oracle, n_oracle = flood_fill_labels(mask)
            assert n_ours == n_oracle
            # same partition: every our-component maps to exactly one oracle label
            for r in range(1, n_ours + 1):
                vals = np.unique(oracle[ours == r])
                assert vals.size == 1

    def test_diagonal_pixels_are_one_region(self):
        mask = np.eye(5)
        _, n = label_regions(mask)
        assert n == 1


class TestConfusion:
    def test_paper_valve_counts(self):
        # 34 normals below threshold, 3 anomalous below, 0 normals above, 33 anomalous above
        scores = [0.0] * 34 + [0.0] * 3 + [1.0] * 33
        labels = [0] * 34 + [1] * 3 + [1] * 33
        got = confusion(scores, labels, threshold=0.5)
        assert (got["tp"], got["fp"], got["fn"], got["tn"]) == (34, 3, 0, 33)
        assert round(100 * got["accuracy"], 2) == 95.71
        assert round(100 * got["f1_normal"], 2) == 95.77

    def test_all_correct(self):
        got = confusion([0.0, 1.0], [0, 1], threshold=0.5)
        assert got["accuracy"] == 1.0
        assert got["f1_normal"] == 1.0

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            confusion([], [], 0.5)

    def test_nonfinite_threshold_rejected(self):
        with pytest.raises(DataError):
            confusion([1.0], [1], np.inf)
