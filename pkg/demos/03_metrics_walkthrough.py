#!/usr/bin/env python3
"""What the two evaluation metrics measure, on data small enough to check by
hand: AUROC as a pairwise ranking probability, AUPRO as per-region recall
integrated against false-positive rate, and the confusion-matrix arithmetic.
"""

import numpy as np

from patchnf.metrics import aupro, auroc, confusion, pro_curve, roc_curve

print("=" * 72)
print("AUROC is the probability an anomalous score beats a normal one")
print("=" * 72)
scores = [0.1, 0.4, 0.35, 0.8]
labels = [0, 0, 1, 1]
print(f"scores {scores}, labels {labels}")
print("pairs: 0.35>0.1 yes, 0.35>0.4 no, 0.8>0.1 yes, 0.8>0.4 yes -> 3/4")
print(f"auroc = {auroc(scores, labels)}")

curve = roc_curve(scores, labels)
print(f"ROC points: fpr {curve.fpr.round(2).tolist()} tpr {curve.tpr.round(2).tolist()}")

print()
print("=" * 72)
print("AUPRO rewards covering every defect region, not just total pixels")
print("=" * 72)
# one big and one small region; a detector that only finds the big one
mask = np.zeros((16, 16))
mask[2:8, 2:8] = 1      # 36-pixel region
mask[12:14, 12:14] = 1  # 4-pixel region
only_big = mask.copy()
only_big[12:14, 12:14] = 0
noise = np.random.default_rng(0).uniform(0, 0.1, size=(16, 16))
print(f"detector that covers both regions:  aupro = {aupro([mask + noise], [mask]):.3f}")
print(f"detector that misses the small one: aupro = {aupro([only_big + noise], [mask]):.3f}")
print("(pixel-weighted metrics would barely notice the 4-pixel region)")

curve = pro_curve([only_big + noise], [mask])
print(f"PRO curve plateaus at {curve.pro.max():.2f}: the small region never fires")

print()
print("=" * 72)
print("Confusion-matrix arithmetic, normal as the positive class")
print("=" * 72)
# 70 inspected parts: 37 score below threshold (34 truly normal, 3 bad),
# 33 score above it (all truly bad)
scores = [0.0] * 37 + [1.0] * 33
labels = [0] * 34 + [1] * 3 + [1] * 33
c = confusion(scores, labels, threshold=0.5)
print(f"tp={c['tp']} fp={c['fp']} fn={c['fn']} tn={c['tn']}")
print(f"accuracy  = {100 * c['accuracy']:.2f}%")
print(f"F1(normal) = {100 * c['f1_normal']:.2f}%")
