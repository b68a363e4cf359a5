"""
Verification scores, DET sweep and EER
======================================

Gallery embeddings are averaged per class; each probe is scored by cosine
similarity against every class center.
"""

import numpy as np

from veindiff.metrics import cl_dice, det_curve, eer, identification_acc, verification_scores

rng = np.random.default_rng(0)
classes, dim = 5, 16
centers = rng.normal(size=(classes, dim))
gallery_labels = np.repeat(np.arange(classes), 6)
probe_labels = np.repeat(np.arange(classes), 6)
gallery = centers[gallery_labels] + 0.8 * rng.normal(size=(30, dim))
probes = centers[probe_labels] + 0.8 * rng.normal(size=(30, dim))

genuine, impostor = verification_scores(gallery, gallery_labels, probes, probe_labels)
print(len(genuine), "genuine and", len(impostor), "impostor scores")

points = det_curve(genuine, impostor)
for p in points[:: max(len(points) // 8, 1)]:
    print(f"threshold {p.threshold:+.3f}  FAR {p.far:.3f}  FRR {p.frr:.3f}")
print("EER", round(eer(points), 4))

# nearest class center doubles as an identification rule
sims = probes @ np.stack([gallery[gallery_labels == c].mean(0) for c in range(classes)]).T
print("identification accuracy", identification_acc(sims.argmax(1), probe_labels))

# clDice rewards getting the centerline right more than the vessel width
gt = np.zeros((9, 20), dtype=np.uint8)
gt[3:6, 2:18] = 1
thin = np.zeros_like(gt)
thin[4, 2:18] = 1
print("clDice of a one-pixel centerline against the thick bar:", round(cl_dice(thin, gt), 3))
