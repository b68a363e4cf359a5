"""
End to end on a two-class toy set
=================================

Synthesize, fuse masks, pretrain, train jointly and evaluate. A few epochs
on one CPU core take a couple of minutes; the numbers are only a smoke test.
"""

import logging
import tempfile

from veindiff import TrainConfig, evaluate, joint_train, pretrain_segmentation
from veindiff.classical_veins import write_fused_masks
from veindiff.synthdata import generate_dataset

logging.basicConfig(level=logging.INFO, format="%(message)s")

root = tempfile.mkdtemp()
write_fused_masks(generate_dataset(root, num_classes=2, samples_per_session=2, seed=1))

config = TrainConfig(root=root, num_classes=2, samples_per_session=2, pretrain_epochs=3, epochs=5, T=20)
print(config.to_text())

pre = pretrain_segmentation(config)
print("pretrain losses:", [round(h["total"], 2) for h in pre.history])

joint = joint_train(config, pre)
print("joint losses:", [round(h["total"], 2) for h in joint.history[config.pretrain_epochs:]])

report = evaluate(config, joint, f"{root}/report.txt")
print(report.to_text())
