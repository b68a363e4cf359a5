"""
Pseudo ground truth from four classical extractors
==================================================

Render one synthetic finger, run the Gabor, maximum-curvature,
enhanced-curvature and adaptive-threshold extractors, then fuse them by
majority vote and compare against the rendered vein strokes.
"""

import tempfile

import numpy as np

from veindiff.classical_veins import fuse_masks, majority_vote
from veindiff.metrics import cl_dice, dice_suite
from veindiff.synthdata import generate_dataset, load_png

root = tempfile.mkdtemp()
manifest = generate_dataset(root, num_classes=2, samples_per_session=1, seed=4)
entry = manifest.entries[0]
image = load_png(manifest.image_path(entry))
rendered = load_png(manifest.mask_path(entry), binary=True)
print("image", image.shape, image.dtype, "vein pixels in rendered mask:", int(rendered.sum()))

fused, voters = fuse_masks(image, return_voters=True)
for name, mask in voters.items():
    dice = dice_suite(mask.astype(float), rendered)[0]
    print(f"{name:>8s}: {mask.mean():6.1%} foreground, Dice vs rendered {dice:.3f}")

# 3 of 4 votes is the default; fewer votes trade precision for recall
for k in (1, 2, 3, 4):
    m = majority_vote(list(voters.values()), k)
    print(f"vote >= {k}: Dice {dice_suite(m.astype(float), rendered)[0]:.3f}, clDice {cl_dice(m, rendered):.3f}")

assert np.array_equal(fused, majority_vote(list(voters.values()), 3))
