"""
Pyramids and 3x3 patterns
=========================

A contour map is OR-coarsened into a pyramid; each level is described by
the 3x3 binary window around every pixel, tied across rotations and
mirrors into 102 classes.
"""
import numpy as np

from fop.imagecore import CLASS_OF, build_pyramid, canonicalize, class_sizes, pattern_codes
from fop.pipeline import synth_shapes


def show(x):
    print("\n".join("".join("#" if v else "." for v in row) for row in x))
    print()


x = synth_shapes("contours", 1, 32, seed=3)[0]
pyr = build_pyramid(x, 4)
for k, level in enumerate(pyr.levels):
    print(f"level {k}: {level.shape}, {int(level.sum())} on-pixels")
    show(level)

# pattern code of a window: bit 3*(dr+1)+(dc+1) holds pixel (i+dr, j+dc)
codes = pattern_codes(pyr[1])
counts = np.bincount(CLASS_OF[codes].ravel(), minlength=102)
print("most frequent classes at level 1:", np.argsort(-counts)[:5])
print("an isolated on-pixel is code", 1 << 4, "-> class", canonicalize(16))

# orbit sizes under the 8 dihedral transforms sum to the 512 patterns
sizes = class_sizes()
print("classes:", len(sizes), "patterns covered:", sizes.sum())
