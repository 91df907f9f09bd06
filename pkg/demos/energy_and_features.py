"""
Energy as a dot product
=======================

The energy of an image under a field-of-patterns model is linear in its
parameters: a weighted count of pattern classes and observed gray
levels at every scale.
"""
import numpy as np

from fop.model import FoPModel, delta_energy, energy_data, energy_fop, energy_total, features
from fop.pipeline import CONTOUR_PRESET, synth_observe, synth_shapes

rng = np.random.default_rng(0)
x = synth_shapes("contours", 1, 24, seed=1)[0]
y = synth_observe(x, **CONTOUR_PRESET, seed=2)

model = FoPModel(rng.normal(size=(3, 102)), rng.normal(size=(3, 256)) * 0.1)
phi = features(model, x, y)
print("feature vector length:", phi.size, "(3 scales x (102 + 256))")
print("energy_total:", energy_total(model, x, y))
print("w . phi:     ", model.vector() @ phi)
print("pattern part:", energy_fop(model, x), " data part:", energy_data(model, x, y))

# flipping one pixel touches a handful of windows per scale
i, j = np.argwhere(x)[0]
x2 = x.copy()
x2[i, j] ^= 1
print("delta of one flip:", delta_energy(model, x, y, [(i, j)]))
print("recomputed:       ", energy_total(model, x2, y) - energy_total(model, x, y))

# a zero model assigns zero energy to everything
print("zero model:", energy_total(FoPModel.zeros(3, 256), x, y))
