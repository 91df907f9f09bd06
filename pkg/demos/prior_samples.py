"""
Samples from a learned prior
============================

A prior over masks alone is trained by pairing every mask with a constant
observation. The data cost then only adds a per-on-pixel bias at each
scale, which is folded into the pattern costs of the classes whose centre
pixel is on before sampling.
"""
import numpy as np

from fop.imagecore import CLASS_OF, GrayImage
from fop.learner import TrainConfig, train
from fop.sampler import sample_prior
from fop.pipeline import synth_shapes

masks = synth_shapes("contours", 20, 48, seed=1)
blank = GrayImage(np.zeros((48, 48), np.int64), 2)
pairs = [(x, blank) for x in masks]

centre_on = np.unique(CLASS_OF[np.arange(512)[np.arange(512) & 16 > 0]])


def as_prior(model):
    out = model.copy()
    out.V[:, centre_on] += out.D[:, [0]]
    out.D[:] = 0.0
    return out


m1 = train(pairs, TrainConfig(eta=0.05, steps=150, precondition=True, polyak=True), K=1)
m3 = train(pairs, TrainConfig(eta=0.01, steps=80, precondition=True, polyak=True, seed=1), K=3, q=m1, init=m1)
p1, p3 = as_prior(m1), as_prior(m3)

for name, model, q in (("1-level", p1, None), ("3-level", p3, p1)):
    x = sample_prior(model, (32, 64), sweeps=100, seed=0, q=q)
    print(f"{name} prior sample, density {x.mean():.3f}")
    print("\n".join("".join("#" if v else "." for v in row) for row in x))
    print()
print(f"training masks have density {np.mean([x.mean() for x in masks]):.3f}")
