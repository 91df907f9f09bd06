"""
Training
========

Exact maximum likelihood on images small enough to enumerate, then
persistent-chain stochastic training on synthetic contours.
"""
import numpy as np

from fop.learner import TrainConfig, exact_gradient, train, train_exact
from fop.model import FoPModel
from fop.pipeline import CONTOUR_PRESET, synth_dataset

rng = np.random.default_rng(0)
tiny = synth_dataset("contours", 2, 4, mu0=6, mu1=2, sigma=1.5, M=8, seed=5)
model, trace = train_exact(tiny.pairs(), lam=0.1, M=8, tol=1e-6)
print(f"exact: {trace[-1][0]} iterations, objective {trace[-1][1]:.6f}, grad norm {trace[-1][2]:.1e}")
print("gradient at the optimum:", np.linalg.norm(exact_gradient(model, tiny.pairs(), 0.1)))

ds = synth_dataset("contours", 10, 32, **CONTOUR_PRESET, seed=1)
cfg = TrainConfig(lam=1e-3, eta=0.05, steps=60, precondition=True, polyak=True, seed=0)
m1 = train(ds.pairs(), cfg, K=1)
print("data cost for dark pixels (y=80):  ", m1.D[0, 80].round(3))
print("data cost for bright pixels (y=200):", m1.D[0, 200].round(3))

# second stage: the 1-level model proposes, coarse scales start at zero
m3 = train(ds.pairs(), TrainConfig(lam=1e-3, eta=0.01, steps=30, precondition=True, seed=1), K=3, q=m1, init=m1)
print("coarse pattern costs moved by", np.abs(m3.V[1:]).mean().round(4), "on average")
