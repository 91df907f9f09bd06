"""
Band sampling
=============

Rows of a band form a chain of column states, so a single-scale model
can be sampled exactly inside the band. Multiscale targets use that exact
sampler as a Metropolis-Hastings proposal.
"""
import numpy as np

from fop.imagecore import GrayImage
from fop.model import FoPModel
from fop.pipeline import oracle_enumerate
from fop.sampler import Band, BandSampler, ChainState, Schedule, apply_band, band_forward, band_sample

rng = np.random.default_rng(4)
q = FoPModel(rng.normal(size=(1, 102)), rng.normal(size=(1, 8)))
y = GrayImage(rng.integers(0, 8, size=(3, 4)), 8)

# forward pass over a band that covers the whole 3x4 image
ft = band_forward(q, y, np.zeros((3, 4), np.uint8), Band("h", 0, 3))
oracle = oracle_enumerate(q, y)
print("log Z forward:", ft.log_normalizer)
print("log Z brute:  ", oracle.log_z)

gen = np.random.default_rng(0)
draws = np.array([apply_band(np.zeros((3, 4), np.uint8), ft.band, band_sample(ft, gen)) for _ in range(20000)])
print("sampled marginals:\n", draws.mean(axis=0).round(3))
print("exact marginals:\n", oracle.marginals.round(3))

# two-scale target, single-scale proposal
p = q.extended(2)
p.V[1] = rng.normal(size=102)
y2 = GrayImage(rng.integers(0, 8, size=(4, 4)), 8)
sampler = BandSampler(p, q, y2, (4, 4), 2, Schedule(h=2))
chain = ChainState(np.zeros((4, 4), np.uint8), 2, seed=1)
acc = np.zeros(16)
total = accepted = 0
for _ in range(3000):
    for band in sampler.bands:
        a, n, _ = sampler.mh_band_step(chain, band, accum=acc)
        accepted += a
        total += n
print("acceptance rate:", round(accepted / total, 3))
print("max marginal error vs exact:", np.abs(acc.reshape(4, 4) / total - oracle_enumerate(p, y2).marginals).max())
