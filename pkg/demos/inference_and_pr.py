"""
Posterior maps and precision-recall
===================================

Posterior marginals from a trained model are compared with thresholding
the raw gray values.
"""
from fop.learner import TrainConfig, train
from fop.pipeline import CONTOUR_PRESET, infer_many, pr_curve, raw_scores, synth_dataset

train_set = synth_dataset("contours", 10, 48, **CONTOUR_PRESET, seed=1)
test_set = synth_dataset("contours", 4, 48, **CONTOUR_PRESET, seed=2)

model = train(train_set.pairs(), TrainConfig(eta=0.05, steps=80, precondition=True, polyak=True))
maps = infer_many(model, test_set.observations, seed=0, burn_in=20, sweeps=100)
print("acceptance:", [round(m.accept_rate, 2) for m in maps])

fop_curve = pr_curve(maps, test_set.masks)
raw_curve = pr_curve([raw_scores(y) for y in test_set.observations], test_set.masks)
print("AP posterior:", round(fop_curve.ap, 3))
print("AP raw:      ", round(raw_curve.ap, 3))
for t in (0.3, 0.5, 0.7):
    i = int(round(t * 100))
    print(f"t={t}: precision {fop_curve.precision[i]:.3f} recall {fop_curve.recall[i]:.3f}")
