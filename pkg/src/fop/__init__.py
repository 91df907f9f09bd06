"""Multiscale field-of-patterns models over binary images.

Energies sum per-scale costs of 3x3 binary patterns across an OR-coarsened
pyramid, plus per-scale data costs of averaged gray observations. The
package provides energy evaluation, exact and Metropolis-Hastings band
samplers, persistent-chain maximum-likelihood training, posterior
inference and precision-recall evaluation, with an exhaustive oracle for
small grids.
"""
__version__ = "0.1.0"

from .imagecore import (
    CLASS_OF,
    N_CLASSES,
    N_PATTERNS,
    GrayImage,
    Pyramid,
    build_pyramid,
    canonicalize,
    coarsen_avg,
    coarsen_or,
    pattern_at,
    pattern_codes,
)
from .learner import (
    TrainConfig,
    TrainingDiverged,
    exact_gradient,
    exact_objective,
    train,
    train_exact,
)
from .model import (
    FoPModel,
    ModelFormatError,
    delta_energy,
    energy_data,
    energy_fop,
    energy_total,
    features,
    model_load,
    model_save,
)
from .netpbm import NetpbmError, read_netpbm, write_pbm, write_pgm
from .pipeline import (
    CONTOUR_PRESET,
    LEAF_PRESET,
    Dataset,
    PosteriorMap,
    PRCurve,
    infer_marginals,
    load_manifest,
    oracle_enumerate,
    pr_curve,
    synth_dataset,
    synth_observe,
    synth_shapes,
)
from .sampler import (
    Band,
    BandSampler,
    ChainState,
    Schedule,
    band_forward,
    band_sample,
    gibbs_block,
    mh_band_step,
    sample_prior,
    sweep,
)
