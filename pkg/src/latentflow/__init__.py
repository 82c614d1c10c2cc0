"""Flow-matching generation maths at desk scale.

Submodules: ``numerics`` (float64 arrays, seeded streams), ``flow`` (training
targets), ``sampler`` (schedules, ODE solvers, guidance), ``tae`` (autoencoder
frame arithmetic, outlier loss, tiling), ``extension`` (segment-based long
generation), ``tokens`` (patchify, positional embeddings), ``model`` (toy MLP
velocity field) and ``evalstats`` (pairwise evaluation statistics).
"""

__version__ = "0.1.0"
