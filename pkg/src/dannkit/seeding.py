"""Keyed random streams.

Every stochastic draw in a run is keyed by (seed, stream, *context) rather
than taken from one sequential generator.  Streams therefore never interact:
whether the critic sampled batches this step cannot change which dropout
mask the next joint step sees.  That property is what makes a lambda=0
adversarial run reproduce a non-adversarial run exactly.
"""

import numpy as np

SPLIT = 1       # train/test sampling
INIT = 2        # weight initialization
SHUFFLE = 3     # epoch shuffling of labeled batches
DROPOUT = 4     # dropout masks, keyed further by (step, role)
CRITIC = 5      # critic batch sampling, keyed further by (step, k)
SYNTH = 6       # synthetic corpus generation
REPORT = 7      # diagnostics sampling


def rng_for(seed, *key):
    """Deterministic generator for (seed, *key). Seed must be >= 0."""
    if seed < 0:
        raise ValueError(f"seed must be >= 0, got {seed}")
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))
