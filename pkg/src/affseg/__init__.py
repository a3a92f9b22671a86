"""Affinity-based grouping of pre-computed segmentation patches.

The pipeline labels class-agnostic mask patches with semantic classes and
merges them into instance / panoptic predictions, trained end to end on a
synthetic scene corpus with deterministic stand-ins for the upstream mask
proposer and the text-image embedding model.
"""

import os

# Single-threaded BLAS keeps results bit-identical regardless of --threads.
# Must happen before numpy is first imported anywhere in the process; this is
# best effort when the interpreter already pulled numpy in.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
