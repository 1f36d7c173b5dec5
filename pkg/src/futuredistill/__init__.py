"""Self-supervised future-context distillation on a synthetic driving world.

A student network sees only past frames; an EMA teacher sees past and future
frames downsampled to the same length. Distilling the teacher's embedding into
the student improves downstream per-frame action prediction.
"""

__version__ = "0.1.0"
