"""Sequence risk modeling over longitudinal clinical event histories.

A small, deterministic stack: a dense-tensor autodiff engine, a
transformer encoder over summed token/age/year/position embeddings,
masked-encounter pretraining and binary fine-tuning, perturbation-based
per-encounter contributions with relative-contribution statistics, and a
synthetic cohort generator with planted ground-truth effects to verify
the whole pipeline end to end.
"""

__version__ = "0.1.0"
