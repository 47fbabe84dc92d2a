"""Contrastive reinforcement learning from verifiable rewards at desk scale.

Modules: ``objectives`` (group losses), ``kl_controller``, ``policy`` (small
autoregressive models with exact gradients), ``tasks`` (synthetic arithmetic
and the boxed-answer verifier), ``data_engine`` (rollout filtering and prompt
pruning), ``trainer`` and ``cli``.
"""

__version__ = "0.1.0"
